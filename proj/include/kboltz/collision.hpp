#pragma once
// Collision frequency, compact part K = K2 - K1, linearized operator
// L = nu - K, the quadratic term Gamma, coercivity estimate and the binary
// cache.

#include "kboltz/velocity_space.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

namespace kboltz {

/// Hard-potential cutoff kernel |u|^gamma |cos theta| with a product sphere rule.
struct KernelParams {
    double gamma = 1.0;
    int n_polar = 8;    ///< Gauss-Legendre nodes in cos(theta) over [-1, 1], split at 0
    int n_azimuth = 8;  ///< uniform azimuthal nodes

    int n_omega() const { return n_polar * n_azimuth; }
    void validate() const {
        require(gamma >= 0.0 && gamma <= 1.0, "kernel: gamma must lie in [0, 1]");
        require(n_polar >= 2 && n_polar % 2 == 0, "kernel: n_polar must be even and >= 2");
        require(n_azimuth >= 3, "kernel: n_azimuth must be >= 3");
        require(n_omega() >= 6, "kernel: sphere rule needs >= 6 nodes");
    }
};

/// Upper-hemisphere nodes (cos theta > 0) relative to the relative velocity;
/// omega and -omega give the same post-collision pair, so weights are doubled.
struct SphereRule {
    Vec cos_theta, sin_theta, cos_phi, sin_phi, weight;
    Eigen::Index size() const { return weight.size(); }
};

inline SphereRule sphere_rule(const KernelParams& p) {
    p.validate();
    Vec x, w;
    gauss_legendre(p.n_polar / 2, 0.0, 1.0, x, w);
    const int m = int(x.size()) * p.n_azimuth;
    SphereRule r;
    r.cos_theta.resize(m), r.sin_theta.resize(m), r.cos_phi.resize(m), r.sin_phi.resize(m);
    r.weight.resize(m);
    int id = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        for (int a = 0; a < p.n_azimuth; ++a, ++id) {
            const double phi = 2.0 * pi * a / p.n_azimuth;
            r.cos_theta[id] = x[i];
            r.sin_theta[id] = std::sqrt(std::max(0.0, 1.0 - x[i] * x[i]));
            r.cos_phi[id] = std::cos(phi);
            r.sin_phi[id] = std::sin(phi);
            r.weight[id] = 2.0 * w[i] * (2.0 * pi / p.n_azimuth);
        }
    return r;
}

/// Trilinear stencil with zero extension outside the lattice.
struct Stencil {
    int idx[8];
    double w[8];
    int n = 0;
};

inline void trilinear(const VelocityGrid& g, const Eigen::Vector3d& p, Stencil& s) {
    s.n = 0;
    int base[3];
    double t[3];
    for (int d = 0; d < 3; ++d) {
        const double c = (p[d] + g.V) / g.h - 0.5;
        const double f = std::floor(c);
        base[d] = int(f);
        t[d] = c - f;
        if (base[d] < -1 || base[d] > g.nv - 1) return;
    }
    for (int corner = 0; corner < 8; ++corner) {
        int c[3];
        double wt = 1.0;
        bool inside = true;
        for (int d = 0; d < 3; ++d) {
            const int hi = (corner >> d) & 1;
            c[d] = base[d] + hi;
            wt *= hi ? t[d] : 1.0 - t[d];
            inside = inside && c[d] >= 0 && c[d] < g.nv;
        }
        if (!inside || wt == 0.0) continue;
        s.idx[s.n] = g.index(c[0], c[1], c[2]);
        s.w[s.n] = wt;
        ++s.n;
    }
}

/// Orthonormal frame (u_hat, e1, e2); any frame when u = 0.
inline void collision_frame(const Eigen::Vector3d& u, Eigen::Vector3d& uh, Eigen::Vector3d& e1,
                            Eigen::Vector3d& e2) {
    const double r = u.norm();
    uh = r > 0 ? Eigen::Vector3d(u / r) : Eigen::Vector3d::UnitZ();
    Eigen::Index k;
    uh.cwiseAbs().minCoeff(&k);
    e1 = uh.cross(Eigen::Vector3d::Unit(k)).normalized();
    e2 = uh.cross(e1);
}

inline double radial_kernel(double r, double gamma) {
    if (gamma == 0.0) return 1.0;
    return std::pow(r, gamma);
}

/// nu at an arbitrary velocity. The omega integral is 2 pi and the xi_*
/// integral reduces to a 1D integral of r^gamma against the density of
/// |v - Z|, Z standard normal, evaluated with Gauss-Legendre.
inline double collision_frequency_at(const KernelParams& p, const Eigen::Vector3d& v) {
    const double s = v.norm();
    static const auto unit = [] {
        std::pair<Vec, Vec> xw;
        gauss_legendre(400, 0.0, 1.0, xw.first, xw.second);
        return xw;
    }();
    const double hi = s + 14.0;
    const double c = 1.0 / std::sqrt(2.0 * pi);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < unit.first.size(); ++i) {
        const double r = hi * unit.first[i];
        double dens;
        if (s < 1e-8)
            dens = 2.0 * c * r * r * std::exp(-0.5 * r * r);
        else
            dens = (r / s) * c * (std::exp(-0.5 * (r - s) * (r - s)) - std::exp(-0.5 * (r + s) * (r + s)));
        acc += unit.second[i] * radial_kernel(r, p.gamma) * dens;
    }
    return 2.0 * pi * hi * acc;
}

inline Vec collision_frequency(const VelocityGrid& g, const KernelParams& p) {
    p.validate();
    Vec nu(g.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) nu[j] = collision_frequency_at(p, g.xi.row(j).transpose());
    return nu;
}

/// Lattice-sum counterpart of nu, consistent with the K1 quadrature.
inline Vec collision_frequency_lattice(const VelocityGrid& g, const KernelParams& p) {
    Vec nu(g.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        double acc = 0.0;
        for (Eigen::Index n = 0; n < g.size(); ++n) {
            const double r = (g.xi.row(j) - g.xi.row(n)).norm();
            if (r == 0.0 && p.gamma > 0.0) continue;
            acc += radial_kernel(r, p.gamma) * g.mu[n];
        }
        nu[j] = 2.0 * pi * g.weight * acc;
    }
    return nu;
}

/// The 48 signed axis permutations acting on lattice node indices.
inline std::vector<std::vector<int>> cubic_group_maps(const VelocityGrid& g) {
    std::vector<std::vector<int>> maps;
    std::array<int, 3> perm{0, 1, 2};
    do {
        for (int flips = 0; flips < 8; ++flips) {
            std::vector<int> m(g.size());
            for (Eigen::Index n = 0; n < g.size(); ++n) {
                const auto c = g.coords(int(n));
                int d[3];
                for (int a = 0; a < 3; ++a) {
                    d[a] = c[perm[a]];
                    if ((flips >> a) & 1) d[a] = g.nv - 1 - d[a];
                }
                m[n] = g.index(d[0], d[1], d[2]);
            }
            maps.push_back(std::move(m));
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return maps;
}

/// Raw K2 - K1 rows by quadrature; row-partitioned, no shared writes.
inline RowMat assemble_K_raw(const VelocityGrid& g, const KernelParams& p, const SphereRule& rule) {
    const Eigen::Index N = g.size();
    RowMat K = RowMat::Zero(N, N);
    parallel_for(N, [&](Eigen::Index jb, Eigen::Index je) {
        Stencil sa, sb;
        Eigen::Vector3d uh, e1, e2;
        for (Eigen::Index j = jb; j < je; ++j) {
            double* row = K.row(j).data();
            const Eigen::Vector3d xj = g.xi.row(j).transpose();
            for (Eigen::Index s = 0; s < N; ++s) {
                const Eigen::Vector3d xs = g.xi.row(s).transpose();
                const Eigen::Vector3d u = xj - xs;
                const double r = u.norm();
                if (r == 0.0 && p.gamma > 0.0) continue;
                const double kr = radial_kernel(r, p.gamma);
                const double base = g.weight * kr * g.sqrt_mu[s];
                row[s] -= 2.0 * pi * base * g.sqrt_mu[j];  // K1, omega-integrated
                collision_frame(u, uh, e1, e2);
                for (Eigen::Index m = 0; m < rule.size(); ++m) {
                    const double c = rule.cos_theta[m];
                    const Eigen::Vector3d om =
                        c * uh + rule.sin_theta[m] * (rule.cos_phi[m] * e1 + rule.sin_phi[m] * e2);
                    const Eigen::Vector3d dv = (r * c) * om;
                    const Eigen::Vector3d xp = xj - dv;   // xi'
                    const Eigen::Vector3d xsp = xs + dv;  // xi_*'
                    const double wq = base * rule.weight[m] * c;
                    const double a = wq * std::sqrt(maxwellian_at(xsp));
                    const double b = wq * std::sqrt(maxwellian_at(xp));
                    trilinear(g, xp, sa);
                    for (int q = 0; q < sa.n; ++q) row[sa.idx[q]] += a * sa.w[q];
                    trilinear(g, xsp, sb);
                    for (int q = 0; q < sb.n; ++q) row[sb.idx[q]] += b * sb.w[q];
                }
            }
        }
    });
    return K;
}

struct CollisionAssembly {
    VelocityGrid grid;
    KernelParams params;
    Vec nu;
    Mat K;                    ///< symmetric, cubic-averaged quadrature of K2 - K1
    double sym_residual = 0;  ///< ||K - K^T|| / ||K|| before symmetrization
    double tol_L = 0;         ///< max_i ||L e_i|| / ||e_i|| over the five invariants, before deflation
    double nu_c1 = 0, nu_c2 = 0;  ///< c1 (1+|xi|)^gamma <= nu <= c2 (1+|xi|)^gamma
    bool deflate = true;          ///< remove the quadrature defect on the invariants
    double lambda0 = 0;
    Vec lambda0_vector;
    std::uint64_t hash = 0;
    Projector P;
    Mat Q;        ///< orthonormal invariants
    Mat LQ;       ///< undeflated L applied to Q
    Mat QtLQ;     ///< w Q^T L Q

    Eigen::Index size() const { return nu.size(); }

    /// L applied column-wise to real or complex data.
    template <class Derived>
    auto apply_L(const Eigen::MatrixBase<Derived>& f) const {
        using S = typename Derived::Scalar;
        using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
        M out = nu.cast<S>().asDiagonal() * f;
        out.noalias() -= K.cast<S>() * f;
        if (deflate) {
            const double w = grid.weight;
            M c = (w * Q.transpose()).cast<S>() * f;
            M d = (w * LQ.transpose()).cast<S>() * f;
            out.noalias() -= Q.cast<S>() * d;
            out.noalias() -= LQ.cast<S>() * c;
            out.noalias() += (Q * QtLQ).cast<S>() * c;
        }
        return out;
    }
    Vec apply_L(const Vec& f) const { return apply_L(f.matrix()).col(0); }

    Vec apply_K(const Vec& f) const { return nu.cwiseProduct(f) - apply_L(f); }

    Mat L_matrix() const {
        Mat L = -K;
        L.diagonal() += nu;
        if (deflate) {
            const double w = grid.weight;
            L.noalias() -= Q * (w * LQ.transpose());
            L.noalias() -= LQ * (w * Q.transpose());
            L.noalias() += (Q * QtLQ) * (w * Q.transpose());
        }
        return L;
    }
};

inline std::uint64_t params_hash(const VelocityGrid& g, const KernelParams& p) {
    Fnv1a h;
    h.add(g.V).add(g.nv).add(p.gamma).add(p.n_polar).add(p.n_azimuth);
    h.add(std::string_view("abs-cos|gl-split|uniform-az|trilinear-zero|cubic-avg|radial-nu"));
    return h.value();
}

/// Smallest Ritz value of the nu-weighted L on the microscopic subspace by
/// Lanczos with full reorthogonalization.
inline double estimate_lambda0(const CollisionAssembly& A, Vec* vector = nullptr, int max_iter = 400) {
    const Eigen::Index N = A.size();
    const Vec isq = A.nu.cwiseSqrt().cwiseInverse();
    Eigen::HouseholderQR<Mat> qr(isq.asDiagonal() * A.Q);
    const Mat Z = qr.householderQ() * Mat::Identity(N, 5);
    auto deflate = [&](Vec& v) {
        for (int pass = 0; pass < 2; ++pass) v -= Z * (Z.transpose() * v);
    };
    auto op = [&](const Vec& h) {
        Vec g = isq.cwiseProduct(h);
        Vec r = isq.cwiseProduct(A.apply_L(g));
        deflate(r);
        return r;
    };
    const int m = int(std::min<Eigen::Index>(max_iter, N - 5));
    Mat V(N, m + 1);
    Vec alpha(m), beta(m);
    Rng rng(12345);
    Vec v = random_vector(rng, N);
    deflate(v);
    V.col(0) = v.normalized();
    int k = 0;
    double theta = 0;
    Vec ritz;
    for (; k < m; ++k) {
        Vec w = op(V.col(k));
        alpha[k] = V.col(k).dot(w);
        for (int pass = 0; pass < 2; ++pass) w -= V.leftCols(k + 1) * (V.leftCols(k + 1).transpose() * w);
        deflate(w);
        beta[k] = w.norm();
        const int n = k + 1;
        if (n >= 10 && (n % 10 == 0 || beta[k] < 1e-12)) {
            Mat T = Mat::Zero(n, n);
            for (int i = 0; i < n; ++i) {
                T(i, i) = alpha[i];
                if (i + 1 < n) T(i, i + 1) = T(i + 1, i) = beta[i];
            }
            Eigen::SelfAdjointEigenSolver<Mat> es(T);
            theta = es.eigenvalues()[0];
            ritz = es.eigenvectors().col(0);
            if (beta[k] * std::abs(ritz[n - 1]) < 1e-10 || beta[k] < 1e-12) {
                k = n;
                break;
            }
        }
        if (beta[k] < 1e-14) {
            k += 1;
            break;
        }
        V.col(k + 1) = w / beta[k];
    }
    if (vector) {
        Vec h = V.leftCols(ritz.size()) * ritz;
        *vector = isq.cwiseProduct(h);
    }
    return theta;
}

/// Fills the derived fields (projector pieces, residuals, lambda0) from nu and K.
inline void finalize_assembly(CollisionAssembly& A) {
    const auto& g = A.grid;
    A.P = Projector(g, ProjectorMode::orthonormal);
    A.Q = invariant_basis(g).ortho;
    Mat Lraw = -A.K;
    Lraw.diagonal() += A.nu;
    A.LQ = Lraw * A.Q;
    A.QtLQ = g.weight * A.Q.transpose() * A.LQ;
    const auto basis = invariant_basis(g);
    A.tol_L = 0;
    for (int i = 0; i < 5; ++i) {
        const Vec e = basis.raw.col(i);
        A.tol_L = std::max(A.tol_L, (Lraw * e).norm() / e.norm());
    }
    A.nu_c1 = 1e300, A.nu_c2 = 0;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        const double ref = std::pow(1.0 + std::sqrt(g.speed2[j]), A.params.gamma);
        A.nu_c1 = std::min(A.nu_c1, A.nu[j] / ref);
        A.nu_c2 = std::max(A.nu_c2, A.nu[j] / ref);
    }
    A.hash = params_hash(g, A.params);
    A.lambda0 = estimate_lambda0(A, &A.lambda0_vector);
    if (!(A.lambda0 > 0))
        throw NumericalError("estimate_lambda0: non-positive coercivity constant " +
                             std::to_string(A.lambda0) + " signals an assembly defect");
}

struct AssemblyOptions {
    bool deflate = true;
    double memory_budget_bytes = 2.0e9;
};

inline CollisionAssembly assemble(const VelocityGrid& g, const KernelParams& p, AssemblyOptions opt = {}) {
    p.validate();
    require(g.nv <= 18, "assemble: dense K limited to N_v <= 18 per axis");
    const double bytes = 3.0 * 8.0 * double(g.size()) * double(g.size());
    require(bytes <= opt.memory_budget_bytes, "assemble: dense K exceeds the memory budget");
    CollisionAssembly A;
    A.grid = g;
    A.params = p;
    A.deflate = opt.deflate;
    const auto rule = sphere_rule(p);
    Vec nu = collision_frequency(g, p);
    RowMat Kr = assemble_K_raw(g, p, rule);
    const Eigen::Index N = g.size();
    // The collision with xi_* = xi is trivial, so the lattice-sum defect of nu
    // enters nu and K equally and L = nu - K keeps the lattice-consistent form.
    Kr.diagonal() += nu - collision_frequency_lattice(g, p);
    {
        double asym = 0, tot = 0;
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < N; ++j) {
                const double d = Kr(i, j) - Kr(j, i);
                asym += d * d;
                tot += Kr(i, j) * Kr(i, j);
            }
        A.sym_residual = std::sqrt(asym / tot);
    }
    const auto maps = cubic_group_maps(g);
    A.K = Mat::Zero(N, N);
    A.nu = Vec::Zero(N);
    for (const auto& m : maps) {
        for (Eigen::Index c = 0; c < N; ++c) {
            double* col = A.K.col(c).data();
            const int mc = m[c];
            for (Eigen::Index r = 0; r < N; ++r) col[r] += Kr(m[r], mc);
        }
        for (Eigen::Index j = 0; j < N; ++j) A.nu[j] += nu[m[j]];
    }
    A.K /= double(maps.size());
    A.nu /= double(maps.size());
    Kr.resize(0, 0);
    A.K = 0.5 * (A.K + A.K.transpose()).eval();
    finalize_assembly(A);
    return A;
}

/// Dense oracle for lambda0: generalized eigenproblem on an explicit microscopic basis.
inline double lambda0_dense(const CollisionAssembly& A) {
    const Eigen::Index N = A.size();
    Eigen::HouseholderQR<Mat> qr(A.Q);
    const Mat full = qr.householderQ();
    const Mat B = full.rightCols(N - 5);
    const Mat L = A.L_matrix();
    const Mat lhs = B.transpose() * L * B;
    const Mat rhs = B.transpose() * A.nu.asDiagonal() * B;
    Eigen::GeneralizedSelfAdjointEigenSolver<Mat> es(lhs, rhs);
    return es.eigenvalues()[0];
}

/// Quadratic collision term. Loss part is omega-integrated in closed form,
/// gain part is evaluated on the fly with the sphere rule.
class GammaOperator {
public:
    GammaOperator() = default;
    GammaOperator(const VelocityGrid& g, const KernelParams& p)
        : grid_(g), params_(p), rule_(sphere_rule(p)), P_(g, ProjectorMode::orthonormal) {
        const Eigen::Index N = g.size();
        loss_.resize(N, N);
        for (Eigen::Index j = 0; j < N; ++j)
            for (Eigen::Index s = 0; s < N; ++s) {
                const double r = (g.xi.row(j) - g.xi.row(s)).norm();
                const bool skip = r == 0.0 && p.gamma > 0.0;
                loss_(j, s) = skip ? 0.0 : 2.0 * pi * g.weight * radial_kernel(r, p.gamma) * g.sqrt_mu[s];
            }
    }

    const VelocityGrid& grid() const { return grid_; }

    /// Rows are velocity nodes, columns are spatial points.
    RowMat apply(const RowMat& F, const RowMat& G, bool conserve = true) const {
        require(F.rows() == grid_.size() && G.rows() == grid_.size() && F.cols() == G.cols(),
                "gamma: grid mismatch");
        const Eigen::Index N = grid_.size(), M = F.cols();
        RowMat out = RowMat::Zero(N, M);
        const auto& g = grid_;
        // stencils of one output node are built once, then swept over column
        // blocks so the gathered rows stay in cache
        constexpr Eigen::Index block = 128;
        struct Term {
            double w;
            Stencil a, b;
        };
        parallel_for(N, [&](Eigen::Index jb, Eigen::Index je) {
            Stencil sa, sb;
            Eigen::Vector3d uh, e1, e2;
            std::vector<Term> terms;
            std::vector<double> ta(block), tb(block);
            for (Eigen::Index j = jb; j < je; ++j) {
                terms.clear();
                const Eigen::Vector3d xj = g.xi.row(j).transpose();
                for (Eigen::Index s = 0; s < N; ++s) {
                    const Eigen::Vector3d xs = g.xi.row(s).transpose();
                    const Eigen::Vector3d u = xj - xs;
                    const double r = u.norm();
                    if (r == 0.0 && params_.gamma > 0.0) continue;
                    const double base = g.weight * radial_kernel(r, params_.gamma) * g.sqrt_mu[s];
                    collision_frame(u, uh, e1, e2);
                    for (Eigen::Index m = 0; m < rule_.size(); ++m) {
                        const double c = rule_.cos_theta[m];
                        const Eigen::Vector3d om =
                            c * uh + rule_.sin_theta[m] * (rule_.cos_phi[m] * e1 + rule_.sin_phi[m] * e2);
                        const Eigen::Vector3d dv = (r * c) * om;
                        trilinear(g, xs + dv, sa);  // f at xi_*'
                        if (sa.n == 0) continue;
                        trilinear(g, xj - dv, sb);  // g at xi'
                        if (sb.n == 0) continue;
                        terms.push_back({base * rule_.weight[m] * c, sa, sb});
                    }
                }
                for (Eigen::Index x0 = 0; x0 < M; x0 += block) {
                    const Eigen::Index nb = std::min(block, M - x0);
                    double* acc = out.row(j).data() + x0;
                    for (const auto& t : terms) {
                        gather(F, t.a, x0, ta.data(), nb);
                        gather(G, t.b, x0, tb.data(), nb);
                        for (Eigen::Index x = 0; x < nb; ++x) acc[x] += t.w * ta[x] * tb[x];
                    }
                }
            }
        });
        const RowMat lf = loss_ * F;
        out -= G.cwiseProduct(lf);
        if (conserve) {
            const Mat pc = P_.apply(Mat(out));
            out -= pc;
        }
        return out;
    }

    Vec apply(const Vec& f, const Vec& g, bool conserve = true) const {
        RowMat F = f, G = g;
        return apply(F, G, conserve).col(0);
    }

private:
    static void gather(const RowMat& F, const Stencil& s, Eigen::Index x0, double* t, Eigen::Index M) {
        const double* r0 = F.row(s.idx[0]).data() + x0;
        const double w0 = s.w[0];
        for (Eigen::Index x = 0; x < M; ++x) t[x] = w0 * r0[x];
        for (int q = 1; q < s.n; ++q) {
            const double* rq = F.row(s.idx[q]).data() + x0;
            const double wq = s.w[q];
            for (Eigen::Index x = 0; x < M; ++x) t[x] += wq * rq[x];
        }
    }

    VelocityGrid grid_;
    KernelParams params_;
    SphereRule rule_;
    Projector P_;
    Mat loss_;
};

// ---------------------------------------------------------------- cache

enum class CacheErrorKind { io, bad_magic, version, truncated, mismatch, hash };

struct CacheError : std::runtime_error {
    CacheErrorKind kind;
    CacheError(CacheErrorKind k, const std::string& m) : std::runtime_error(m), kind(k) {}
};

inline constexpr std::uint32_t cache_version = 1;
inline constexpr char cache_magic[8] = {'K', 'B', 'O', 'L', 'T', 'Z', '1', '\0'};

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<T>)
        bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
    else
        bits = static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) os.put(char((bits >> (8 * i)) & 0xff));
}
template <class T>
T get_le(std::istream& is) {
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = is.get();
        if (c == EOF) throw CacheError(CacheErrorKind::truncated, "cache: truncated file");
        bits |= std::uint64_t(static_cast<unsigned char>(c)) << (8 * i);
    }
    if constexpr (std::is_floating_point_v<T>)
        return std::bit_cast<double>(bits);
    else
        return static_cast<T>(bits);
}
}  // namespace detail

struct CacheHeader {
    std::uint32_t version = 0;
    double V = 0;
    std::uint32_t nv = 0;
    double gamma = 0;
    std::uint32_t n_omega = 0;
    std::uint64_t hash = 0;
};

inline void cache_write(const CollisionAssembly& A, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw CacheError(CacheErrorKind::io, "cache: cannot open " + tmp);
        os.write(cache_magic, 8);
        detail::put_le<std::uint32_t>(os, cache_version);
        detail::put_le<double>(os, A.grid.V);
        detail::put_le<std::uint32_t>(os, std::uint32_t(A.grid.nv));
        detail::put_le<double>(os, A.params.gamma);
        detail::put_le<std::uint32_t>(os, std::uint32_t(A.params.n_omega()));
        detail::put_le<std::uint64_t>(os, A.hash);
        const Eigen::Index N = A.size();
        for (Eigen::Index j = 0; j < N; ++j) detail::put_le<double>(os, A.nu[j]);
        for (Eigen::Index r = 0; r < N; ++r)
            for (Eigen::Index c = 0; c < N; ++c) detail::put_le<double>(os, A.K(r, c));
        if (!os) throw CacheError(CacheErrorKind::io, "cache: write failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw CacheError(CacheErrorKind::io, "cache: rename failed for " + path);
}

inline CacheHeader cache_read_header(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8)) throw CacheError(CacheErrorKind::truncated, "cache: truncated header");
    if (std::memcmp(magic, cache_magic, 8) != 0) throw CacheError(CacheErrorKind::bad_magic, "cache: bad magic");
    CacheHeader h;
    h.version = detail::get_le<std::uint32_t>(is);
    if (h.version != cache_version)
        throw CacheError(CacheErrorKind::version, "cache: unsupported version " + std::to_string(h.version));
    h.V = detail::get_le<double>(is);
    h.nv = detail::get_le<std::uint32_t>(is);
    h.gamma = detail::get_le<double>(is);
    h.n_omega = detail::get_le<std::uint32_t>(is);
    h.hash = detail::get_le<std::uint64_t>(is);
    return h;
}

/// Reads a cache and checks it against the grid and kernel the run requests.
inline CollisionAssembly cache_read(const std::string& path, const VelocityGrid& g, const KernelParams& p,
                                    AssemblyOptions opt = {}) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CacheError(CacheErrorKind::io, "cache: cannot open " + path);
    const CacheHeader h = cache_read_header(is);
    if (h.nv != std::uint32_t(g.nv) || h.V != g.V)
        throw CacheError(CacheErrorKind::mismatch, "cache: grid mismatch (cache N_v=" + std::to_string(h.nv) +
                                                       ", requested N_v=" + std::to_string(g.nv) + ")");
    if (h.gamma != p.gamma || h.n_omega != std::uint32_t(p.n_omega()))
        throw CacheError(CacheErrorKind::mismatch, "cache: kernel parameter mismatch (gamma or sphere rule)");
    if (h.hash != params_hash(g, p)) throw CacheError(CacheErrorKind::hash, "cache: parameter hash mismatch");
    CollisionAssembly A;
    A.grid = g;
    A.params = p;
    A.deflate = opt.deflate;
    const Eigen::Index N = g.size();
    A.nu.resize(N);
    for (Eigen::Index j = 0; j < N; ++j) A.nu[j] = detail::get_le<double>(is);
    A.K.resize(N, N);
    std::vector<char> buf(std::size_t(N) * 8);
    for (Eigen::Index r = 0; r < N; ++r) {
        if (!is.read(buf.data(), std::streamsize(buf.size())))
            throw CacheError(CacheErrorKind::truncated, "cache: truncated K");
        for (Eigen::Index c = 0; c < N; ++c) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= std::uint64_t(static_cast<unsigned char>(buf[c * 8 + b])) << (8 * b);
            A.K(r, c) = std::bit_cast<double>(bits);
        }
    }
    finalize_assembly(A);
    return A;
}

/// Loads the cache when present and valid, otherwise assembles and writes it.
inline CollisionAssembly load_or_assemble(const std::string& path, const VelocityGrid& g, const KernelParams& p,
                                          AssemblyOptions opt = {}) {
    if (!path.empty()) {
        std::ifstream probe(path, std::ios::binary);
        if (probe) {
            probe.close();
            try {
                return cache_read(path, g, p, opt);
            } catch (const CacheError&) {
            }
        }
    }
    auto A = assemble(g, p, opt);
    if (!path.empty()) cache_write(A, path);
    return A;
}

}  // namespace kboltz
