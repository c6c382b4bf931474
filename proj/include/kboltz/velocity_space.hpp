#pragma once
// Velocity lattice, global Maxwellian, macroscopic moments and the
// macro/micro projector.

#include "kboltz/common.hpp"

#include <array>
#include <cmath>

namespace kboltz {

/// Uniform midpoint lattice on [-V, V]^3 with equal weights h^3.
struct VelocityGrid {
    double V = 0.0;
    int nv = 0;
    double h = 0.0;
    double weight = 0.0;
    Eigen::Matrix<double, Eigen::Dynamic, 3> xi;
    Vec mu;
    Vec sqrt_mu;
    Vec speed2;          ///< |xi|^2 per node
    double tail_bound = 0.0;  ///< mu(V, 0, 0)
    double tol_quad = 0.0;       ///< mass and second-moment defect of mu on this grid
    double tol_quad_high = 0.0;  ///< defect of the fourth- and sixth-order identities behind c and Lambda

    Eigen::Index size() const { return xi.rows(); }
    double axis(int i) const { return -V + (i + 0.5) * h; }
    int index(int i, int j, int k) const { return (i * nv + j) * nv + k; }
    std::array<int, 3> coords(int n) const { return {n / (nv * nv), (n / nv) % nv, n % nv}; }
    double dot(const Vec& f, const Vec& g) const { return weight * f.dot(g); }
    double norm(const Vec& f) const { return std::sqrt(weight) * f.norm(); }
    bool same_as(const VelocityGrid& o) const { return V == o.V && nv == o.nv; }
};

inline double maxwellian_at(const Eigen::Vector3d& v) {
    return std::pow(2.0 * pi, -1.5) * std::exp(-0.5 * v.squaredNorm());
}

inline VelocityGrid build_grid(double V, int nv) {
    require(V > 0.0 && std::isfinite(V), "build_grid: V must be positive");
    require(nv >= 4 && nv % 2 == 0, "build_grid: N_v must be even and >= 4");
    VelocityGrid g;
    g.V = V;
    g.nv = nv;
    g.h = 2.0 * V / nv;
    g.weight = g.h * g.h * g.h;
    const Eigen::Index n = Eigen::Index(nv) * nv * nv;
    g.xi.resize(n, 3);
    g.mu.resize(n);
    g.sqrt_mu.resize(n);
    g.speed2.resize(n);
    for (int i = 0; i < nv; ++i)
        for (int j = 0; j < nv; ++j)
            for (int k = 0; k < nv; ++k) {
                const int id = g.index(i, j, k);
                g.xi.row(id) << g.axis(i), g.axis(j), g.axis(k);
                g.speed2[id] = g.xi.row(id).squaredNorm();
                g.mu[id] = std::pow(2.0 * pi, -1.5) * std::exp(-0.5 * g.speed2[id]);
                g.sqrt_mu[id] = std::sqrt(g.mu[id]);
            }
    g.tail_bound = maxwellian_at({V, 0.0, 0.0});
    const double m0 = g.weight * g.mu.sum();
    const double m2 = g.weight * g.xi.col(0).array().square().matrix().dot(g.mu);
    g.tol_quad = std::max(std::abs(m0 - 1.0), std::abs(m2 - 1.0));
    // midpoint aliasing grows with the polynomial degree, so these stay separate
    const Eigen::ArrayXd r2 = g.speed2.array(), x2 = g.xi.col(0).array().square();
    const double m4 = g.weight * (r2 * r2).matrix().dot(g.mu);
    const double cn = g.weight * ((r2 - 3.0) * (r2 - 3.0)).matrix().dot(g.mu) / 6.0;
    const double ln = g.weight * ((r2 - 5.0) * (r2 - 5.0) * x2).matrix().dot(g.mu) / 10.0;
    g.tol_quad_high = std::max({std::abs(m4 / 15.0 - 1.0), std::abs(cn - 1.0), std::abs(ln - 1.0)});
    return g;
}

inline Vec maxwellian(const VelocityGrid& g) { return g.mu; }

/// Scalar macroscopic triple at one spatial point (or one Fourier mode).
template <class S>
struct MacroStateT {
    S a{};
    Eigen::Matrix<S, 3, 1> b = Eigen::Matrix<S, 3, 1>::Zero();
    S c{};
};
using MacroState = MacroStateT<double>;

/// Columns are w*sqrt(mu), w*xi_i*sqrt(mu), w*(|xi|^2-3)*sqrt(mu)/6 so that
/// f^T M = (a, b1, b2, b3, c).
inline Mat moment_weights(const VelocityGrid& g) {
    Mat m(g.size(), 5);
    m.col(0) = g.weight * g.sqrt_mu;
    for (int d = 0; d < 3; ++d) m.col(1 + d) = g.weight * g.xi.col(d).cwiseProduct(g.sqrt_mu);
    m.col(4) = (g.weight / 6.0) * (g.speed2.array() - 3.0).matrix().cwiseProduct(g.sqrt_mu);
    return m;
}

template <class Derived>
auto moments(const VelocityGrid& g, const Eigen::MatrixBase<Derived>& f) {
    using S = typename Derived::Scalar;
    require(f.size() == g.size(), "moments: grid mismatch");
    const Eigen::Matrix<S, 1, 5> r = f.transpose() * moment_weights(g).template cast<S>();
    MacroStateT<S> m;
    m.a = r(0);
    m.b << r(1), r(2), r(3);
    m.c = r(4);
    return m;
}

/// Discretized collision invariants sqrt(mu), xi_i sqrt(mu), (|xi|^2-3) sqrt(mu),
/// plus an orthonormal basis of their span under the discrete inner product.
struct InvariantBasis {
    Mat raw;     ///< N x 5
    Mat ortho;   ///< N x 5, weight * ortho^T ortho = I
    int rank = 0;
};

inline InvariantBasis invariant_basis(const VelocityGrid& g) {
    InvariantBasis b;
    b.raw.resize(g.size(), 5);
    b.raw.col(0) = g.sqrt_mu;
    for (int d = 0; d < 3; ++d) b.raw.col(1 + d) = g.xi.col(d).cwiseProduct(g.sqrt_mu);
    b.raw.col(4) = (g.speed2.array() - 3.0).matrix().cwiseProduct(g.sqrt_mu);
    const double sw = std::sqrt(g.weight);
    // two Gram-Schmidt passes via Householder QR of the weighted basis
    Eigen::HouseholderQR<Mat> qr(sw * b.raw);
    Mat q = qr.householderQ() * Mat::Identity(g.size(), 5);
    Eigen::HouseholderQR<Mat> qr2(q);
    q = qr2.householderQ() * Mat::Identity(g.size(), 5);
    b.ortho = q / sw;
    Eigen::SelfAdjointEigenSolver<Mat> es(g.weight * b.raw.transpose() * b.raw);
    const double top = es.eigenvalues().maxCoeff();
    b.rank = int((es.eigenvalues().array() > 1e-12 * top).count());
    return b;
}

enum class ProjectorMode { orthonormal, analytic };

/// Macroscopic projector P. Rank-5 action; never materialized unless asked.
class Projector {
public:
    Projector() = default;
    Projector(const VelocityGrid& g, ProjectorMode mode = ProjectorMode::orthonormal)
        : mode_(mode), weight_(g.weight) {
        auto basis = invariant_basis(g);
        if (mode == ProjectorMode::orthonormal) {
            left_ = basis.ortho;
            right_ = g.weight * basis.ortho;
        } else {
            left_ = basis.raw;
            right_ = moment_weights(g);
        }
    }

    ProjectorMode mode() const { return mode_; }

    /// P applied column-wise (velocity index = rows).
    template <class Derived>
    auto apply(const Eigen::MatrixBase<Derived>& f) const {
        using S = typename Derived::Scalar;
        using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
        M coeff = right_.transpose().template cast<S>() * f;
        M out = left_.template cast<S>() * coeff;
        return out;
    }
    template <class Derived>
    auto micro(const Eigen::MatrixBase<Derived>& f) const {
        using S = typename Derived::Scalar;
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out = f - apply(f);
        return out;
    }
    Mat matrix() const { return left_ * right_.transpose(); }
    const Mat& left() const { return left_; }
    const Mat& right() const { return right_; }

private:
    ProjectorMode mode_ = ProjectorMode::orthonormal;
    double weight_ = 0.0;
    Mat left_, right_;  ///< P = left * right^T
};

inline Vec project_P(const Projector& p, const Vec& f) { return p.apply(f); }
inline Vec project_micro(const Projector& p, const Vec& f) { return p.micro(f); }

enum class PxiPath { projector, coefficients };

/// P(xi_dir f). The coefficient path uses a1 = <sqrt(mu) xi, f>, the 3x3
/// second-moment matrix b1 and c1 = (1/6)<(|xi|^2-3) sqrt(mu) xi, f>.
inline Vec project_P_xi(const VelocityGrid& g, const Projector& p, const Vec& f, int dir,
                        PxiPath path = PxiPath::projector) {
    require(dir >= 0 && dir < 3, "project_P_xi: direction in {0,1,2}");
    require(f.size() == g.size(), "project_P_xi: grid mismatch");
    if (path == PxiPath::projector) return p.apply(g.xi.col(dir).cwiseProduct(f));
    const Vec wf = g.weight * g.sqrt_mu.cwiseProduct(f);
    Eigen::Vector3d a1, c1;
    Eigen::Matrix3d b1;
    for (int i = 0; i < 3; ++i) {
        a1[i] = g.xi.col(i).dot(wf);
        c1[i] = (g.speed2.array() - 3.0).matrix().cwiseProduct(g.xi.col(i)).dot(wf) / 6.0;
        for (int j = 0; j < 3; ++j) b1(i, j) = g.xi.col(i).cwiseProduct(g.xi.col(j)).dot(wf);
    }
    Vec out(g.size());
    for (Eigen::Index n = 0; n < g.size(); ++n) {
        const Eigen::Vector3d v = g.xi.row(n).transpose();
        out[n] = (a1[dir] + b1.row(dir).dot(v) + c1[dir] * (g.speed2[n] - 3.0)) * g.sqrt_mu[n];
    }
    return out;
}

/// Operator norm of f -> P(xi_dir f) in the discrete L^2.
inline double project_P_xi_bound(const VelocityGrid& g, const Projector& p, int dir) {
    // P xi = left * (right^T diag(xi)); with an orthonormal left the norm is
    // that of sqrt(w)^-1 right^T diag(xi), scaled by the left Gram matrix.
    const Mat r = p.right().transpose() * g.xi.col(dir).asDiagonal();
    const Mat gl = g.weight * p.left().transpose() * p.left();
    const Mat m = gl * (r * r.transpose()) / g.weight;
    Eigen::EigenSolver<Mat> es(m);
    return std::sqrt(es.eigenvalues().real().maxCoeff());
}

struct HighMoments {
    Eigen::Matrix3d theta = Eigen::Matrix3d::Zero();
    Eigen::Vector3d lambda = Eigen::Vector3d::Zero();
};

/// N x 12 weights: columns 3*i+j give Theta_ij, columns 9+i give Lambda_i.
inline Mat high_moment_weights(const VelocityGrid& g) {
    Mat m(g.size(), 12);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            m.col(3 * i + j) = g.weight * (g.xi.col(i).cwiseProduct(g.xi.col(j)).array() - 1.0)
                                              .matrix()
                                              .cwiseProduct(g.sqrt_mu);
    for (int i = 0; i < 3; ++i)
        m.col(9 + i) = (g.weight / 10.0) * (g.speed2.array() - 5.0)
                                               .matrix()
                                               .cwiseProduct(g.xi.col(i))
                                               .cwiseProduct(g.sqrt_mu);
    return m;
}

inline HighMoments high_moments(const VelocityGrid& g, const Vec& f) {
    require(f.size() == g.size(), "high_moments: grid mismatch");
    const Eigen::Matrix<double, 1, 12> r = f.transpose() * high_moment_weights(g);
    HighMoments h;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) h.theta(i, j) = r(3 * i + j);
        h.lambda[i] = r(9 + i);
    }
    return h;
}

}  // namespace kboltz
