#pragma once
// Nonlinear evolution on a periodic 1D lattice with full 3D velocities, the
// moment system, energy functionals and the shell Lyapunov audits.

#include "kboltz/linear_dynamics.hpp"
#include "kboltz/littlewood_paley.hpp"

namespace kboltz {

struct SimConfig {
    double dt = 0.5;
    bool nonlinear = true;
    bool conserve = true;
    int snapshot_every = 0;  ///< 0: max(1, steps / 200)
};

struct SimState {
    LatticeField f;
    double t = 0.0;
};

/// Snapshots of one run. h holds the collision term at each snapshot (zero
/// fields for linear runs).
struct RunRecord {
    SimConfig config;
    std::vector<double> t;
    std::vector<LatticeField> f, h;
    std::vector<double> min_F;    ///< min over (x, xi) of mu + sqrt(mu) f
    std::vector<double> reality;  ///< max |c_{-k} - conj c_k| / max |c|
    long steps = 0;
};

inline double reality_defect(const LatticeField& u) {
    const auto& l = u.lattice;
    const double scale = u.coeff.cwiseAbs().maxCoeff();
    if (scale == 0.0) return 0.0;
    double worst = 0.0;
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        const int c = l.conjugate_mode(int(m));
        worst = std::max(worst, (u.coeff.col(c) - u.coeff.col(m).conjugate()).cwiseAbs().maxCoeff());
    }
    return worst / scale;
}

inline double min_distribution(const VelocityGrid& g, const LatticeField& f) {
    const Mat phys = to_physical(f).real();
    double lo = std::numeric_limits<double>::infinity();
    for (Eigen::Index x = 0; x < phys.cols(); ++x)
        lo = std::min(lo, (g.mu + g.sqrt_mu.cwiseProduct(phys.col(x))).minCoeff());
    return lo;
}

/// Zeroes every mode with a Nyquist index on some axis; those have no
/// conjugate partner on the lattice.
inline void drop_nyquist(const SpatialLattice& l, CMat& c) {
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        Eigen::Index r = m;
        for (int a = 0; a < l.dim; ++a, r /= l.nx)
            if (r % l.nx == l.nx / 2) {
                c.col(m).setZero();
                break;
            }
    }
}

/// Gamma(f_i, g_i) for several pairs on one lattice in a single pass of the
/// collision quadrature: the 3/2-padded physical points of all pairs are
/// stacked as columns, so the per-node setup is paid once.
inline std::vector<LatticeField> collision_fields(
    const GammaOperator& G, const std::vector<std::pair<const LatticeField*, const LatticeField*>>& pairs,
    bool conserve = true) {
    std::vector<LatticeField> out;
    if (pairs.empty()) return out;
    const SpatialLattice& l = pairs.front().first->lattice;
    const Eigen::Index N = G.grid().size();
    const int M = 3 * l.nx / 2;
    const std::array<int, 3> dims{M, M, M};
    Eigen::Index pts = 1;
    for (int a = 0; a < l.dim; ++a) pts *= M;
    const Eigen::Index P = pts * Eigen::Index(pairs.size());
    RowMat F(N, P), H(N, P);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& [f, g] = pairs[i];
        require(f->lattice.same_as(l) && g->lattice.same_as(l), "collision fields: lattice mismatch");
        require(f->slots() == N && g->slots() == N, "collision fields: grid mismatch");
        CMat pf = resample_modes(f->coeff, l.dim, l.nx, M), pg = resample_modes(g->coeff, l.dim, l.nx, M);
        detail::fft_lines(pf, dims, l.dim, false);
        detail::fft_lines(pg, dims, l.dim, false);
        F.middleCols(Eigen::Index(i) * pts, pts) = pf.real();
        H.middleCols(Eigen::Index(i) * pts, pts) = pg.real();
    }
    const RowMat all = G.apply(F, H, conserve);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        CMat c = all.middleCols(Eigen::Index(i) * pts, pts).cast<cplx>();
        detail::fft_lines(c, dims, l.dim, true);
        c /= double(pts);
        CMat back = resample_modes(c, l.dim, M, l.nx);
        drop_nyquist(l, back);
        out.push_back({l, std::move(back), pairs[i].first->vweight});
    }
    return out;
}

/// Bony split of Gamma(f, g) for mean-free f, g:
///   T_fg = sum_j Gamma(S_{j-1} f, Delta_j g), T_gf = sum_j Gamma(Delta_j f, S_{j-1} g),
///   R = sum_{|j - j'| <= 1} Gamma(Delta_j' f, Delta_j g).
inline BonyParts collision_bony(const GammaOperator& G, const DyadicPartition& p, const LatticeField& f,
                                const LatticeField& g, bool conserve = true) {
    require(p.lattice.same_as(f.lattice) && p.lattice.same_as(g.lattice), "bony: lattice mismatch");
    std::vector<std::pair<const LatticeField*, const LatticeField*>> pairs;
    std::vector<LatticeField> df, dg, sf, sg;
    for (int q = p.q_min; q <= p.q_max; ++q) {
        df.push_back(dyadic_block(p, f, q));
        dg.push_back(dyadic_block(p, g, q));
        sf.push_back(low_pass(p, f, q - 1));
        sg.push_back(low_pass(p, g, q - 1));
    }
    std::vector<int> part;
    for (int j = 0; j < p.shells(); ++j) {
        pairs.push_back({&sf[j], &dg[j]});
        part.push_back(0);
        pairs.push_back({&df[j], &sg[j]});
        part.push_back(1);
        for (int jp = std::max(0, j - 1); jp <= std::min(p.shells() - 1, j + 1); ++jp) {
            pairs.push_back({&df[jp], &dg[j]});
            part.push_back(2);
        }
    }
    const auto vals = collision_fields(G, pairs, conserve);
    BonyParts out{zero_field(p.lattice, f.slots(), f.vweight), {}, {}};
    out.T_gf = out.T_fg;
    out.R = out.T_fg;
    for (std::size_t i = 0; i < vals.size(); ++i)
        (part[i] == 0 ? out.T_fg : part[i] == 1 ? out.T_gf : out.R).coeff += vals[i].coeff;
    return out;
}

/// Per-mode linear propagator over tau for a 1D lattice, the 4-stage scheme
/// with sub-steps under the stability rule (identical to evolve_mode).
class ModePropagator {
public:
    ModePropagator(const LinearEngine& E, const SpatialLattice& l, double tau) : E_(&E), l_(l) {
        require(l.dim == 1, "propagator: nonlinear runs use a 1D lattice");
        require(tau > 0, "propagator: tau must be positive");
        const int half = l.nx / 2;
        blocks_.resize(half);
        for (int n = 0; n < half; ++n) {
            const double k = l.k0() * n;
            const long m = std::max<long>(1, long(std::ceil(tau / E.dt_limit(k) * (1 - 1e-12))));
            for (int s = 0; s < 4; ++s)
                blocks_[n][s] = matrix_power(rk4_step_matrix(E.sector_generator(s, k), tau / m), m);
        }
    }

    /// In place on slots x modes coefficients.
    void apply(CMat& c) const {
        const auto& S = E_->sectors();
        const int nx = l_.nx;
        for (int m = 0; m < nx; ++m) {
            const int n = SpatialLattice::signed_index(m, nx);
            if (n == -nx / 2) {
                c.col(m).setZero();
                continue;
            }
            const CVec col = c.col(m);
            CVec out = CVec::Zero(col.size());
            for (int s = 0; s < 4; ++s) {
                const CVec r = S.restrict(col, s);
                const CVec e = n >= 0 ? CVec(blocks_[n][s] * r) : CVec(blocks_[-n][s].conjugate() * r);
                S.add_back(e, s, out);
            }
            c.col(m) = out;
        }
    }

private:
    const LinearEngine* E_;
    SpatialLattice l_;
    std::vector<std::array<CMat, 4>> blocks_;
};

/// Integrating-factor (Lawson) 4-stage stepping: the linear part
/// -(i k.xi) - L is propagated per mode, Gamma(f, f) enters through the
/// explicit stages and is evaluated at the dealiased physical points.
class Simulation {
public:
    Simulation(const LinearEngine& E, const SpatialLattice& l, SimConfig cfg, const GammaOperator* gamma = nullptr)
        : E_(&E), l_(l), cfg_(cfg), gamma_(gamma), half_(E, l, 0.5 * cfg.dt) {
        require(cfg.dt > 0 && std::isfinite(cfg.dt), "simulation: dt must be positive");
        require(!cfg.nonlinear || gamma, "simulation: nonlinear runs need the collision operator");
        if (gamma) require(gamma->grid().same_as(E.grid()), "simulation: Gamma grid mismatch");
    }

    const SimConfig& config() const { return cfg_; }
    const SpatialLattice& lattice() const { return l_; }

    /// Gamma(f, f) on the lattice, 3/2 zero padding.
    CMat collision_term(const CMat& c) const {
        if (c.isZero(0.0)) return CMat::Zero(c.rows(), c.cols());
        const int M = 3 * l_.nx / 2;
        CMat pad = resample_modes(c, 1, l_.nx, M);
        detail::fft_lines(pad, {M, M, M}, 1, false);
        const RowMat F = pad.real();
        CMat g = gamma_->apply(F, F, cfg_.conserve).cast<cplx>();
        detail::fft_lines(g, {M, M, M}, 1, true);
        g /= double(M);
        CMat out = resample_modes(g, 1, M, l_.nx);
        out.col(l_.nx / 2).setZero();  // keep the field real: no partner for the Nyquist mode
        return out;
    }

    /// One step; gamma_now may carry Gamma(f, f) at the current state.
    void step(SimState& s, const CMat* gamma_now = nullptr) const {
        const double h = cfg_.dt;
        const CMat& u = s.f.coeff;
        auto E = [&](CMat v) {
            half_.apply(v);
            return v;
        };
        CMat next;
        if (!cfg_.nonlinear) {
            next = E(E(u));
        } else {
            const CMat k1 = gamma_now ? *gamma_now : collision_term(u);
            const CMat eu = E(u);
            const CMat k2 = collision_term(E(u + 0.5 * h * k1));
            const CMat k3 = collision_term(eu + 0.5 * h * k2);
            const CMat k4 = collision_term(E(eu) + h * E(k3));
            next = E(eu) + (h / 6.0) * (E(E(k1)) + 2.0 * E(k2 + k3) + k4);
        }
        const double before = u.norm(), after = next.norm();
        if (!std::isfinite(after) || after > 1.1 * before + 1e-300)
            throw NumericalError("simulation: instability at t = " + std::to_string(s.t) + " (norm " +
                                 std::to_string(before) + " -> " + std::to_string(after) + ")");
        s.f.coeff = std::move(next);
        s.t += h;
    }

    RunRecord run(const LatticeField& f0, double T) const {
        require(f0.lattice.same_as(l_) && f0.slots() == E_->grid().size(), "simulation: initial data mismatch");
        require(T > 0, "simulation: horizon must be positive");
        const long steps = std::max<long>(1, std::lround(T / cfg_.dt));
        const int every = cfg_.snapshot_every > 0 ? cfg_.snapshot_every : int(std::max<long>(1, steps / 200));
        RunRecord rec;
        rec.config = cfg_;
        SimState s{f0, 0.0};
        CMat gamma_now;
        auto refresh = [&] {
            gamma_now = cfg_.nonlinear ? collision_term(s.f.coeff) : CMat::Zero(s.f.slots(), l_.modes());
        };
        auto snap = [&] {
            rec.t.push_back(s.t);
            rec.f.push_back(s.f);
            rec.h.push_back({l_, gamma_now, s.f.vweight});
            rec.min_F.push_back(min_distribution(E_->grid(), s.f));
            rec.reality.push_back(reality_defect(s.f));
        };
        refresh();
        snap();
        for (long n = 1; n <= steps; ++n) {
            step(s, cfg_.nonlinear ? &gamma_now : nullptr);
            // the next step's first stage doubles as the snapshot's collision term
            refresh();
            if (n % every == 0 || n == steps) snap();
        }
        rec.steps = steps;
        return rec;
    }

private:
    const LinearEngine* E_;
    SpatialLattice l_;
    SimConfig cfg_;
    const GammaOperator* gamma_;
    ModePropagator half_;
};

// ------------------------------------------------------------ moments

/// Fourier coefficients of the moment fields; theta and lambda are taken of
/// the microscopic part. Rows: a (1), b (3), c (1), theta (9, 3i+j), lambda (3).
struct MomentFields {
    SpatialLattice lattice;
    CMat a, b, c, theta, lambda;

    CMat physical(const CMat& u) const { return to_physical({lattice, u, 1.0}); }
};

inline MomentFields moment_fields(const CollisionAssembly& A, const LatticeField& f) {
    require(f.slots() == A.grid.size(), "moment_fields: grid mismatch");
    const Mat W = moment_weights(A.grid);
    const Mat H = high_moment_weights(A.grid);
    const CMat macro = W.transpose().cast<cplx>() * f.coeff;
    const CMat micro = f.coeff - A.P.apply(f.coeff);
    const CMat high = H.transpose().cast<cplx>() * micro;
    return {f.lattice, macro.row(0), macro.middleRows(1, 3), macro.row(4), high.topRows(9), high.bottomRows(3)};
}

/// Spatial means of the five collision invariants.
inline Eigen::Matrix<double, 5, 1> mean_invariants(const CollisionAssembly& A, const LatticeField& f) {
    const Eigen::Matrix<cplx, 5, 1> r = moment_weights(A.grid).transpose().cast<cplx>() * f.coeff.col(0);
    return r.real();
}

struct MomentResidual {
    std::array<double, 5> relative{};  ///< max over interior snapshots, per equation
    std::array<double, 5> absolute{};
    /// Same residuals with the time derivative taken from the equation at
    /// each snapshot instead of differences; isolates quadrature defects.
    std::array<double, 5> instantaneous{};
};

namespace detail {

/// Residual rows of the five moment equations given the moments m of f, the
/// moments dm of its time derivative and the high moments of r and h.
/// Each entry: (residual, sum of magnitudes of the terms).
inline std::array<std::pair<CMat, CMat>, 5> moment_equations(const SpatialLattice& l, const MomentFields& m,
                                                             const MomentFields& dm, const CMat& hr, const CMat& hh) {
    const cplx I(0, 1);
    auto dx = [&](const CMat& row, int d) {
        return CMat(row.array().rowwise() * (I * l.k.col(d).cast<cplx>()).transpose().array());
    };
    std::array<std::pair<CMat, CMat>, 5> out;
    const CMat divb = dx(m.b.row(0), 0) + dx(m.b.row(1), 1) + dx(m.b.row(2), 2);
    out[0] = {dm.a + divb, dm.a.cwiseAbs() + divb.cwiseAbs()};

    CMat e2 = dm.b, t2 = dm.b.cwiseAbs();
    for (int j = 0; j < 3; ++j) {
        const CMat g = dx(m.a + 2.0 * m.c, j);
        CMat dth = CMat::Zero(1, l.modes());
        for (int i = 0; i < 3; ++i) dth += dx(m.theta.row(3 * i + j), i);
        e2.row(j) += g + dth;
        t2.row(j) += g.cwiseAbs() + dth.cwiseAbs();
    }
    out[1] = {e2, t2};

    const CMat divl = dx(m.lambda.row(0), 0) + dx(m.lambda.row(1), 1) + dx(m.lambda.row(2), 2);
    out[2] = {dm.c + divb / 3.0 + 5.0 / 3.0 * divl, dm.c.cwiseAbs() + divb.cwiseAbs() / 3.0 + 5.0 / 3.0 * divl.cwiseAbs()};

    CMat e4(9, l.modes()), t4(9, l.modes());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const int ij = 3 * i + j;
            CMat d = dm.theta.row(ij);
            if (i == j) d += 2.0 * dm.c;
            const CMat sb = dx(m.b.row(j), i) + dx(m.b.row(i), j);
            e4.row(ij) = d + sb + hr.row(ij) - hh.row(ij);
            t4.row(ij) = d.cwiseAbs() + sb.cwiseAbs() + hr.row(ij).cwiseAbs() + hh.row(ij).cwiseAbs();
        }
    out[3] = {e4, t4};

    CMat e5(3, l.modes()), t5(3, l.modes());
    for (int i = 0; i < 3; ++i) {
        const CMat d = dm.lambda.row(i);
        const CMat gc = dx(m.c, i);
        e5.row(i) = d + gc + hr.row(9 + i) - hh.row(9 + i);
        t5.row(i) = d.cwiseAbs() + gc.cwiseAbs() + hr.row(9 + i).cwiseAbs() + hh.row(9 + i).cwiseAbs();
    }
    out[4] = {e5, t5};
    return out;
}

/// i k.xi u per mode.
inline CMat transport(const CollisionAssembly& A, const SpatialLattice& l, const CMat& u) {
    CMat out(u.rows(), u.cols());
    for (Eigen::Index k = 0; k < l.modes(); ++k)
        out.col(k) = cplx(0, 1) * (A.grid.xi * l.k.row(k).transpose()).cast<cplx>().cwiseProduct(u.col(k));
    return out;
}

}  // namespace detail

/// Residuals of the five moment equations
///   a' + div b = 0
///   b' + grad(a + 2c) + div Theta = 0
///   c' + div b / 3 + 5 div Lambda / 3 = 0
///   (Theta_ij + 2 c delta_ij)' + d_i b_j + d_j b_i + Theta_ij(r) = Theta_ij(h)
///   Lambda_i' + d_i c + Lambda_i(r) = Lambda_i(h)
/// with r = xi.grad (I-P)f + L (I-P)f and h the recorded collision term.
/// Time derivatives are centered differences of the snapshots.
inline MomentResidual moment_system_residual(const CollisionAssembly& A, const RunRecord& rec) {
    const std::size_t n = rec.t.size();
    require(n >= 3, "moment residual: need >= 3 snapshots");
    const double dt = rec.t[1] - rec.t[0];
    for (std::size_t i = 1; i < n; ++i)
        require(std::abs(rec.t[i] - rec.t[i - 1] - dt) <= 1e-9 * dt, "moment residual: snapshot spacing irregular");
    const auto& l = rec.f.front().lattice;
    const Mat Ht = high_moment_weights(A.grid).transpose();
    const double root_vol = std::sqrt(l.volume());

    MomentResidual out;
    std::array<double, 5> scale{}, scale_now{}, abs_now{};
    for (std::size_t s = 0; s < n; ++s) {
        const CMat& f = rec.f[s].coeff;
        const CMat micro = f - A.P.apply(f);
        const CMat hr = Ht.cast<cplx>() * (A.apply_L(micro) + detail::transport(A, l, micro));
        const CMat hh = Ht.cast<cplx>() * rec.h[s].coeff;
        const MomentFields m = moment_fields(A, rec.f[s]);

        const CMat df = rec.h[s].coeff - A.apply_L(f) - detail::transport(A, l, f);
        const auto now = detail::moment_equations(l, m, moment_fields(A, {l, df, rec.f[s].vweight}), hr, hh);
        for (int e = 0; e < 5; ++e) {
            abs_now[e] = std::max(abs_now[e], root_vol * now[e].first.norm());
            scale_now[e] = std::max(scale_now[e], root_vol * now[e].second.norm());
        }
        if (s == 0 || s + 1 == n) continue;
        const CMat diff = (rec.f[s + 1].coeff - rec.f[s - 1].coeff) / (rec.t[s + 1] - rec.t[s - 1]);
        const auto eq = detail::moment_equations(l, m, moment_fields(A, {l, diff, rec.f[s].vweight}), hr, hh);
        for (int e = 0; e < 5; ++e) {
            out.absolute[e] = std::max(out.absolute[e], root_vol * eq[e].first.norm());
            scale[e] = std::max(scale[e], root_vol * eq[e].second.norm());
        }
    }
    for (int e = 0; e < 5; ++e) {
        out.relative[e] = scale[e] > 0 ? out.absolute[e] / scale[e] : 0.0;
        out.instantaneous[e] = scale_now[e] > 0 ? abs_now[e] / scale_now[e] : 0.0;
    }
    return out;
}

// ------------------------------------------------------------ energy functionals

struct EnergyReport {
    double E_low = 0, E_high = 0;               ///< sup_t low B^{1/2}, high B^{3/2}
    double D_macro_low = 0, D_micro_low = 0;    ///< L2_t low B^{3/2} of Pf, nu-weighted low B^{1/2} of (I-P)f
    double D_high = 0;                          ///< L2_t nu-weighted high B^{3/2}
    double E = 0, D = 0;
    double initial = 0;                         ///< ||f0||^l_{B^{1/2}} + ||f0||^h_{B^{3/2}}
    std::vector<double> E_running, D_running;  ///< on [0, t_n]
};

inline EnergyReport energy_functionals(const CollisionAssembly& A, const DyadicPartition& p,
                                       const std::vector<double>& times, const std::vector<LatticeField>& series) {
    require(series.size() >= 2 && times.size() == series.size(), "energy functionals: need >= 2 snapshots");
    std::vector<ShellSpectrum> sf, sp, sm, sn;
    for (const auto& f : series) {
        require(f.slots() == A.grid.size(), "energy functionals: grid mismatch");
        LatticeField pf = f, mf = f;
        pf.coeff = A.P.apply(f.coeff);
        mf.coeff = f.coeff - pf.coeff;
        sf.push_back(shell_spectrum(p, f));
        sp.push_back(shell_spectrum(p, pf));
        sm.push_back(shell_spectrum(p, mf, &A.nu));
        sn.push_back(shell_spectrum(p, f, &A.nu));
    }
    EnergyReport r;
    r.initial = besov_from_shells(sf[0], 0.5, 1, Band::low) + besov_from_shells(sf[0], 1.5, 1, Band::high);
    for (std::size_t n = 1; n < series.size(); ++n) {
        const std::vector<double> t(times.begin(), times.begin() + n + 1);
        auto prefix = [&](const std::vector<ShellSpectrum>& v) {
            return std::vector<ShellSpectrum>(v.begin(), v.begin() + n + 1);
        };
        const auto f = prefix(sf), pf = prefix(sp), mf = prefix(sm), nf = prefix(sn);
        r.E_low = chemin_lerner_from_spectra(t, f, infinity, 0.5, 1, Band::low);
        r.E_high = chemin_lerner_from_spectra(t, f, infinity, 1.5, 1, Band::high);
        r.D_macro_low = chemin_lerner_from_spectra(t, pf, 2, 1.5, 1, Band::low);
        r.D_micro_low = chemin_lerner_from_spectra(t, mf, 2, 0.5, 1, Band::low);
        r.D_high = chemin_lerner_from_spectra(t, nf, 2, 1.5, 1, Band::high);
        r.E = r.E_low + r.E_high;
        r.D = r.D_macro_low + r.D_micro_low + r.D_high;
        r.E_running.push_back(r.E);
        r.D_running.push_back(r.D);
    }
    for (std::size_t n = 1; n < r.E_running.size(); ++n)
        if (r.E_running[n] < r.E_running[n - 1] || r.D_running[n] < r.D_running[n - 1])
            throw NumericalError("energy functionals: running norms must be non-decreasing");
    return r;
}

// ------------------------------------------------------------ Lyapunov audits

enum class Regime { low, high };

struct LyapunovEntry {
    int q = 0;
    Regime regime = Regime::low;
    double eta = 0.0;
    double block = 0.0;       ///< ||Delta_q f||^2
    double nu_micro = 0.0;    ///< ||sqrt(nu) Delta_q (I-P) f||^2
    double grad_abc = 0.0;    ///< ||Delta_q grad (a, b, c)||^2
    double cross = 0.0;       ///< bracket of the functional as printed (without eta, 2^{-2q})
    double cross_alt = 0.0;   ///< same bracket with the other Theta coupling
    double bracket_D = 0.0;   ///< bracket of the dissipation (without eta, 2^{-2q})
    double L = 0.0, L_alt = 0.0, D = 0.0;
    double ratio() const { return block > 0 ? L / (0.5 * block) : 1.0; }
    double ratio_alt() const { return block > 0 ? L_alt / (0.5 * block) : 1.0; }
};

namespace detail {

/// (u, v)_x for real fields from Fourier coefficients.
inline double xdot(double vol, const CMat& u, const CMat& v) { return vol * (u.cwiseProduct(v.conjugate())).sum().real(); }

}  // namespace detail

/// Every term of the shell functional and dissipation. Low regime: the
/// Theta coupling is taken without +2c delta_ij; high regime: with it and the
/// 2^{-2q} prefactor. cross_alt flips the coupling.
inline LyapunovEntry lyapunov_audit(const CollisionAssembly& A, const DyadicPartition& p, const LatticeField& f, int q,
                                    Regime regime, double eta) {
    require(regime == Regime::low ? q <= 0 : q >= -1, "lyapunov audit: shell does not belong to the regime");
    require(q >= p.q_min && q <= p.q_max, "lyapunov audit: shell not covered by the lattice");
    require(eta >= 0.0 && eta < 1.0, "lyapunov audit: eta must lie in [0, 1)");
    const auto& l = f.lattice;
    const double vol = l.volume(), w = A.grid.weight;
    const LatticeField blk = dyadic_block(p, f, q);
    const auto mf = moment_fields(A, blk);
    const cplx I(0, 1);
    const CMat micro = blk.coeff - A.P.apply(blk.coeff);
    CMat r = A.apply_L(micro);
    for (Eigen::Index k = 0; k < l.modes(); ++k)
        r.col(k) += I * (A.grid.xi * l.k.row(k).transpose()).cast<cplx>().cwiseProduct(micro.col(k));
    const CMat hr = high_moment_weights(A.grid).transpose().cast<cplx>() * r;

    auto dx = [&](const CMat& row, int d) {
        return CMat(row.array().rowwise() * (I * l.k.col(d).cast<cplx>()).transpose().array());
    };
    LyapunovEntry e;
    e.q = q;
    e.regime = regime;
    e.eta = eta;
    e.block = vol * w * blk.coeff.squaredNorm();
    e.nu_micro = vol * w * A.nu.dot(micro.cwiseAbs2().rowwise().sum());
    double k2a = 0, k2b = 0, k2c = 0;
    for (Eigen::Index k = 0; k < l.modes(); ++k) {
        const double kk = l.kabs[k] * l.kabs[k];
        k2a += kk * std::norm(mf.a(0, k));
        k2b += kk * mf.b.col(k).squaredNorm();
        k2c += kk * std::norm(mf.c(0, k));
    }
    e.grad_abc = vol * (k2a + k2b + k2c);

    double ab = 0, cl = 0, bt = 0, bc = 0;
    for (int i = 0; i < 3; ++i) {
        ab += detail::xdot(vol, dx(mf.a, i), mf.b.row(i));
        cl += detail::xdot(vol, dx(mf.c, i), mf.lambda.row(i));
        for (int j = 0; j < 3; ++j) {
            const CMat sb = dx(mf.b.row(j), i) + dx(mf.b.row(i), j);
            bt += detail::xdot(vol, sb, mf.theta.row(3 * i + j));
            if (i == j) bc += detail::xdot(vol, sb, 2.0 * mf.c);
        }
    }
    const double plain = ab + 60 * cl + 3 * bt, with_c = plain + 3 * bc;
    e.cross = regime == Regime::low ? plain : with_c;
    e.cross_alt = regime == Regime::low ? with_c : plain;

    // dissipation bracket
    double cc = 0, th = 0, lam = 0, grad_theta = 0, rl = 0, rt = 0;
    CMat divl = CMat::Zero(1, l.modes());
    for (int i = 0; i < 3; ++i) divl += dx(mf.lambda.row(i), i);
    lam = vol * divl.squaredNorm();
    for (int i = 0; i < 3; ++i) cc += detail::xdot(vol, dx(mf.c, i), dx(mf.a, i));
    for (int j = 0; j < 3; ++j) {
        CMat divt = CMat::Zero(1, l.modes());
        for (int i = 0; i < 3; ++i) divt += dx(mf.theta.row(3 * i + j), i);
        th += detail::xdot(vol, divt, dx(5.0 * mf.a + 12.0 * mf.c, j));
        if (regime == Regime::high) grad_theta += vol * divt.squaredNorm();
    }
    if (regime == Regime::low)
        for (int ij = 0; ij < 9; ++ij)
            for (int d = 0; d < 3; ++d) grad_theta += vol * dx(mf.theta.row(ij), d).squaredNorm();
    for (int i = 0; i < 3; ++i) {
        rl += detail::xdot(vol, hr.row(9 + i), dx(mf.c, i));
        for (int j = 0; j < 3; ++j) rt += detail::xdot(vol, hr.row(3 * i + j), dx(mf.b.row(j), i) + dx(mf.b.row(i), j));
    }
    const double grad_weighted = vol * (k2a + k2b + 60 * k2c);
    e.bracket_D = grad_weighted + 2 * cc - th - 100 * lam - 6 * grad_theta + 60 * rl + 3 * rt;

    const double pre = regime == Regime::low ? eta : eta * std::ldexp(1.0, -2 * q);
    e.L = 0.5 * e.block + pre * e.cross;
    e.L_alt = 0.5 * e.block + pre * e.cross_alt;
    e.D = A.lambda0 * e.nu_micro + pre * e.bracket_D;
    return e;
}

/// Mixed macro + micro field on shell q: random macroscopic coefficients on
/// the orthonormal invariants plus a microscopic part of random relative size.
inline LatticeField random_audit_field(const CollisionAssembly& A, const DyadicPartition& p, int q, Rng& rng) {
    const auto& g = A.grid;
    const LatticeField mac = random_shell_field(p, 5, rng, q);
    LatticeField mic = random_shell_field(p, g.size(), rng, q, g.weight);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // White noise alone sits mostly in the fast tail; the sup of the
    // moment terms is reached near nu^{-1}-weighted moment profiles.
    const int kind = static_cast<int>(3 * u(rng)) % 3;
    if (kind > 0) {
        const LatticeField hc = random_shell_field(p, 12, rng, q);
        Mat H = high_moment_weights(g);
        if (kind == 2) H = A.nu.cwiseInverse().asDiagonal() * H;
        mic.coeff = H.cast<cplx>() * hc.coeff;
    }
    mic.coeff = mic.coeff - A.P.apply(mic.coeff);
    LatticeField f{p.lattice, A.Q.cast<cplx>() * mac.coeff, g.weight};
    const double fm = f.norm(), mm = mic.norm();
    const double theta = 0.5 * pi * u(rng);
    if (fm > 0 && mm > 0) f.coeff = std::cos(theta) / fm * f.coeff + std::sin(theta) / mm * mic.coeff;
    return f;
}

struct EtaCalibration {
    double C_equivalence = 0;  ///< sup |bracket| / (1/2 ||Delta_q f||^2) (with 2^{-2q} in the high regime)
    double C_dissipation = 0;  ///< sup (kappa G - bracket_D) / ||sqrt(nu) (I-P) f||^2
    double C = 0;
    double eta = 0;  ///< min{1, 1/(2C), lambda0/(2C)}
};

/// Measures the Cauchy-Schwarz constants on random shell fields for every
/// shell of the regime and applies eta = min{1, 1/(2C), lambda0/(2C)}.
/// kappa is 1/2 in the low regime and 1/4 in the high regime.
inline EtaCalibration calibrate_eta(const CollisionAssembly& A, const DyadicPartition& p, Regime regime, Rng& rng,
                                    int fields = 100) {
    const auto [lo, hi] = band_range(p.q_min, p.q_max, regime == Regime::low ? Band::low : Band::high);
    const double kappa = regime == Regime::low ? 0.5 : 0.25;
    EtaCalibration c;
    for (int q = lo; q <= hi; ++q) {
        const double pre = regime == Regime::low ? 1.0 : std::ldexp(1.0, -2 * q);
        for (int n = 0; n < fields; ++n) {
            const auto f = random_audit_field(A, p, q, rng);
            const auto e = lyapunov_audit(A, p, f, q, regime, 0.0);
            if (e.block <= 0) continue;
            c.C_equivalence = std::max({c.C_equivalence, pre * std::abs(e.cross) / (0.5 * e.block),
                                        pre * std::abs(e.cross_alt) / (0.5 * e.block)});
            if (e.nu_micro > 0)
                c.C_dissipation = std::max(c.C_dissipation, pre * (kappa * e.grad_abc - e.bracket_D) / e.nu_micro);
        }
    }
    c.C = std::max(c.C_equivalence, c.C_dissipation);
    c.eta = std::min({1.0, 1.0 / (2 * c.C), A.lambda0 / (2 * c.C)});
    // eta must stay below 1 for the audit
    c.eta = std::min(c.eta, 0.999);
    return c;
}

struct TracePoint {
    int q = 0;
    double t = 0;
    double L = 0, dLdt = 0;
    double rate_term = 0;  ///< 2^{2q} L (low) or L (high)
    double nu_micro = 0;
    double rhs = 0;  ///< nonlinear right side
};

struct LyapunovTrace {
    std::vector<TracePoint> points;
    double kappa = 0;     ///< largest k with dL/dt + k (rate_term + nu_micro) <= 0 where rhs = 0 (min over points)
    double C_margin = 0;  ///< smallest C with dL/dt + kappa_used (...) <= C rhs
    double kappa_used = 0;
};

/// dL/dt by centered differences on the snapshots; kappa_used multiplies the
/// left-side dissipation terms (the hidden constant of the inequality).
inline LyapunovTrace lyapunov_inequality_trace(const CollisionAssembly& A, const DyadicPartition& p,
                                               const RunRecord& rec, double eta_low, double eta_high,
                                               double kappa_used = 0.0) {
    require(rec.t.size() >= 3, "lyapunov trace: need >= 3 snapshots");
    LyapunovTrace tr;
    tr.kappa = std::numeric_limits<double>::infinity();
    tr.kappa_used = kappa_used;
    const double vol = p.lattice.volume(), w = A.grid.weight;
    const Mat H = high_moment_weights(A.grid);
    for (int q = p.q_min; q <= p.q_max; ++q) {
        const Regime reg = q <= 0 ? Regime::low : Regime::high;
        const double eta = reg == Regime::low ? eta_low : eta_high;
        std::vector<double> L(rec.t.size());
        for (std::size_t n = 0; n < rec.t.size(); ++n) L[n] = lyapunov_audit(A, p, rec.f[n], q, reg, eta).L;
        for (std::size_t n = 1; n + 1 < rec.t.size(); ++n) {
            const auto e = lyapunov_audit(A, p, rec.f[n], q, reg, eta);
            TracePoint pt;
            pt.q = q;
            pt.t = rec.t[n];
            pt.L = L[n];
            pt.dLdt = (L[n + 1] - L[n - 1]) / (rec.t[n + 1] - rec.t[n - 1]);
            pt.rate_term = (reg == Regime::low ? std::ldexp(1.0, 2 * q) : 1.0) * L[n];
            pt.nu_micro = e.nu_micro;
            const LatticeField hb = dyadic_block(p, rec.h[n], q);
            const LatticeField fb = dyadic_block(p, rec.f[n], q);
            const CMat micro = fb.coeff - A.P.apply(fb.coeff);
            const double gm = std::abs(vol * w * hb.coeff.cwiseProduct(micro.conjugate()).sum().real());
            const CMat hm = H.transpose().cast<cplx>() * hb.coeff;
            const double mom = vol * hm.squaredNorm();
            pt.rhs = gm + (reg == Regime::low ? 1.0 : std::ldexp(1.0, -2 * q)) * mom;
            const double diss = pt.rate_term + pt.nu_micro;
            if (pt.rhs == 0.0 && diss > 0) tr.kappa = std::min(tr.kappa, -pt.dLdt / diss);
            const double lhs = pt.dLdt + kappa_used * diss;
            if (lhs > 0) tr.C_margin = pt.rhs > 0 ? std::max(tr.C_margin, lhs / pt.rhs) : std::numeric_limits<double>::infinity();
            tr.points.push_back(pt);
        }
    }
    return tr;
}

}  // namespace kboltz
