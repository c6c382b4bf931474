#pragma once
// Per-mode linearized evolution d/dt f = -(i k.xi) f - L f, decay fits and
// the spectral sweep.

#include "kboltz/collision.hpp"

#include <limits>
#include <map>
#include <optional>

namespace kboltz {

/// Matrix-free generator f -> -(i k.xi) f - L f for one wave vector.
struct ModeOperator {
    const CollisionAssembly* assembly = nullptr;
    Eigen::Vector3d k = Eigen::Vector3d::Zero();
    Vec kxi;  ///< k . xi per node

    CVec apply(const CVec& f) const {
        CVec out = -(assembly->apply_L(f.matrix()).col(0));
        out -= cplx(0, 1) * kxi.cwiseProduct(f);
        return out;
    }
    CMat dense() const {
        CMat a = -assembly->L_matrix().cast<cplx>();
        a.diagonal() -= cplx(0, 1) * kxi.cast<cplx>();
        return a;
    }
};

inline ModeOperator assemble_mode(const CollisionAssembly& A, const Eigen::Vector3d& k) {
    require(k.allFinite(), "assemble_mode: non-finite wave vector");
    return {&A, k, A.grid.xi * k};
}

/// Orbits of the reflections xi2 -> -xi2, xi3 -> -xi3. Sector s has parity
/// bits (odd in xi2, odd in xi3) = (s >> 1, s & 1); element g = 2 r2 + r3.
struct ParitySectors {
    Eigen::Index size = 0;
    std::vector<std::array<int, 4>> orbit;

    static double character(int s, int g) {
        const int odd = ((s >> 1) & (g >> 1)) ^ (s & g & 1);
        return odd ? -1.0 : 1.0;
    }
    CVec restrict(const CVec& f, int s) const {
        CVec c(size);
        for (Eigen::Index r = 0; r < size; ++r) {
            cplx acc = 0;
            for (int g = 0; g < 4; ++g) acc += character(s, g) * f[orbit[r][g]];
            c[r] = 0.5 * acc;
        }
        return c;
    }
    void add_back(const CVec& c, int s, CVec& f) const {
        for (Eigen::Index r = 0; r < size; ++r)
            for (int g = 0; g < 4; ++g) f[orbit[r][g]] += 0.5 * character(s, g) * c[r];
    }
    /// Block of a reflection-invariant matrix on sector s.
    Mat reduce(const Mat& M, int s) const {
        Mat out(size, size);
        for (Eigen::Index r = 0; r < size; ++r)
            for (Eigen::Index c = 0; c < size; ++c) {
                double acc = 0;
                for (int g = 0; g < 4; ++g) acc += character(s, g) * M(orbit[r][0], orbit[c][g]);
                out(r, c) = acc;
            }
        return out;
    }
};

inline ParitySectors parity_sectors(const VelocityGrid& g) {
    ParitySectors p;
    const int h = g.nv / 2, n = g.nv - 1;
    for (int i = 0; i < g.nv; ++i)
        for (int j = 0; j < h; ++j)
            for (int k = 0; k < h; ++k)
                p.orbit.push_back({g.index(i, j, k), g.index(i, j, n - k), g.index(i, n - j, k), g.index(i, n - j, n - k)});
    p.size = Eigen::Index(p.orbit.size());
    return p;
}

/// Dense deflated L with its parity blocks, shared by all modes of a sweep.
class LinearEngine {
public:
    explicit LinearEngine(const CollisionAssembly& A)
        : A_(&A), L_(A.L_matrix()), sectors_(parity_sectors(A.grid)) {
        for (int s = 0; s < 4; ++s) blocks_[s] = sectors_.reduce(L_, s);
        xi1_.resize(sectors_.size);
        for (Eigen::Index r = 0; r < sectors_.size; ++r) xi1_[r] = A.grid.xi(sectors_.orbit[r][0], 0);
    }

    const CollisionAssembly& assembly() const { return *A_; }
    const VelocityGrid& grid() const { return A_->grid; }
    const Mat& L() const { return L_; }
    const ParitySectors& sectors() const { return sectors_; }
    const Mat& sector_L(int s) const { return blocks_[s]; }

    /// Largest step allowed for the explicit 4-stage scheme.
    double dt_limit(double kabs) const {
        return 1.5 / (A_->nu.maxCoeff() + kabs * grid().V * std::sqrt(3.0));
    }
    CMat sector_generator(int s, double k1) const {
        CMat a = -blocks_[s].cast<cplx>();
        a.diagonal() -= cplx(0, k1) * xi1_.cast<cplx>();
        return a;
    }

private:
    const CollisionAssembly* A_;
    Mat L_;
    ParitySectors sectors_;
    std::array<Mat, 4> blocks_;
    Vec xi1_;
};

/// One step of the classical 4-stage scheme for a linear system, as a matrix.
inline CMat rk4_step_matrix(const CMat& A, double h) {
    const Eigen::Index n = A.rows();
    const CMat I = CMat::Identity(n, n);
    CMat s = I + (h / 4.0) * A;
    s = I + (h / 3.0) * (A * s);
    s = I + (h / 2.0) * (A * s);
    s = I + h * (A * s);
    return s;
}

inline CMat matrix_power(CMat base, long m) {
    CMat out = CMat::Identity(base.rows(), base.cols());
    bool first = true;
    while (m > 0) {
        if (m & 1) {
            out = first ? base : CMat(out * base);
            first = false;
        }
        m >>= 1;
        if (m) base = base * base;
    }
    return out;
}

struct ModeTrajectory {
    Eigen::Vector3d k = Eigen::Vector3d::Zero();
    std::vector<double> t;
    std::vector<CVec> f;  ///< empty when states are not kept
    Vec norm, micro, macro;
    double dt = 0.0;  ///< largest step used
    long steps = 0;
};

struct EvolveOptions {
    bool keep_states = true;
    double dt_max = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Propagates c0 through the sample times with fixed steps per interval;
/// equal intervals share one propagator.
inline std::vector<CVec> propagate(const CMat& G, const CVec& c0, const std::vector<double>& times, double dt_lim,
                                   double& dt_used, long& steps) {
    std::vector<CVec> out{c0};
    std::map<std::pair<long, double>, CMat> cache;
    for (std::size_t n = 1; n < times.size(); ++n) {
        const double span = times[n] - times[n - 1];
        const long m = std::max<long>(1, long(std::ceil(span / dt_lim * (1 - 1e-12))));
        const double h = span / m;
        if (!(h > 1e-300)) throw NumericalError("evolve_mode: step size underflow");
        dt_used = std::max(dt_used, h);
        steps += m;
        // group intervals equal to rounding
        const double key = std::round(span * 1e9) / 1e9;
        auto it = cache.find({m, key});
        if (it == cache.end()) it = cache.emplace(std::pair{m, key}, matrix_power(rk4_step_matrix(G, h), m)).first;
        out.push_back(it->second * out.back());
    }
    return out;
}

}  // namespace detail

/// Classical 4-stage explicit integration, fixed dt subdividing each sample
/// interval under the stability rule. For k along xi1 the four parity sectors
/// evolve independently.
inline ModeTrajectory evolve_mode(const LinearEngine& E, const Eigen::Vector3d& k, const CVec& f0,
                                  const std::vector<double>& times, EvolveOptions opt = {}) {
    const auto& A = E.assembly();
    const auto& g = E.grid();
    require(f0.size() == g.size(), "evolve_mode: initial data does not match the grid");
    require(!times.empty() && times.front() == 0.0, "evolve_mode: times must start at 0");
    for (std::size_t n = 1; n < times.size(); ++n) require(times[n] > times[n - 1], "evolve_mode: times must increase");
    const double dt_lim = std::min(E.dt_limit(k.norm()), opt.dt_max);

    ModeTrajectory tr;
    tr.k = k;
    tr.t = times;
    const std::size_t ns = times.size();
    std::vector<CVec> states(ns, CVec::Zero(g.size()));
    if (k[1] == 0.0 && k[2] == 0.0) {
        for (int s = 0; s < 4; ++s) {
            const CVec c0 = E.sectors().restrict(f0, s);
            if (c0.norm() == 0.0) continue;
            const auto cs = detail::propagate(E.sector_generator(s, k[0]), c0, times, dt_lim, tr.dt, tr.steps);
            for (std::size_t n = 0; n < ns; ++n) E.sectors().add_back(cs[n], s, states[n]);
        }
    } else {
        CMat G = -E.L().cast<cplx>();
        G.diagonal() -= cplx(0, 1) * (g.xi * k).cast<cplx>();
        states = detail::propagate(G, f0, times, dt_lim, tr.dt, tr.steps);
    }
    tr.norm.resize(ns);
    tr.micro.resize(ns);
    tr.macro.resize(ns);
    const double sw = std::sqrt(g.weight);
    for (std::size_t n = 0; n < ns; ++n) {
        const CMat p = A.P.apply(states[n].matrix());
        tr.norm[n] = sw * states[n].norm();
        tr.macro[n] = sw * p.norm();
        tr.micro[n] = sw * (states[n] - p.col(0)).norm();
        if (!std::isfinite(tr.norm[n])) throw NumericalError("evolve_mode: non-finite state (instability)");
    }
    if (opt.keep_states) tr.f = std::move(states);
    return tr;
}

inline std::vector<double> uniform_times(double T, int n) {
    require(T > 0 && n >= 1, "uniform_times: need T > 0 and n >= 1");
    std::vector<double> t(n + 1);
    for (int i = 0; i <= n; ++i) t[i] = T * i / n;
    return t;
}

/// Residual of the microscopic equation
///   d/dt (I-P)f + i k.xi (I-P)f + L (I-P)f = -i k.xi P f + P(i k.xi f)
/// with centered time differences, relative to ||f||.
inline double micro_equation_residual(const ModeTrajectory& tr, const CollisionAssembly& A) {
    require(tr.f.size() >= 3, "micro_equation_residual: need >= 3 stored samples");
    const Vec kxi = A.grid.xi * tr.k;
    const cplx I(0, 1);
    double worst = 0.0;
    for (std::size_t n = 1; n + 1 < tr.f.size(); ++n) {
        const CVec& f = tr.f[n];
        if (f.norm() == 0.0) continue;
        auto micro = [&](const CVec& v) { return CVec(v - A.P.apply(v.matrix()).col(0)); };
        const CVec dm = (micro(tr.f[n + 1]) - micro(tr.f[n - 1])) / (tr.t[n + 1] - tr.t[n - 1]);
        const CVec m = micro(f);
        const CVec pf = f - m;
        CVec lhs = dm + I * kxi.cwiseProduct(m) + A.apply_L(m.matrix()).col(0);
        const CVec kf = I * kxi.cwiseProduct(f);
        const CVec rhs = -I * kxi.cwiseProduct(pf) + A.P.apply(kf.matrix()).col(0);
        worst = std::max(worst, (lhs - rhs).norm() / f.norm());
    }
    return worst;
}

enum class NormKind { full, micro, macro };

struct DecayFit {
    double rate = 0.0;
    double prefactor = 0.0;
    double r2 = 0.0;
    int samples = 0;
    double t_lo = 0.0, t_hi = 0.0;
    bool window_shrunk = false;  ///< set when samples at the rounding floor were dropped
};

inline const Vec& norms_of(const ModeTrajectory& tr, NormKind which) {
    return which == NormKind::full ? tr.norm : which == NormKind::micro ? tr.micro : tr.macro;
}

/// Least squares through (t, log norm) over [t_lo, t_hi]; rate = -slope.
inline DecayFit fit_decay_series(const std::vector<double>& t, const Vec& y, double t_lo, double t_hi,
                                 double floor = 0.0) {
    std::vector<double> xs, ys;
    DecayFit fit;
    for (std::size_t n = 0; n < t.size(); ++n) {
        if (t[n] < t_lo || t[n] > t_hi) continue;
        if (!(y[n] > floor)) {
            fit.window_shrunk = true;
            break;
        }
        xs.push_back(t[n]);
        ys.push_back(std::log(y[n]));
    }
    if (xs.size() < 3) throw NumericalError("fit_decay: fewer than 3 usable samples in the window (norm underflow)");
    const auto line = fit_line(xs, ys);
    fit.rate = -line.slope;
    fit.prefactor = std::exp(line.intercept);
    fit.r2 = line.r2;
    fit.samples = line.n;
    fit.t_lo = xs.front();
    fit.t_hi = xs.back();
    return fit;
}

inline DecayFit fit_decay(const ModeTrajectory& tr, double t_lo, double t_hi, NormKind which = NormKind::full) {
    const Vec& y = norms_of(tr, which);
    require(y.size() > 0, "fit_decay: empty trajectory");
    // below ~1e-13 of the initial size the norms are rounding noise
    return fit_decay_series(tr.t, y, t_lo, t_hi, 1e-13 * tr.norm[0]);
}

/// sqrt(mu) + xi1 sqrt(mu) + (|xi|^2-3) sqrt(mu) + xi1 xi2 sqrt(mu), unit norm.
inline CVec default_mode_data(const VelocityGrid& g) {
    Vec f(g.size());
    for (Eigen::Index n = 0; n < g.size(); ++n)
        f[n] = (1.0 + g.xi(n, 0) + (g.speed2[n] - 3.0) + g.xi(n, 0) * g.xi(n, 1)) * g.sqrt_mu[n];
    f /= g.norm(f);
    return f.cast<cplx>();
}

/// Smallest decay rate -max Re(eig) of the generator on each parity sector
/// for k along xi1 (dense eigensolve oracle).
inline std::array<double, 4> sector_spectral_gaps(const LinearEngine& E, double k1) {
    require(E.grid().nv <= 12, "spectrum oracle limited to N_v <= 12");
    std::array<double, 4> out{};
    for (int s = 0; s < 4; ++s) {
        Eigen::ComplexEigenSolver<CMat> es(E.sector_generator(s, k1), false);
        out[s] = -es.eigenvalues().real().maxCoeff();
    }
    return out;
}

// ------------------------------------------------------------ sweep

struct ModeFit {
    double k = 0.0;
    double t_end = 0.0;
    DecayFit full, micro;
    double micro_ratio = 0.0;   ///< max ||(I-P)f|| / ||f|| over the fit window
    double C1 = 0.0, C2 = 0.0;  ///< two-term bound constants (low branch only)
    double C_joint = 0.0;       ///< smallest common value of C1 = C2
    bool bound_valid = false;
    bool low = false;
};

struct SpectralReport {
    double lambda1 = 0.0;
    double lambda0 = 0.0;
    double k0 = 0.0;          ///< largest validated |k|
    double k0_formula = 0.0;  ///< sqrt(lambda0 / lambda1)
    double c_min = 0.0;       ///< min over k of rate / min(1, |k|^2)
    std::vector<ModeFit> modes;
};

struct SweepOptions {
    int samples = 200;
    double window_lo = 0.2;  ///< fit over [window_lo T_end, T_end]
    double horizon = 8.0;    ///< T_end = horizon / expected rate
    int max_passes = 8;
    double bound_limit = 10.0;
    double low_cut = 0.5;  ///< lambda1 regression uses |k| <= low_cut
};

/// Constants of ||(I-P)f|| <= C1 |k| e^{-lambda1 k^2 t / 2} ||f0|| + C2 e^{-lambda0 t} ||(I-P)f0||.
/// All constraints grow in both constants, so the minimal common value is
/// max_n m_n / (a_n + b_n); (C1, C2) then tightens C2 and C1 in turn.
inline void two_term_constants(const ModeTrajectory& tr, double lambda1, double lambda0, ModeFit& out) {
    const double k = tr.k.norm();
    const double f0 = tr.norm[0], m0 = tr.micro[0];
    std::vector<double> a, b, m;
    for (std::size_t n = 0; n < tr.t.size(); ++n) {
        a.push_back(k * std::exp(-0.5 * lambda1 * k * k * tr.t[n]) * f0);
        b.push_back(std::exp(-lambda0 * tr.t[n]) * m0);
        m.push_back(tr.micro[n]);
    }
    double z = 0.0;
    for (std::size_t n = 0; n < m.size(); ++n) z = std::max(z, m[n] / (a[n] + b[n]));
    double c2 = 0.0;
    for (std::size_t n = 0; n < m.size(); ++n)
        if (b[n] > 0) c2 = std::max(c2, (m[n] - a[n] * z) / b[n]);
    double c1 = 0.0;
    for (std::size_t n = 0; n < m.size(); ++n) c1 = std::max(c1, (m[n] - b[n] * c2) / a[n]);
    out.C_joint = z;
    out.C1 = c1;
    out.C2 = c2;
}

inline ModeTrajectory run_mode(const LinearEngine& E, double k, const CVec& f0, const SweepOptions& opt,
                               DecayFit& fit, double& t_end) {
    // first guess: diffusive below |k| = 1, then refine T_end from the fitted rate
    double expected = 0.1 * std::min(1.0, k * k);
    ModeTrajectory tr;
    for (int pass = 0; pass < opt.max_passes; ++pass) {
        t_end = opt.horizon / expected;
        tr = evolve_mode(E, {k, 0, 0}, f0, uniform_times(t_end, opt.samples), {false});
        try {
            fit = fit_decay(tr, opt.window_lo * t_end, t_end);
        } catch (const NumericalError&) {
            // the window sat below the rounding floor: shorten the horizon
            if (pass + 1 == opt.max_passes) throw;
            expected *= 8.0;
            continue;
        }
        if (!(fit.rate > 0)) throw NumericalError("mode_sweep: non-decaying mode at |k| = " + std::to_string(k));
        const double change = std::abs(fit.rate / expected - 1.0);
        expected = fit.rate;
        if (change < 0.2) break;
    }
    return tr;
}

inline SpectralReport mode_sweep(const LinearEngine& E, const std::vector<double>& k_list,
                                 std::optional<CVec> initial = std::nullopt, SweepOptions opt = {}) {
    int n_low = 0, n_high = 0;
    for (double k : k_list) {
        require(k > 0, "mode_sweep: |k| must be positive");
        n_low += k <= opt.low_cut;
        n_high += k >= 1.0;
    }
    require(n_low >= 3 && n_high >= 2, "mode_sweep: need >= 3 low (|k| <= 1/2) and >= 2 high (|k| >= 1) magnitudes");
    const CVec f0 = initial ? *initial : default_mode_data(E.grid());
    SpectralReport rep;
    rep.lambda0 = E.assembly().lambda0;
    std::vector<ModeTrajectory> trajs;
    for (double k : k_list) {
        ModeFit mf;
        mf.k = k;
        mf.low = k <= opt.low_cut;
        trajs.push_back(run_mode(E, k, f0, opt, mf.full, mf.t_end));
        const auto& tr = trajs.back();
        mf.micro = fit_decay(tr, opt.window_lo * mf.t_end, mf.t_end, NormKind::micro);
        for (std::size_t n = 0; n < tr.t.size(); ++n)
            if (tr.t[n] >= opt.window_lo * mf.t_end) mf.micro_ratio = std::max(mf.micro_ratio, tr.micro[n] / tr.norm[n]);
        rep.modes.push_back(mf);
    }
    double num = 0, den = 0;
    rep.c_min = std::numeric_limits<double>::infinity();
    for (const auto& m : rep.modes) {
        if (m.low) num += m.full.rate * m.k * m.k, den += std::pow(m.k, 4);
        rep.c_min = std::min(rep.c_min, m.full.rate / std::min(1.0, m.k * m.k));
    }
    rep.lambda1 = num / den;
    rep.k0_formula = std::sqrt(rep.lambda0 / rep.lambda1);
    for (std::size_t i = 0; i < rep.modes.size(); ++i) {
        auto& m = rep.modes[i];
        if (!m.low) continue;
        two_term_constants(trajs[i], rep.lambda1, rep.lambda0, m);
        m.bound_valid = m.C1 <= opt.bound_limit && m.C2 <= opt.bound_limit;
        if (m.bound_valid) rep.k0 = std::max(rep.k0, m.k);
    }
    return rep;
}

}  // namespace kboltz
