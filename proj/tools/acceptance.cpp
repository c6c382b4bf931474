// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
//
//   kboltz_acceptance [--cache-dir DIR] [--only N]...

#include "kboltz/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>

using namespace kboltz;

namespace {

std::string cache_dir = KBOLTZ_CACHE_DIR;

const CollisionAssembly& assembly(int nv, double V) {
    static std::map<std::pair<int, double>, CollisionAssembly> pool;
    auto it = pool.find({nv, V});
    if (it == pool.end()) {
        const std::string path = cache_dir + "/K_nv" + std::to_string(nv) + "_V" + std::to_string(int(V)) + "_g100_w8x8.bin";
        it = pool.emplace(std::pair{nv, V}, load_or_assemble(path, build_grid(V, nv), {})).first;
    }
    return it->second;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

class Clock {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

SpectralReport sweep_at(int nv, double V) {
    const LinearEngine E(assembly(nv, V));
    return mode_sweep(E, {0.125, 0.25, 0.5, 4.0, 8.0});
}

Verdict diffusive_branch() {
    Clock clk;
    const auto r = sweep_at(12, 6.0);
    const double t = clk.seconds();
    const auto c = sweep_checks(r);
    std::string ratios;
    for (double x : c.low_ratios) ratios += fmt("%.3f ", x);
    return {c.quadratic && c.saturated && c.positive && t < 300.0,
            fmt("low-branch ratios %sin [3, 5]: %s; high-branch change %.1f%% (<= 30%%): %s; lambda1 = %.4f; %.0f s (< 300)",
                ratios.c_str(), c.quadratic ? "yes" : "no", 100 * c.high_change, c.saturated ? "yes" : "no", r.lambda1,
                t)};
}

Verdict microscopic_decay() {
    Clock clk;
    const auto r = sweep_at(12, 6.0);
    const double t = clk.seconds();
    const auto c = sweep_checks(r);
    return {c.micro_pass && t < 120.0,
            fmt("|k| = 1/8: micro ratio %.4f (<= %.4f), C1 = %.3f, C2 = %.3f (<= 10); %.0f s (< 120)", c.micro_ratio,
                c.micro_limit, c.C1, c.C2, t)};
}

Verdict decay_rates() {
    Clock clk;
    const LinearEngine E(assembly(8, 4.0));
    const double lambda1 = mode_sweep(E, {0.125, 0.25, 0.5, 4.0, 8.0}).lambda1;
    ExperimentConfig c;
    const auto r = decay_experiment(E, c, lambda1);
    const double t = clk.seconds();
    bool pass = r.window_valid && t < 600.0;
    std::string d = fmt("window [%.0f, %.0f] in [%.0f, %.0f]; ", r.T_end / 10, r.T_end, r.T_min, r.T_max);
    for (const auto& f : r.fits) {
        pass = pass && f.pass;
        d += fmt("sigma %.1f: %.3f (%.2f +- %.2f)", f.sigma, f.slope, f.expected, f.tol);
        if (f.sigma == 0.0) d += fmt(", micro %.3f (%.2f +- %.2f)", f.micro_slope, f.micro_expected, f.micro_tol);
        d += fmt(", R2 %.4f; ", std::min(f.r2, f.micro_r2));
    }
    return {pass, d + fmt("%.0f s (< 600)", t)};
}

Verdict coercivity() {
    const double a = estimate_lambda0(assembly(12, 6.0)), b = estimate_lambda0(assembly(16, 8.0));
    const double var = std::abs(a - b) / std::min(a, b);
    return {a > 0.05 && b > 0.05 && var <= 0.20,
            fmt("lambda0 (12, 6) = %.4f, (16, 8) = %.4f (> 0.05); variation %.1f%% (<= 20%%)", a, b, 100 * var)};
}

Verdict structural_identities() {
    Clock clk;
    Rng rng(11);
    bool pass = true;
    std::string d;

    // projector on the (12, 6) grid
    const auto& A = assembly(12, 6.0);
    const auto& g = A.grid;
    double idem = 0, adj = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Vec f(g.size()), u(g.size());
        for (Eigen::Index n = 0; n < g.size(); ++n) f[n] = normal(rng) * g.sqrt_mu[n], u[n] = normal(rng) * g.sqrt_mu[n];
        const Vec pf = project_P(A.P, f);
        idem = std::max(idem, g.norm(project_P(A.P, pf) - pf) / g.norm(f));
        adj = std::max(adj, std::abs(g.dot(pf, u) - g.dot(f, project_P(A.P, u))) / (g.norm(f) * g.norm(u)));
    }
    pass = pass && idem <= 1e-12 && adj <= 1e-12;
    d += fmt("P idempotent %.1e, self-adjoint %.1e; ", idem, adj);

    // null-space residual under refinement at fixed V
    const double tc = assembly(8, 6.0).tol_L, tf = A.tol_L;
    pass = pass && tf < tc;
    d += fmt("tol_L %.3g -> %.3g; ", tc, tf);

    // quadratic term against the invariants
    const GammaOperator G(g, {});
    RowMat F(g.size(), 4), H(g.size(), 4);
    for (Eigen::Index n = 0; n < g.size(); ++n)
        for (int c = 0; c < 4; ++c) F(n, c) = normal(rng) * g.sqrt_mu[n], H(n, c) = normal(rng) * g.sqrt_mu[n];
    const RowMat out = G.apply(F, H, true);
    const double inv = (moment_weights(g).transpose() * out).norm() / (out.norm() * std::sqrt(g.weight));
    pass = pass && inv <= 1e-12;
    d += fmt("Gamma invariants %.1e; ", inv);

    // frequency side
    const auto l = make_lattice(1, 2 * pi * 64, 256);
    const auto p = build_partition(l);
    double unity = 0;
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        if (l.kabs[m] == 0) continue;
        double s = 0;
        for (int q = p.q_min; q <= p.q_max; ++q) s += phi(std::ldexp(l.kabs[m], -q));
        unity = std::max(unity, std::abs(s - 1.0));
    }
    double bony_err = 0;
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_field(l, 1, rng, 0.0, infinity), b = random_field(l, 1, rng, 0.0, infinity);
        const auto parts = bony(p, a, b);
        const CMat sum = parts.T_fg.coeff + parts.T_gf.coeff + parts.R.coeff;
        bony_err = std::max(bony_err, (dealiased_product(a, b).coeff - sum).norm() * std::sqrt(l.volume()) /
                                          (a.norm() * b.norm()));
    }
    double bmin = infinity, bmax = 0;
    for (int q = p.q_min; q <= p.q_max - 1; ++q)
        for (int trial = 0; trial < 100; ++trial) {
            const auto r = bernstein_check(random_shell_field(p, 2, rng, q), q);
            bmin = std::min(bmin, r.ratio);
            bmax = std::max(bmax, r.ratio);
        }
    pass = pass && unity <= 1e-12 && bony_err <= 1e-12 && bmin >= 0.75 && bmax <= 8.0 / 3.0;
    d += fmt("partition of unity %.1e; Bony %.1e; Bernstein [%.3f, %.3f] in [0.75, 2.667]; ", unity, bony_err, bmin,
             bmax);
    const double t = clk.seconds();
    return {pass && t < 60.0, d + fmt("%.0f s (< 60)", t)};
}

Verdict hypocoercivity() {
    const LinearEngine E(assembly(8, 4.0));
    const auto r = audit_experiment(E, ExperimentConfig{});
    double lo = infinity, hi = 0, dis = infinity;
    for (const auto& s : r.shells) lo = std::min(lo, s.ratio_min), hi = std::max(hi, s.ratio_max), dis = std::min(dis, s.dissipation);
    return {r.equivalence && r.dissipation && r.inequality,
            fmt("ratios [%.3f, %.3f] in [0.25, 4]; min dissipation constant %.3g (> 0); linear trace kappa %.4f at dt, "
                "%.4f at dt/2 (> 0, within 5%%)",
                lo, hi, dis, r.kappa_coarse, r.kappa_fine)};
}

Verdict nonlinear_boundedness() {
    Clock clk;
    const auto& A = assembly(8, 4.0);
    const LinearEngine E(A);
    const ExperimentConfig c;
    const auto l = make_lattice(1, 2 * pi * c.sim_box, c.sim_nx);
    Rng rng(c.seed);
    const auto p = build_partition(l);
    const double eta_lo = calibrate_eta(A, p, Regime::low, rng, c.audit_fields).eta;
    const double eta_hi = calibrate_eta(A, p, Regime::high, rng, c.audit_fields).eta;
    const GammaOperator G(A.grid, {});
    const auto r = simulate_experiment(E, &G, c, eta_lo, eta_hi);
    const double t = clk.seconds();
    return {r.bounded && r.conserved && t < 900.0,
            fmt("(E + D) / initial = %.3f (<= 20); mean drift / (tol_L t) = %.2e (<= 1); reality %.1e, min F %.3g; %.0f s "
                "(< 900)",
                r.ratio, r.drift_bound_ratio, r.reality, r.min_F, t)};
}

Verdict trilinear_bounds() {
    const auto& A = assembly(8, 4.0);
    const GammaOperator G(A.grid, {});
    const auto r = trilinear_experiment(A, G, ExperimentConfig{});
    std::string d;
    for (std::size_t e = 0; e < r.change.size(); ++e) {
        const auto& a = r.coarse.entries[e];
        d += fmt("%s(%.1f, %.1f) %.3g -> %.3g; ", a.form.c_str(), a.s1, a.s2, a.max_ratio, r.fine.entries[e].max_ratio);
    }
    double worst = 0;
    for (double ch : r.change) worst = std::max({worst, ch, 1.0 / ch});
    return {r.finite && r.stable, d + fmt("worst change %.2fx (< 2)", worst)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance run"};
    std::vector<int> only;
    app.add_option("--cache-dir", cache_dir, "directory of assembly caches");
    app.add_option("--only", only, "criteria to run")->check(CLI::Range(1, 8));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"linear diffusive branch", diffusive_branch},
        {"enhanced microscopic decay", microscopic_decay},
        {"decay rates", decay_rates},
        {"coercivity", coercivity},
        {"structural identities", structural_identities},
        {"hypocoercivity audits", hypocoercivity},
        {"nonlinear small-data boundedness", nonlinear_boundedness},
        {"trilinear constants", trilinear_bounds}};
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!only.empty() && std::find(only.begin(), only.end(), int(i + 1)) == only.end()) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failed += !v.pass;
        std::cout << "criterion " << i + 1 << " " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
                  << v.detail << std::endl;
    }
    return failed ? 1 : 0;
}
