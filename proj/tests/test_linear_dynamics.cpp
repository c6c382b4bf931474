#include "kboltz/linear_dynamics.hpp"
#include "support.hpp"

#include <catch_amalgamated.hpp>

using namespace kboltz;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const LinearEngine& engine() {
    static const LinearEngine e(testing::assembly(8, 4.0));
    return e;
}

CVec random_cvec(Rng& rng, Eigen::Index n) {
    CVec f(n);
    for (Eigen::Index i = 0; i < n; ++i) f[i] = cplx(normal(rng), normal(rng));
    return f;
}

cplx inner(const VelocityGrid& g, const CVec& a, const CVec& b) { return g.weight * b.dot(a); }

}  // namespace

TEST_CASE("mode operator: transport is skew, collision dissipates") {
    const auto& A = testing::assembly(8, 4.0);
    const auto& g = A.grid;
    Rng rng(11);
    for (const Eigen::Vector3d k : {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0.3, -2, 0.7)}) {
        const auto op = assemble_mode(A, k);
        for (int rep = 0; rep < 20; ++rep) {
            CVec f = random_cvec(rng, g.size());
            f /= std::sqrt(g.weight) * f.norm();
            const cplx af = inner(g, op.apply(f), f);
            CHECK(af.real() <= A.tol_L);
            const double transport = g.weight * (g.xi * k).dot(f.cwiseAbs2());
            CHECK_THAT(af.imag(), WithinAbs(-transport, 1e-12));
        }
    }
    // k = 0 with the deflated operator: dissipation is exactly non-negative up to rounding
    const auto op0 = assemble_mode(A, Eigen::Vector3d::Zero());
    CVec f = random_cvec(rng, g.size());
    CHECK(inner(g, op0.apply(f), f).real() <= 1e-12 * inner(g, f, f).real());
}

TEST_CASE("mode operator: single node transport and dense form") {
    const auto& A = testing::assembly(8, 4.0);
    const auto& g = A.grid;
    const auto op = assemble_mode(A, {1, 0, 0});
    const int j = g.index(2, 5, 1);
    CVec e = CVec::Zero(g.size());
    e[j] = 1.0;
    const CVec lhs = op.apply(e);
    CVec rhs = -A.apply_L(Vec::Unit(g.size(), j)).cast<cplx>();
    rhs[j] -= cplx(0, g.xi(j, 0));
    CHECK((lhs - rhs).norm() <= 1e-13 * rhs.norm());

    Rng rng(3);
    const CVec f = random_cvec(rng, g.size());
    const auto op2 = assemble_mode(A, {0.5, 0.25, -1});
    CHECK((op2.dense() * f - op2.apply(f)).norm() <= 1e-12 * f.norm() * A.nu.maxCoeff());
    CHECK_THROWS_AS(assemble_mode(A, {std::nan(""), 0, 0}), ValidationError);
}

TEST_CASE("parity sectors reduce the generator exactly") {
    const auto& E = engine();
    const auto& g = E.grid();
    const auto& S = E.sectors();
    CHECK(S.size * 4 == g.size());
    Rng rng(5);
    const CVec f = random_cvec(rng, g.size());
    CVec back = CVec::Zero(g.size());
    for (int s = 0; s < 4; ++s) S.add_back(S.restrict(f, s), s, back);
    CHECK((back - f).norm() <= 1e-13 * f.norm());

    const double k1 = 0.75;
    const auto op = assemble_mode(E.assembly(), {k1, 0, 0});
    const CVec af = op.apply(f);
    CVec assembled = CVec::Zero(g.size());
    for (int s = 0; s < 4; ++s) S.add_back(E.sector_generator(s, k1) * S.restrict(f, s), s, assembled);
    CHECK((assembled - af).norm() <= 1e-12 * af.norm());
}

TEST_CASE("4-stage propagator matches explicit stages") {
    const auto& E = engine();
    const auto op = assemble_mode(E.assembly(), {2, 0, 0});
    Rng rng(9);
    const CVec f = random_cvec(rng, E.grid().size());
    const double h = 0.9 * E.dt_limit(2.0);
    const CVec k1 = op.apply(f);
    const CVec k2 = op.apply(f + 0.5 * h * k1);
    const CVec k3 = op.apply(f + 0.5 * h * k2);
    const CVec k4 = op.apply(f + h * k3);
    const CVec step = f + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    const CMat S = rk4_step_matrix(op.dense(), h);
    CHECK((S * f - step).norm() <= 1e-12 * f.norm());
    CMat S5 = S * S * S * S * S;
    CHECK((matrix_power(S, 5) - S5).norm() <= 1e-12 * S5.norm());
    CHECK((matrix_power(S, 0) - CMat::Identity(S.rows(), S.cols())).norm() == 0.0);
}

TEST_CASE("evolve_mode at k = 0: null space and microscopic decay") {
    const auto& E = engine();
    const auto& A = E.assembly();
    const auto& g = E.grid();
    const auto times = uniform_times(5.0, 50);

    const CVec root = g.sqrt_mu.cast<cplx>();
    const auto tr = evolve_mode(E, Eigen::Vector3d::Zero(), root, times);
    for (std::size_t n = 0; n < times.size(); ++n)
        CHECK((tr.f[n] - root).norm() <= (1e-9 + A.tol_L * times[n]) * root.norm());

    // microscopic data: rate bounded below by lambda0 * min nu, and by the
    // smallest eigenvalue of L on the microscopic subspace
    Rng rng(21);
    Vec m = A.P.micro(random_vector(rng, g.size()));
    const auto tm = evolve_mode(E, Eigen::Vector3d::Zero(), m.cast<cplx>(), uniform_times(2.0, 40));
    const auto fit = fit_decay(tm, 0.0, 2.0);
    const Mat Qm = Mat::Identity(g.size(), g.size()) - A.P.matrix();
    Eigen::SelfAdjointEigenSolver<Mat> es(Qm * E.L() * Qm);
    const Vec ev = es.eigenvalues();
    double gap = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < ev.size(); ++i)
        if (ev[i] > 1e-8) gap = std::min(gap, ev[i]);
    INFO("fitted " << fit.rate << " micro gap " << gap << " lambda0 nu_min " << A.lambda0 * A.nu.minCoeff());
    CHECK(fit.rate >= 0.9 * A.lambda0 * A.nu.minCoeff());
    CHECK(fit.rate >= gap * (1 - 1e-6));
    for (std::size_t n = 0; n < tm.t.size(); ++n) {
        CHECK(tm.norm[n] <= tm.norm[0] * std::exp(-gap * tm.t[n]) * (1 + 1e-9));
        CHECK(tm.macro[n] <= (1e-12 + A.tol_L * tm.t[n]) * tm.norm[0]);
    }
}

TEST_CASE("evolve_mode: norms never increase") {
    const auto& E = engine();
    Rng rng(31);
    for (double k : {0.0, 0.125, 1.0, 8.0}) {
        const CVec f = random_cvec(rng, E.grid().size());
        const auto tr = evolve_mode(E, {k, 0, 0}, f, uniform_times(3.0, 60), {false});
        CHECK(tr.dt <= E.dt_limit(k));
        CHECK(tr.f.empty());
        const double per_sample = double(tr.steps) / 60;
        for (int n = 1; n <= 60; ++n) CHECK(tr.norm[n] <= tr.norm[n - 1] * (1 + 1e-9 * per_sample));
    }
}

TEST_CASE("evolve_mode: off-axis wave vectors follow the cubic symmetry") {
    const auto& E = engine();
    const auto& g = E.grid();
    Rng rng(41);
    const CVec f = random_cvec(rng, g.size());
    CVec fp(g.size());
    for (int i = 0; i < g.nv; ++i)
        for (int j = 0; j < g.nv; ++j)
            for (int k = 0; k < g.nv; ++k) fp[g.index(k, j, i)] = f[g.index(i, j, k)];
    const auto times = uniform_times(1.0, 10);
    const auto a = evolve_mode(E, {0.6, 0, 0}, f, times);
    const auto b = evolve_mode(E, {0, 0, 0.6}, fp, times);
    for (std::size_t n = 0; n < times.size(); ++n) {
        CHECK_THAT(b.norm[n], WithinRel(a.norm[n], 1e-10));
        CHECK_THAT(b.micro[n], WithinRel(a.micro[n], 1e-9));
    }
}

TEST_CASE("evolve_mode: input validation") {
    const auto& E = engine();
    const CVec f = E.grid().sqrt_mu.cast<cplx>();
    CHECK_THROWS_AS(evolve_mode(E, {1, 0, 0}, f, {0.5, 1.0}), ValidationError);
    CHECK_THROWS_AS(evolve_mode(E, {1, 0, 0}, f, {0.0, 1.0, 1.0}), ValidationError);
    CHECK_THROWS_AS(evolve_mode(E, {1, 0, 0}, CVec::Ones(3), {0.0, 1.0}), ValidationError);
}

TEST_CASE("microscopic equation residual") {
    const auto& E = engine();
    const auto& A = E.assembly();
    const CVec f0 = default_mode_data(E.grid());

    ModeTrajectory two = evolve_mode(E, {0.5, 0, 0}, f0, {0.0, 0.1});
    CHECK_THROWS_AS(micro_equation_residual(two, A), ValidationError);

    ModeTrajectory zero = evolve_mode(E, {0.5, 0, 0}, CVec::Zero(E.grid().size()), uniform_times(1, 4));
    CHECK(micro_equation_residual(zero, A) == 0.0);

    // macroscopic data at k = 0 stays put: both sides vanish
    const CVec macro = A.P.apply(f0).col(0);
    const auto still = evolve_mode(E, Eigen::Vector3d::Zero(), macro, uniform_times(1, 10));
    CHECK(micro_equation_residual(still, A) <= 1e-12 + A.tol_L);

    // centered differences: second order in the sample spacing
    double prev = 0;
    for (int n : {40, 80, 160}) {
        const auto tr = evolve_mode(E, {0.5, 0, 0}, f0, uniform_times(0.4, n));
        const double r = micro_equation_residual(tr, A);
        INFO("samples " << n << " residual " << r);
        if (prev > 0) CHECK(prev / r >= 3.0);
        prev = r;
    }
}

TEST_CASE("fit_decay on synthetic and underflowing series") {
    std::vector<double> t;
    Vec y(101);
    for (int n = 0; n <= 100; ++n) {
        t.push_back(0.1 * n);
        y[n] = 2.5 * std::exp(-0.3 * t.back());
    }
    const auto fit = fit_decay_series(t, y, 0.0, 10.0);
    CHECK_THAT(fit.rate, WithinAbs(0.3, 1e-10));
    CHECK_THAT(fit.prefactor, WithinRel(2.5, 1e-10));
    CHECK(!fit.window_shrunk);

    Vec z = y;
    for (int n = 60; n <= 100; ++n) z[n] = 0.0;
    const auto shrunk = fit_decay_series(t, z, 2.0, 10.0);
    CHECK(shrunk.window_shrunk);
    CHECK_THAT(shrunk.t_hi, WithinAbs(5.9, 1e-12));
    CHECK_THAT(shrunk.rate, WithinAbs(0.3, 1e-10));
    for (int n = 2; n <= 100; ++n) z[n] = 0.0;
    CHECK_THROWS_AS(fit_decay_series(t, z, 0.0, 10.0), NumericalError);
}

TEST_CASE("mode sweep: diffusive branch, two-term bound and spectral oracle") {
    const auto& E = engine();
    const std::vector<double> ks{0.125, 0.25, 0.5, 4.0, 8.0};
    const auto rep = mode_sweep(E, ks);
    REQUIRE(rep.modes.size() == ks.size());
    const auto& m = rep.modes;
    for (const auto& f : m) INFO("k " << f.k << " rate " << f.full.rate << " r2 " << f.full.r2);

    // quadratic scaling on the low branch
    for (int i = 0; i < 2; ++i) {
        const double ratio = m[i + 1].full.rate / m[i].full.rate;
        CHECK(ratio >= 3.0);
        CHECK(ratio <= 5.0);
    }
    CHECK_THAT(m[1].full.rate, WithinRel(m[2].full.rate / 4, 0.25));

    CHECK(rep.lambda1 > 0);
    CHECK(rep.k0 > 0);
    CHECK(rep.c_min > 0);
    CHECK(rep.k0_formula == std::sqrt(rep.lambda0 / rep.lambda1));
    CHECK(m[0].micro_ratio <= 10 * m[0].k);
    CHECK(m[0].C1 <= 10);
    CHECK(m[0].C2 <= 10);
    CHECK(m[0].bound_valid);

    // every fit tracks the slowest eigenvalue of the even-even sector, which
    // carries the dominant part of the default data
    for (const auto& f : m) {
        const auto gaps = sector_spectral_gaps(E, f.k);
        INFO("k " << f.k << " fitted " << f.full.rate << " gap " << gaps[0]);
        CHECK_THAT(f.full.rate, WithinRel(gaps[0], 0.1));
    }
}

TEST_CASE("spectral gap levels off once transport dominates collisions") {
    // On this kernel (nu(0) about 10) the gap still grows between |k| = 4 and 8
    // and saturates only for |k| of order 16.
    const auto& E = engine();
    const double g4 = sector_spectral_gaps(E, 4.0)[0], g8 = sector_spectral_gaps(E, 8.0)[0];
    const double g16 = sector_spectral_gaps(E, 16.0)[0], g32 = sector_spectral_gaps(E, 32.0)[0];
    INFO("gaps " << g4 << " " << g8 << " " << g16 << " " << g32);
    CHECK(g8 / g4 > 2.0);
    CHECK_THAT(g16, WithinRel(g32, 0.3));
}

TEST_CASE("mode sweep: coverage requirement") {
    const auto& E = engine();
    CHECK_THROWS_AS(mode_sweep(E, {0.125, 0.25, 4.0, 8.0}), ValidationError);
    CHECK_THROWS_AS(mode_sweep(E, {0.125, 0.25, 0.5, 8.0}), ValidationError);
    CHECK_THROWS_AS(mode_sweep(E, {0.0, 0.25, 0.5, 4.0, 8.0}), ValidationError);
}
