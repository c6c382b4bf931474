#include "kboltz/littlewood_paley.hpp"

#include <catch_amalgamated.hpp>

using namespace kboltz;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// k0 = 1/64, so integer n gives |k| = n / 64
const double box64 = 64.0 * 2.0 * pi;

LatticeField single_mode(const SpatialLattice& l, int n, cplx amp = 1.0) {
    auto u = zero_field(l, 1);
    u.coeff(0, l.mode_of({n, 0, 0})) = amp;
    u.coeff(0, l.mode_of({-n, 0, 0})) = std::conj(amp);
    return u;
}

double sum_phi(const DyadicPartition& p, double k) {
    double s = 0;
    for (int q = p.q_min; q <= p.q_max; ++q) s += phi(std::ldexp(k, -q));
    return s;
}

}  // namespace

TEST_CASE("profile and partition of unity") {
    CHECK(chi(0.5) == 1.0);
    CHECK(chi(1.4) == 0.0);
    CHECK(phi(0.7) == 0.0);
    CHECK(phi(2.7) == 0.0);
    CHECK(phi(1.4) == 1.0);
    for (double r = 0.0; r < 3.0; r += 0.01) {
        CHECK(chi(r) >= 0.0);
        CHECK(chi(r) <= 1.0);
        CHECK(chi(r + 0.01) <= chi(r));
    }
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    CHECK(p.q_max - p.q_min >= 6);
    CHECK_THAT(sum_phi(p, 1.0), WithinAbs(1.0, 1e-12));
    for (Eigen::Index m = 0; m < l.modes(); ++m)
        if (l.kabs[m] > 0) CHECK_THAT(sum_phi(p, l.kabs[m]), WithinAbs(1.0, 1e-12));

    const auto l3 = make_lattice(3, box64, 32);
    const auto p3 = build_partition(l3);
    for (Eigen::Index m = 0; m < l3.modes(); ++m)
        if (l3.kabs[m] > 0) CHECK_THAT(sum_phi(p3, l3.kabs[m]), WithinAbs(1.0, 1e-12));

    CHECK_THROWS_AS(build_partition(make_lattice(1, 2 * pi, 8)), ValidationError);
    CHECK_THROWS_AS(make_lattice(1, 2 * pi, 48), ValidationError);
    CHECK_THROWS_AS(make_lattice(4, 2 * pi, 16), ValidationError);
}

TEST_CASE("dyadic blocks") {
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    // |k| = 1/4 = 2^-2
    const auto u = single_mode(l, 16);
    const auto b = dyadic_block(p, u, -2);
    CHECK_THAT(std::abs(b.coeff(0, l.mode_of({16, 0, 0}))), WithinAbs(phi(1.0), 1e-15));
    CHECK_THROWS_AS(dyadic_block(p, u, p.q_max + 1), ValidationError);

    Rng rng(17);
    const auto r = random_field(l, 3, rng, 0.0, infinity);
    LatticeField sum = zero_field(l, 3);
    for (int q = p.q_min; q <= p.q_max; ++q) {
        const auto dq = dyadic_block(p, r, q);
        sum.coeff += dq.coeff;
        for (int j = p.q_min; j <= p.q_max; ++j)
            if (std::abs(j - q) >= 2) CHECK(dyadic_block(p, dq, j).norm() <= 1e-14 * r.norm());
    }
    CHECK((sum.coeff - r.coeff).norm() <= 1e-12 * r.coeff.norm());

    double blocks = 0;
    for (int q = p.q_min; q <= p.q_max; ++q) blocks += std::pow(dyadic_block(p, r, q).norm(), 2);
    const double total = r.norm() * r.norm();
    CHECK(blocks >= 0.5 * total);
    CHECK(blocks <= total * (1 + 1e-12));
}

TEST_CASE("Besov norms: trivial cases and geometric-sum bound") {
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    const auto z = zero_field(l, 1);
    for (double s : {-1.5, 0.0, 0.5, 1.5})
        for (double r : {1.0, 2.0, infinity}) CHECK(besov_norm(p, z, s, r) == 0.0);

    // |k| = 90/64 lies where phi = 1 at q = 0 and vanishes elsewhere
    const auto u = single_mode(l, 90, cplx(0.3, -0.4));
    const double base = besov_norm(p, u, 0.0, 1.0);
    CHECK_THAT(base, WithinRel(u.norm(), 1e-14));
    for (double s : {-1.5, 0.5, 1.5, 3.0}) CHECK_THAT(besov_norm(p, u, s, 1.0), WithinRel(base, 1e-14));

    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const auto f = random_field(l, 2, rng, 0.0, 1.0);
        const double lhs = besov_norm(p, f, 0.5, 1.0, Band::low);
        const double rhs = besov_norm(p, f, -1.5, infinity, Band::low);
        CHECK(lhs <= 4.0 / 3.0 * rhs * (1 + 1e-12));
    }
    // no shell reaches q >= -1 on a coarse long box
    const auto tiny = make_lattice(1, 1024 * 2 * pi, 64);
    CHECK_THROWS_AS(besov_norm(build_partition(tiny), zero_field(tiny, 1), 0.5, 1.0, Band::high), ValidationError);
}

TEST_CASE("frequency cutoff and norm equivalence") {
    const auto l = make_lattice(1, 16 * 2 * pi, 512);
    const auto p = build_partition(l);
    REQUIRE(p.q_min < -1);
    REQUIRE(p.q_max > 1);
    Rng rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const auto u = random_field(l, 2, rng, 0.0, infinity);
        LatticeField low = zero_field(l, 2);
        for (int q = p.q_min; q <= -1; ++q) low.coeff += dyadic_block(p, u, q).coeff;
        for (double s : {0.5, 1.5}) {
            const double a = besov_norm(p, low, s, 1.0);
            const double b = besov_norm(p, u, s, 1.0, Band::low);
            const double c = besov_norm(p, u, s - 0.75, 1.0, Band::low);
            CHECK(a <= 2.0 * b);
            CHECK(b <= c * (1 + 1e-12));
        }
        const double split = besov_norm(p, u, 0.5, 1.0, Band::low) + besov_norm(p, u, 1.5, 1.0, Band::high);
        const double inter = besov_norm(p, u, 0.5, 1.0) + besov_norm(p, u, 1.5, 1.0);
        CHECK(split / inter >= 0.5);
        CHECK(split / inter <= 4.0);
    }
}

TEST_CASE("low-frequency norms are box independent") {
    // compactly supported bump of radius 16 sampled on boxes L and 2L at equal spacing
    auto field = [](double box, int n) {
        const auto l = make_lattice(1, box, n);
        CMat values(1, n);
        for (int j = 0; j < n; ++j) {
            double x = box * j / n;
            if (x > box / 2) x -= box;
            const double t = x / 16.0;
            values(0, j) = std::abs(t) < 1 ? std::exp(-1.0 / (1.0 - t * t)) : 0.0;
        }
        return from_physical(l, values);
    };
    const auto a = field(box64, 1024), b = field(2 * box64, 2048);
    const auto pa = build_partition(a.lattice), pb = build_partition(b.lattice);
    for (double s : {0.0, 0.5, 1.0}) {
        const double na = besov_norm(pa, a, s, infinity, Band::low), nb = besov_norm(pb, b, s, infinity, Band::low);
        INFO("s = " << s << ": " << na << " vs " << nb);
        CHECK(std::abs(na - nb) <= 0.1 * nb);
    }
}

TEST_CASE("Chemin-Lerner norms") {
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    Rng rng(8);
    const auto u = random_field(l, 2, rng, 0.0, infinity);
    const std::vector<double> t{0.0, 0.5, 1.25, 2.0};
    const std::vector<LatticeField> constant(4, u);
    CHECK_THAT(chemin_lerner_norm(p, t, constant, 2.0, 0.5, 1.0),
               WithinRel(std::sqrt(2.0) * besov_norm(p, u, 0.5, 1.0), 1e-12));
    CHECK_THAT(chemin_lerner_norm(p, {0.0}, {u}, infinity, 0.5, 1.0), WithinRel(besov_norm(p, u, 0.5, 1.0), 1e-14));
    CHECK_THROWS_AS(chemin_lerner_norm(p, {}, {}, 2.0, 0.5, 1.0), ValidationError);

    std::vector<LatticeField> series;
    for (int i = 0; i < 4; ++i) series.push_back(random_field(l, 2, rng, 0.0, infinity));
    const double cl = chemin_lerner_norm(p, t, series, infinity, 0.5, 1.0);
    double outer = 0;
    for (const auto& s : series) outer = std::max(outer, besov_norm(p, s, 0.5, 1.0));
    CHECK(cl >= outer);

    // sqrt(nu) weight multiplies in velocity before the norms
    const Vec w = Vec::Constant(2, 4.0);
    CHECK_THAT(chemin_lerner_norm(p, t, constant, 2.0, 0.5, 1.0, Band::all, &w),
               WithinRel(2.0 * std::sqrt(2.0) * besov_norm(p, u, 0.5, 1.0), 1e-12));
}

TEST_CASE("dealiased product is the truncated convolution") {
    const auto l = make_lattice(1, 2 * pi, 16);
    auto f = zero_field(l, 1), g = zero_field(l, 1);
    f.coeff(0, l.mode_of({5, 0, 0})) = 1.0;
    g.coeff(0, l.mode_of({4, 0, 0})) = 1.0;
    // 5 + 4 = 9 lies outside the lattice and must not alias back to -7
    CHECK(dealiased_product(f, g).coeff.norm() <= 1e-14);
    g.coeff(0, l.mode_of({4, 0, 0})) = 0.0;
    g.coeff(0, l.mode_of({-2, 0, 0})) = 2.0;
    const auto h = dealiased_product(f, g);
    CHECK_THAT(std::abs(h.coeff(0, l.mode_of({3, 0, 0})) - cplx(2.0)), WithinAbs(0.0, 1e-14));
    CHECK_THAT(h.coeff.norm(), WithinAbs(2.0, 1e-14));

    Rng rng(3);
    const auto r = random_field(l, 1, rng, 0.0, infinity);
    const auto back = from_physical(l, to_physical(r));
    CHECK((back.coeff - r.coeff).norm() <= 1e-14 * r.coeff.norm());
}

TEST_CASE("Bony decomposition") {
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    Rng rng(21);
    const auto f = random_field(l, 1, rng, 0.0, infinity);
    const auto zero = zero_field(l, 1);
    const auto z = bony(p, f, zero);
    CHECK(z.T_fg.coeff.norm() == 0.0);
    CHECK(z.T_gf.coeff.norm() == 0.0);
    CHECK(z.R.coeff.norm() == 0.0);

    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_field(l, 1, rng, 0.0, infinity);
        const auto b = random_field(l, 1, rng, 0.0, infinity);
        const auto parts = bony(p, a, b);
        const CMat sum = parts.T_fg.coeff + parts.T_gf.coeff + parts.R.coeff;
        const auto ab = dealiased_product(a, b);
        CHECK((ab.coeff - sum).norm() * std::sqrt(l.volume()) <= 1e-12 * a.norm() * b.norm());
    }

    const auto lo = random_shell_field(p, 1, rng, p.q_min);
    const auto hi = random_shell_field(p, 1, rng, 0);
    const auto parts = bony(p, lo, hi);
    const double scale = lo.norm() * hi.norm() / std::sqrt(l.volume());
    CHECK(parts.T_gf.norm() <= 1e-12 * scale);
    CHECK(parts.R.norm() <= 1e-12 * scale);
    CHECK((parts.T_fg.coeff - dealiased_product(lo, hi).coeff).norm() * std::sqrt(l.volume()) <= 1e-12 * scale);
}

TEST_CASE("Bernstein ratios") {
    const auto l = make_lattice(1, box64, 256);
    const auto p = build_partition(l);
    CHECK_THAT(bernstein_check(single_mode(l, 16), -2).ratio, WithinAbs(1.0, 1e-14));
    const auto edge = bernstein_check(single_mode(l, 12), -2);
    CHECK_THAT(edge.ratio, WithinAbs(0.75, 1e-14));
    CHECK(edge.within);
    CHECK_THROWS_AS(bernstein_check(single_mode(l, 60), -2), ValidationError);
    CHECK_THROWS_AS(bernstein_check(zero_field(l, 1), -2), DegenerateInput);
    Rng rng(4);
    for (int q : {-5, -3, 0}) {
        for (int trial = 0; trial < 100; ++trial) {
            const auto u = random_shell_field(p, 2, rng, q);
            const auto r = bernstein_check(u, q);
            CHECK(r.within);
        }
    }
}

TEST_CASE("interpolation ratio") {
    // k0 = 1/512 resolves a pure-shell mode down to q = -6
    const auto l = make_lattice(1, 512 * 2 * pi, 8192);
    const auto p = build_partition(l);
    CHECK_THAT(interpolation_check(p, single_mode(l, 90), 0.5, 1.5, 0.3), WithinAbs(1.0, 1e-13));
    CHECK_THROWS_AS(interpolation_check(p, zero_field(l, 1), 0.5, 1.5, 0.3), DegenerateInput);
    CHECK_THROWS_AS(interpolation_check(p, single_mode(l, 90), 1.5, 0.5, 0.3), ValidationError);
    CHECK_THROWS_AS(interpolation_check(p, single_mode(l, 90), 0.5, 1.5, 1.0), ValidationError);

    // flat spectrum over 8 shells: one pure-shell mode (|k| in [4/3, 3/2] 2^q) per shell
    for (double sigma : {0.5, 1.0, 1.5}) {
        auto u = zero_field(l, 1);
        for (int q = -6; q <= 1; ++q) {
            const int n = int(std::lround(1.4 * 512 * std::ldexp(1.0, q)));
            u.coeff(0, l.mode_of({n, 0, 0})) = std::pow(2.0, -q * sigma);
        }
        for (double theta : {0.25, 0.5, 0.75}) {
            const double s = 0.5, st = 1.5;
            const double ratio = interpolation_check(p, u, s, st, theta);
            CHECK(std::isfinite(ratio));
            CHECK(ratio <= 4.0 / (theta * (1 - theta) * (st - s)));
        }
    }
}
