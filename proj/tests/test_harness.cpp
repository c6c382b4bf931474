#include "kboltz/harness.hpp"
#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>

using namespace kboltz;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace fs = std::filesystem;

namespace {

const CollisionAssembly& assembly() { return testing::assembly(8, 4.0); }

const LinearEngine& engine() {
    static const LinearEngine e(assembly());
    return e;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("kboltz_harness_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("config file: sections, comments and typed lookups") {
    const auto f = ConfigFile::parse(R"(
# leading comment
[run]
seed = 7        ; trailing comment
[sweep]
k = 0.25, 0.5 ,4
[simulate]
nonlinear = off
)");
    CHECK(f.integer("run.seed", 1) == 7);
    CHECK(f.numbers("sweep.k", {}) == std::vector<double>{0.25, 0.5, 4.0});
    CHECK_FALSE(f.flag("simulate.nonlinear", true));
    CHECK(f.number("missing.key", 2.5) == 2.5);

    const auto c = ExperimentConfig::from(f);
    CHECK(c.seed == 7);
    CHECK(c.sweep_k.size() == 3);
    CHECK_FALSE(c.sim_nonlinear);
    CHECK(c.nv == 8);
    CHECK(c.V == 4.0);
}

TEST_CASE("config file: malformed, duplicate and unknown entries are rejected") {
    CHECK_THROWS_AS(ConfigFile::parse("[run\nseed = 1"), ValidationError);
    CHECK_THROWS_AS(ConfigFile::parse("seed 1"), ValidationError);
    CHECK_THROWS_AS(ConfigFile::parse("= 1"), ValidationError);
    CHECK_THROWS_AS(ConfigFile::parse("[run]\nseed = 1\nseed = 2"), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[run]\nsede = 1")), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[run]\nseed = abc")), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[run]\nthreads = 1.5")), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[simulate]\nnonlinear = maybe")), ValidationError);
    CHECK_THROWS_AS(ConfigFile::load("/nonexistent/kboltz.cfg"), ValidationError);
}

TEST_CASE("experiment config: regularity pairs are validated") {
    auto with_pairs = [](const std::string& p) {
        return ExperimentConfig::from(ConfigFile::parse("[decay]\npairs = " + p));
    };
    CHECK(with_pairs("0:-1.5, 1.5:-1.5").decay_pairs.size() == 2);
    CHECK(with_pairs("0.2:0.1").decay_pairs[0].sigma0 == 0.1);
    CHECK_THROWS_AS(with_pairs("-1.5:-1.5"), ValidationError);  // sigma must exceed sigma0
    CHECK_THROWS_AS(with_pairs("1:0.5"), ValidationError);      // sigma0 < 1/2
    CHECK_THROWS_AS(with_pairs("0:-2"), ValidationError);       // sigma0 >= -3/2
    CHECK_THROWS_AS(with_pairs("0;-1"), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[trilinear]\nsnapshots = 2")), ValidationError);
    CHECK_THROWS_AS(ExperimentConfig::from(ConfigFile::parse("[velocity]\nnv = 7")), ValidationError);
}

TEST_CASE("experiment config: canonical json carries defaults and drives the hash") {
    ExperimentConfig a, b;
    const json j = a.to_json();
    CHECK(j["velocity"]["nv"] == 8);
    CHECK(j["decay"]["pairs"].size() == 2);
    CHECK(j["simulate"]["amplitude"] == 1e-3);
    CHECK(j["trilinear"]["snapshots"] == 3);
    CHECK(a.hash() == b.hash());
    b.out = "elsewhere";
    b.threads = 4;
    CHECK(a.hash() == b.hash());
    b.seed = 2;
    CHECK(a.hash() != b.hash());
    CHECK(hex(a.hash()).size() == 16);
    CHECK(a.cache_path().starts_with("out/assembly_nv8_V4"));
    a.cache = "/tmp/x.bin";
    CHECK(a.cache_path() == "/tmp/x.bin");
}

TEST_CASE("initial data: flat Besov spectrum at the critical index, real and reproducible") {
    const auto g = build_grid(4.0, 4);
    const auto l = make_lattice(3, 16 * pi, 32);
    const auto p = build_partition(l);
    Rng r1(3), r2(3);
    const auto f = synthesize_initial_data(l, g, -1.5, g.sqrt_mu, r1);
    const auto h = synthesize_initial_data(l, g, -1.5, g.sqrt_mu, r2);
    CHECK((f.coeff - h.coeff).norm() == 0.0);
    CHECK(reality_defect(f) <= 1e-14);
    CHECK(f.coeff.col(l.mode_of({0, 0, 0})).norm() == 0.0);
    CHECK(f.coeff.col(l.mode_of({16, 1, 0})).norm() == 0.0);

    // interior shells: annulus resolved and populated
    const auto s = shell_spectrum(p, f);
    std::vector<double> level;
    for (int q = -3; q <= 0; ++q) level.push_back(std::pow(2.0, -1.5 * q) * s.at(q));
    const double mean = std::accumulate(level.begin(), level.end(), 0.0) / double(level.size());
    for (double v : level) CHECK_THAT(v, WithinRel(mean, 0.10));

    Rng rng(1);
    CHECK_THROWS_AS(synthesize_initial_data(l, g, 0.5, g.sqrt_mu, rng), ValidationError);
    CHECK_THROWS_AS(synthesize_initial_data(l, g, -1.6, g.sqrt_mu, rng), ValidationError);
    CHECK_THROWS_AS(synthesize_initial_data(make_lattice(3, 2 * pi, 16), g, -1.5, g.sqrt_mu, rng), ValidationError);
}

TEST_CASE("decay experiment: fitted rates match the algebraic laws inside the window") {
    ExperimentConfig c;
    const double lambda1 = 0.092;
    const auto r = decay_experiment(engine(), c, lambda1);
    CHECK(r.window_valid);
    CHECK(r.T_min == 16.0 / lambda1);
    CHECK(r.T_end == r.T_max);
    CHECK(r.times.front() >= r.T_end / 10.0 - r.dt);
    CHECK(r.times.back() <= r.T_end + r.dt);
    REQUIRE(r.fits.size() == 2);
    for (const auto& f : r.fits) {
        INFO("sigma = " << f.sigma << ", slope " << f.slope << ", micro " << f.micro_slope);
        CHECK(f.reliable);
        CHECK(std::abs(f.slope - f.expected) <= f.tol);
        CHECK(std::abs(f.micro_slope - f.micro_expected) <= f.micro_tol);
        CHECK(f.pass);
    }
    CHECK(r.fits[0].expected == -0.75);
    CHECK(r.fits[0].tol == 0.12);
    CHECK(r.fits[1].expected == -1.5);
    CHECK(r.fits[1].micro_expected == -2.0);
    CHECK(r.fits[1].tol == 0.15);

    c.decay_box = 4;  // too few low shells
    CHECK_THROWS_AS(decay_experiment(engine(), c, lambda1), ValidationError);
    CHECK_THROWS_AS(decay_experiment(engine(), ExperimentConfig{}, 0.0), ValidationError);
}

TEST_CASE("decay experiment: horizon outside the window is reported, not hidden") {
    ExperimentConfig c;
    c.decay_nx = 16;
    c.decay_horizon = 500.0;  // T_end / 10 below 16 / lambda1
    const auto r = decay_experiment(engine(), c, 0.092);
    CHECK_FALSE(r.window_valid);
    for (const auto& f : r.fits) CHECK_FALSE(f.pass);
}

TEST_CASE("trilinear: zero data gives zero sides, ratios finite on a small ensemble") {
    const auto& A = assembly();
    const auto l = make_lattice(1, 16 * pi, 32);
    const auto p = build_partition(l);
    const auto z = zero_field(l, A.grid.size(), A.grid.weight);
    const std::vector<LatticeField> zs(3, z);
    const Vec zeta = high_moment_weights(A.grid).col(0);
    for (const auto& [lhs, rhs] : trilinear_sample(A, p, {0.0, 0.5, 1.0}, zs, zs, zs, zs, zeta)) {
        CHECK(lhs == 0.0);
        CHECK(rhs == 0.0);
    }
    CHECK_THROWS_AS(trilinear_sample(A, p, {0.0}, {z}, {z}, {z}, {z}, zeta), ValidationError);

    const auto forms = trilinear_forms(1);
    REQUIRE(forms.size() == 6);
    CHECK_THAT(forms[0].s1_used, WithinAbs(1.0 / 6.0, 1e-15));
    CHECK_THAT(forms[0].s2_used, WithinAbs(0.5, 1e-15));
    CHECK_THAT(forms[2].s1_used, WithinAbs(-0.5, 1e-15));

    const GammaOperator G(A.grid, {});
    Rng rng(5);
    const auto run = trilinear_constants(A, G, l, 2, 3, rng);
    for (const auto& e : run.entries) {
        CHECK(e.samples + e.skipped == 2);
        CHECK(std::isfinite(e.max_ratio));
        CHECK(e.max_ratio > 0.0);
    }
}

TEST_CASE("sweep checks: synthetic branches") {
    SpectralReport r;
    r.lambda1 = 0.1;
    for (const double k : {0.125, 0.25, 0.5}) {
        ModeFit m;
        m.k = k;
        m.low = true;
        m.full.rate = 0.3 * k * k;
        m.micro_ratio = 0.5 * k;
        r.modes.push_back(m);
    }
    for (const double rate : {0.1, 0.11}) {
        ModeFit m;
        m.k = 4;
        m.low = false;
        m.full.rate = rate;
        r.modes.push_back(m);
    }
    auto c = sweep_checks(r);
    CHECK(c.quadratic);
    CHECK(c.saturated);
    CHECK(c.positive);
    CHECK(c.micro_pass);
    CHECK_THAT(c.low_ratios[0], WithinAbs(4.0, 1e-12));
    r.modes.back().full.rate = 0.2;
    c = sweep_checks(r);
    CHECK_FALSE(c.saturated);
}

TEST_CASE("report: missing artifacts listed, non-finite csv rows flagged") {
    const auto empty = scratch_dir("empty");
    const auto r0 = build_report(empty);
    CHECK(r0.missing.size() == expected_artifacts().size());
    CHECK_FALSE(r0.all_pass);

    const auto d = scratch_dir("nan");
    ExperimentConfig c;
    for (const auto& name : expected_artifacts()) {
        json j = artifact_header(name, c, nullptr);
        j["result"] = json::object();
        write_json(d / (name + ".json"), j);
    }
    json t = artifact_header("trilinear", c, nullptr);
    t["result"] = {{"finite", true}, {"stable", true}};
    write_json(d / "trilinear.json", t);
    write_csv(d / "trilinear.csv", hex(c.hash()), {"a", "b"},
              {{1.0, 2.0}, {std::numeric_limits<double>::quiet_NaN(), 1.0}, {3.0, infinity}});
    const auto r = build_report(d);
    CHECK(r.missing.empty());
    const auto& tc = r.merged["checks"]["trilinear"];
    CHECK(tc["finite"] == true);
    CHECK(tc["valid"] == false);
    CHECK(tc["flagged_rows"] == json::array({2, 3}));
    CHECK_FALSE(r.all_pass);
    CHECK(r.summary.find("FAIL") != std::string::npos);
    CHECK(r.merged["trilinear"]["config_hash"] == hex(c.hash()));
    CHECK(r.merged["trilinear"]["schema_version"] == schema_version);
}

TEST_CASE("small data: amplitude is the sup over x of the velocity norm") {
    const auto& g = assembly().grid;
    const auto l = make_lattice(1, 16 * pi, 16);
    Rng a(8), b(8);
    const auto f = small_data(l, g, 1e-3, a), h = small_data(l, g, 1e-3, b);
    CHECK((f.coeff - h.coeff).norm() == 0.0);
    const CMat ph = to_physical(f);
    double sup = 0;
    for (Eigen::Index x = 0; x < ph.cols(); ++x) sup = std::max(sup, std::sqrt(g.weight) * ph.col(x).norm());
    CHECK_THAT(sup, WithinRel(1e-3, 1e-12));
    CHECK(reality_defect(f) <= 1e-14);
}
