#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

using namespace kboltz;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("hemisphere rule integrates |cos| moments") {
    const auto r = sphere_rule({});
    CHECK(r.size() == 32);
    CHECK_THAT(r.weight.sum(), WithinRel(4 * pi, 1e-12));
    CHECK_THAT(r.weight.dot(r.cos_theta), WithinRel(2 * pi, 1e-12));
    CHECK_THAT(r.weight.dot(r.cos_theta.array().cube().matrix()), WithinRel(pi, 1e-12));
}

TEST_CASE("kernel parameter validation") {
    CHECK_THROWS_AS((KernelParams{1.5, 8, 8}.validate()), ValidationError);
    CHECK_THROWS_AS((KernelParams{1.0, 7, 8}.validate()), ValidationError);
    CHECK_THROWS_AS((KernelParams{1.0, 2, 2}.validate()), ValidationError);
    CHECK_NOTHROW(KernelParams{0.5, 4, 4}.validate());
}

TEST_CASE("collision frequency against closed forms and a 2D quadrature oracle") {
    struct Row {
        double s, g1, g05;
    };
    // gamma = 1 from 2 pi E|v - Z|; gamma = 1/2 from an independent adaptive 2D quadrature
    const Row rows[] = {{0.0, 10.026513098524003, 7.748854129410257},
                        {1.0, 11.619622974855824, 8.349909008579516},
                        {2.0, 15.67171728901516, 9.753529006860328},
                        {5.0, 32.67256354871884, 14.262061293459164}};
    for (const auto& r : rows) {
        const Eigen::Vector3d v(r.s / std::sqrt(3.0), -r.s / std::sqrt(3.0), r.s / std::sqrt(3.0));
        CHECK_THAT(collision_frequency_at({1.0, 8, 8}, v), WithinRel(r.g1, 1e-10));
        CHECK_THAT(collision_frequency_at({0.5, 8, 8}, v), WithinRel(r.g05, 1e-10));
        CHECK_THAT(collision_frequency_at({0.0, 8, 8}, v), WithinRel(2 * pi, 1e-12));
    }
    CHECK_THAT(collision_frequency_at({}, Eigen::Vector3d::Zero()), WithinRel(4 * std::sqrt(2 * pi), 1e-12));
}

TEST_CASE("collision frequency grows along axis rays") {
    const auto g = build_grid(6.0, 12);
    const Vec nu = collision_frequency(g, {});
    for (int i = 6; i + 1 < 12; ++i) CHECK(nu[g.index(i + 1, 6, 6)] > nu[g.index(i, 6, 6)]);
    const auto& A = testing::assembly(8, 4.0);
    CHECK(A.nu_c1 > 0);
    CHECK(A.nu_c2 / A.nu_c1 < 2.0);
}

TEST_CASE("assembled operator: symmetry, null space, coercivity") {
    const auto& A = testing::assembly(8, 4.0);
    const auto& g = A.grid;
    INFO("tol_L = " << A.tol_L << ", raw asymmetry = " << A.sym_residual << ", lambda0 = " << A.lambda0);
    CHECK((A.K - A.K.transpose()).norm() == 0.0);
    CHECK(A.lambda0 > 0.05);
    CHECK_THAT(A.lambda0, WithinRel(lambda0_dense(A), 1e-8));

    const auto basis = invariant_basis(g);
    for (int i = 0; i < 5; ++i) {
        const Vec e = basis.raw.col(i);
        CHECK(A.apply_L(e).norm() <= 1e-10 * A.nu.maxCoeff() * e.norm());
        Vec raw = -A.K * e;
        raw += A.nu.cwiseProduct(e);
        CHECK(raw.norm() <= A.tol_L * e.norm() * (1 + 1e-12));
    }

    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const Vec f = random_vector(rng, g.size());
        const Vec m = A.P.micro(f);
        const double lhs = g.dot(A.apply_L(f), f);
        const double nu_micro = g.dot(A.nu.cwiseProduct(m), m);
        const double slack = A.tol_L * g.dot(f, f);
        CHECK(lhs >= -slack);
        CHECK(lhs >= A.lambda0 * nu_micro - slack);
        CHECK(lhs >= A.lambda0 * nu_micro * (1 - 1e-9));
    }
}

TEST_CASE("operator is self-adjoint and bounded relative to nu") {
    const auto& A = testing::assembly(8, 4.0);
    const Mat L = A.L_matrix();
    CHECK((L - L.transpose()).norm() <= 1e-12 * L.norm());
    Eigen::SelfAdjointEigenSolver<Mat> es(A.K);
    const double cK = es.eigenvalues().cwiseAbs().maxCoeff();
    CHECK(std::isfinite(cK));
    CHECK(cK < A.nu.maxCoeff());
}

TEST_CASE("grid refinement: K bound, lambda0 and L on a smooth function") {
    const auto& a = testing::assembly(12, 6.0);
    const auto& b = testing::assembly(16, 8.0);
    INFO("lambda0 " << a.lambda0 << " vs " << b.lambda0 << "; tol_L " << a.tol_L << " vs " << b.tol_L);
    CHECK(std::abs(a.lambda0 - b.lambda0) <= 0.2 * std::max(a.lambda0, b.lambda0));
    Eigen::SelfAdjointEigenSolver<Mat> ea(a.K, Eigen::EigenvaluesOnly), eb(b.K, Eigen::EigenvaluesOnly);
    const double ca = ea.eigenvalues().cwiseAbs().maxCoeff(), cb = eb.eigenvalues().cwiseAbs().maxCoeff();
    CHECK(std::max(ca, cb) / std::min(ca, cb) < 2.0);

    // both lattices have unit spacing, so nodes inside [-6, 6]^3 coincide
    auto smooth = [](const VelocityGrid& g) {
        Vec f(g.size());
        for (Eigen::Index n = 0; n < g.size(); ++n) {
            const double x = g.xi(n, 0), y = g.xi(n, 1);
            f[n] = (x * y + 0.5 * (g.speed2[n] - 5.0) * x + 0.3) * g.sqrt_mu[n];
        }
        return f;
    };
    const Vec la = a.apply_L(smooth(a.grid)), lb = b.apply_L(smooth(b.grid));
    double diff = 0, ref = 0;
    for (Eigen::Index n = 0; n < a.grid.size(); ++n) {
        const auto c = a.grid.coords(int(n));
        const Eigen::Index m = b.grid.index(c[0] + 2, c[1] + 2, c[2] + 2);
        diff += std::pow(la[n] - lb[m], 2);
        ref += lb[m] * lb[m];
    }
    CHECK(std::sqrt(diff / ref) < 0.05);
}

TEST_CASE("null-space residual shrinks as the spacing shrinks") {
    const auto& coarse = testing::assembly(8, 6.0);
    const auto& fine = testing::assembly(12, 6.0);
    INFO("tol_L h=1.5: " << coarse.tol_L << ", h=1: " << fine.tol_L);
    CHECK(fine.tol_L < coarse.tol_L);
}

TEST_CASE("quadratic term: invariants, bilinearity, Maxwellian state") {
    const auto g = build_grid(4.0, 8);
    const GammaOperator G(g, {});
    Rng rng(5);
    RowMat F(g.size(), 3), H(g.size(), 3);
    for (Eigen::Index n = 0; n < g.size(); ++n)
        for (int c = 0; c < 3; ++c) {
            F(n, c) = normal(rng) * g.sqrt_mu[n];
            H(n, c) = normal(rng) * g.sqrt_mu[n];
        }
    const RowMat out = G.apply(F, H, true);
    const Mat mw = moment_weights(g);
    const double scale = out.norm() * std::sqrt(g.weight);
    CHECK((mw.transpose() * out).norm() <= 1e-12 * scale);

    const RowMat raw = G.apply(F, H, false);
    const RowMat two = G.apply(F, 2.0 * H + F, false);
    CHECK((two - (2.0 * raw + G.apply(F, F, false))).norm() <= 1e-12 * two.norm());
    // column independence: the same pair in another column gives the same result
    RowMat F1 = F.col(1), H1 = H.col(1);
    CHECK((G.apply(F1, H1, false).col(0) - raw.col(1)).norm() <= 1e-13 * raw.col(1).norm());
}

TEST_CASE("binary cache round trip and typed failures") {
    namespace fs = std::filesystem;
    const auto& A = testing::assembly(8, 4.0);
    const std::string path = std::string(KBOLTZ_CACHE_DIR) + "/roundtrip.bin";
    cache_write(A, path);
    const auto B = cache_read(path, A.grid, A.params);
    CHECK((A.K - B.K).norm() == 0.0);
    CHECK((A.nu - B.nu).norm() == 0.0);
    CHECK(A.lambda0 == B.lambda0);

    auto expect = [&](const std::string& p, const VelocityGrid& g, const KernelParams& k, CacheErrorKind kind) {
        try {
            cache_read(p, g, k);
            FAIL("no error raised");
        } catch (const CacheError& e) {
            CHECK(e.kind == kind);
        }
    };
    expect(path, build_grid(4.0, 10), {}, CacheErrorKind::mismatch);
    expect(path, A.grid, {0.5, 8, 8}, CacheErrorKind::mismatch);
    expect(path, A.grid, {1.0, 4, 16}, CacheErrorKind::hash);
    expect(path + ".missing", A.grid, {}, CacheErrorKind::io);

    auto corrupt = [&](const std::string& name, auto edit) {
        const std::string p = std::string(KBOLTZ_CACHE_DIR) + "/" + name;
        fs::copy_file(path, p, fs::copy_options::overwrite_existing);
        edit(p);
        return p;
    };
    const auto bad_magic = corrupt("bad_magic.bin", [](const std::string& p) {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    });
    expect(bad_magic, A.grid, {}, CacheErrorKind::bad_magic);
    const auto bad_version = corrupt("bad_version.bin", [](const std::string& p) {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        f.put(char(9));
    });
    expect(bad_version, A.grid, {}, CacheErrorKind::version);
    const auto truncated = corrupt("truncated.bin", [](const std::string& p) {
        fs::resize_file(p, fs::file_size(p) / 2);
    });
    expect(truncated, A.grid, {}, CacheErrorKind::truncated);

    // load_or_assemble recovers from a damaged file by reassembling
    const auto C = load_or_assemble(truncated, A.grid, A.params);
    CHECK((C.K - A.K).norm() == 0.0);
}
