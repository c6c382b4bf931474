#pragma once
// Shared aliases, error types and small numeric helpers.

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace kboltz {

using Vec = Eigen::VectorXd;
using CVec = Eigen::VectorXcd;
using Mat = Eigen::MatrixXd;
using CMat = Eigen::MatrixXcd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using cplx = std::complex<double>;

inline constexpr double pi = std::numbers::pi;

/// Bad input: maps to CLI exit code 2.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Numerical breakdown (instability, underflow, non-positive constants): exit code 3.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, std::string_view what) {
    if (!ok) throw ValidationError(std::string(what));
}

/// FNV-1a over raw bytes; used for config and cache hashes.
class Fnv1a {
public:
    void bytes(const void* p, std::size_t n) {
        auto c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= c[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    template <class T>
    Fnv1a& add(const T& v) {
        bytes(&v, sizeof(T));
        return *this;
    }
    Fnv1a& add(std::string_view s) {
        bytes(s.data(), s.size());
        return *this;
    }
    std::uint64_t value() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

/// Worker count used by the row- and point-partitioned loops.
inline int& thread_count() {
    static int n = 1;
    return n;
}

/// Runs fn(begin, end) over contiguous chunks of [0, n) on thread_count() workers.
template <class Fn>
void parallel_for(Eigen::Index n, Fn&& fn) {
    const int t = std::max(1, std::min<int>(thread_count(), int(n)));
    if (t <= 1) {
        fn(Eigen::Index(0), n);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(t);
    for (int w = 0; w < t; ++w) {
        const Eigen::Index b = n * w / t, e = n * (w + 1) / t;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
}

/// Seeded generator shared by all random ensembles.
using Rng = std::mt19937_64;

inline double normal(Rng& rng) {
    // Box-Muller keeps streams identical across standard libraries.
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double u1 = u(rng);
    while (u1 <= 0.0) u1 = u(rng);
    const double u2 = u(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * pi * u2);
}

inline Vec random_vector(Rng& rng, Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
    return v;
}

/// Gauss-Legendre nodes and weights on [a, b].
inline void gauss_legendre(int n, double a, double b, Vec& x, Vec& w) {
    require(n >= 1, "gauss_legendre: n >= 1");
    x.resize(n);
    w.resize(n);
    auto legendre = [n](double z, double& pn, double& dpn) {
        double p0 = 1.0, p1 = z;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        pn = p1;
        dpn = n * (z * p1 - p0) / (z * z - 1.0);
    };
    for (int i = 0; i < n; ++i) {
        double z = std::cos(pi * (i + 0.75) / (n + 0.5));
        double pn = 0.0, dpn = 1.0;
        for (int it = 0; it < 100; ++it) {
            legendre(z, pn, dpn);
            const double dz = pn / dpn;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        legendre(z, pn, dpn);
        x[n - 1 - i] = 0.5 * (a + b) + 0.5 * (b - a) * z;
        w[n - 1 - i] = (b - a) / ((1.0 - z * z) * dpn * dpn);
    }
}

/// Least-squares line y = slope*x + intercept with coefficient of determination.
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    int n = 0;
};

template <class XS, class YS>
LineFit fit_line(const XS& xs, const YS& ys) {
    LineFit f;
    f.n = static_cast<int>(xs.size());
    if (f.n < 2) return f;
    double sx = 0, sy = 0;
    for (int i = 0; i < f.n; ++i) sx += xs[i], sy += ys[i];
    const double mx = sx / f.n, my = sy / f.n;
    double sxx = 0, sxy = 0, syy = 0;
    for (int i = 0; i < f.n; ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx, sxy += dx * dy, syy += dy * dy;
    }
    f.slope = sxx > 0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    double ss_res = 0;
    for (int i = 0; i < f.n; ++i) {
        const double r = ys[i] - (f.slope * xs[i] + f.intercept);
        ss_res += r * r;
    }
    f.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
    return f;
}

}  // namespace kboltz
