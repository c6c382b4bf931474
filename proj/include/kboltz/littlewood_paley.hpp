#pragma once
// Periodic spatial lattice, dyadic blocks, homogeneous Besov and
// Chemin-Lerner norms, Bony decomposition.

#include "kboltz/common.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>

namespace kboltz {

/// Raised for inputs where a ratio has no meaning (zero field).
struct DegenerateInput : ValidationError {
    using ValidationError::ValidationError;
};

/// Fourier modes k = (2 pi / L) n, n in [-N/2, N/2 - 1]^d, stored in FFT order.
/// Physical field u(x) = sum_k c_k e^{ikx}; ||u||^2 = L^d sum |c_k|^2.
struct SpatialLattice {
    int dim = 1;
    double box = 2.0 * pi;
    int nx = 16;
    Eigen::Matrix<double, Eigen::Dynamic, 3> k;  ///< wave vectors, unused axes zero
    Vec kabs;

    Eigen::Index modes() const { return kabs.size(); }
    double k0() const { return 2.0 * pi / box; }
    double volume() const { return std::pow(box, dim); }
    static int signed_index(int n, int nx) { return n < nx / 2 ? n : n - nx; }
    int mode_of(std::array<int, 3> n) const {
        int m = 0;
        for (int a = 0; a < dim; ++a) m = m * nx + ((n[a] % nx) + nx) % nx;
        return m;
    }
    /// Index of -k, with the Nyquist index mapped to itself.
    int conjugate_mode(int m) const {
        std::array<int, 3> n{};
        for (int a = dim - 1; a >= 0; --a) {
            n[a] = -signed_index(m % nx, nx);
            m /= nx;
        }
        return mode_of(n);
    }
    bool same_as(const SpatialLattice& o) const { return dim == o.dim && box == o.box && nx == o.nx; }
};

inline SpatialLattice make_lattice(int dim, double box, int nx) {
    require(dim >= 1 && dim <= 3, "lattice: dimension must be 1, 2 or 3");
    require(box > 0.0 && std::isfinite(box), "lattice: box period must be positive");
    require(nx >= 4 && (nx & (nx - 1)) == 0, "lattice: N_x must be a power of two >= 4");
    SpatialLattice l;
    l.dim = dim;
    l.box = box;
    l.nx = nx;
    Eigen::Index total = 1;
    for (int a = 0; a < dim; ++a) total *= nx;
    l.k = Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(total, 3);
    l.kabs.resize(total);
    for (Eigen::Index m = 0; m < total; ++m) {
        Eigen::Index r = m;
        for (int a = dim - 1; a >= 0; --a) {
            l.k(m, a) = l.k0() * SpatialLattice::signed_index(int(r % nx), nx);
            r /= nx;
        }
        l.kabs[m] = l.k.row(m).norm();
    }
    return l;
}

/// Field on the lattice with velocity slots: coeff(v, m) is the Fourier
/// coefficient of mode m at velocity node v. vweight is the velocity
/// quadrature weight (1 for scalar fields).
struct LatticeField {
    SpatialLattice lattice;
    CMat coeff;
    double vweight = 1.0;

    Eigen::Index slots() const { return coeff.rows(); }
    double norm() const { return std::sqrt(lattice.volume() * vweight) * coeff.norm(); }
};

inline LatticeField zero_field(const SpatialLattice& l, Eigen::Index slots, double vweight = 1.0) {
    return {l, CMat::Zero(slots, l.modes()), vweight};
}

// ------------------------------------------------------------ partition

/// Smooth step e^{-1/t} / (e^{-1/t} + e^{-1/(1-t)}) on [0, 1].
inline double smooth_step(double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    const double a = std::exp(-1.0 / t), b = std::exp(-1.0 / (1.0 - t));
    return a / (a + b);
}

/// Radial cutoff: 1 on |k| <= 3/4, 0 on |k| >= 4/3.
inline double chi(double r) { return 1.0 - smooth_step((r - 0.75) / (4.0 / 3.0 - 0.75)); }
inline double phi(double r) { return chi(0.5 * r) - chi(r); }

struct DyadicPartition {
    SpatialLattice lattice;
    int q_min = 0, q_max = 0;
    std::vector<Vec> table;  ///< table[q - q_min][m] = phi(2^{-q} |k_m|)

    bool covers(int q) const { return q >= q_min && q <= q_max; }
    const Vec& multiplier(int q) const {
        require(covers(q), "dyadic block: q = " + std::to_string(q) + " outside the covered range");
        return table[std::size_t(q - q_min)];
    }
    int shells() const { return q_max - q_min + 1; }
};

/// Shells are chosen so that sum_q phi(2^{-q} k) = 1 for every nonzero lattice k.
inline DyadicPartition build_partition(const SpatialLattice& l) {
    DyadicPartition p;
    p.lattice = l;
    const double kmin = l.k0();
    const double kmax = l.kabs.maxCoeff();
    p.q_min = int(std::floor(std::log2(0.75 * kmin)));
    p.q_max = int(std::ceil(std::log2(kmax / 1.5)));
    require(p.q_max - p.q_min >= 5,
            "partition: covered dyadic range has " + std::to_string(p.q_max - p.q_min + 1) + " shells, need >= 6");
    for (int q = p.q_min; q <= p.q_max; ++q) {
        Vec t(l.modes());
        for (Eigen::Index m = 0; m < l.modes(); ++m) t[m] = phi(std::ldexp(l.kabs[m], -q));
        p.table.push_back(std::move(t));
    }
    return p;
}

inline LatticeField dyadic_block(const DyadicPartition& p, const LatticeField& u, int q) {
    require(p.lattice.same_as(u.lattice), "dyadic block: lattice mismatch");
    LatticeField out = u;
    out.coeff = u.coeff * p.multiplier(q).asDiagonal();
    return out;
}

/// S_q u = chi(2^{-q} D) u.
inline LatticeField low_pass(const DyadicPartition& p, const LatticeField& u, int q) {
    require(p.lattice.same_as(u.lattice), "low pass: lattice mismatch");
    Vec m(u.lattice.modes());
    for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = chi(std::ldexp(u.lattice.kabs[i], -q));
    LatticeField out = u;
    out.coeff = u.coeff * m.asDiagonal();
    return out;
}

// ------------------------------------------------------------ norms

enum class Band { all, low, high };

inline const char* band_name(Band b) { return b == Band::low ? "low" : b == Band::high ? "high" : "all"; }

/// Per-shell values ||Delta_q u||; shells outside the covered range are absent.
struct ShellSpectrum {
    int q_min = 0;
    Vec value;  ///< value[q - q_min]
    std::string field;
    double time = 0.0;

    int q_max() const { return q_min + int(value.size()) - 1; }
    bool has(int q) const { return q >= q_min && q <= q_max(); }
    double at(int q) const {
        require(has(q), "shell spectrum: shell " + std::to_string(q) + " not covered");
        return value[q - q_min];
    }
};

/// ||Delta_q u||_{L2_xi L2_x}, optionally with a velocity weight w_v
/// (||sqrt(nu) Delta_q u|| for w = nu). Each mode meets at most two shells.
inline ShellSpectrum shell_spectrum(const DyadicPartition& p, const LatticeField& u,
                                    const Vec* velocity_weight = nullptr) {
    require(p.lattice.same_as(u.lattice), "shell spectrum: lattice mismatch");
    const auto& l = u.lattice;
    Vec energy(l.modes());
    for (Eigen::Index m = 0; m < l.modes(); ++m)
        energy[m] = velocity_weight ? velocity_weight->dot(u.coeff.col(m).cwiseAbs2()) : u.coeff.col(m).squaredNorm();
    ShellSpectrum s;
    s.q_min = p.q_min;
    s.value = Vec::Zero(p.shells());
    for (int q = p.q_min; q <= p.q_max; ++q) {
        const Vec& t = p.multiplier(q);
        s.value[q - p.q_min] = std::sqrt(l.volume() * u.vweight * t.cwiseAbs2().dot(energy));
    }
    return s;
}

inline std::pair<int, int> band_range(int q_min, int q_max, Band band) {
    int lo = q_min, hi = q_max;
    if (band == Band::low) hi = std::min(hi, 0);
    if (band == Band::high) lo = std::max(lo, -1);
    require(lo <= hi, std::string("besov norm: band '") + band_name(band) + "' is not covered by the lattice");
    return {lo, hi};
}

/// l^r aggregation of 2^{qs} v_q over the band; r = infinity takes the supremum.
inline double besov_from_shells(const ShellSpectrum& sp, double s, double r, Band band = Band::all) {
    require(r >= 1.0, "besov norm: r >= 1");
    const auto [lo, hi] = band_range(sp.q_min, sp.q_max(), band);
    double acc = 0.0;
    for (int q = lo; q <= hi; ++q) {
        const double v = std::pow(2.0, q * s) * sp.at(q);
        if (std::isinf(r))
            acc = std::max(acc, v);
        else
            acc += std::pow(v, r);
    }
    return std::isinf(r) ? acc : std::pow(acc, 1.0 / r);
}

inline double besov_norm(const DyadicPartition& p, const LatticeField& u, double s, double r, Band band = Band::all,
                         const Vec* velocity_weight = nullptr) {
    return besov_from_shells(shell_spectrum(p, u, velocity_weight), s, r, band);
}

inline constexpr double infinity = std::numeric_limits<double>::infinity();

/// Chemin-Lerner norm from per-snapshot spectra: per shell the L^{rho1} norm in
/// time (trapezoid on the snapshot times, supremum for rho1 = infinity),
/// then the weighted l^r sum over shells.
inline double chemin_lerner_from_spectra(const std::vector<double>& times, const std::vector<ShellSpectrum>& spectra,
                                         double rho1, double s, double r, Band band = Band::all) {
    require(!spectra.empty(), "chemin-lerner: empty series");
    require(times.size() == spectra.size(), "chemin-lerner: times and snapshots differ in length");
    require(rho1 >= 1.0 && r >= 1.0, "chemin-lerner: exponents >= 1");
    for (std::size_t i = 1; i < times.size(); ++i) require(times[i] > times[i - 1], "chemin-lerner: times must increase");
    const auto& first = spectra.front();
    ShellSpectrum agg;
    agg.q_min = first.q_min;
    agg.value = Vec::Zero(first.value.size());
    for (Eigen::Index i = 0; i < first.value.size(); ++i) {
        if (std::isinf(rho1)) {
            double m = 0.0;
            for (const auto& sp : spectra) m = std::max(m, sp.value[i]);
            agg.value[i] = m;
        } else {
            double acc = 0.0;
            for (std::size_t t = 1; t < spectra.size(); ++t)
                acc += 0.5 * (times[t] - times[t - 1]) *
                       (std::pow(spectra[t - 1].value[i], rho1) + std::pow(spectra[t].value[i], rho1));
            agg.value[i] = std::pow(acc, 1.0 / rho1);
        }
    }
    return besov_from_shells(agg, s, r, band);
}

inline double chemin_lerner_norm(const DyadicPartition& p, const std::vector<double>& times,
                                 const std::vector<LatticeField>& series, double rho1, double s, double r,
                                 Band band = Band::all, const Vec* velocity_weight = nullptr) {
    require(!series.empty(), "chemin-lerner: empty series");
    std::vector<ShellSpectrum> sp;
    sp.reserve(series.size());
    for (const auto& u : series) sp.push_back(shell_spectrum(p, u, velocity_weight));
    return chemin_lerner_from_spectra(times, sp, rho1, s, r, band);
}

// ------------------------------------------------------------ transforms

namespace detail {

/// In-place transform of every line along every axis; data is slots x modes.
inline void fft_lines(CMat& data, const std::array<int, 3>& n, int dim, bool forward) {
    Eigen::FFT<double> fft;
    fft.SetFlag(Eigen::FFT<double>::Unscaled);
    std::vector<cplx> in, out;
    Eigen::Index total = 1;
    for (int a = 0; a < dim; ++a) total *= n[a];
    for (int axis = 0; axis < dim; ++axis) {
        Eigen::Index stride = 1;
        for (int a = axis + 1; a < dim; ++a) stride *= n[a];
        const int len = n[axis];
        in.resize(len);
        for (Eigen::Index start = 0; start < total; ++start) {
            if ((start / stride) % len != 0) continue;
            for (Eigen::Index v = 0; v < data.rows(); ++v) {
                for (int i = 0; i < len; ++i) in[i] = data(v, start + i * stride);
                if (forward)
                    fft.fwd(out, in);
                else
                    fft.inv(out, in);
                for (int i = 0; i < len; ++i) data(v, start + i * stride) = out[i];
            }
        }
    }
}

}  // namespace detail

/// Values on the physical grid x_j = L j / N (slots x points).
inline CMat to_physical(const LatticeField& u) {
    CMat d = u.coeff;
    detail::fft_lines(d, {u.lattice.nx, u.lattice.nx, u.lattice.nx}, u.lattice.dim, false);
    return d;
}

inline LatticeField from_physical(const SpatialLattice& l, const CMat& values, double vweight = 1.0) {
    CMat d = values;
    detail::fft_lines(d, {l.nx, l.nx, l.nx}, l.dim, true);
    d /= double(l.modes());
    return {l, d, vweight};
}

/// Maps coefficients between an N- and an M-point lattice (same box), padding
/// with zeros or truncating to the modes both share.
inline CMat resample_modes(const CMat& c, int dim, int n_from, int n_to) {
    Eigen::Index total = 1;
    for (int a = 0; a < dim; ++a) total *= n_to;
    CMat out = CMat::Zero(c.rows(), total);
    Eigen::Index from_total = c.cols();
    const int half = std::min(n_from, n_to) / 2;
    for (Eigen::Index m = 0; m < from_total; ++m) {
        Eigen::Index r = m;
        Eigen::Index idx = 0, mul = 1;
        bool keep = true;
        for (int a = dim - 1; a >= 0; --a) {
            const int s = SpatialLattice::signed_index(int(r % n_from), n_from);
            r /= n_from;
            if (s < -half || s >= half) keep = false;
            idx += mul * (((s % n_to) + n_to) % n_to);
            mul *= n_to;
        }
        if (keep) out.col(idx) = c.col(m);
    }
    return out;
}

/// Pointwise product per velocity slot, zero-padded by 3/2 so the kept modes
/// are the exact truncated convolution.
inline LatticeField dealiased_product(const LatticeField& f, const LatticeField& g) {
    require(f.lattice.same_as(g.lattice), "product: lattice mismatch");
    require(f.slots() == g.slots() || f.slots() == 1 || g.slots() == 1, "product: slot mismatch");
    const auto& l = f.lattice;
    const int M = 3 * l.nx / 2;
    const std::array<int, 3> dims{M, M, M};
    CMat pf = resample_modes(f.coeff, l.dim, l.nx, M), pg = resample_modes(g.coeff, l.dim, l.nx, M);
    detail::fft_lines(pf, dims, l.dim, false);
    detail::fft_lines(pg, dims, l.dim, false);
    const Eigen::Index slots = std::max(f.slots(), g.slots());
    CMat prod(slots, pf.cols());
    for (Eigen::Index v = 0; v < slots; ++v)
        prod.row(v) = pf.row(f.slots() == 1 ? 0 : v).cwiseProduct(pg.row(g.slots() == 1 ? 0 : v));
    detail::fft_lines(prod, dims, l.dim, true);
    prod /= double(prod.cols());
    return {l, resample_modes(prod, l.dim, M, l.nx), f.slots() == 1 ? g.vweight : f.vweight};
}

struct BonyParts {
    LatticeField T_fg, T_gf, R;
};

/// Homogeneous Bony decomposition of the dealiased product for mean-free
/// f, g: fg = T_f g + T_g f + R(f, g).
inline BonyParts bony(const DyadicPartition& p, const LatticeField& f, const LatticeField& g) {
    require(p.lattice.same_as(f.lattice) && p.lattice.same_as(g.lattice), "bony: lattice mismatch");
    const auto& l = p.lattice;
    std::vector<LatticeField> df, dg;
    for (int q = p.q_min; q <= p.q_max; ++q) {
        df.push_back(dyadic_block(p, f, q));
        dg.push_back(dyadic_block(p, g, q));
    }
    BonyParts out{zero_field(l, std::max(f.slots(), g.slots()), f.vweight), {}, {}};
    out.T_gf = out.T_fg;
    out.R = out.T_fg;
    for (int j = p.q_min; j <= p.q_max; ++j) {
        const auto& gj = dg[j - p.q_min];
        const auto& fj = df[j - p.q_min];
        out.T_fg.coeff += dealiased_product(low_pass(p, f, j - 1), gj).coeff;
        out.T_gf.coeff += dealiased_product(low_pass(p, g, j - 1), fj).coeff;
        for (int jp = std::max(p.q_min, j - 1); jp <= std::min(p.q_max, j + 1); ++jp)
            out.R.coeff += dealiased_product(df[jp - p.q_min], gj).coeff;
    }
    return out;
}

// ------------------------------------------------------------ checks

struct BernsteinReport {
    double ratio = 0.0;   ///< ||grad u|| / (2^q ||u||)
    bool within = false;  ///< ratio in [3/4, 8/3]
};

/// u must be band-limited to the support of shell q, 3/4 2^q <= |k| <= 8/3 2^q.
inline BernsteinReport bernstein_check(const LatticeField& u, int q) {
    const auto& l = u.lattice;
    const double lo = 0.75 * std::ldexp(1.0, q), hi = 8.0 / 3.0 * std::ldexp(1.0, q);
    const double eps = 1e-12;
    double num = 0.0, den = 0.0;
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        const double e = u.coeff.col(m).squaredNorm();
        if (e == 0.0) continue;
        require(l.kabs[m] >= lo * (1 - eps) && l.kabs[m] <= hi * (1 + eps),
                "bernstein: field is not band-limited to shell " + std::to_string(q));
        num += l.kabs[m] * l.kabs[m] * e;
        den += e;
    }
    if (den == 0.0) throw DegenerateInput("bernstein: degenerate input (zero field)");
    BernsteinReport r;
    r.ratio = std::sqrt(num / den) / std::ldexp(1.0, q);
    r.within = r.ratio >= 0.75 - eps && r.ratio <= 8.0 / 3.0 + eps;
    return r;
}

/// ||u||_{B^{theta s + (1-theta) s~}_{2,1}} / (||u||^theta_{B^s_{2,inf}} ||u||^{1-theta}_{B^{s~}_{2,inf}}).
inline double interpolation_ratio(const ShellSpectrum& sp, double s, double s_tilde, double theta) {
    require(s < s_tilde, "interpolation: need s < s~");
    require(theta > 0.0 && theta < 1.0, "interpolation: theta in (0, 1)");
    if (sp.value.maxCoeff() <= 0.0) throw DegenerateInput("interpolation: degenerate input (zero field)");
    const double mid = besov_from_shells(sp, theta * s + (1.0 - theta) * s_tilde, 1.0);
    const double lo = besov_from_shells(sp, s, infinity), hi = besov_from_shells(sp, s_tilde, infinity);
    return mid / (std::pow(lo, theta) * std::pow(hi, 1.0 - theta));
}

inline double interpolation_check(const DyadicPartition& p, const LatticeField& u, double s, double s_tilde,
                                  double theta) {
    return interpolation_ratio(shell_spectrum(p, u), s, s_tilde, theta);
}

// ------------------------------------------------------------ synthetic fields

/// Gaussian coefficients on modes with |k| in [kmin, kmax]; with `real`
/// the field satisfies c_{-k} = conj(c_k) and the Nyquist modes are zero.
inline LatticeField random_field(const SpatialLattice& l, Eigen::Index slots, Rng& rng, double kmin, double kmax,
                                 bool real = true, double vweight = 1.0) {
    LatticeField u = zero_field(l, slots, vweight);
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        if (l.kabs[m] < kmin || l.kabs[m] > kmax || l.kabs[m] == 0.0) continue;
        for (Eigen::Index v = 0; v < slots; ++v) u.coeff(v, m) = cplx(normal(rng), normal(rng));
    }
    if (real) {
        for (Eigen::Index m = 0; m < l.modes(); ++m) {
            const int c = l.conjugate_mode(int(m));
            bool nyquist = false;
            Eigen::Index r = m;
            for (int a = 0; a < l.dim; ++a, r /= l.nx) nyquist = nyquist || (r % l.nx) == l.nx / 2;
            if (nyquist) {
                u.coeff.col(m).setZero();
                continue;
            }
            if (c > m) {
                const CVec avg = 0.5 * (u.coeff.col(m) + u.coeff.col(c).conjugate());
                u.coeff.col(m) = avg;
                u.coeff.col(c) = avg.conjugate();
            }
        }
    }
    return u;
}

/// Random field supported in shell q: the multiplier phi(2^{-q} k) applied to
/// Gaussian coefficients.
inline LatticeField random_shell_field(const DyadicPartition& p, Eigen::Index slots, Rng& rng, int q,
                                       double vweight = 1.0) {
    auto u = random_field(p.lattice, slots, rng, 0.0, infinity, true, vweight);
    return dyadic_block(p, u, q);
}

}  // namespace kboltz
