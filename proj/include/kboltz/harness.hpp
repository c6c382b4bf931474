#pragma once
// Experiment configuration, orchestration and artifacts: decay-rate fits,
// trilinear constants, audits, nonlinear runs and the consolidated report.

#include "kboltz/nonlinear_dynamics.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace kboltz {

using json = nlohmann::json;

inline constexpr int schema_version = 1;

// ------------------------------------------------------------ config file

/// Flat `key = value` text with `[section]` headers. Keys are stored as
/// "section.key"; '#' and ';' start comments.
class ConfigFile {
public:
    static ConfigFile parse(std::string_view text, const std::string& origin = "<config>") {
        ConfigFile c;
        std::string section;
        std::istringstream in{std::string(text)};
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
            ++n;
            const auto cut = line.find_first_of("#;");
            if (cut != std::string::npos) line.erase(cut);
            line = trim(line);
            if (line.empty()) continue;
            const std::string where = origin + ":" + std::to_string(n);
            if (line.front() == '[') {
                require(line.back() == ']' && line.size() > 2, where + ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            require(eq != std::string::npos, where + ": expected key = value");
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            require(!key.empty(), where + ": empty key");
            const std::string full = section.empty() ? key : section + "." + key;
            require(!c.values_.count(full), where + ": duplicate key '" + full + "'");
            c.values_[full] = value;
        }
        return c;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path);
        require(bool(in), "config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    std::string text(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    double number(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        return to_number(key, values_.at(key));
    }
    long integer(const std::string& key, long fallback) const {
        const double v = number(key, double(fallback));
        require(v == std::floor(v) && std::abs(v) < 9e15, "config: '" + key + "' must be an integer");
        return long(v);
    }
    bool flag(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
        if (v == "false" || v == "off" || v == "no" || v == "0") return false;
        throw ValidationError("config: '" + key + "' must be a boolean, got '" + v + "'");
    }
    std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
        if (!has(key)) return fallback;
        std::vector<double> out;
        std::stringstream ss(values_.at(key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(to_number(key, trim(item)));
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }
    static double to_number(const std::string& key, const std::string& v) {
        std::size_t used = 0;
        double x = 0;
        try {
            x = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(used == v.size() && !v.empty() && std::isfinite(x), "config: '" + key + "' is not a number: '" + v + "'");
        return x;
    }

    std::map<std::string, std::string> values_;
};

// ------------------------------------------------------------ experiment config

struct DecayPair {
    double sigma = 0.0, sigma0 = -1.5;
};

struct ExperimentConfig {
    std::string id = "default";
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out = "out";
    std::string cache;  ///< empty: <out>/assembly_nv<N>_V<V>.bin

    int nv = 8;
    double V = 4.0;
    KernelParams kernel;

    std::vector<double> sweep_k{0.125, 0.25, 0.5, 4.0, 8.0};
    int sweep_samples = 200;
    double sweep_horizon = 8.0;

    int decay_dim = 3;
    double decay_box = 64.0;  ///< box length in units of 2 pi
    int decay_nx = 64;
    std::vector<DecayPair> decay_pairs{{0.0, -1.5}, {1.5, -1.5}};
    int decay_samples = 30;
    double decay_horizon = 0.0;  ///< 0: end of the validity window

    double sim_box = 8.0;
    int sim_nx = 64;
    double sim_dt = 0.5;
    double sim_T = 20.0;
    double sim_amplitude = 1e-3;
    bool sim_nonlinear = true;
    int sim_snapshot_every = 0;
    double sim_kappa = 0.05;  ///< dissipation factor of the nonlinear inequality margin

    int audit_fields = 100;
    double audit_dt = 0.1;
    double audit_T = 2.0;

    double tri_box = 8.0;
    int tri_nx = 32;
    int tri_ensemble = 50;
    int tri_snapshots = 3;

    void validate() const {
        require(nv >= 4 && nv % 2 == 0, "config: velocity.nv must be even and >= 4");
        require(V > 0, "config: velocity.V must be positive");
        kernel.validate();
        require(threads >= 1, "config: run.threads must be >= 1");
        for (double k : sweep_k) require(k > 0, "config: sweep.k entries must be positive");
        require(sweep_samples >= 10 && sweep_horizon > 0, "config: sweep.samples >= 10, sweep.horizon > 0");
        require(decay_dim >= 1 && decay_dim <= 3, "config: decay.dim must be 1, 2 or 3");
        require(decay_box > 0 && decay_samples >= 5 && decay_horizon >= 0, "config: decay box, samples or horizon");
        require(!decay_pairs.empty(), "config: decay.pairs is empty");
        for (const auto& p : decay_pairs) {
            require(p.sigma > p.sigma0, "config: decay pair needs sigma > sigma0 (got sigma = " + num(p.sigma) +
                                            ", sigma0 = " + num(p.sigma0) + ")");
            require(p.sigma0 >= -1.5 && p.sigma0 < 0.5,
                    "config: sigma0 must lie in [-3/2, 1/2) (got " + num(p.sigma0) + ")");
        }
        require(sim_box > 0 && sim_dt > 0 && sim_T > 0 && sim_amplitude > 0, "config: simulate parameters must be positive");
        require(sim_snapshot_every >= 0 && sim_kappa >= 0, "config: simulate.snapshot_every, kappa >= 0");
        require(audit_fields >= 1 && audit_dt > 0 && audit_T > 0, "config: audit parameters");
        require(tri_box > 0 && tri_ensemble >= 1, "config: trilinear parameters");
        require(tri_snapshots >= 3 && tri_snapshots <= 5, "config: trilinear.snapshots must lie in [3, 5]");
    }

    static ExperimentConfig from(const ConfigFile& f) {
        static const std::set<std::string> known{
            "experiment.id",      "run.seed",          "run.threads",          "run.out",
            "run.cache",          "velocity.nv",       "velocity.V",           "kernel.gamma",
            "kernel.n_polar",     "kernel.n_azimuth",  "sweep.k",              "sweep.samples",
            "sweep.horizon",      "decay.dim",         "decay.box",            "decay.nx",
            "decay.pairs",        "decay.samples",     "decay.horizon",        "simulate.box",
            "simulate.nx",        "simulate.dt",       "simulate.T",           "simulate.amplitude",
            "simulate.nonlinear", "simulate.snapshot_every", "simulate.kappa", "audit.fields",
            "audit.dt",           "audit.T",           "trilinear.box",        "trilinear.nx",
            "trilinear.ensemble", "trilinear.snapshots"};
        for (const auto& [k, v] : f.entries()) require(known.count(k) > 0, "config: unknown key '" + k + "'");
        ExperimentConfig c;
        c.id = f.text("experiment.id", c.id);
        const double seed = f.number("run.seed", double(c.seed));
        require(seed >= 0 && seed == std::floor(seed), "config: run.seed must be a non-negative integer");
        c.seed = f.has("run.seed") ? std::stoull(f.text("run.seed", "1")) : c.seed;
        c.threads = int(f.integer("run.threads", c.threads));
        c.out = f.text("run.out", c.out);
        c.cache = f.text("run.cache", c.cache);
        c.nv = int(f.integer("velocity.nv", c.nv));
        c.V = f.number("velocity.V", c.V);
        c.kernel.gamma = f.number("kernel.gamma", c.kernel.gamma);
        c.kernel.n_polar = int(f.integer("kernel.n_polar", c.kernel.n_polar));
        c.kernel.n_azimuth = int(f.integer("kernel.n_azimuth", c.kernel.n_azimuth));
        c.sweep_k = f.numbers("sweep.k", c.sweep_k);
        c.sweep_samples = int(f.integer("sweep.samples", c.sweep_samples));
        c.sweep_horizon = f.number("sweep.horizon", c.sweep_horizon);
        c.decay_dim = int(f.integer("decay.dim", c.decay_dim));
        c.decay_box = f.number("decay.box", c.decay_box);
        c.decay_nx = int(f.integer("decay.nx", c.decay_nx));
        if (f.has("decay.pairs")) c.decay_pairs = parse_pairs(f.text("decay.pairs", ""));
        c.decay_samples = int(f.integer("decay.samples", c.decay_samples));
        c.decay_horizon = f.number("decay.horizon", c.decay_horizon);
        c.sim_box = f.number("simulate.box", c.sim_box);
        c.sim_nx = int(f.integer("simulate.nx", c.sim_nx));
        c.sim_dt = f.number("simulate.dt", c.sim_dt);
        c.sim_T = f.number("simulate.T", c.sim_T);
        c.sim_amplitude = f.number("simulate.amplitude", c.sim_amplitude);
        c.sim_nonlinear = f.flag("simulate.nonlinear", c.sim_nonlinear);
        c.sim_snapshot_every = int(f.integer("simulate.snapshot_every", c.sim_snapshot_every));
        c.sim_kappa = f.number("simulate.kappa", c.sim_kappa);
        c.audit_fields = int(f.integer("audit.fields", c.audit_fields));
        c.audit_dt = f.number("audit.dt", c.audit_dt);
        c.audit_T = f.number("audit.T", c.audit_T);
        c.tri_box = f.number("trilinear.box", c.tri_box);
        c.tri_nx = int(f.integer("trilinear.nx", c.tri_nx));
        c.tri_ensemble = int(f.integer("trilinear.ensemble", c.tri_ensemble));
        c.tri_snapshots = int(f.integer("trilinear.snapshots", c.tri_snapshots));
        c.validate();
        return c;
    }

    /// Every physical setting, defaults included.
    json to_json() const {
        json pairs = json::array();
        for (const auto& p : decay_pairs) pairs.push_back({{"sigma", p.sigma}, {"sigma0", p.sigma0}});
        return {{"id", id},
                {"seed", seed},
                {"velocity", {{"nv", nv}, {"V", V}}},
                {"kernel", {{"gamma", kernel.gamma}, {"n_polar", kernel.n_polar}, {"n_azimuth", kernel.n_azimuth}}},
                {"sweep", {{"k", sweep_k}, {"samples", sweep_samples}, {"horizon", sweep_horizon}}},
                {"decay",
                 {{"dim", decay_dim},
                  {"box_over_2pi", decay_box},
                  {"nx", decay_nx},
                  {"pairs", pairs},
                  {"samples", decay_samples},
                  {"horizon", decay_horizon}}},
                {"simulate",
                 {{"box_over_2pi", sim_box},
                  {"nx", sim_nx},
                  {"dt", sim_dt},
                  {"T", sim_T},
                  {"amplitude", sim_amplitude},
                  {"nonlinear", sim_nonlinear},
                  {"snapshot_every", sim_snapshot_every},
                  {"kappa", sim_kappa}}},
                {"audit", {{"fields", audit_fields}, {"dt", audit_dt}, {"T", audit_T}}},
                {"trilinear",
                 {{"box_over_2pi", tri_box}, {"nx", tri_nx}, {"ensemble", tri_ensemble}, {"snapshots", tri_snapshots}}}};
    }

    /// Hash of the physical settings; output paths and thread counts are excluded.
    std::uint64_t hash() const {
        Fnv1a h;
        h.add(std::string_view(to_json().dump()));
        return h.value();
    }

    std::string cache_path() const {
        if (!cache.empty()) return cache;
        std::ostringstream s;
        s << out << "/assembly_nv" << nv << "_V" << V << "_g" << kernel.gamma << "_w" << kernel.n_polar << "x"
          << kernel.n_azimuth << ".bin";
        return s.str();
    }

private:
    static std::string num(double x) {
        std::ostringstream s;
        s << x;
        return s.str();
    }
    static std::vector<DecayPair> parse_pairs(const std::string& text) {
        std::vector<DecayPair> out;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto c = item.find(':');
            require(c != std::string::npos, "config: decay.pairs entries are sigma:sigma0");
            const auto f = ConfigFile::parse("a = " + item.substr(0, c) + "\nb = " + item.substr(c + 1));
            out.push_back({f.number("a", 0), f.number("b", 0)});
        }
        return out;
    }
};

inline std::string hex(std::uint64_t h) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
}

inline CollisionAssembly open_assembly(const ExperimentConfig& c) {
    if (c.cache.empty()) std::filesystem::create_directories(c.out);
    return load_or_assemble(c.cache_path(), build_grid(c.V, c.nv), c.kernel);
}

/// Common header of every JSON artifact.
inline json artifact_header(const std::string& kind, const ExperimentConfig& c, const CollisionAssembly* A) {
    json j{{"schema_version", schema_version},
           {"artifact", kind},
           {"config_hash", hex(c.hash())},
           {"config", c.to_json()}};
    if (A) j["cache_hash"] = hex(A->hash);
    return j;
}

// ------------------------------------------------------------ initial data

/// Radial mixed profile: mass and energy parts plus a radial microscopic part.
inline Vec decay_profile(const VelocityGrid& g) {
    Vec f(g.size());
    for (Eigen::Index n = 0; n < g.size(); ++n) {
        const double s = g.speed2[n];
        f[n] = (1.0 + 0.5 * (s - 3.0) + 0.1 * (s * s - 10.0 * s + 15.0)) * g.sqrt_mu[n];
    }
    return f;
}

/// Amplitude law |k|^{-(sigma0 + d/2)} on every nonzero mode with random
/// phases; c_{-k} = conj(c_k), Nyquist modes and the mean are zero.
inline LatticeField synthesize_initial_data(const SpatialLattice& l, const VelocityGrid& g, double sigma0,
                                            const Vec& profile, Rng& rng) {
    require(sigma0 >= -1.5 && sigma0 < 0.5, "initial data: sigma0 must lie in [-3/2, 1/2)");
    require(profile.size() == g.size(), "initial data: profile does not match the grid");
    const auto p = build_partition(l);
    require(p.q_min <= -2, "initial data: need >= 3 low shells (q <= 0), lattice has q_min = " + std::to_string(p.q_min));
    LatticeField f = zero_field(l, g.size(), g.weight);
    std::uniform_real_distribution<double> u(0.0, 2.0 * pi);
    const CVec prof = profile.cast<cplx>();
    for (Eigen::Index m = 0; m < l.modes(); ++m) {
        const int c = l.conjugate_mode(int(m));
        if (l.kabs[m] == 0.0 || c < m) continue;
        bool nyquist = false;
        Eigen::Index r = m;
        for (int a = 0; a < l.dim; ++a, r /= l.nx) nyquist = nyquist || r % l.nx == l.nx / 2;
        const double theta = u(rng);
        if (nyquist) continue;
        const cplx amp = std::pow(l.kabs[m], -(sigma0 + 0.5 * l.dim)) * std::polar(1.0, theta);
        f.coeff.col(m) = amp * prof;
        f.coeff.col(c) = std::conj(amp) * prof;
    }
    return f;
}

// ------------------------------------------------------------ decay experiment

struct DecayFitEntry {
    double sigma = 0, sigma0 = 0;
    double slope = 0, expected = 0, tol = 0, r2 = 0;
    double micro_slope = 0, micro_expected = 0, micro_tol = 0, micro_r2 = 0;
    bool reliable = false, pass = false;
};

struct DecaySeries {
    double sigma = 0, sigma0 = 0;
    std::vector<double> full, micro;  ///< Besov sigma norms at the sample times
};

struct DecayFitReport {
    double lambda1 = 0;
    double T_min = 0, T_max = 0, T_end = 0;
    bool window_valid = false;
    int q_min = 0, q_max = 0;
    long radii = 0;          ///< distinct |k| evolved
    long lattice_modes = 0;  ///< nonzero modes summed
    double dt = 0;
    std::vector<double> times;
    std::vector<DecaySeries> series;
    std::vector<DecayFitEntry> fits;
};

namespace detail {

/// Multiplicity of each |n|^2 over the lattice, Nyquist indices excluded.
inline std::map<long, long> radial_multiplicity(int dim, int nx) {
    std::map<long, long> count;
    const int h = nx / 2;
    std::array<int, 3> n{};
    const int lo = -h + 1;
    std::array<int, 3> top{0, 0, 0};
    for (int a = 0; a < dim; ++a) top[a] = h - 1;
    for (n[0] = lo; n[0] <= top[0]; ++n[0])
        for (n[1] = dim > 1 ? lo : 0; n[1] <= top[1]; ++n[1])
            for (n[2] = dim > 2 ? lo : 0; n[2] <= top[2]; ++n[2]) {
                const long m = long(n[0]) * n[0] + long(n[1]) * n[1] + long(n[2]) * n[2];
                if (m) ++count[m];
            }
    return count;
}

}  // namespace detail

/// Lattice modes evolve independently under the linear semigroup; for a
/// radial profile the mode norms depend on |k| only, so each distinct |k| is
/// evolved once along xi1 and weighted by its multiplicity. Norms are
/// sampled log-uniformly over [T_end/10, T_end] and fitted against log(1+t).
inline DecayFitReport decay_experiment(const LinearEngine& E, const ExperimentConfig& c, double lambda1,
                                       const Vec* profile = nullptr) {
    require(lambda1 > 0, "decay: lambda1 must be positive");
    const auto& A = E.assembly();
    const auto& g = E.grid();
    const Vec prof = profile ? *profile : decay_profile(g);
    const int d = c.decay_dim;
    const double k0 = 1.0 / c.decay_box;
    require(c.decay_nx >= 4 && (c.decay_nx & (c.decay_nx - 1)) == 0, "decay: nx must be a power of two >= 4");
    const int h = c.decay_nx / 2;
    const double kmax = k0 * (h - 1) * std::sqrt(double(d));

    DecayFitReport rep;
    rep.lambda1 = lambda1;
    rep.q_min = int(std::floor(std::log2(0.75 * k0)));
    rep.q_max = int(std::ceil(std::log2(kmax / 1.5)));
    require(rep.q_min <= -4, "decay: insufficient low shells (need >= 5 with q <= 0, lattice gives " +
                                 std::to_string(1 - rep.q_min) + ")");
    require(rep.q_max - rep.q_min >= 5, "decay: insufficient shells");

    // algebraic window: high shells gone (active shell <= -2), three shells
    // kept below the active one so the lattice sum tracks the integral
    rep.T_min = 16.0 / lambda1;
    rep.T_max = std::ldexp(1.0, -2 * (rep.q_min + 3)) / lambda1;
    rep.T_end = c.decay_horizon > 0 ? c.decay_horizon : rep.T_max;
    rep.window_valid = rep.T_end / 10.0 >= rep.T_min && rep.T_end <= rep.T_max;

    rep.dt = E.dt_limit(kmax);
    std::vector<long> steps;
    for (int i = 0; i < c.decay_samples; ++i) {
        const double t = rep.T_end / 10.0 * std::pow(10.0, double(i) / (c.decay_samples - 1));
        const long m = std::max<long>(1, std::lround(t / rep.dt));
        if (steps.empty() || m > steps.back()) steps.push_back(m);
    }
    for (long m : steps) rep.times.push_back(m * rep.dt);
    const std::size_t ns = steps.size();

    const auto& S = E.sectors();
    std::vector<int> active;
    std::array<CVec, 4> c0;
    for (int s = 0; s < 4; ++s) {
        c0[s] = S.restrict(prof.cast<cplx>(), s);
        if (c0[s].norm() > 0) active.push_back(s);
    }

    const auto mult = detail::radial_multiplicity(d, c.decay_nx);
    std::vector<std::pair<long, long>> radii(mult.begin(), mult.end());
    rep.radii = long(radii.size());
    for (const auto& [m, r] : radii) rep.lattice_modes += r;

    // per radius: squared full and micro norms at each sample
    std::vector<double> full2(radii.size() * ns), micro2(radii.size() * ns);
    const int bits = int(std::ceil(std::log2(double(steps.back()) + 1.0))) + 1;
    parallel_for(Eigen::Index(radii.size()), [&](Eigen::Index b, Eigen::Index e) {
        for (Eigen::Index i = b; i < e; ++i) {
            const double k = k0 * std::sqrt(double(radii[i].first));
            for (int s : active) {
                std::vector<CMat> pw{rk4_step_matrix(E.sector_generator(s, k), rep.dt)};
                for (int j = 1; j < bits; ++j) pw.push_back(pw.back() * pw.back());
                CVec v = c0[s];
                long cur = 0;
                for (std::size_t n = 0; n < ns; ++n) {
                    for (long dm = steps[n] - cur, j = 0; dm; ++j, dm >>= 1)
                        if (dm & 1) v = pw[j] * v;
                    cur = steps[n];
                    CVec f = CVec::Zero(g.size());
                    S.add_back(v, s, f);
                    const CVec mic = f - A.P.apply(f);
                    full2[i * ns + n] += f.squaredNorm();
                    micro2[i * ns + n] += mic.squaredNorm();
                }
            }
        }
    });

    const double scale = std::pow(2.0 * pi * c.decay_box, d) * g.weight;
    std::vector<double> lx;
    for (double t : rep.times) lx.push_back(std::log1p(t));
    for (const auto& pr : c.decay_pairs) {
        // shell energies sum_k phi_q^2 A(k)^2 |f_k(t)|^2
        const int nq = rep.q_max - rep.q_min + 1;
        std::vector<double> ef(ns * nq, 0.0), em(ns * nq, 0.0);
        for (std::size_t i = 0; i < radii.size(); ++i) {
            const double k = k0 * std::sqrt(double(radii[i].first));
            const double a2 = radii[i].second * std::pow(k, -2.0 * (pr.sigma0 + 0.5 * d));
            for (int q = rep.q_min; q <= rep.q_max; ++q) {
                const double ph = phi(std::ldexp(k, -q));
                if (ph == 0.0) continue;
                const double w = a2 * ph * ph;
                for (std::size_t n = 0; n < ns; ++n) {
                    ef[n * nq + (q - rep.q_min)] += w * full2[i * ns + n];
                    em[n * nq + (q - rep.q_min)] += w * micro2[i * ns + n];
                }
            }
        }
        DecaySeries ser{pr.sigma, pr.sigma0, {}, {}};
        for (std::size_t n = 0; n < ns; ++n) {
            double bf = 0, bm = 0;
            for (int q = rep.q_min; q <= rep.q_max; ++q) {
                bf += std::pow(2.0, q * pr.sigma) * std::sqrt(scale * ef[n * nq + (q - rep.q_min)]);
                bm += std::pow(2.0, q * pr.sigma) * std::sqrt(scale * em[n * nq + (q - rep.q_min)]);
            }
            if (!(bf > 1e-290) || !(bm > 1e-290)) throw NumericalError("decay: norms underflow at t = " + std::to_string(rep.times[n]));
            ser.full.push_back(bf);
            ser.micro.push_back(bm);
        }
        std::vector<double> yf, ym;
        for (std::size_t n = 0; n < ns; ++n) yf.push_back(std::log(ser.full[n])), ym.push_back(std::log(ser.micro[n]));
        const auto ff = fit_line(lx, yf), fm = fit_line(lx, ym);
        DecayFitEntry e;
        e.sigma = pr.sigma;
        e.sigma0 = pr.sigma0;
        e.slope = ff.slope;
        e.r2 = ff.r2;
        e.expected = -(pr.sigma - pr.sigma0) / 2.0;
        e.tol = pr.sigma == 0.0 ? 0.12 : 0.15;
        e.micro_slope = fm.slope;
        e.micro_r2 = fm.r2;
        e.micro_expected = -(pr.sigma - pr.sigma0 + 1.0) / 2.0;
        e.micro_tol = 0.15;
        e.reliable = ff.r2 >= 0.98 && fm.r2 >= 0.98;
        e.pass = e.reliable && rep.window_valid && std::abs(e.slope - e.expected) <= e.tol &&
                 std::abs(e.micro_slope - e.micro_expected) <= e.micro_tol;
        rep.series.push_back(std::move(ser));
        rep.fits.push_back(e);
    }
    return rep;
}

// ------------------------------------------------------------ trilinear constants

/// One inequality checked on the ensemble. Exponents are given for three
/// space dimensions and scaled by d/3 on a d-dimensional lattice, with d/2 in
/// place of 3/2.
struct TrilinearEntry {
    std::string form;  ///< pairing_l1, pairing_sup, moment_l1, moment_sup
    double s1 = 0, s2 = 0;
    double s1_used = 0, s2_used = 0;
    double max_ratio = 0;
    int samples = 0, skipped = 0;
};

struct TrilinearRun {
    int nx = 0;
    std::vector<TrilinearEntry> entries;
};

struct TrilinearReport {
    TrilinearRun coarse, fine;
    std::vector<double> change;  ///< fine / coarse max ratio per entry
    bool finite = false, stable = false;
};

inline std::vector<TrilinearEntry> trilinear_forms(int dim) {
    const double sc = dim / 3.0;
    std::vector<TrilinearEntry> out;
    auto add = [&](const char* form, double s1, double s2) {
        TrilinearEntry e;
        e.form = form;
        e.s1 = s1;
        e.s2 = s2;
        e.s1_used = s1 * sc;
        e.s2_used = s2 * sc;
        out.push_back(e);
    };
    add("pairing_l1", 0.5, 1.5);
    add("pairing_l1", 1.5, 1.5);
    add("pairing_sup", -1.5, 1.5);
    add("moment_l1", 0.5, 1.5);
    add("moment_l1", 1.5, 1.5);
    add("moment_sup", -1.5, 1.5);
    return out;
}

/// LHS and RHS of every form for one sample: time series f, g, h, the
/// collision terms gam = Gamma(f, g) at the same times and a velocity weight
/// zeta (applied as sum_v zeta_v u_v, quadrature weight included).
inline std::vector<std::pair<double, double>> trilinear_sample(const CollisionAssembly& A, const DyadicPartition& p,
                                                               const std::vector<double>& t,
                                                               const std::vector<LatticeField>& f,
                                                               const std::vector<LatticeField>& g,
                                                               const std::vector<LatticeField>& h,
                                                               const std::vector<LatticeField>& gam, const Vec& zeta) {
    const std::size_t n = t.size();
    require(n >= 2 && f.size() == n && g.size() == n && h.size() == n && gam.size() == n, "trilinear: series length");
    const auto& l = p.lattice;
    const int d = l.dim;
    const double vol = l.volume(), w = A.grid.weight;
    const int nq = p.shells();
    // per shell: int |(D_q Gam, D_q h)| dt and int ||D_q (Gam, zeta)||^2 dt
    std::vector<double> pair_int(nq, 0.0), mom_int(nq, 0.0);
    std::vector<std::vector<double>> pv(n, std::vector<double>(nq)), mv = pv;
    for (std::size_t s = 0; s < n; ++s) {
        const Vec pair_mode = (gam[s].coeff.cwiseProduct(h[s].coeff.conjugate())).colwise().sum().real().transpose();
        const CMat zm = zeta.transpose().cast<cplx>() * gam[s].coeff;
        const Vec zm2 = zm.cwiseAbs2().transpose();
        for (int q = p.q_min; q <= p.q_max; ++q) {
            const Vec m2 = p.multiplier(q).cwiseAbs2();
            pv[s][q - p.q_min] = std::abs(vol * w * m2.dot(pair_mode));
            mv[s][q - p.q_min] = vol * m2.dot(zm2);
        }
    }
    for (std::size_t s = 1; s < n; ++s)
        for (int i = 0; i < nq; ++i) {
            pair_int[i] += 0.5 * (t[s] - t[s - 1]) * (pv[s][i] + pv[s - 1][i]);
            mom_int[i] += 0.5 * (t[s] - t[s - 1]) * (mv[s][i] + mv[s - 1][i]);
        }
    auto sum_or_sup = [&](const std::vector<double>& v, double s, bool sup) {
        double acc = 0;
        for (int q = p.q_min; q <= p.q_max; ++q) {
            const double x = std::pow(2.0, q * s) * std::sqrt(v[q - p.q_min]);
            acc = sup ? std::max(acc, x) : acc + x;
        }
        return acc;
    };
    auto cl = [&](const std::vector<LatticeField>& u, double rho, double s, double r, bool nu) {
        return chemin_lerner_norm(p, t, u, rho, s, r, Band::all, nu ? &A.nu : nullptr);
    };
    std::vector<std::pair<double, double>> out;
    for (const auto& e : trilinear_forms(d)) {
        const double s1 = e.s1_used, s2 = e.s2_used, sh = s1 + s2 - 0.5 * d;
        const bool sup = e.form.ends_with("sup");
        const double rf = sup ? infinity : 1.0;  // f, g in the L^inf_T slot
        double lhs = 0, rhs = 0;
        if (e.form.starts_with("pairing")) {
            lhs = sum_or_sup(pair_int, sh, sup);
            const double hn = cl(h, 2, sh, sup ? infinity : 1.0, true);
            rhs = std::sqrt(hn) * (std::sqrt(cl(f, infinity, s1, rf, false) * cl(g, 2, s2, 1.0, true)) +
                                   std::sqrt(cl(f, 2, s2, 1.0, true) * cl(g, infinity, s1, rf, false)));
        } else {
            lhs = sum_or_sup(mom_int, sh, sup);
            rhs = cl(g, 2, s2, 1.0, false) * cl(f, infinity, s1, rf, false);
        }
        out.push_back({lhs, rhs});
    }
    return out;
}

namespace detail {

/// Random real field band-limited in x, with velocity dependence spanned by
/// {1, xi_i, xi_i xi_j} sqrt(mu).
inline LatticeField smooth_random_field(const DyadicPartition& p, const VelocityGrid& g, Rng& rng) {
    Mat basis(g.size(), 10);
    basis.col(0) = g.sqrt_mu;
    int c = 1;
    for (int i = 0; i < 3; ++i) basis.col(c++) = g.xi.col(i).cwiseProduct(g.sqrt_mu);
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) basis.col(c++) = g.xi.col(i).cwiseProduct(g.xi.col(j)).cwiseProduct(g.sqrt_mu);
    std::uniform_int_distribution<int> pick(p.q_min, p.q_max);
    int a = pick(rng), b = pick(rng);
    if (a > b) std::swap(a, b);
    const auto r = random_field(p.lattice, 10, rng, 0.75 * std::ldexp(1.0, a), 4.0 / 3.0 * std::ldexp(1.0, b));
    return {p.lattice, basis.cast<cplx>() * r.coeff, g.weight};
}

}  // namespace detail

/// Ensemble maxima of LHS/RHS on one lattice; zero-RHS samples are skipped
/// and counted. The collision terms of all samples go through one batched
/// quadrature pass.
inline TrilinearRun trilinear_constants(const CollisionAssembly& A, const GammaOperator& G, const SpatialLattice& l,
                                        int ensemble, int snapshots, Rng& rng) {
    require(ensemble >= 1 && snapshots >= 3 && snapshots <= 5, "trilinear: ensemble >= 1, 3..5 snapshots");
    const auto p = build_partition(l);
    const auto& g = A.grid;
    const Mat Hw = high_moment_weights(g);
    std::vector<double> t;
    for (int s = 0; s < snapshots; ++s) t.push_back(double(s) / (snapshots - 1));
    struct Sample {
        std::vector<LatticeField> f, g, h;
        Vec zeta;
    };
    std::vector<Sample> samples(ensemble);
    std::vector<std::pair<const LatticeField*, const LatticeField*>> pairs;
    for (auto& sm : samples) {
        for (int s = 0; s < snapshots; ++s) {
            sm.f.push_back(detail::smooth_random_field(p, g, rng));
            sm.g.push_back(detail::smooth_random_field(p, g, rng));
            sm.h.push_back(detail::smooth_random_field(p, g, rng));
        }
        Vec cz(12);
        for (int i = 0; i < 12; ++i) cz[i] = normal(rng);
        sm.zeta = Hw * cz.normalized();
    }
    for (auto& sm : samples)
        for (int s = 0; s < snapshots; ++s) pairs.push_back({&sm.f[s], &sm.g[s]});
    const auto gam = collision_fields(G, pairs);
    TrilinearRun run;
    run.nx = l.nx;
    run.entries = trilinear_forms(l.dim);
    for (int i = 0; i < ensemble; ++i) {
        const std::vector<LatticeField> gi(gam.begin() + i * snapshots, gam.begin() + (i + 1) * snapshots);
        const auto& sm = samples[i];
        const auto v = trilinear_sample(A, p, t, sm.f, sm.g, sm.h, gi, sm.zeta);
        for (std::size_t e = 0; e < v.size(); ++e) {
            auto& en = run.entries[e];
            if (!(v[e].second > 0)) {
                ++en.skipped;
                continue;
            }
            ++en.samples;
            en.max_ratio = std::max(en.max_ratio, v[e].first / v[e].second);
        }
    }
    return run;
}

inline TrilinearReport trilinear_experiment(const CollisionAssembly& A, const GammaOperator& G,
                                            const ExperimentConfig& c) {
    TrilinearReport rep;
    Rng rng(c.seed);
    const double box = 2.0 * pi * c.tri_box;
    rep.coarse = trilinear_constants(A, G, make_lattice(1, box, c.tri_nx), c.tri_ensemble, c.tri_snapshots, rng);
    rep.fine = trilinear_constants(A, G, make_lattice(1, box, 2 * c.tri_nx), c.tri_ensemble, c.tri_snapshots, rng);
    rep.finite = rep.stable = true;
    for (std::size_t e = 0; e < rep.coarse.entries.size(); ++e) {
        const double a = rep.coarse.entries[e].max_ratio, b = rep.fine.entries[e].max_ratio;
        rep.finite = rep.finite && std::isfinite(a) && std::isfinite(b) && a > 0 && b > 0;
        const double ch = b / a;
        rep.change.push_back(ch);
        rep.stable = rep.stable && ch < 2.0 && ch > 0.5;
    }
    return rep;
}

// ------------------------------------------------------------ sweep, audit, nonlinear run

struct SweepChecks {
    std::vector<double> low_ratios;  ///< r(2k)/r(k) on consecutive low magnitudes
    double high_change = 0;          ///< |r(k_b) / r(k_a) - 1| between the two largest magnitudes
    bool quadratic = false, saturated = false, positive = false;
    double micro_ratio = 0, micro_limit = 0, C1 = 0, C2 = 0;
    bool micro_pass = false;
};

inline SweepChecks sweep_checks(const SpectralReport& r) {
    SweepChecks c;
    std::vector<const ModeFit*> low, high;
    for (const auto& m : r.modes) (m.low ? low : high).push_back(&m);
    c.quadratic = low.size() >= 2;
    for (std::size_t i = 1; i < low.size(); ++i) {
        const double ratio = low[i]->full.rate / low[i - 1]->full.rate;
        c.low_ratios.push_back(ratio);
        c.quadratic = c.quadratic && ratio >= 3.0 && ratio <= 5.0;
    }
    if (high.size() >= 2) {
        c.high_change = std::abs(high.back()->full.rate / high[high.size() - 2]->full.rate - 1.0);
        c.saturated = c.high_change <= 0.3;
    }
    c.positive = r.lambda1 > 0;
    if (!low.empty()) {
        const auto& m = *low.front();
        c.micro_ratio = m.micro_ratio;
        c.micro_limit = 10.0 * m.k;
        c.C1 = m.C1;
        c.C2 = m.C2;
        c.micro_pass = m.micro_ratio <= c.micro_limit && m.C1 <= 10.0 && m.C2 <= 10.0;
    }
    return c;
}

struct ShellAudit {
    int q = 0;
    Regime regime = Regime::low;
    double ratio_min = 0, ratio_max = 0, dissipation = 0;
};

struct AuditReport {
    EtaCalibration low, high;
    std::vector<ShellAudit> shells;
    double kappa_coarse = 0, kappa_fine = 0;
    bool equivalence = false, dissipation = false, inequality = false;
};

inline AuditReport audit_experiment(const LinearEngine& E, const ExperimentConfig& c) {
    const auto& A = E.assembly();
    const auto l = make_lattice(1, 2.0 * pi * c.sim_box, c.sim_nx);
    const auto p = build_partition(l);
    Rng rng(c.seed);
    AuditReport rep;
    rep.equivalence = rep.dissipation = true;
    for (const Regime reg : {Regime::low, Regime::high}) {
        const auto cal = calibrate_eta(A, p, reg, rng, c.audit_fields);
        (reg == Regime::low ? rep.low : rep.high) = cal;
        const auto [lo, hi] = band_range(p.q_min, p.q_max, reg == Regime::low ? Band::low : Band::high);
        for (int q = lo; q <= hi; ++q) {
            ShellAudit s{q, reg, infinity, 0.0, infinity};
            for (int n = 0; n < c.audit_fields; ++n) {
                const auto e = lyapunov_audit(A, p, random_audit_field(A, p, q, rng), q, reg, cal.eta);
                s.ratio_min = std::min({s.ratio_min, e.ratio(), e.ratio_alt()});
                s.ratio_max = std::max({s.ratio_max, e.ratio(), e.ratio_alt()});
                const double rate = reg == Regime::low ? std::ldexp(1.0, 2 * q) : 1.0;
                s.dissipation = std::min(s.dissipation, e.D / (rate * e.block + e.nu_micro));
            }
            rep.equivalence = rep.equivalence && s.ratio_min >= 0.25 && s.ratio_max <= 4.0;
            rep.dissipation = rep.dissipation && s.dissipation > 0;
            rep.shells.push_back(s);
        }
    }
    const auto r = random_field(l, 1, rng, 0.0, infinity);
    LatticeField f0 = zero_field(l, A.grid.size(), A.grid.weight);
    f0.coeff = default_mode_data(A.grid) * r.coeff;
    for (const double dt : {c.audit_dt, 0.5 * c.audit_dt}) {
        SimConfig sc;
        sc.dt = dt;
        sc.nonlinear = false;
        sc.snapshot_every = 1;
        const auto rec = Simulation(E, l, sc).run(f0, c.audit_T);
        const auto tr = lyapunov_inequality_trace(A, p, rec, rep.low.eta, rep.high.eta);
        (dt == c.audit_dt ? rep.kappa_coarse : rep.kappa_fine) = tr.kappa;
    }
    rep.inequality = rep.kappa_fine > 0 && std::abs(rep.kappa_coarse - rep.kappa_fine) <= 0.05 * rep.kappa_fine;
    return rep;
}

struct SimulationReport {
    RunRecord record;
    EnergyReport energy;
    std::vector<double> drift;  ///< |mean invariants(t) - mean invariants(0)|
    double drift_bound_ratio = 0;  ///< max drift / (tol_L t ||f0||)
    double reality = 0, min_F = 0;
    double C_margin = 0;
    double ratio = 0;  ///< (E + D) / initial
    bool bounded = false, conserved = false;
};

/// White-noise spatial data times the mixed mode profile, scaled so that
/// sup_x ||f(x, .)||_{L2_xi} equals the amplitude.
inline LatticeField small_data(const SpatialLattice& l, const VelocityGrid& g, double amplitude, Rng& rng) {
    const auto r = random_field(l, 1, rng, 0.0, infinity);
    LatticeField f{l, default_mode_data(g) * r.coeff, g.weight};
    const CMat ph = to_physical(f);
    double sup = 0;
    for (Eigen::Index x = 0; x < ph.cols(); ++x) sup = std::max(sup, std::sqrt(g.weight) * ph.col(x).norm());
    require(sup > 0, "small data: empty field");
    f.coeff *= amplitude / sup;
    return f;
}

inline SimulationReport simulate_experiment(const LinearEngine& E, const GammaOperator* G, const ExperimentConfig& c,
                                            double eta_low, double eta_high) {
    const auto& A = E.assembly();
    const auto l = make_lattice(1, 2.0 * pi * c.sim_box, c.sim_nx);
    const auto p = build_partition(l);
    Rng rng(c.seed);
    const auto f0 = small_data(l, A.grid, c.sim_amplitude, rng);
    SimConfig sc;
    sc.dt = c.sim_dt;
    sc.nonlinear = c.sim_nonlinear;
    sc.snapshot_every = c.sim_snapshot_every;
    SimulationReport rep;
    rep.record = Simulation(E, l, sc, G).run(f0, c.sim_T);
    const auto& rec = rep.record;
    rep.energy = energy_functionals(A, p, rec.t, rec.f);
    rep.ratio = (rep.energy.E + rep.energy.D) / rep.energy.initial;
    const auto m0 = mean_invariants(A, f0);
    for (std::size_t s = 0; s < rec.t.size(); ++s) {
        rep.drift.push_back((mean_invariants(A, rec.f[s]) - m0).norm());
        if (rec.t[s] > 0) rep.drift_bound_ratio = std::max(rep.drift_bound_ratio, rep.drift.back() / (A.tol_L * rec.t[s] * f0.norm()));
    }
    rep.reality = *std::max_element(rec.reality.begin(), rec.reality.end());
    rep.min_F = *std::min_element(rec.min_F.begin(), rec.min_F.end());
    if (rec.t.size() >= 3) rep.C_margin = lyapunov_inequality_trace(A, p, rec, eta_low, eta_high, c.sim_kappa).C_margin;
    rep.bounded = rep.ratio <= 20.0;
    rep.conserved = rep.drift_bound_ratio <= 1.0;
    return rep;
}

// ------------------------------------------------------------ serialization

inline json to_json(const SpectralReport& r) {
    json modes = json::array();
    for (const auto& m : r.modes)
        modes.push_back({{"k", m.k},
                         {"low", m.low},
                         {"t_end", m.t_end},
                         {"rate", m.full.rate},
                         {"r2", m.full.r2},
                         {"window_shrunk", m.full.window_shrunk},
                         {"micro_rate", m.micro.rate},
                         {"micro_ratio", m.micro_ratio},
                         {"C1", m.C1},
                         {"C2", m.C2},
                         {"C_joint", m.C_joint},
                         {"bound_valid", m.bound_valid}});
    const auto c = sweep_checks(r);
    return {{"lambda1", r.lambda1},
            {"lambda0", r.lambda0},
            {"k0", r.k0},
            {"k0_formula", r.k0_formula},
            {"c_min", r.c_min},
            {"modes", modes},
            {"checks",
             {{"low_ratios", c.low_ratios},
              {"high_change", c.high_change},
              {"quadratic", c.quadratic},
              {"saturated", c.saturated},
              {"lambda1_positive", c.positive},
              {"micro_ratio", c.micro_ratio},
              {"micro_limit", c.micro_limit},
              {"C1", c.C1},
              {"C2", c.C2},
              {"micro_pass", c.micro_pass}}}};
}

inline json to_json(const DecayFitReport& r) {
    json fits = json::array(), series = json::array();
    for (const auto& f : r.fits)
        fits.push_back({{"sigma", f.sigma},
                        {"sigma0", f.sigma0},
                        {"slope", f.slope},
                        {"expected", f.expected},
                        {"tol", f.tol},
                        {"r2", f.r2},
                        {"micro_slope", f.micro_slope},
                        {"micro_expected", f.micro_expected},
                        {"micro_tol", f.micro_tol},
                        {"micro_r2", f.micro_r2},
                        {"reliable", f.reliable},
                        {"pass", f.pass}});
    for (const auto& s : r.series)
        series.push_back({{"sigma", s.sigma}, {"sigma0", s.sigma0}, {"full", s.full}, {"micro", s.micro}});
    return {{"lambda1", r.lambda1},
            {"window", {{"T_min", r.T_min}, {"T_max", r.T_max}, {"T_end", r.T_end}, {"valid", r.window_valid}}},
            {"shells", {r.q_min, r.q_max}},
            {"radii", r.radii},
            {"lattice_modes", r.lattice_modes},
            {"dt", r.dt},
            {"times", r.times},
            {"series", series},
            {"fits", fits}};
}

inline json to_json(const TrilinearRun& r) {
    json e = json::array();
    for (const auto& x : r.entries)
        e.push_back({{"form", x.form},
                     {"s1", x.s1},
                     {"s2", x.s2},
                     {"s1_used", x.s1_used},
                     {"s2_used", x.s2_used},
                     {"max_ratio", x.max_ratio},
                     {"samples", x.samples},
                     {"skipped", x.skipped}});
    return {{"nx", r.nx}, {"entries", e}};
}

inline json to_json(const TrilinearReport& r) {
    return {{"coarse", to_json(r.coarse)},
            {"fine", to_json(r.fine)},
            {"change", r.change},
            {"finite", r.finite},
            {"stable", r.stable}};
}

inline json to_json(const AuditReport& r) {
    json shells = json::array();
    for (const auto& s : r.shells)
        shells.push_back({{"q", s.q},
                          {"regime", s.regime == Regime::low ? "low" : "high"},
                          {"ratio_min", s.ratio_min},
                          {"ratio_max", s.ratio_max},
                          {"dissipation", s.dissipation}});
    auto cal = [](const EtaCalibration& c) {
        return json{{"C_equivalence", c.C_equivalence}, {"C_dissipation", c.C_dissipation}, {"C", c.C}, {"eta", c.eta}};
    };
    return {{"eta_low", cal(r.low)},
            {"eta_high", cal(r.high)},
            {"shells", shells},
            {"kappa", {r.kappa_coarse, r.kappa_fine}},
            {"equivalence", r.equivalence},
            {"dissipation", r.dissipation},
            {"inequality", r.inequality}};
}

inline json to_json(const SimulationReport& r) {
    const auto& e = r.energy;
    return {{"E", e.E},
            {"D", e.D},
            {"initial", e.initial},
            {"ratio", r.ratio},
            {"parts",
             {{"E_low", e.E_low}, {"E_high", e.E_high}, {"D_macro_low", e.D_macro_low}, {"D_micro_low", e.D_micro_low},
              {"D_high", e.D_high}}},
            {"drift_bound_ratio", r.drift_bound_ratio},
            {"reality", r.reality},
            {"min_F", r.min_F},
            {"C_margin", r.C_margin},
            {"steps", r.record.steps},
            {"bounded", r.bounded},
            {"conserved", r.conserved}};
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    require(bool(out), "cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

/// CSV with a comment line naming the config hash, then the header row.
inline void write_csv(const std::filesystem::path& path, const std::string& config_hash,
                      const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    require(bool(out), "cannot write '" + path.string() + "'");
    out << "# config_hash " << config_hash << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n" << std::setprecision(17);
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << "\n";
    }
}

// ------------------------------------------------------------ report

struct ReportResult {
    json merged;
    std::string summary;
    std::vector<std::string> missing;
    bool all_pass = false;
};

inline const std::vector<std::string>& expected_artifacts() {
    static const std::vector<std::string> names{"assemble", "sweep", "decay", "simulate", "audit", "trilinear"};
    return names;
}

namespace detail {

/// Rows containing a non-finite value, as 1-based data line numbers.
inline std::vector<int> bad_csv_rows(const std::filesystem::path& path) {
    std::vector<int> bad;
    std::ifstream in(path);
    std::string line;
    int row = 0;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        ++row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            double v = 0;
            try {
                v = std::stod(cell);
            } catch (const std::exception&) {
                v = std::numeric_limits<double>::quiet_NaN();
            }
            if (!std::isfinite(v)) {
                bad.push_back(row);
                break;
            }
        }
    }
    return bad;
}

inline bool flag(const json& j, const char* key) { return j.contains(key) && j[key].is_boolean() && j[key].get<bool>(); }

}  // namespace detail

/// Merges the artifacts of an output directory and flags every failed bound.
inline ReportResult build_report(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    ReportResult r;
    r.merged = {{"schema_version", schema_version}, {"artifact", "report"}};
    json checks = json::object();
    std::ostringstream s;
    for (const auto& name : expected_artifacts()) {
        const fs::path p = dir / (name + ".json");
        if (!fs::exists(p)) {
            r.missing.push_back(p.filename().string());
            continue;
        }
        json j;
        try {
            std::ifstream in(p);
            j = json::parse(in);
        } catch (const std::exception& e) {
            checks[name] = {{"valid", false}, {"reason", std::string("unreadable: ") + e.what()}};
            continue;
        }
        r.merged[name] = j;
        json c = json::object();
        const json& b = j.contains("result") ? j["result"] : json::object();
        if (name == "assemble") c["lambda0_above_0.05"] = b.value("lambda0", 0.0) > 0.05;
        if (name == "sweep" && b.contains("checks")) {
            const auto& k = b["checks"];
            c["quadratic_low_branch"] = detail::flag(k, "quadratic");
            c["high_branch_saturation"] = detail::flag(k, "saturated");
            c["lambda1_positive"] = detail::flag(k, "lambda1_positive");
            c["micro_enhanced"] = detail::flag(k, "micro_pass");
        }
        if (name == "decay" && b.contains("fits"))
            for (const auto& f : b["fits"]) {
                std::ostringstream key;
                key << "fit_sigma" << f.value("sigma", 0.0) << "_sigma0" << f.value("sigma0", 0.0);
                c[key.str()] = detail::flag(f, "pass");
            }
        if (name == "simulate") {
            c["bounded"] = detail::flag(b, "bounded");
            c["conserved"] = detail::flag(b, "conserved");
        }
        if (name == "audit") {
            c["equivalence"] = detail::flag(b, "equivalence");
            c["dissipation"] = detail::flag(b, "dissipation");
            c["inequality"] = detail::flag(b, "inequality");
        }
        if (name == "trilinear") {
            c["finite"] = detail::flag(b, "finite");
            c["stable"] = detail::flag(b, "stable");
        }
        const fs::path csv = dir / (name + ".csv");
        bool valid = true;
        if (fs::exists(csv)) {
            const auto bad = detail::bad_csv_rows(csv);
            if (!bad.empty()) {
                valid = false;
                c["flagged_rows"] = bad;
            }
        }
        c["valid"] = valid;
        checks[name] = c;
    }
    r.merged["checks"] = checks;
    r.merged["missing"] = r.missing;
    r.all_pass = r.missing.empty();
    s << "artifact    check                              result\n";
    for (const auto& [name, c] : checks.items()) {
        for (const auto& [k, v] : c.items()) {
            if (!v.is_boolean()) {
                if (k == "flagged_rows") s << std::left << std::setw(12) << name << std::setw(35) << k << v.dump() << "\n";
                continue;
            }
            const bool ok = v.get<bool>();
            r.all_pass = r.all_pass && ok;
            s << std::left << std::setw(12) << name << std::setw(35) << k << (ok ? "pass" : "FAIL") << "\n";
        }
    }
    for (const auto& m : r.missing) s << "missing     " << m << "\n";
    r.merged["all_pass"] = r.all_pass;
    r.summary = s.str();
    return r;
}

}  // namespace kboltz
