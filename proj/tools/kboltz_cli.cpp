// kboltz: assemble the collision operator, run the experiments, merge the report.
//
//   kboltz <assemble|sweep|decay|simulate|audit|trilinear|report>
//          [--config FILE] [--out DIR] [--seed N] [--threads N] [--cache FILE]
//
// Exit codes: 0 success, 2 invalid input, 3 numerical failure or missing
// artifacts (report), 64 usage error.

#include "kboltz/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

using namespace kboltz;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config, out, cache;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
};

ExperimentConfig load_config(const Options& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : ExperimentConfig::from(ConfigFile::load(o.config));
    if (!o.out.empty()) c.out = o.out;
    if (!o.cache.empty()) c.cache = o.cache;
    if (o.seed) c.seed = *o.seed;
    if (o.threads) c.threads = *o.threads;
    c.validate();
    thread_count() = c.threads;
    fs::create_directories(c.out);
    return c;
}

fs::path artifact(const ExperimentConfig& c, const std::string& name) { return fs::path(c.out) / name; }

void log(const std::string& msg) { std::cerr << "[kboltz] " << msg << std::endl; }

/// Reuses a value from an earlier artifact in the output directory when it
/// was produced by the same configuration.
std::optional<json> reuse(const ExperimentConfig& c, const std::string& name) {
    const auto p = artifact(c, name + ".json");
    if (!fs::exists(p)) return std::nullopt;
    try {
        std::ifstream in(p);
        json j = json::parse(in);
        if (j.value("config_hash", "") == hex(c.hash()) && j.contains("result")) return j["result"];
    } catch (const std::exception&) {
    }
    return std::nullopt;
}

void finish(const ExperimentConfig& c, const std::string& name, const CollisionAssembly* A, json result,
            double seconds) {
    json j = artifact_header(name, c, A);
    j["seconds"] = seconds;
    j["result"] = std::move(result);
    write_json(artifact(c, name + ".json"), j);
    log("wrote " + artifact(c, name + ".json").string());
}

SpectralReport run_sweep(const LinearEngine& E, const ExperimentConfig& c) {
    SweepOptions o;
    o.samples = c.sweep_samples;
    o.horizon = c.sweep_horizon;
    return mode_sweep(E, c.sweep_k, std::nullopt, o);
}

double lambda1_for(const LinearEngine& E, const ExperimentConfig& c) {
    if (auto r = reuse(c, "sweep")) return (*r)["lambda1"].get<double>();
    log("no matching sweep artifact, running the sweep for lambda1");
    return run_sweep(E, c).lambda1;
}

std::pair<double, double> eta_for(const LinearEngine& E, const ExperimentConfig& c) {
    if (auto r = reuse(c, "audit")) return {(*r)["eta_low"]["eta"].get<double>(), (*r)["eta_high"]["eta"].get<double>()};
    log("no matching audit artifact, calibrating eta");
    const auto l = make_lattice(1, 2.0 * pi * c.sim_box, c.sim_nx);
    const auto p = build_partition(l);
    Rng rng(c.seed);
    const double lo = calibrate_eta(E.assembly(), p, Regime::low, rng, c.audit_fields).eta;
    const double hi = calibrate_eta(E.assembly(), p, Regime::high, rng, c.audit_fields).eta;
    return {lo, hi};
}

int run(const std::string& cmd, const Options& o) {
    const auto c = load_config(o);
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    const std::string h = hex(c.hash());

    if (cmd == "report") {
        const auto r = build_report(c.out);
        write_json(artifact(c, "report.json"), r.merged);
        std::ofstream(artifact(c, "summary.txt")) << r.summary;
        std::cout << r.summary;
        if (!r.missing.empty()) {
            std::cerr << "missing artifacts in " << c.out << ":";
            for (const auto& m : r.missing) std::cerr << " " << m;
            std::cerr << "\nexpected:";
            for (const auto& e : expected_artifacts()) std::cerr << " " << e << ".json";
            std::cerr << "\n";
            return 3;
        }
        return 0;
    }

    const auto A = open_assembly(c);
    const LinearEngine E(A);

    if (cmd == "assemble") {
        finish(c, "assemble", &A,
               {{"slots", A.size()},
                {"lambda0", A.lambda0},
                {"tol_L", A.tol_L},
                {"tol_quad", A.grid.tol_quad},
                {"tol_quad_high", A.grid.tol_quad_high},
                {"sym_residual", A.sym_residual},
                {"nu_bounds", {A.nu_c1, A.nu_c2}},
                {"cache", c.cache_path()}},
               elapsed());
        std::cout << "lambda0 " << A.lambda0 << "  tol_L " << A.tol_L << "  hash " << hex(A.hash) << "\n";
    } else if (cmd == "sweep") {
        const auto r = run_sweep(E, c);
        std::vector<std::vector<double>> rows;
        for (const auto& m : r.modes)
            rows.push_back({m.k, double(m.low), m.full.rate, m.full.r2, m.micro.rate, m.micro_ratio, m.C1, m.C2});
        write_csv(artifact(c, "sweep.csv"), h, {"k", "low", "rate", "r2", "micro_rate", "micro_ratio", "C1", "C2"}, rows);
        finish(c, "sweep", &A, to_json(r), elapsed());
        std::cout << "lambda1 " << r.lambda1 << "  lambda0 " << r.lambda0 << "\n";
    } else if (cmd == "decay") {
        const auto r = decay_experiment(E, c, lambda1_for(E, c));
        std::vector<std::string> head{"t"};
        for (const auto& s : r.series) {
            std::ostringstream k;
            k << "_s" << s.sigma << "_s0" << s.sigma0;
            head.push_back("full" + k.str());
            head.push_back("micro" + k.str());
        }
        std::vector<std::vector<double>> rows;
        for (std::size_t n = 0; n < r.times.size(); ++n) {
            rows.push_back({r.times[n]});
            for (const auto& s : r.series) rows.back().insert(rows.back().end(), {s.full[n], s.micro[n]});
        }
        write_csv(artifact(c, "decay.csv"), h, head, rows);
        finish(c, "decay", &A, to_json(r), elapsed());
        for (const auto& f : r.fits)
            std::cout << "sigma " << f.sigma << " sigma0 " << f.sigma0 << ": slope " << f.slope << " (" << f.expected
                      << "), micro " << f.micro_slope << " (" << f.micro_expected << ")"
                      << (f.reliable ? "" : " unreliable") << (f.pass ? " pass" : " FAIL") << "\n";
    } else if (cmd == "simulate") {
        const auto [lo, hi] = eta_for(E, c);
        std::optional<GammaOperator> G;
        if (c.sim_nonlinear) G.emplace(A.grid, c.kernel);
        const auto r = simulate_experiment(E, G ? &*G : nullptr, c, lo, hi);
        std::vector<std::vector<double>> rows;
        for (std::size_t s = 0; s < r.record.t.size(); ++s)
            rows.push_back({r.record.t[s], r.drift[s], r.record.reality[s], r.record.min_F[s]});
        write_csv(artifact(c, "simulate.csv"), h, {"t", "drift", "reality", "min_F"}, rows);
        json j = to_json(r);
        j["eta"] = {lo, hi};
        finish(c, "simulate", &A, j, elapsed());
        std::cout << "(E + D) / initial " << r.ratio << "  C_margin " << r.C_margin << "\n";
    } else if (cmd == "audit") {
        const auto r = audit_experiment(E, c);
        std::vector<std::vector<double>> rows;
        for (const auto& s : r.shells)
            rows.push_back({double(s.q), double(s.regime == Regime::high), s.ratio_min, s.ratio_max, s.dissipation});
        write_csv(artifact(c, "audit.csv"), h, {"q", "high", "ratio_min", "ratio_max", "dissipation"}, rows);
        finish(c, "audit", &A, to_json(r), elapsed());
        std::cout << "eta " << r.low.eta << " / " << r.high.eta << "  kappa " << r.kappa_coarse << " / " << r.kappa_fine
                  << "\n";
    } else if (cmd == "trilinear") {
        const GammaOperator G(A.grid, c.kernel);
        const auto r = trilinear_experiment(A, G, c);
        std::vector<std::vector<double>> rows;
        for (std::size_t e = 0; e < r.change.size(); ++e) {
            const auto& a = r.coarse.entries[e];
            rows.push_back({double(e), a.s1, a.s2, a.max_ratio, r.fine.entries[e].max_ratio, r.change[e],
                            double(a.skipped + r.fine.entries[e].skipped)});
        }
        write_csv(artifact(c, "trilinear.csv"), h, {"entry", "s1", "s2", "coarse", "fine", "change", "skipped"}, rows);
        finish(c, "trilinear", &A, to_json(r), elapsed());
        std::cout << "finite " << r.finite << "  stable " << r.stable << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kinetic relaxation experiments"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config, "key = value configuration file");
    app.add_option("--out", o.out, "output directory");
    app.add_option("--seed", o.seed, "random seed");
    app.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--cache", o.cache, "assembly cache file");
    const std::vector<std::pair<std::string, std::string>> cmds{
        {"assemble", "assemble or load the collision operator"},
        {"sweep", "single-mode spectral sweep"},
        {"decay", "Besov decay-rate fits"},
        {"simulate", "periodic small-data run"},
        {"audit", "Lyapunov functional audit"},
        {"trilinear", "trilinear constant estimates"},
        {"report", "merge artifacts into report.json and summary.txt"}};
    for (const auto& [name, help] : cmds) app.add_subcommand(name, help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 64;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return run(cmd, o);
    } catch (const ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    }
}
