// Command-line front end: simulate | make-data | grad-check | invert |
// verify-manifest. Configuration is TOML; outputs are CSV files with JSON
// sidecars, all tied together by a config hash in manifest.json.

#include <rsfinv/cli.hpp>

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

namespace {

std::atomic<bool> g_stop{false};

void on_sigint(int) { g_stop.store(true); }

rsfinv::RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    rsfinv::RunConfig cfg = rsfinv::RunConfig::parse(ss.str());
    if (seed) cfg.seed = *seed;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-consistent dynamic-rupture simulation and inversion"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    std::string config_path, out_dir = ".", log_level = "info";
    int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::optional<std::uint64_t> seed_override;
    app.add_option("--config", config_path, "TOML configuration file");
    app.add_option("--out", out_dir, "output directory")->capture_default_str();
    app.add_option("--jobs", jobs, "worker threads for perturbation runs")
        ->capture_default_str();
    app.add_option("--seed-override", seed_override, "replace the fault seed");
    app.add_option("--log-level", log_level, "debug|info|warn|error")->capture_default_str();

    auto* sim = app.add_subcommand("simulate", "forward run with archived outputs");
    int source_m = 0;
    auto* mkd = app.add_subcommand("make-data", "generate synthetic receiver data");
    mkd->add_option("--source-m", source_m,
                    "fault grid size for high-resolution data (0 = config m)");
    auto* gck = app.add_subcommand("grad-check", "adjoint vs finite-difference gradients");
    std::string data_dir, resume_path;
    auto* inv = app.add_subcommand("invert", "L-BFGS parameter inversion");
    inv->add_option("--data", data_dir, "directory holding data.csv + manifest.json")
        ->required();
    inv->add_option("--resume", resume_path, "iterate CSV to resume from");
    std::string verify_dir;
    auto* ver = app.add_subcommand("verify-manifest", "check output hash consistency");
    ver->add_option("dir", verify_dir, "run directory containing manifest.json")
        ->required();

    CLI11_PARSE(app, argc, argv);

    rsfinv::Logger log;
    try {
        log.level = rsfinv::log_level_from_name(log_level);

        if (ver->parsed()) {
            auto problems = rsfinv::verify_manifest(verify_dir);
            for (const auto& p : problems) log.error(p);
            if (problems.empty()) log.info("manifest consistent");
            return problems.empty() ? 0 : 1;
        }

        if (config_path.empty()) throw std::runtime_error("--config is required");
        rsfinv::RunConfig cfg = load_config(config_path, seed_override);

        if (sim->parsed()) {
            auto res = rsfinv::cmd_simulate(cfg, out_dir, log);
            return res.aborted ? 2 : 0;
        }
        if (mkd->parsed()) {
            rsfinv::cmd_make_data(cfg, out_dir, source_m, log);
            return 0;
        }
        if (gck->parsed()) {
            auto res = rsfinv::cmd_grad_check(cfg, out_dir, jobs, log);
            return res.passed ? 0 : 1;
        }
        if (inv->parsed()) {
            std::signal(SIGINT, on_sigint);
            std::optional<rsfinv::Vec> init;
            if (!resume_path.empty()) {
                auto csv = rsfinv::read_csv(resume_path);
                init = rsfinv::Vec(csv.data.col(0));
            }
            auto res = rsfinv::cmd_invert(cfg, out_dir, data_dir, &g_stop, init, log);
            return res.lbfgs.stop_reason == "stopped by callback" ? 3 : 0;
        }
    } catch (const std::exception& e) {
        log.error(e.what());
        return 1;
    }
    return 0;
}
