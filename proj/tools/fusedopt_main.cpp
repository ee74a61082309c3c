#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "fusedopt/harness.hpp"
#include "fusedopt/memtrack.hpp"

namespace fs = std::filesystem;
using namespace fusedopt;

namespace {

int run_command(const std::string& config_path, long seed, const std::string& out_dir,
                int parallel) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_file(config_path));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!out_dir.empty()) {
        cfg.out_dir = out_dir;
    } else if (const char* env = std::getenv("FUSEDOPT_OUT")) {
        cfg.out_dir = (fs::path(env) / cfg.out_dir).string();
    }

    if (parallel <= 1) return run_experiment_exitcode(cfg);

    // Independent seeds on worker threads, each with its own model, ledger,
    // and output directory.
    std::vector<int> codes(static_cast<std::size_t>(parallel), 0);
    std::vector<std::thread> workers;
    for (int k = 0; k < parallel; ++k) {
        ExperimentConfig wcfg = cfg;
        wcfg.seed = cfg.seed + static_cast<std::uint64_t>(k);
        wcfg.out_dir = (fs::path(cfg.out_dir) / ("seed" + std::to_string(wcfg.seed))).string();
        workers.emplace_back([wcfg, k, &codes] { codes[static_cast<std::size_t>(k)] =
                                                     run_experiment_exitcode(wcfg); });
    }
    for (auto& w : workers) w.join();
    for (int c : codes)
        if (c != 0) return c;
    return 0;
}

int estimate_command(const std::string& method, long params, long adapter) {
    try {
        if (params <= 0) throw LedgerError("--params must be > 0");
        if (adapter < 0) throw LedgerError("--adapter must be >= 0");
        const AnalyticEstimate est = analytic_estimate_for_count(
            parse_estimate_method(method), static_cast<std::size_t>(params),
            static_cast<std::size_t>(adapter));
        std::cout << est.report_text();
        return 0;
    } catch (const LedgerError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
}

int compare_gradnorm_command(const std::string& config_path) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_file(config_path));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    cfg.experiment = "gradnorm_compare";
    if (const char* env = std::getenv("FUSEDOPT_OUT"))
        cfg.out_dir = (fs::path(env) / cfg.out_dir).string();
    return run_experiment_exitcode(cfg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fused backward-pass optimizer experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, method;
    long seed = -1, params = 0, adapter = 0;
    int parallel = 1;

    CLI::App* run = app.add_subcommand("run", "run an experiment config");
    run->add_option("config", config_path, "experiment config file")->required();
    run->add_option("--seed", seed, "override run.seed");
    run->add_option("--out", out_dir, "override run.out_dir");
    run->add_option("--parallel", parallel, "run K consecutive seeds on worker threads");

    CLI::App* est = app.add_subcommand("estimate", "analytic memory estimate");
    est->add_option("--method", method, "adamw|adafactor|lora|lomo|adalomo")->required();
    est->add_option("--params", params, "model parameter count")->required();
    est->add_option("--adapter", adapter, "adapter parameter count");

    CLI::App* cmp = app.add_subcommand("compare-gradnorm", "clipped vs unclipped fused training");
    cmp->add_option("config", config_path, "experiment config file")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return run_command(config_path, seed, out_dir, parallel);
    if (est->parsed()) return estimate_command(method, params, adapter);
    return compare_gradnorm_command(config_path);
}
