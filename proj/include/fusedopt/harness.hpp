#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fusedopt/memtrack.hpp"
#include "fusedopt/models.hpp"
#include "fusedopt/optim.hpp"

namespace fusedopt {

// Exit code 2
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Exit code 3; message names the offending step.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Flat key-value config: one `key = value` per line, '#' comments,
// dotted section names (optimizer.alpha, model.d_model, ...).
class KeyValueConfig {
public:
    static KeyValueConfig parse_file(const std::string& path);
    static KeyValueConfig parse_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long get_long(const std::string& key, long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::string require(const std::string& key) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

struct ExperimentConfig {
    std::string experiment;  // trajectory2d | train_mlp | train_lm | memory_report | gradnorm_compare
    OptimizerConfig optimizer;
    bool alpha_explicit = false;  // true when optimizer.alpha came from the config

    TransformerConfig lm;
    std::vector<std::size_t> mlp_widths{8, 16, 16, 4};

    std::string data_path;  // empty -> synthetic Markov byte stream
    double val_fraction = 0.01;
    std::size_t synthetic_tokens = 200000;

    long steps = 200;
    std::size_t batch_size = 4;
    long eval_interval = 100;
    std::size_t eval_windows = 64;

    // trajectory2d: frozen start from a coarse grid search over starts
    // (see README); four fixed-hyperparameter single-moment baselines.
    double start_x = 0.2;
    double start_y = -0.6;
    long traj_steps = 2000;

    std::uint64_t seed = 0;
    std::string out_dir = "out";

    static ExperimentConfig from_kv(const KeyValueConfig& kv);
};

// Per-method learning rates for the toy LM, frozen from a documented sweep.
double default_lm_alpha(OptMethod m);

// ---- data ----

std::vector<int> ingest_text(const std::string& path);  // byte tokens
// Last `val_fraction` of the stream becomes validation.
std::pair<std::vector<int>, std::vector<int>> split_tokens(const std::vector<int>& tokens,
                                                           double val_fraction);
// Seeded order-2 Markov stream over a 64-symbol alphabet.
std::vector<int> markov_byte_stream(std::uint64_t seed, std::size_t length);

// ---- output helpers ----

std::string format_double(double v);  // locale-independent, round-trip exact

struct CsvWriter {
    explicit CsvWriter(const std::string& path, const std::string& schema,
                       const std::vector<std::string>& columns);
    void row(const std::vector<std::string>& cells);
    ~CsvWriter();

private:
    struct Impl;
    Impl* impl_;
};

// ---- runs ----

struct LmRunOutput {
    double final_train_loss = 0;
    EvalMetrics final_eval;
    long backward_passes = 0;
    long steps = 0;
    double wall_seconds = 0;
    MemoryLedger ledger;
};

// Trains the tiny LM per cfg with the given optimizer settings. When
// out_dir is non-empty, writes steps.csv / eval.csv there.
LmRunOutput run_lm_training(const ExperimentConfig& cfg, const OptimizerConfig& opt,
                            const std::string& out_dir);

// Executes cfg.experiment, writing all artifacts under cfg.out_dir.
// Throws ConfigError / NumericError; other exceptions indicate bugs.
void run_experiment(const ExperimentConfig& cfg);

// CLI-facing wrapper mapping errors to the exit-code contract
// (0 ok, 2 config, 3 numeric).
int run_experiment_exitcode(const ExperimentConfig& cfg);

}  // namespace fusedopt
