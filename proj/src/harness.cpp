#include "fusedopt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace fusedopt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------- config ----------

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
    KeyValueConfig kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        kv.values_[key] = value;
    }
    return kv;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) != 0; }

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: " + it->second);
    }
}

long KeyValueConfig::get_long(const std::string& key, long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const long v = std::stol(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: " + it->second);
    }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "': not a bool: " + it->second);
}

std::string KeyValueConfig::require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key: " + key);
    return it->second;
}

double default_lm_alpha(OptMethod m) {
    // Frozen from the learning-rate sweep documented in the README.
    switch (m) {
        case OptMethod::sgd:
        case OptMethod::lomo: return 0.1;
        case OptMethod::momentum: return 0.1;
        case OptMethod::variance: return 0.01;
        case OptMethod::adam:
        case OptMethod::adamw: return 0.001;
        case OptMethod::adafactor: return 0.05;
        case OptMethod::adalomo: return 0.005;
    }
    return 1e-3;
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
    ExperimentConfig cfg;
    cfg.experiment = kv.require("experiment");
    const bool known = cfg.experiment == "trajectory2d" || cfg.experiment == "train_mlp" ||
                       cfg.experiment == "train_lm" || cfg.experiment == "memory_report" ||
                       cfg.experiment == "gradnorm_compare";
    if (!known) throw ConfigError("unknown experiment: " + cfg.experiment);

    OptimizerConfig& oc = cfg.optimizer;
    try {
        oc.method = parse_opt_method(kv.get_string("optimizer.method", "sgd"));
    } catch (const OptimError& e) {
        throw ConfigError(e.what());
    }
    cfg.alpha_explicit = kv.has("optimizer.alpha");
    oc.alpha = kv.get_double("optimizer.alpha", oc.alpha);
    oc.beta1 = kv.get_double("optimizer.beta1", oc.beta1);
    oc.beta2 = kv.get_double("optimizer.beta2", oc.beta2);
    oc.beta = kv.get_double("optimizer.beta", oc.beta);
    oc.eps1 = kv.get_double("optimizer.eps1", oc.eps1);
    oc.eps2 = kv.get_double("optimizer.eps2", oc.eps2);
    oc.weight_decay = kv.get_double("optimizer.weight_decay", oc.weight_decay);
    if (kv.has("optimizer.clip_threshold"))
        oc.clip_threshold = kv.get_double("optimizer.clip_threshold", 1.0);
    const std::string denom = kv.get_string("optimizer.denom", "sqrt");
    if (denom == "sqrt") {
        oc.denom = DenomMode::sqrt_mode;
    } else if (denom == "literal") {
        oc.denom = DenomMode::literal;
    } else {
        throw ConfigError("optimizer.denom must be 'sqrt' or 'literal'");
    }
    const std::string sk = kv.get_string("schedule.kind", "constant");
    if (sk == "constant") {
        oc.schedule.kind = Schedule::Kind::constant;
    } else if (sk == "warmup_cosine") {
        oc.schedule.kind = Schedule::Kind::warmup_cosine;
    } else {
        throw ConfigError("schedule.kind must be 'constant' or 'warmup_cosine'");
    }
    oc.schedule.warmup_steps = kv.get_long("schedule.warmup_steps", 0);
    oc.schedule.total_steps = kv.get_long("schedule.total_steps", 0);

    cfg.lm.vocab = static_cast<std::size_t>(kv.get_long("model.vocab", 256));
    cfg.lm.d_model = static_cast<std::size_t>(kv.get_long("model.d_model", 64));
    cfg.lm.n_layers = static_cast<std::size_t>(kv.get_long("model.n_layers", 2));
    cfg.lm.n_heads = static_cast<std::size_t>(kv.get_long("model.n_heads", 2));
    cfg.lm.context = static_cast<std::size_t>(kv.get_long("model.context", 64));
    if (kv.has("model.mlp_widths")) {
        cfg.mlp_widths.clear();
        std::istringstream ws(kv.get_string("model.mlp_widths", ""));
        std::string tok;
        while (std::getline(ws, tok, ',')) {
            const long w = std::stol(trim(tok));
            if (w <= 0) throw ConfigError("model.mlp_widths entries must be positive");
            cfg.mlp_widths.push_back(static_cast<std::size_t>(w));
        }
        if (cfg.mlp_widths.size() < 2) throw ConfigError("model.mlp_widths needs >= 2 entries");
    }

    cfg.data_path = kv.get_string("data.path", "");
    if (!cfg.data_path.empty() && !fs::exists(cfg.data_path))
        throw ConfigError("data.path does not exist: " + cfg.data_path);
    cfg.val_fraction = kv.get_double("data.val_fraction", cfg.val_fraction);
    if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 1.0)
        throw ConfigError("data.val_fraction must be in (0,1)");
    cfg.synthetic_tokens =
        static_cast<std::size_t>(kv.get_long("data.synthetic_tokens",
                                             static_cast<long>(cfg.synthetic_tokens)));

    cfg.steps = kv.get_long("run.steps", cfg.steps);
    if (cfg.steps < 0) throw ConfigError("run.steps must be >= 0");
    cfg.batch_size = static_cast<std::size_t>(kv.get_long("run.batch_size",
                                                          static_cast<long>(cfg.batch_size)));
    cfg.eval_interval = kv.get_long("run.eval_interval", cfg.eval_interval);
    cfg.eval_windows = static_cast<std::size_t>(kv.get_long("run.eval_windows",
                                                            static_cast<long>(cfg.eval_windows)));
    cfg.seed = static_cast<std::uint64_t>(kv.get_long("run.seed", 0));
    cfg.out_dir = kv.get_string("run.out_dir", cfg.out_dir);

    cfg.start_x = kv.get_double("trajectory.start_x", cfg.start_x);
    cfg.start_y = kv.get_double("trajectory.start_y", cfg.start_y);
    cfg.traj_steps = kv.get_long("trajectory.steps", cfg.traj_steps);
    return cfg;
}

// ---------- data ----------

std::vector<int> ingest_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open data file: " + path);
    std::vector<int> tokens;
    char c;
    while (is.get(c)) tokens.push_back(static_cast<unsigned char>(c));
    if (tokens.empty()) throw ConfigError("data file is empty: " + path);
    return tokens;
}

std::pair<std::vector<int>, std::vector<int>> split_tokens(const std::vector<int>& tokens,
                                                           double val_fraction) {
    const std::size_t val = static_cast<std::size_t>(
        static_cast<double>(tokens.size()) * val_fraction);
    const std::size_t train = tokens.size() - val;
    return {std::vector<int>(tokens.begin(), tokens.begin() + train),
            std::vector<int>(tokens.begin() + train, tokens.end())};
}

std::vector<int> markov_byte_stream(std::uint64_t seed, std::size_t length) {
    // Order-2 chain on 64 symbols: mostly a deterministic successor with a
    // uniform-noise escape, so there is real structure to learn.
    constexpr int kAlphabet = 64;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<int> out;
    out.reserve(length);
    int b1 = rng.randint(0, kAlphabet - 1);
    int b2 = rng.randint(0, kAlphabet - 1);
    out.push_back(b1);
    if (length > 1) out.push_back(b2);
    while (out.size() < length) {
        int next;
        if (rng.uniform(0.0, 1.0) < 0.85) {
            next = (b1 * 5 + b2 * 11 + 3) % kAlphabet;
        } else {
            next = rng.randint(0, kAlphabet - 1);
        }
        out.push_back(next);
        b1 = b2;
        b2 = next;
    }
    return out;
}

// ---------- output ----------

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

struct CsvWriter::Impl {
    std::ofstream os;
};

CsvWriter::CsvWriter(const std::string& path, const std::string& schema,
                     const std::vector<std::string>& columns)
    : impl_(new Impl) {
    impl_->os.open(path, std::ios::binary);  // binary keeps LF endings everywhere
    if (!impl_->os) throw ConfigError("cannot open output file: " + path);
    impl_->os << "# schema: " << schema << "\n";
    for (std::size_t i = 0; i < columns.size(); ++i)
        impl_->os << (i ? "," : "") << columns[i];
    impl_->os << "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i)
        impl_->os << (i ? "," : "") << cells[i];
    impl_->os << "\n";
}

CsvWriter::~CsvWriter() { delete impl_; }

// ---------- training ----------

namespace {

std::vector<std::vector<int>> sample_batch(Rng& rng, const std::vector<int>& tokens,
                                           std::size_t batch, std::size_t seq_len) {
    if (tokens.size() < seq_len + 1)
        throw ConfigError("training stream shorter than one context window");
    std::vector<std::vector<int>> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const int max_start = static_cast<int>(tokens.size() - seq_len - 1);
        const int start = rng.randint(0, max_start);
        out.emplace_back(tokens.begin() + start, tokens.begin() + start + seq_len + 1);
    }
    return out;
}

// One optimizer step over a recorded loss; returns the loss value.
double lm_step(TinyTransformerLM& model, Optimizer& optimizer,
               const std::vector<std::vector<int>>& batch, double alpha_t,
               MemoryLedger* ledger, BackwardStats* stats) {
    const OptimizerConfig& oc = optimizer.config();
    double loss_value = 0.0;
    auto build = [&](Tape& tape) {
        const NodeId loss = model.batch_loss(tape, batch);
        loss_value = tape.scalar_value(loss);
        return loss;
    };
    if (method_is_fused(oc.method)) {
        auto update = [&](Parameter& p, const Tensor& g) { optimizer.apply(p, g, alpha_t); };
        if (oc.clip_threshold) {
            fused_update_with_global_clip(build, *oc.clip_threshold, update, ledger, stats);
        } else {
            Tape tape(ledger, stats);
            tape.backward_fused(build(tape), update);
        }
    } else {
        Tape tape(ledger, stats);
        auto grads = tape.backward_full(build(tape));
        double clip_scale = 1.0;
        if (oc.clip_threshold) {
            double sq = 0.0;
            for (auto& [id, g] : grads.by_param_id)
                for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
            const double norm = std::sqrt(sq);
            if (norm > *oc.clip_threshold && norm > 0.0) clip_scale = *oc.clip_threshold / norm;
        }
        for (auto& p : model.params()) {
            Tensor& g = grads.by_param_id.at(p.id);
            if (clip_scale != 1.0)
                for (std::size_t i = 0; i < g.size(); ++i) g[i] *= clip_scale;
            optimizer.apply(p, g, alpha_t);
        }
    }
    return loss_value;
}

Schedule effective_schedule(const OptimizerConfig& oc, long steps) {
    Schedule s = oc.schedule;
    s.alpha_max = oc.alpha;
    if (s.kind == Schedule::Kind::warmup_cosine && s.total_steps == 0) s.total_steps = steps + 1;
    return s;
}

json metrics_json(const EvalMetrics& m) {
    return json{{"loss", m.loss},
                {"perplexity", m.perplexity},
                {"next_token_accuracy", m.next_token_accuracy}};
}

void write_summary(const std::string& out_dir, const json& j) {
    std::ofstream os(fs::path(out_dir) / "summary.json", std::ios::binary);
    os << j.dump(2) << "\n";
}

}  // namespace

LmRunOutput run_lm_training(const ExperimentConfig& cfg, const OptimizerConfig& opt_in,
                            const std::string& out_dir) {
    OptimizerConfig opt = opt_in;
    if (!cfg.alpha_explicit) opt.alpha = default_lm_alpha(opt.method);

    LmRunOutput out;
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> tokens = cfg.data_path.empty()
                                  ? markov_byte_stream(cfg.seed, cfg.synthetic_tokens)
                                  : ingest_text(cfg.data_path);
    auto [train_tokens, val_tokens] = split_tokens(tokens, cfg.val_fraction);
    if (val_tokens.size() < 2) throw ConfigError("validation split has fewer than 2 tokens");

    TinyTransformerLM model(cfg.lm, cfg.seed);
    BackwardStats stats;
    for (auto& p : model.params()) {
        out.ledger.record_alloc(p.name, p.value.byte_size(), MemCategory::param);
    }
    Optimizer optimizer(opt, &out.ledger);
    const Schedule sched = effective_schedule(opt, cfg.steps);

    std::unique_ptr<CsvWriter> step_csv, eval_csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        step_csv = std::make_unique<CsvWriter>((fs::path(out_dir) / "steps.csv").string(),
                                               "fusedopt.steps.v1",
                                               std::vector<std::string>{"step", "alpha", "loss"});
        eval_csv = std::make_unique<CsvWriter>(
            (fs::path(out_dir) / "eval.csv").string(), "fusedopt.eval.v1",
            std::vector<std::string>{"step", "loss", "perplexity", "next_token_accuracy"});
    }
    auto write_eval = [&](long step, const EvalMetrics& m) {
        if (eval_csv)
            eval_csv->row({std::to_string(step), format_double(m.loss),
                           format_double(m.perplexity), format_double(m.next_token_accuracy)});
    };

    EvalMetrics ev = model.evaluate(val_tokens, cfg.eval_windows);
    write_eval(0, ev);

    Rng batch_rng(cfg.seed * 6364136223846793005ull + 1442695040888963407ull);
    for (long t = 1; t <= cfg.steps; ++t) {
        const auto batch = sample_batch(batch_rng, train_tokens, cfg.batch_size, cfg.lm.context);
        const double alpha_t = schedule_alpha(sched, t);
        const double loss = lm_step(model, optimizer, batch, alpha_t, &out.ledger, &stats);
        if (!std::isfinite(loss))
            throw NumericError("non-finite training loss at step " + std::to_string(t));
        out.final_train_loss = loss;
        if (step_csv)
            step_csv->row({std::to_string(t), format_double(alpha_t), format_double(loss)});
        if ((cfg.eval_interval > 0 && t % cfg.eval_interval == 0) || t == cfg.steps) {
            ev = model.evaluate(val_tokens, cfg.eval_windows);
            write_eval(t, ev);
        }
    }

    out.final_eval = ev;
    out.backward_passes = stats.backward_passes;
    out.steps = cfg.steps;
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// ---------- experiments ----------

namespace {

void experiment_trajectory2d(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    const F2dMinima minima = f2d_minima();

    struct Variant {
        const char* name;
        OptMethod method;
        double alpha;
    };
    // Fixed hyperparameters shared by the frozen-start search.
    const Variant variants[] = {{"sgd", OptMethod::sgd, 0.02},
                                {"momentum", OptMethod::momentum, 0.02},
                                {"adam", OptMethod::adam, 0.05},
                                {"variance", OptMethod::variance, 0.05}};
    json summary;
    summary["experiment"] = "trajectory2d";
    summary["start"] = {cfg.start_x, cfg.start_y};
    summary["minima"] = {{"global", {minima.global.x, minima.global.y, minima.global.f}},
                         {"local", {minima.local.x, minima.local.y, minima.local.f}}};
    for (const Variant& v : variants) {
        Tensor point = Tensor::matrix(1, 2, {cfg.start_x, cfg.start_y});
        AdamState st;
        CsvWriter csv((fs::path(cfg.out_dir) / ("traj_" + std::string(v.name) + ".csv")).string(),
                      "fusedopt.traj.v1", {"step", "x", "y", "f"});
        for (long t = 0; t <= cfg.traj_steps; ++t) {
            const double x = point[0], y = point[1];
            csv.row({std::to_string(t), format_double(x), format_double(y),
                     format_double(f2d_eval(x, y))});
            if (t == cfg.traj_steps) break;
            auto [gx, gy] = f2d_grad(x, y);
            Tensor g = Tensor::matrix(1, 2, {gx, gy});
            switch (v.method) {
                case OptMethod::sgd: step_lomo(point, g, v.alpha); break;
                case OptMethod::momentum: step_momentum(point, g, st, v.alpha, 0.9); break;
                case OptMethod::adam: step_adam(point, g, st, v.alpha, 0.9, 0.999, 1e-8); break;
                case OptMethod::variance: step_variance(point, g, st, v.alpha, 0.999, 1e-8); break;
                default: break;
            }
            if (!std::isfinite(point[0]) || !std::isfinite(point[1]))
                throw NumericError("non-finite trajectory at step " + std::to_string(t + 1));
        }
        const double dg = std::hypot(point[0] - minima.global.x, point[1] - minima.global.y);
        const double dl = std::hypot(point[0] - minima.local.x, point[1] - minima.local.y);
        summary["terminal"][v.name] = {{"x", point[0]},
                                       {"y", point[1]},
                                       {"f", f2d_eval(point[0], point[1])},
                                       {"basin", dg < dl ? "global" : "local"}};
    }
    write_summary(cfg.out_dir, summary);
}

void experiment_train_mlp(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    MlpModel teacher(cfg.mlp_widths, cfg.seed + 1000);
    MlpModel student(cfg.mlp_widths, cfg.seed);
    MemoryLedger ledger;
    BackwardStats stats;
    for (auto& p : student.params())
        ledger.record_alloc(p.name, p.value.byte_size(), MemCategory::param);
    OptimizerConfig oc = cfg.optimizer;
    Optimizer optimizer(oc, &ledger);
    const Schedule sched = effective_schedule(oc, cfg.steps);
    Rng rng(cfg.seed + 17);

    CsvWriter step_csv((fs::path(cfg.out_dir) / "steps.csv").string(), "fusedopt.steps.v1",
                       {"step", "alpha", "loss"});
    double final_loss = 0.0;
    for (long t = 1; t <= cfg.steps; ++t) {
        const std::size_t in = cfg.mlp_widths.front();
        Tensor x({cfg.batch_size, in});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal(0.0, 1.0);
        Tensor targets;
        {
            Tape ttape;
            targets = ttape.value(teacher.forward_logits(ttape, x));
        }
        const double alpha_t = schedule_alpha(sched, t);
        double loss_value = 0.0;
        auto build = [&](Tape& tape) {
            const NodeId loss = student.forward_loss(tape, x, targets);
            loss_value = tape.scalar_value(loss);
            return loss;
        };
        if (method_is_fused(oc.method)) {
            auto update = [&](Parameter& p, const Tensor& g) { optimizer.apply(p, g, alpha_t); };
            if (oc.clip_threshold) {
                fused_update_with_global_clip(build, *oc.clip_threshold, update, &ledger, &stats);
            } else {
                Tape tape(&ledger, &stats);
                tape.backward_fused(build(tape), update);
            }
        } else {
            Tape tape(&ledger, &stats);
            auto grads = tape.backward_full(build(tape));
            for (auto& p : student.params())
                optimizer.apply(p, grads.by_param_id.at(p.id), alpha_t);
        }
        if (!std::isfinite(loss_value))
            throw NumericError("non-finite training loss at step " + std::to_string(t));
        final_loss = loss_value;
        step_csv.row({std::to_string(t), format_double(alpha_t), format_double(loss_value)});
    }
    json summary;
    summary["experiment"] = "train_mlp";
    summary["final_loss"] = final_loss;
    summary["backward_passes"] = stats.backward_passes;
    summary["peak_grad_bytes"] = ledger.peak_bytes(MemCategory::grad);
    summary["peak_grad_tensors"] = ledger.peak_count(MemCategory::grad);
    write_summary(cfg.out_dir, summary);
}

void experiment_train_lm(const ExperimentConfig& cfg) {
    const LmRunOutput out = run_lm_training(cfg, cfg.optimizer, cfg.out_dir);
    json summary;
    summary["experiment"] = "train_lm";
    summary["optimizer"] = opt_method_name(cfg.optimizer.method);
    summary["steps"] = out.steps;
    summary["final_train_loss"] = out.final_train_loss;
    summary["final_eval"] = metrics_json(out.final_eval);
    summary["backward_passes"] = out.backward_passes;
    summary["wall_seconds"] = out.wall_seconds;
    summary["steps_per_second"] =
        out.steps > 0 && out.wall_seconds > 0 ? out.steps / out.wall_seconds : 0.0;
    summary["memory"] = {{"param_peak_bytes", out.ledger.peak_bytes(MemCategory::param)},
                         {"grad_peak_bytes", out.ledger.peak_bytes(MemCategory::grad)},
                         {"grad_peak_tensors", out.ledger.peak_count(MemCategory::grad)},
                         {"optim_state_peak_bytes", out.ledger.peak_bytes(MemCategory::optim_state)},
                         {"activation_peak_bytes", out.ledger.peak_bytes(MemCategory::activation)}};
    write_summary(cfg.out_dir, summary);
}

void experiment_memory_report(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    ExperimentConfig run_cfg = cfg;
    run_cfg.eval_interval = 0;
    const LmRunOutput mine = run_lm_training(run_cfg, cfg.optimizer, "");
    OptimizerConfig baseline = cfg.optimizer;
    baseline.method = OptMethod::adamw;
    baseline.weight_decay = 0.01;
    const LmRunOutput ref = run_lm_training(run_cfg, baseline, "");

    auto block = [](const MemoryLedger& l) {
        return json{{"param_peak_bytes", l.peak_bytes(MemCategory::param)},
                    {"grad_peak_bytes", l.peak_bytes(MemCategory::grad)},
                    {"grad_peak_tensors", l.peak_count(MemCategory::grad)},
                    {"optim_state_peak_bytes", l.peak_bytes(MemCategory::optim_state)},
                    {"activation_peak_bytes", l.peak_bytes(MemCategory::activation)}};
    };
    json summary;
    summary["experiment"] = "memory_report";
    summary["optimizer"] = opt_method_name(cfg.optimizer.method);
    summary["tracked"] = block(mine.ledger);
    summary["adamw_baseline"] = block(ref.ledger);
    auto ratio = [](std::size_t a, std::size_t b) {
        return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
    };
    summary["ratio_vs_adamw"] = {
        {"grad_peak", ratio(mine.ledger.peak_bytes(MemCategory::grad),
                            ref.ledger.peak_bytes(MemCategory::grad))},
        {"optim_state_peak", ratio(mine.ledger.peak_bytes(MemCategory::optim_state),
                                   ref.ledger.peak_bytes(MemCategory::optim_state))}};
    write_summary(cfg.out_dir, summary);

    std::ofstream txt(fs::path(cfg.out_dir) / "memory.txt", std::ios::binary);
    txt << "optimizer: " << opt_method_name(cfg.optimizer.method) << "\n"
        << mine.ledger.report_text() << "baseline: adamw\n"
        << ref.ledger.report_text();
}

void experiment_gradnorm_compare(const ExperimentConfig& cfg) {
    if (cfg.optimizer.method != OptMethod::lomo && cfg.optimizer.method != OptMethod::adalomo)
        throw ConfigError("gradnorm_compare requires optimizer.method lomo or adalomo");
    fs::create_directories(cfg.out_dir);

    OptimizerConfig with_clip = cfg.optimizer;
    if (!with_clip.clip_threshold) with_clip.clip_threshold = 1.0;
    OptimizerConfig without_clip = cfg.optimizer;
    without_clip.clip_threshold.reset();

    const LmRunOutput a =
        run_lm_training(cfg, with_clip, (fs::path(cfg.out_dir) / "with_clip").string());
    const LmRunOutput b =
        run_lm_training(cfg, without_clip, (fs::path(cfg.out_dir) / "without_clip").string());

    json summary;
    summary["experiment"] = "gradnorm_compare";
    summary["optimizer"] = opt_method_name(cfg.optimizer.method);
    summary["steps"] = cfg.steps;
    summary["with_clip"] = {{"backward_passes", a.backward_passes},
                            {"final_eval", metrics_json(a.final_eval)}};
    summary["without_clip"] = {{"backward_passes", b.backward_passes},
                               {"final_eval", metrics_json(b.final_eval)}};
    summary["final_loss_rel_diff"] =
        b.final_eval.loss != 0.0
            ? std::abs(a.final_eval.loss - b.final_eval.loss) / std::abs(b.final_eval.loss)
            : 0.0;
    write_summary(cfg.out_dir, summary);
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg) {
    if (cfg.experiment == "trajectory2d") {
        experiment_trajectory2d(cfg);
    } else if (cfg.experiment == "train_mlp") {
        experiment_train_mlp(cfg);
    } else if (cfg.experiment == "train_lm") {
        experiment_train_lm(cfg);
    } else if (cfg.experiment == "memory_report") {
        experiment_memory_report(cfg);
    } else if (cfg.experiment == "gradnorm_compare") {
        experiment_gradnorm_compare(cfg);
    } else {
        throw ConfigError("unknown experiment: " + cfg.experiment);
    }
}

int run_experiment_exitcode(const ExperimentConfig& cfg) {
    try {
        run_experiment(cfg);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace fusedopt
