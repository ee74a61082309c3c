#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fusedopt/autograd.hpp"
#include "fusedopt/memtrack.hpp"
#include "fusedopt/tensor.hpp"

namespace fusedopt {

class OptimError : public std::runtime_error {
public:
    explicit OptimError(const std::string& what) : std::runtime_error(what) {}
};

// ---- learning-rate schedule ----

struct Schedule {
    enum class Kind { constant, warmup_cosine } kind = Kind::constant;
    double alpha_max = 1e-3;
    long warmup_steps = 0;
    long total_steps = 0;  // > warmup_steps when warmup_cosine
};

// Linear ramp 0 -> alpha_max over warmup, then cosine decay to 0 at
// total_steps; t past total_steps clamps to 0.
double schedule_alpha(const Schedule& s, long t);

// ---- per-parameter states ----

struct AdamState {
    Tensor m;
    Tensor v;
    long t = 0;
};

// Row/column marginal EMAs of g^2 for an m x n parameter.
struct FactoredMoment {
    Tensor r;  // [m,1]
    Tensor c;  // [1,n]
};

struct AdaLomoParamState {
    bool factored = false;
    FactoredMoment fm;
    Tensor v_full;  // rank-0/1 parameters keep a dense second moment
    long t = 0;
};

enum class DenomMode { sqrt_mode, literal };

// ---- update rules ----

void step_lomo(Tensor& theta, const Tensor& g, double alpha);
void step_momentum(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1);
void step_variance(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta2,
                   double eps);
void step_adam(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1,
               double beta2, double eps);
// Decoupled weight decay applied before the Adam update.
void step_adamw(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1,
                double beta2, double eps, double weight_decay);

// r <- beta*r + (1-beta)*row_sums(g^2); c likewise with column sums.
// g must be rank 2 and match the state shapes.
void update_factored(FactoredMoment& fm, const Tensor& g, double beta);

// v[i,j] = r[i]*c[j] / sum(r). When sum(r) == 0 returns zeros and sets *cold.
Tensor reconstruct_v(const FactoredMoment& fm, bool* cold = nullptr);

// u / max(1, rms(u)) * max(eps, rms(theta_prev))
Tensor grouped_normalize(const Tensor& u, const Tensor& theta_prev, double eps);

// One adaptive fused-style step: factored (or dense) second-moment EMA,
// reconstruction, normalized update, in-place parameter write.
void step_adalomo(Tensor& theta, const Tensor& g, AdaLomoParamState& st, double alpha_t,
                  double beta, double eps1, double eps2, DenomMode mode = DenomMode::sqrt_mode);

// ---- driver-facing optimizer ----

enum class OptMethod { sgd, lomo, momentum, variance, adam, adamw, adafactor, adalomo };

OptMethod parse_opt_method(const std::string& name);
const char* opt_method_name(OptMethod m);
// lomo and adalomo apply updates inside the backward pass.
bool method_is_fused(OptMethod m);

struct OptimizerConfig {
    OptMethod method = OptMethod::sgd;
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double beta = 0.9;  // adalomo / adafactor decay coefficient
    double eps1 = 1e-6;
    double eps2 = 1e-3;  // floor for rms(theta) in grouped normalization
    double weight_decay = 0.0;
    std::optional<double> clip_threshold;  // global-norm clipping when set
    DenomMode denom = DenomMode::sqrt_mode;
    Schedule schedule;
};

// Per-parameter state container dispatching to the update rules above.
// State tensors are registered with the ledger under optim_state.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg, MemoryLedger* ledger = nullptr);

    void apply(Parameter& p, const Tensor& g, double alpha_t);

    const OptimizerConfig& config() const { return cfg_; }
    std::size_t state_elements() const;

    struct Slot {
        std::string kind;  // m, v, r, c
        const Tensor* tensor;
        long t;
    };
    std::vector<Slot> slots_for(int param_id) const;

private:
    AdamState& adam_state(const Parameter& p);
    AdaLomoParamState& factored_state(const Parameter& p);
    void track_state(const Parameter& p, const char* kind, const Tensor& t);

    OptimizerConfig cfg_;
    MemoryLedger* ledger_ = nullptr;
    std::map<int, AdamState> adam_states_;
    std::map<int, AdaLomoParamState> factored_states_;
    std::vector<TrackedAlloc> state_allocs_;
};

// Checkpoint: one tensor file per state slot plus a manifest listing
// (parameter name, slot kind, step).
void save_optimizer_checkpoint(const Optimizer& opt, const ParameterStore& params,
                               const std::string& dir);

struct CheckpointRecord {
    std::string param_name;
    std::string kind;
    long t;
    Tensor tensor;
};
std::vector<CheckpointRecord> load_optimizer_checkpoint(const std::string& dir);

}  // namespace fusedopt
