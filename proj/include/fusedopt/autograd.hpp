#pragma once

#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusedopt/memtrack.hpp"
#include "fusedopt/tensor.hpp"

namespace fusedopt {

class AutogradError : public std::runtime_error {
public:
    explicit AutogradError(const std::string& what) : std::runtime_error(what) {}
};

// Named trainable tensor. backprop_index is assigned during backward: the
// position at which the parameter's gradient became final.
struct Parameter {
    int id = -1;
    std::string name;
    Tensor value;
    int backprop_index = -1;
};

// Owns parameters with stable addresses across registration.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor value);
    std::size_t count() const { return params_.size(); }
    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t total_elements() const;

private:
    std::deque<Parameter> params_;
};

// Observables for backward execution: pass count and parameter-gradient
// residency (live tensors and the running peak).
struct BackwardStats {
    long backward_passes = 0;
    int live_param_grads = 0;
    int peak_live_param_grads = 0;
};

using NodeId = int;

// Recorded straight-line computation. One forward, then at most one backward.
// Parameter values are copied onto the tape at record time, so in-place
// updates during a fused backward do not perturb upstream gradient math.
class Tape {
public:
    explicit Tape(MemoryLedger* ledger = nullptr, BackwardStats* stats = nullptr);

    NodeId constant(Tensor t);
    NodeId param(Parameter& p);

    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double k);
    NodeId add_scalar(NodeId a, double k);
    NodeId tanh_act(NodeId a);
    NodeId gelu(NodeId a);
    NodeId exp_act(NodeId a);
    NodeId add_row(NodeId x, NodeId bias);   // [m,n] + [n]
    NodeId mul_row(NodeId x, NodeId gain);   // [m,n] * [n] columnwise
    NodeId rmsnorm_rows(NodeId x, double eps);
    NodeId softmax_rows(NodeId x, bool causal);
    NodeId slice_cols(NodeId x, std::size_t c0, std::size_t c1);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId embed(NodeId table, std::vector<int> ids);
    NodeId mean_all(NodeId a);
    NodeId mse_loss(NodeId pred, Tensor target);
    NodeId cross_entropy(NodeId logits, std::vector<int> targets);

    const Tensor& value(NodeId id) const;
    double scalar_value(NodeId id) const;

    // Invoked exactly once per on-tape parameter, in the order gradients
    // become final. The gradient buffer is freed after the callback returns.
    using GradCallback = std::function<void(Parameter&, const Tensor& grad)>;

    void backward_fused(NodeId loss, const GradCallback& callback);

    struct FullGrads {
        std::map<int, Tensor> by_param_id;
        std::vector<TrackedAlloc> allocs;  // released when FullGrads dies
    };
    FullGrads backward_full(NodeId loss);

    bool consumed() const { return consumed_; }

private:
    enum class Op {
        constant, leaf_param, matmul, transpose, add, sub, mul, scale_op, add_scalar_op,
        tanh_op, gelu_op, exp_op, add_row_op, mul_row_op, rmsnorm, softmax, slice, concat,
        embed_op, mean_op, mse, ce
    };
    struct Node {
        Op op;
        std::vector<NodeId> in;
        Tensor out;
        Parameter* param = nullptr;
        double k = 0.0;
        std::size_t c0 = 0, c1 = 0;
        bool causal = false;
        std::vector<int> ids;
        Tensor aux;
    };

    NodeId push(Node n);
    void node_backward(NodeId id, const Tensor& d,
                       std::vector<Tensor>& adj, std::vector<char>& has_adj,
                       std::vector<int>& remaining, const GradCallback& sink,
                       std::vector<TrackedAlloc>& grad_allocs, bool fused);
    void accumulate(NodeId dst, const Tensor& contribution, std::vector<Tensor>& adj,
                    std::vector<char>& has_adj, std::vector<int>& remaining,
                    const GradCallback& sink, std::vector<TrackedAlloc>& grad_allocs,
                    bool fused);
    void run_backward(NodeId loss, const GradCallback& sink, bool fused,
                      std::vector<TrackedAlloc>* keep_allocs);

    std::vector<Node> nodes_;
    std::vector<TrackedAlloc> activation_allocs_;
    MemoryLedger* ledger_ = nullptr;
    BackwardStats* stats_ = nullptr;
    bool consumed_ = false;

    // fused-mode one-behind delivery
    struct Pending {
        Parameter* param = nullptr;
        NodeId node = -1;
    };
    Pending pending_{};
    int next_backprop_index_ = 0;
};

struct TwoPassResult {
    double grad_norm = 0.0;
    double clip_scale = 1.0;
};

// Two-pass global gradient-norm clipping for fused updates: pass one sums
// squared norms and discards gradients, pass two replays the forward and
// delivers pre-scaled gradients to `update`. Increments the backward-pass
// counter by exactly two.
TwoPassResult fused_update_with_global_clip(const std::function<NodeId(Tape&)>& build,
                                            double clip_threshold,
                                            const Tape::GradCallback& update,
                                            MemoryLedger* ledger, BackwardStats* stats);

}  // namespace fusedopt
