#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fusedopt/autograd.hpp"
#include "fusedopt/tensor.hpp"

namespace fusedopt {

class ModelError : public std::runtime_error {
public:
    explicit ModelError(const std::string& what) : std::runtime_error(what) {}
};

// ---- 2-D test function ----
// f(x,y) = x^2 + y^2 - 2 exp(-5[(x-1)^2 + y^2]) - 3 exp(-5[(x+1)^2 + y^2])
// Two basins: the global minimum near (-1, 0) with f ~ -2 and a local
// minimum near (1, 0) with f ~ -1.

double f2d_eval(double x, double y);
std::pair<double, double> f2d_grad(double x, double y);

struct Minimum {
    double x = 0, y = 0, f = 0;
};
struct F2dMinima {
    Minimum global;  // x < 0
    Minimum local;   // x > 0
};

// Dense grid search over [-2,2]^2 (step 1e-3) refined by gradient descent.
F2dMinima f2d_minima();

// Records f at the parameter (a [1,2] tensor holding (x, y)) onto the tape.
NodeId f2d_tape(Tape& tape, Parameter& point);

// ---- deterministic initialization ----

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    double normal(double mean, double stddev);
    double uniform(double lo, double hi);
    int randint(int lo, int hi);  // inclusive bounds
    std::uint64_t raw() { return eng_(); }

private:
    std::mt19937_64 eng_;
};

Tensor random_normal(Rng& rng, Shape shape, double stddev);

// ---- MLP ----

// Fully connected net with tanh hidden activations and a linear output.
class MlpModel {
public:
    MlpModel(std::vector<std::size_t> widths, std::uint64_t seed);

    ParameterStore& params() { return params_; }
    const std::vector<std::size_t>& widths() const { return widths_; }
    std::size_t expected_param_count() const;

    // x: [batch, in], targets: [batch, out]; returns the scalar MSE loss node.
    NodeId forward_loss(Tape& tape, const Tensor& x, const Tensor& targets);
    NodeId forward_logits(Tape& tape, const Tensor& x);

private:
    std::vector<std::size_t> widths_;
    ParameterStore params_;
    std::vector<Parameter*> weights_;
    std::vector<Parameter*> biases_;
};

// ---- tiny transformer language model ----

struct TransformerConfig {
    std::size_t vocab = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t context = 64;
};

struct EvalMetrics {
    double loss = 0;  // mean cross-entropy, nats/token
    double perplexity = 0;
    double next_token_accuracy = 0;
};

// Pre-norm decoder: RMSNorm gains, multi-head causal attention, GELU MLP,
// learned positional embeddings, no biases.
class TinyTransformerLM {
public:
    TinyTransformerLM(TransformerConfig cfg, std::uint64_t seed);

    const TransformerConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }

    // tokens.size() == T, T <= context; logits node is [T, vocab].
    NodeId sequence_logits(Tape& tape, const std::vector<int>& tokens);
    // One sequence of length T+1: predict tokens[1..T] from tokens[0..T-1].
    NodeId sequence_loss(Tape& tape, const std::vector<int>& tokens);
    // Mean loss over a batch of equal-length sequences.
    NodeId batch_loss(Tape& tape, const std::vector<std::vector<int>>& sequences);

    // Sliding non-overlapping windows over the token stream.
    EvalMetrics evaluate(const std::vector<int>& tokens, std::size_t max_windows = 0);

private:
    struct Layer {
        Parameter* attn_gain;
        Parameter* wq;
        Parameter* wk;
        Parameter* wv;
        Parameter* wo;
        Parameter* ffn_gain;
        Parameter* w1;
        Parameter* w2;
    };
    TransformerConfig cfg_;
    ParameterStore params_;
    Parameter* tok_emb_;
    Parameter* pos_emb_;
    std::vector<Layer> layers_;
    Parameter* final_gain_;
    Parameter* head_;
};

// L2 gradient norm per parameter tensor, in registration (layer) order.
std::vector<std::pair<std::string, double>> per_layer_grad_norms(
    ParameterStore& params, const std::function<NodeId(Tape&)>& build);

}  // namespace fusedopt
