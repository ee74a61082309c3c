#include "fusedopt/models.hpp"

#include <cmath>
#include <numeric>

namespace fusedopt {

double f2d_eval(double x, double y) {
    const double a = (x - 1.0) * (x - 1.0) + y * y;
    const double b = (x + 1.0) * (x + 1.0) + y * y;
    return x * x + y * y - 2.0 * std::exp(-5.0 * a) - 3.0 * std::exp(-5.0 * b);
}

std::pair<double, double> f2d_grad(double x, double y) {
    const double a = (x - 1.0) * (x - 1.0) + y * y;
    const double b = (x + 1.0) * (x + 1.0) + y * y;
    const double ea = std::exp(-5.0 * a);
    const double eb = std::exp(-5.0 * b);
    const double gx = 2.0 * x + 20.0 * (x - 1.0) * ea + 30.0 * (x + 1.0) * eb;
    const double gy = 2.0 * y + 20.0 * y * ea + 30.0 * y * eb;
    return {gx, gy};
}

F2dMinima f2d_minima() {
    // Dense grid over [-2,2]^2, then plain gradient descent from the best
    // grid point in each half-plane.
    const double lo = -2.0, hi = 2.0, step = 1e-3;
    const int n = static_cast<int>((hi - lo) / step) + 1;
    Minimum left{0, 0, 1e300}, right{0, 0, 1e300};
    for (int i = 0; i < n; ++i) {
        const double x = lo + i * step;
        Minimum& side = x < 0 ? left : right;
        for (int j = 0; j < n; ++j) {
            const double y = lo + j * step;
            const double f = f2d_eval(x, y);
            if (f < side.f) side = {x, y, f};
        }
    }
    auto refine = [](Minimum m) {
        for (int it = 0; it < 20000; ++it) {
            auto [gx, gy] = f2d_grad(m.x, m.y);
            if (gx * gx + gy * gy < 1e-26) break;
            m.x -= 1e-3 * gx;
            m.y -= 1e-3 * gy;
        }
        m.f = f2d_eval(m.x, m.y);
        return m;
    };
    F2dMinima out;
    out.global = refine(left);
    out.local = refine(right);
    return out;
}

NodeId f2d_tape(Tape& tape, Parameter& point) {
    if (point.value.rank() != 2 || point.value.dim(0) != 1 || point.value.dim(1) != 2)
        throw ModelError("f2d_tape: point parameter must be [1,2]");
    const NodeId p = tape.param(point);
    const NodeId x = tape.slice_cols(p, 0, 1);
    const NodeId y = tape.slice_cols(p, 1, 2);
    const NodeId y2 = tape.mul(y, y);
    const NodeId quad = tape.add(tape.mul(x, x), y2);
    const NodeId xm1 = tape.add_scalar(x, -1.0);
    const NodeId well1 = tape.scale(
        tape.exp_act(tape.scale(tape.add(tape.mul(xm1, xm1), y2), -5.0)), -2.0);
    const NodeId xp1 = tape.add_scalar(x, 1.0);
    const NodeId well2 = tape.scale(
        tape.exp_act(tape.scale(tape.add(tape.mul(xp1, xp1), y2), -5.0)), -3.0);
    return tape.add(tape.add(quad, well1), well2);
}

double Rng::normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
}

double Rng::uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
}

int Rng::randint(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
}

Tensor random_normal(Rng& rng, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

MlpModel::MlpModel(std::vector<std::size_t> widths, std::uint64_t seed)
    : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ModelError("MlpModel: need at least two widths");
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        weights_.push_back(&params_.add("mlp.w" + std::to_string(l),
                                        random_normal(rng, {widths_[l], widths_[l + 1]}, 0.02)));
        biases_.push_back(
            &params_.add("mlp.b" + std::to_string(l), Tensor::zeros({widths_[l + 1]})));
    }
}

std::size_t MlpModel::expected_param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l)
        n += widths_[l] * widths_[l + 1] + widths_[l + 1];
    return n;
}

NodeId MlpModel::forward_logits(Tape& tape, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != widths_.front())
        throw ModelError("MlpModel: input must be [batch, " + std::to_string(widths_.front()) +
                         "]");
    NodeId h = tape.constant(x);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        h = tape.add_row(tape.matmul(h, tape.param(*weights_[l])), tape.param(*biases_[l]));
        if (l + 1 < weights_.size()) h = tape.tanh_act(h);
    }
    return h;
}

NodeId MlpModel::forward_loss(Tape& tape, const Tensor& x, const Tensor& targets) {
    return tape.mse_loss(forward_logits(tape, x), targets);
}

TinyTransformerLM::TinyTransformerLM(TransformerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.d_model % cfg_.n_heads != 0)
        throw ModelError("TinyTransformerLM: d_model must be divisible by n_heads");
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;
    tok_emb_ = &params_.add("tok_emb", random_normal(rng, {cfg_.vocab, d}, 0.02));
    pos_emb_ = &params_.add("pos_emb", random_normal(rng, {cfg_.context, d}, 0.02));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        Layer layer;
        layer.attn_gain = &params_.add(pre + "attn_gain", Tensor::full({d}, 1.0));
        layer.wq = &params_.add(pre + "wq", random_normal(rng, {d, d}, 0.02));
        layer.wk = &params_.add(pre + "wk", random_normal(rng, {d, d}, 0.02));
        layer.wv = &params_.add(pre + "wv", random_normal(rng, {d, d}, 0.02));
        layer.wo = &params_.add(pre + "wo", random_normal(rng, {d, d}, 0.02));
        layer.ffn_gain = &params_.add(pre + "ffn_gain", Tensor::full({d}, 1.0));
        layer.w1 = &params_.add(pre + "w1", random_normal(rng, {d, 4 * d}, 0.02));
        layer.w2 = &params_.add(pre + "w2", random_normal(rng, {4 * d, d}, 0.02));
        layers_.push_back(layer);
    }
    final_gain_ = &params_.add("final_gain", Tensor::full({d}, 1.0));
    head_ = &params_.add("head", random_normal(rng, {d, cfg_.vocab}, 0.02));
}

NodeId TinyTransformerLM::sequence_logits(Tape& tape, const std::vector<int>& tokens) {
    const std::size_t T = tokens.size();
    if (T == 0 || T > cfg_.context)
        throw ModelError("sequence_logits: sequence length must be in [1, context]");
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab)
            throw ModelError("sequence_logits: token id out of range");
    }
    std::vector<int> positions(T);
    std::iota(positions.begin(), positions.end(), 0);

    const std::size_t dh = cfg_.d_model / cfg_.n_heads;
    NodeId x = tape.add(tape.embed(tape.param(*tok_emb_), tokens),
                        tape.embed(tape.param(*pos_emb_), positions));
    constexpr double kNormEps = 1e-6;
    for (const Layer& layer : layers_) {
        NodeId h = tape.mul_row(tape.rmsnorm_rows(x, kNormEps), tape.param(*layer.attn_gain));
        const NodeId q = tape.matmul(h, tape.param(*layer.wq));
        const NodeId k = tape.matmul(h, tape.param(*layer.wk));
        const NodeId v = tape.matmul(h, tape.param(*layer.wv));
        std::vector<NodeId> heads;
        for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
            const std::size_t c0 = hd * dh, c1 = (hd + 1) * dh;
            const NodeId qh = tape.slice_cols(q, c0, c1);
            const NodeId kh = tape.slice_cols(k, c0, c1);
            const NodeId vh = tape.slice_cols(v, c0, c1);
            const NodeId scores =
                tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(double(dh)));
            heads.push_back(tape.matmul(tape.softmax_rows(scores, /*causal=*/true), vh));
        }
        x = tape.add(x, tape.matmul(tape.concat_cols(heads), tape.param(*layer.wo)));

        NodeId m = tape.mul_row(tape.rmsnorm_rows(x, kNormEps), tape.param(*layer.ffn_gain));
        m = tape.matmul(tape.gelu(tape.matmul(m, tape.param(*layer.w1))), tape.param(*layer.w2));
        x = tape.add(x, m);
    }
    const NodeId xf = tape.mul_row(tape.rmsnorm_rows(x, kNormEps), tape.param(*final_gain_));
    return tape.matmul(xf, tape.param(*head_));
}

NodeId TinyTransformerLM::sequence_loss(Tape& tape, const std::vector<int>& tokens) {
    if (tokens.size() < 2) throw ModelError("sequence_loss: need at least two tokens");
    std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    return tape.cross_entropy(sequence_logits(tape, inputs), std::move(targets));
}

NodeId TinyTransformerLM::batch_loss(Tape& tape, const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty()) throw ModelError("batch_loss: empty batch");
    NodeId acc = sequence_loss(tape, sequences[0]);
    for (std::size_t i = 1; i < sequences.size(); ++i)
        acc = tape.add(acc, sequence_loss(tape, sequences[i]));
    return tape.scale(acc, 1.0 / static_cast<double>(sequences.size()));
}

EvalMetrics TinyTransformerLM::evaluate(const std::vector<int>& tokens, std::size_t max_windows) {
    const std::size_t win = cfg_.context;
    if (tokens.size() < 2) throw ModelError("evaluate: need at least two tokens");
    EvalMetrics m;
    double loss_sum = 0.0;
    std::size_t predicted = 0, correct = 0, windows = 0;
    for (std::size_t start = 0; start + 1 < tokens.size(); start += win) {
        const std::size_t len = std::min(win + 1, tokens.size() - start);
        if (len < 2) break;
        std::vector<int> inputs(tokens.begin() + start, tokens.begin() + start + len - 1);
        Tape tape;
        const Tensor& logits = tape.value(sequence_logits(tape, inputs));
        const std::size_t T = inputs.size(), V = cfg_.vocab;
        for (std::size_t t = 0; t < T; ++t) {
            const int target = tokens[start + t + 1];
            double mx = logits[t * V];
            std::size_t arg = 0;
            for (std::size_t v = 1; v < V; ++v) {
                if (logits[t * V + v] > mx) {
                    mx = logits[t * V + v];
                    arg = v;
                }
            }
            double z = 0.0;
            for (std::size_t v = 0; v < V; ++v) z += std::exp(logits[t * V + v] - mx);
            loss_sum += std::log(z) + mx - logits[t * V + static_cast<std::size_t>(target)];
            predicted += 1;
            if (arg == static_cast<std::size_t>(target)) correct += 1;
        }
        windows += 1;
        if (max_windows && windows >= max_windows) break;
    }
    m.loss = loss_sum / static_cast<double>(predicted);
    m.perplexity = std::exp(m.loss);
    m.next_token_accuracy = static_cast<double>(correct) / static_cast<double>(predicted);
    return m;
}

std::vector<std::pair<std::string, double>> per_layer_grad_norms(
    ParameterStore& params, const std::function<NodeId(Tape&)>& build) {
    Tape tape;
    const NodeId loss = build(tape);
    auto grads = tape.backward_full(loss);
    std::vector<std::pair<std::string, double>> out;
    for (const auto& p : params) {
        const auto it = grads.by_param_id.find(p.id);
        out.emplace_back(p.name, it == grads.by_param_id.end() ? 0.0 : l2_norm(it->second));
    }
    return out;
}

}  // namespace fusedopt
