#include "fusedopt/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace fusedopt {

Parameter& ParameterStore::add(std::string name, Tensor value) {
    Parameter p;
    p.id = static_cast<int>(params_.size());
    p.name = std::move(name);
    p.value = std::move(value);
    params_.push_back(std::move(p));
    return params_.back();
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

Tape::Tape(MemoryLedger* ledger, BackwardStats* stats) : ledger_(ledger), stats_(stats) {}

NodeId Tape::push(Node n) {
    const NodeId id = static_cast<NodeId>(nodes_.size());
    if (ledger_) {
        activation_allocs_.emplace_back(ledger_, "tape.node", n.out.byte_size(),
                                        MemCategory::activation);
    }
    nodes_.push_back(std::move(n));
    return id;
}

NodeId Tape::constant(Tensor t) {
    Node n;
    n.op = Op::constant;
    n.out = std::move(t);
    return push(std::move(n));
}

NodeId Tape::param(Parameter& p) {
    Node n;
    n.op = Op::leaf_param;
    n.out = p.value;  // snapshot at record time
    n.param = &p;
    return push(std::move(n));
}

const Tensor& Tape::value(NodeId id) const { return nodes_.at(id).out; }

double Tape::scalar_value(NodeId id) const {
    const Tensor& t = nodes_.at(id).out;
    if (t.size() != 1) throw AutogradError("scalar_value: node is not scalar");
    return t[0];
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::matmul;
    n.in = {a, b};
    n.out = fusedopt::matmul(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
    Node n;
    n.op = Op::transpose;
    n.in = {a};
    n.out = fusedopt::transpose(value(a));
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::add;
    n.in = {a, b};
    n.out = fusedopt::add(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::sub;
    n.in = {a, b};
    n.out = fusedopt::sub(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::mul;
    n.in = {a, b};
    n.out = fusedopt::mul(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double k) {
    Node n;
    n.op = Op::scale_op;
    n.in = {a};
    n.k = k;
    n.out = fusedopt::scale(value(a), k);
    return push(std::move(n));
}

NodeId Tape::add_scalar(NodeId a, double k) {
    Node n;
    n.op = Op::add_scalar_op;
    n.in = {a};
    n.k = k;
    n.out = fusedopt::add_scalar(value(a), k);
    return push(std::move(n));
}

NodeId Tape::tanh_act(NodeId a) {
    Node n;
    n.op = Op::tanh_op;
    n.in = {a};
    n.out = Tensor(value(a).shape(), value(a).precision());
    for (std::size_t i = 0; i < n.out.size(); ++i) n.out[i] = std::tanh(value(a)[i]);
    return push(std::move(n));
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

NodeId Tape::gelu(NodeId a) {
    Node n;
    n.op = Op::gelu_op;
    n.in = {a};
    const Tensor& x = value(a);
    n.out = Tensor(x.shape(), x.precision());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double t = std::tanh(kGeluC * (x[i] + kGeluA * x[i] * x[i] * x[i]));
        n.out[i] = 0.5 * x[i] * (1.0 + t);
    }
    return push(std::move(n));
}

NodeId Tape::exp_act(NodeId a) {
    Node n;
    n.op = Op::exp_op;
    n.in = {a};
    n.out = exp_map(value(a));
    return push(std::move(n));
}

NodeId Tape::add_row(NodeId x, NodeId bias) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(bias);
    if (xv.rank() != 2 || bv.size() != xv.dim(1))
        throw AutogradError("add_row: need [m,n] and [n]");
    Node n;
    n.op = Op::add_row_op;
    n.in = {x, bias};
    n.out = Tensor(xv.shape(), xv.precision());
    const std::size_t m = xv.dim(0), c = xv.dim(1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) n.out[i * c + j] = xv[i * c + j] + bv[j];
    return push(std::move(n));
}

NodeId Tape::mul_row(NodeId x, NodeId gain) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    if (xv.rank() != 2 || gv.size() != xv.dim(1))
        throw AutogradError("mul_row: need [m,n] and [n]");
    Node n;
    n.op = Op::mul_row_op;
    n.in = {x, gain};
    n.out = Tensor(xv.shape(), xv.precision());
    const std::size_t m = xv.dim(0), c = xv.dim(1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) n.out[i * c + j] = xv[i * c + j] * gv[j];
    return push(std::move(n));
}

NodeId Tape::rmsnorm_rows(NodeId x, double eps) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw AutogradError("rmsnorm_rows: need 2-D input");
    Node n;
    n.op = Op::rmsnorm;
    n.in = {x};
    n.k = eps;
    n.out = Tensor(xv.shape(), xv.precision());
    const std::size_t m = xv.dim(0), c = xv.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < c; ++j) ms += xv[i * c + j] * xv[i * c + j];
        const double s = std::sqrt(ms / static_cast<double>(c) + eps);
        for (std::size_t j = 0; j < c; ++j) n.out[i * c + j] = xv[i * c + j] / s;
    }
    return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId x, bool causal) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw AutogradError("softmax_rows: need 2-D input");
    if (causal && xv.dim(0) != xv.dim(1))
        throw AutogradError("softmax_rows: causal mask needs a square matrix");
    Node n;
    n.op = Op::softmax;
    n.in = {x};
    n.causal = causal;
    n.out = Tensor(xv.shape(), xv.precision());
    const std::size_t m = xv.dim(0), c = xv.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t lim = causal ? i + 1 : c;
        double mx = xv[i * c];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, xv[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            n.out[i * c + j] = std::exp(xv[i * c + j] - mx);
            z += n.out[i * c + j];
        }
        for (std::size_t j = 0; j < lim; ++j) n.out[i * c + j] /= z;
        for (std::size_t j = lim; j < c; ++j) n.out[i * c + j] = 0.0;
    }
    return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId x, std::size_t c0, std::size_t c1) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2 || c0 >= c1 || c1 > xv.dim(1))
        throw AutogradError("slice_cols: bad column range");
    Node n;
    n.op = Op::slice;
    n.in = {x};
    n.c0 = c0;
    n.c1 = c1;
    const std::size_t m = xv.dim(0), c = xv.dim(1), w = c1 - c0;
    n.out = Tensor({m, w}, xv.precision());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) n.out[i * w + j] = xv[i * c + c0 + j];
    return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw AutogradError("concat_cols: no inputs");
    const std::size_t m = value(parts[0]).dim(0);
    std::size_t total = 0;
    for (NodeId p : parts) {
        const Tensor& t = value(p);
        if (t.rank() != 2 || t.dim(0) != m) throw AutogradError("concat_cols: row mismatch");
        total += t.dim(1);
    }
    Node n;
    n.op = Op::concat;
    n.in = parts;
    n.out = Tensor({m, total}, value(parts[0]).precision());
    std::size_t off = 0;
    for (NodeId p : parts) {
        const Tensor& t = value(p);
        const std::size_t w = t.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) n.out[i * total + off + j] = t[i * w + j];
        off += w;
    }
    return push(std::move(n));
}

NodeId Tape::embed(NodeId table, std::vector<int> ids) {
    const Tensor& tv = value(table);
    if (tv.rank() != 2) throw AutogradError("embed: table must be 2-D");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw AutogradError("embed: token id out of range: " + std::to_string(id));
    }
    Node n;
    n.op = Op::embed_op;
    n.in = {table};
    n.ids = std::move(ids);
    n.out = Tensor({n.ids.size(), d}, tv.precision());
    for (std::size_t t = 0; t < n.ids.size(); ++t)
        for (std::size_t j = 0; j < d; ++j)
            n.out[t * d + j] = tv[static_cast<std::size_t>(n.ids[t]) * d + j];
    return push(std::move(n));
}

NodeId Tape::mean_all(NodeId a) {
    Node n;
    n.op = Op::mean_op;
    n.in = {a};
    n.out = Tensor::scalar(sum(value(a)) / static_cast<double>(value(a).size()));
    return push(std::move(n));
}

NodeId Tape::mse_loss(NodeId pred, Tensor target) {
    const Tensor& pv = value(pred);
    if (!pv.same_shape(target)) throw AutogradError("mse_loss: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double e = pv[i] - target[i];
        s += e * e;
    }
    Node n;
    n.op = Op::mse;
    n.in = {pred};
    n.aux = std::move(target);
    n.out = Tensor::scalar(s / static_cast<double>(pv.size()));
    return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::vector<int> targets) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2 || targets.size() != lv.dim(0))
        throw AutogradError("cross_entropy: need [T,V] logits and T targets");
    const std::size_t T = lv.dim(0), V = lv.dim(1);
    Node n;
    n.op = Op::ce;
    n.in = {logits};
    n.ids = std::move(targets);
    n.aux = Tensor({T, V}, lv.precision());  // softmax probabilities
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const int y = n.ids[t];
        if (y < 0 || static_cast<std::size_t>(y) >= V)
            throw AutogradError("cross_entropy: target out of range");
        double mx = lv[t * V];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, lv[t * V + v]);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            n.aux[t * V + v] = std::exp(lv[t * V + v] - mx);
            z += n.aux[t * V + v];
        }
        for (std::size_t v = 0; v < V; ++v) n.aux[t * V + v] /= z;
        loss += std::log(z) + mx - lv[t * V + static_cast<std::size_t>(y)];
    }
    n.out = Tensor::scalar(loss / static_cast<double>(T));
    return push(std::move(n));
}

void Tape::accumulate(NodeId dst, const Tensor& contribution, std::vector<Tensor>& adj,
                      std::vector<char>& has_adj, std::vector<int>& remaining,
                      const GradCallback& sink, std::vector<TrackedAlloc>& grad_allocs,
                      bool fused) {
    Node& node = nodes_[dst];
    if (!has_adj[dst]) {
        adj[dst] = contribution;
        has_adj[dst] = 1;
        if (node.op == Op::leaf_param) {
            if (stats_) {
                stats_->live_param_grads += 1;
                stats_->peak_live_param_grads =
                    std::max(stats_->peak_live_param_grads, stats_->live_param_grads);
            }
            if (ledger_) {
                grad_allocs[dst] = TrackedAlloc(ledger_, node.param->name + ".grad",
                                                adj[dst].byte_size(), MemCategory::grad);
            }
        }
    } else {
        axpy_inplace(adj[dst], 1.0, contribution);
    }
    if (node.op == Op::leaf_param) {
        remaining[dst] -= 1;
        if (remaining[dst] == 0) {
            // Gradient is final: deliver the previously finalized parameter
            // and hold this one until the next gradient lands.
            if (pending_.param) {
                Parameter& prev = *pending_.param;
                prev.backprop_index = next_backprop_index_++;
                try {
                    sink(prev, adj[pending_.node]);
                } catch (const std::exception& e) {
                    throw AutogradError("gradient callback failed for parameter '" + prev.name +
                                        "': " + e.what());
                }
                if (fused) {
                    adj[pending_.node] = Tensor();
                    grad_allocs[pending_.node].release();
                    if (stats_) stats_->live_param_grads -= 1;
                }
            }
            pending_ = {node.param, dst};
        }
    }
}

void Tape::node_backward(NodeId id, const Tensor& d, std::vector<Tensor>& adj,
                         std::vector<char>& has_adj, std::vector<int>& remaining,
                         const GradCallback& sink, std::vector<TrackedAlloc>& grad_allocs,
                         bool fused) {
    const Node& n = nodes_[id];
    auto acc = [&](NodeId dst, const Tensor& t) {
        accumulate(dst, t, adj, has_adj, remaining, sink, grad_allocs, fused);
    };
    switch (n.op) {
        case Op::constant:
        case Op::leaf_param:
            return;
        case Op::matmul: {
            acc(n.in[0], fusedopt::matmul(d, fusedopt::transpose(value(n.in[1]))));
            acc(n.in[1], fusedopt::matmul(fusedopt::transpose(value(n.in[0])), d));
            return;
        }
        case Op::transpose:
            acc(n.in[0], fusedopt::transpose(d));
            return;
        case Op::add:
            acc(n.in[0], d);
            acc(n.in[1], d);
            return;
        case Op::sub:
            acc(n.in[0], d);
            acc(n.in[1], fusedopt::scale(d, -1.0));
            return;
        case Op::mul:
            acc(n.in[0], fusedopt::mul(d, value(n.in[1])));
            acc(n.in[1], fusedopt::mul(d, value(n.in[0])));
            return;
        case Op::scale_op:
            acc(n.in[0], fusedopt::scale(d, n.k));
            return;
        case Op::add_scalar_op:
            acc(n.in[0], d);
            return;
        case Op::tanh_op: {
            Tensor g(n.out.shape(), n.out.precision());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = d[i] * (1.0 - n.out[i] * n.out[i]);
            acc(n.in[0], g);
            return;
        }
        case Op::gelu_op: {
            const Tensor& x = value(n.in[0]);
            Tensor g(x.shape(), x.precision());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double u = kGeluC * (x[i] + kGeluA * x[i] * x[i] * x[i]);
                const double t = std::tanh(u);
                const double du = kGeluC * (1.0 + 3.0 * kGeluA * x[i] * x[i]);
                g[i] = d[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du);
            }
            acc(n.in[0], g);
            return;
        }
        case Op::exp_op:
            acc(n.in[0], fusedopt::mul(d, n.out));
            return;
        case Op::add_row_op: {
            acc(n.in[0], d);
            const std::size_t m = n.out.dim(0), c = n.out.dim(1);
            Tensor db(value(n.in[1]).shape(), n.out.precision());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) db[j] += d[i * c + j];
            acc(n.in[1], db);
            return;
        }
        case Op::mul_row_op: {
            const Tensor& x = value(n.in[0]);
            const Tensor& g = value(n.in[1]);
            const std::size_t m = n.out.dim(0), c = n.out.dim(1);
            Tensor dx(x.shape(), x.precision());
            Tensor dg(g.shape(), g.precision());
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    dx[i * c + j] = d[i * c + j] * g[j];
                    dg[j] += d[i * c + j] * x[i * c + j];
                }
            }
            acc(n.in[0], dx);
            acc(n.in[1], dg);
            return;
        }
        case Op::rmsnorm: {
            const Tensor& x = value(n.in[0]);
            const std::size_t m = x.dim(0), c = x.dim(1);
            Tensor dx(x.shape(), x.precision());
            for (std::size_t i = 0; i < m; ++i) {
                double ms = 0.0, dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    ms += x[i * c + j] * x[i * c + j];
                    dot += d[i * c + j] * x[i * c + j];
                }
                const double s2 = ms / static_cast<double>(c) + n.k;
                const double s = std::sqrt(s2);
                for (std::size_t j = 0; j < c; ++j) {
                    dx[i * c + j] = d[i * c + j] / s -
                                    x[i * c + j] * dot / (static_cast<double>(c) * s2 * s);
                }
            }
            acc(n.in[0], dx);
            return;
        }
        case Op::softmax: {
            const std::size_t m = n.out.dim(0), c = n.out.dim(1);
            Tensor dx(n.out.shape(), n.out.precision());
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t lim = n.causal ? i + 1 : c;
                double dot = 0.0;
                for (std::size_t j = 0; j < lim; ++j) dot += d[i * c + j] * n.out[i * c + j];
                for (std::size_t j = 0; j < lim; ++j)
                    dx[i * c + j] = n.out[i * c + j] * (d[i * c + j] - dot);
            }
            acc(n.in[0], dx);
            return;
        }
        case Op::slice: {
            const Tensor& x = value(n.in[0]);
            const std::size_t m = x.dim(0), c = x.dim(1), w = n.c1 - n.c0;
            Tensor dx(x.shape(), x.precision());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) dx[i * c + n.c0 + j] = d[i * w + j];
            acc(n.in[0], dx);
            return;
        }
        case Op::concat: {
            const std::size_t m = n.out.dim(0), total = n.out.dim(1);
            std::size_t off = 0;
            for (NodeId p : n.in) {
                const std::size_t w = value(p).dim(1);
                Tensor dp({m, w}, n.out.precision());
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) dp[i * w + j] = d[i * total + off + j];
                acc(p, dp);
                off += w;
            }
            return;
        }
        case Op::embed_op: {
            const Tensor& table = value(n.in[0]);
            const std::size_t dcols = table.dim(1);
            Tensor dt(table.shape(), table.precision());
            for (std::size_t t = 0; t < n.ids.size(); ++t)
                for (std::size_t j = 0; j < dcols; ++j)
                    dt[static_cast<std::size_t>(n.ids[t]) * dcols + j] += d[t * dcols + j];
            acc(n.in[0], dt);
            return;
        }
        case Op::mean_op: {
            const Tensor& x = value(n.in[0]);
            acc(n.in[0], Tensor::full(x.shape(), d[0] / static_cast<double>(x.size()),
                                      x.precision()));
            return;
        }
        case Op::mse: {
            const Tensor& p = value(n.in[0]);
            Tensor dp(p.shape(), p.precision());
            const double k = 2.0 * d[0] / static_cast<double>(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) dp[i] = k * (p[i] - n.aux[i]);
            acc(n.in[0], dp);
            return;
        }
        case Op::ce: {
            const Tensor& logits = value(n.in[0]);
            const std::size_t T = logits.dim(0), V = logits.dim(1);
            Tensor dl(logits.shape(), logits.precision());
            const double k = d[0] / static_cast<double>(T);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t v = 0; v < V; ++v) dl[t * V + v] = k * n.aux[t * V + v];
                dl[t * V + static_cast<std::size_t>(n.ids[t])] -= k;
            }
            acc(n.in[0], dl);
            return;
        }
    }
}

void Tape::run_backward(NodeId loss, const GradCallback& sink, bool fused,
                        std::vector<TrackedAlloc>* keep_allocs) {
    if (consumed_) throw AutogradError("backward on a consumed tape");
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()))
        throw AutogradError("backward: bad loss node");
    if (nodes_[loss].out.size() != 1) throw AutogradError("backward: loss must be scalar");
    consumed_ = true;
    if (stats_) stats_->backward_passes += 1;

    const std::size_t nn = nodes_.size();
    std::vector<Tensor> adj(nn);
    std::vector<char> has_adj(nn, 0);
    std::vector<int> remaining(nn, 0);
    std::vector<TrackedAlloc> grad_allocs(nn);
    // Only consumers at or below the loss node take part in this backward.
    for (NodeId i = 0; i <= loss; ++i)
        for (NodeId in : nodes_[i].in) remaining[in] += 1;

    pending_ = {};
    next_backprop_index_ = 0;
    for (auto& n : nodes_)
        if (n.op == Op::leaf_param) n.param->backprop_index = -1;

    adj[loss] = Tensor(nodes_[loss].out.shape(), nodes_[loss].out.precision());
    adj[loss][0] = 1.0;
    has_adj[loss] = 1;
    if (nodes_[loss].op == Op::leaf_param && remaining[loss] == 0) {
        if (stats_) {
            stats_->live_param_grads += 1;
            stats_->peak_live_param_grads =
                std::max(stats_->peak_live_param_grads, stats_->live_param_grads);
        }
        pending_ = {nodes_[loss].param, loss};
    }

    for (NodeId i = loss; i >= 0; --i) {
        if (!has_adj[i] || nodes_[i].op == Op::leaf_param) continue;
        node_backward(i, adj[i], adj, has_adj, remaining, sink, grad_allocs, fused);
        adj[i] = Tensor();  // intermediate adjoint no longer needed
        has_adj[i] = 0;
    }

    // Parameters the loss does not depend on still get a (zero) gradient so
    // the once-per-parameter contract holds.
    for (NodeId i = static_cast<NodeId>(nn) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.op != Op::leaf_param) continue;
        if (n.param->backprop_index != -1 || n.param == pending_.param) continue;
        Tensor zero(n.out.shape(), n.out.precision());
        remaining[i] = 1;  // let the normal finalize path run
        has_adj[i] = 0;
        accumulate(i, zero, adj, has_adj, remaining, sink, grad_allocs, fused);
    }

    if (pending_.param) {
        Parameter& last = *pending_.param;
        last.backprop_index = next_backprop_index_++;
        try {
            sink(last, adj[pending_.node]);
        } catch (const std::exception& e) {
            throw AutogradError("gradient callback failed for parameter '" + last.name +
                                "': " + e.what());
        }
        if (fused) {
            adj[pending_.node] = Tensor();
            grad_allocs[pending_.node].release();
            if (stats_) stats_->live_param_grads -= 1;
        }
        pending_ = {};
    }

    if (!fused && keep_allocs) {
        for (auto& a : grad_allocs) keep_allocs->push_back(std::move(a));
    }
}

void Tape::backward_fused(NodeId loss, const GradCallback& callback) {
    run_backward(loss, callback, /*fused=*/true, nullptr);
}

Tape::FullGrads Tape::backward_full(NodeId loss) {
    FullGrads out;
    run_backward(
        loss,
        [&](Parameter& p, const Tensor& g) {
            auto [it, fresh] = out.by_param_id.try_emplace(p.id, g);
            if (!fresh) axpy_inplace(it->second, 1.0, g);
        },
        /*fused=*/false, &out.allocs);
    return out;
}

TwoPassResult fused_update_with_global_clip(const std::function<NodeId(Tape&)>& build,
                                            double clip_threshold,
                                            const Tape::GradCallback& update,
                                            MemoryLedger* ledger, BackwardStats* stats) {
    TwoPassResult res;
    double sq = 0.0;
    {
        Tape pass1(ledger, stats);
        NodeId loss = build(pass1);
        pass1.backward_fused(loss, [&](Parameter&, const Tensor& g) {
            for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
        });
    }
    res.grad_norm = std::sqrt(sq);
    res.clip_scale = (res.grad_norm > clip_threshold && res.grad_norm > 0.0)
                         ? clip_threshold / res.grad_norm
                         : 1.0;
    {
        Tape pass2(ledger, stats);
        NodeId loss = build(pass2);
        pass2.backward_fused(loss, [&](Parameter& p, const Tensor& g) {
            if (res.clip_scale == 1.0) {
                update(p, g);
            } else {
                update(p, fusedopt::scale(g, res.clip_scale));
            }
        });
    }
    return res;
}

}  // namespace fusedopt
