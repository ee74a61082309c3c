#include "fusedopt/memtrack.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

namespace fusedopt {

const char* mem_category_name(MemCategory c) {
    switch (c) {
        case MemCategory::param: return "param";
        case MemCategory::grad: return "grad";
        case MemCategory::optim_state: return "optim_state";
        case MemCategory::activation: return "activation";
    }
    return "?";
}

std::uint64_t MemoryLedger::record_alloc(const std::string& label, std::size_t bytes,
                                         MemCategory category) {
    if (bytes == 0) throw LedgerError("record_alloc: bytes must be > 0 (" + label + ")");
    const std::uint64_t id = next_id_++;
    live_.emplace(id, LiveAlloc{bytes, category});
    const int c = static_cast<int>(category);
    live_bytes_[c] += bytes;
    live_count_[c] += 1;
    peak_bytes_[c] = std::max(peak_bytes_[c], live_bytes_[c]);
    peak_count_[c] = std::max(peak_count_[c], live_count_[c]);
    events_.push_back({static_cast<std::uint64_t>(events_.size()), true, id, bytes, category, label});
    return id;
}

void MemoryLedger::record_free(std::uint64_t id) {
    auto it = live_.find(id);
    if (it == live_.end()) {
        throw LedgerError("record_free: unknown or already freed allocation id " +
                          std::to_string(id));
    }
    const int c = static_cast<int>(it->second.category);
    live_bytes_[c] -= it->second.bytes;
    live_count_[c] -= 1;
    events_.push_back({static_cast<std::uint64_t>(events_.size()), false, id, it->second.bytes,
                       it->second.category, ""});
    live_.erase(it);
}

std::size_t MemoryLedger::total_peak_bytes() const {
    std::size_t s = 0;
    for (auto b : peak_bytes_) s += b;
    return s;
}

std::string MemoryLedger::report_text() const {
    std::ostringstream os;
    for (int c = 0; c < kNumMemCategories; ++c) {
        const char* name = mem_category_name(static_cast<MemCategory>(c));
        os << name << ".peak_bytes: " << peak_bytes_[c] << "\n";
        os << name << ".peak_count: " << peak_count_[c] << "\n";
        os << name << ".live_bytes: " << live_bytes_[c] << "\n";
    }
    return os.str();
}

TrackedAlloc::TrackedAlloc(MemoryLedger* ledger, const std::string& label, std::size_t bytes,
                           MemCategory category)
    : ledger_(ledger) {
    if (ledger_) id_ = ledger_->record_alloc(label, bytes, category);
}

TrackedAlloc::TrackedAlloc(TrackedAlloc&& other) noexcept
    : ledger_(other.ledger_), id_(other.id_) {
    other.ledger_ = nullptr;
    other.id_ = 0;
}

TrackedAlloc& TrackedAlloc::operator=(TrackedAlloc&& other) noexcept {
    if (this != &other) {
        release();
        ledger_ = other.ledger_;
        id_ = other.id_;
        other.ledger_ = nullptr;
        other.id_ = 0;
    }
    return *this;
}

TrackedAlloc::~TrackedAlloc() { release(); }

void TrackedAlloc::release() {
    if (ledger_ && id_) ledger_->record_free(id_);
    ledger_ = nullptr;
    id_ = 0;
}

EstimateMethod parse_estimate_method(const std::string& name) {
    if (name == "adamw") return EstimateMethod::adamw;
    if (name == "adafactor") return EstimateMethod::adafactor;
    if (name == "lora") return EstimateMethod::lora;
    if (name == "lomo") return EstimateMethod::lomo;
    if (name == "adalomo") return EstimateMethod::adalomo;
    throw LedgerError("unknown estimate method: " + name);
}

const char* estimate_method_name(EstimateMethod m) {
    switch (m) {
        case EstimateMethod::adamw: return "adamw";
        case EstimateMethod::adafactor: return "adafactor";
        case EstimateMethod::lora: return "lora";
        case EstimateMethod::lomo: return "lomo";
        case EstimateMethod::adalomo: return "adalomo";
    }
    return "?";
}

namespace {

std::size_t shape_elems(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

// r + c elements for matrices, full size for lower-rank parameters.
std::size_t factored_state_elems(const std::vector<std::size_t>& s) {
    if (s.size() == 2) return s[0] + s[1];
    return shape_elems(s);
}

// Largest sum of two consecutive (backprop-order) gradient tensors.
std::size_t two_adjacent_peak_elems(const std::vector<std::vector<std::size_t>>& shapes) {
    if (shapes.empty()) return 0;
    if (shapes.size() == 1) return shape_elems(shapes[0]);
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < shapes.size(); ++i)
        best = std::max(best, shape_elems(shapes[i]) + shape_elems(shapes[i + 1]));
    return best;
}

}  // namespace

AnalyticEstimate analytic_estimate(EstimateMethod method,
                                   const std::vector<std::vector<std::size_t>>& shapes,
                                   std::size_t adapter_params, PrecisionPolicy policy) {
    if (shapes.empty()) throw LedgerError("analytic_estimate: empty shape list");
    std::size_t M = 0, factored = 0;
    for (const auto& s : shapes) {
        M += shape_elems(s);
        factored += factored_state_elems(s);
    }
    const std::size_t N = adapter_params;
    const std::size_t w = policy.working_bytes, st = policy.state_bytes;

    AnalyticEstimate e;
    e.method = method;
    e.model_params = M;
    e.adapter_params = N;
    switch (method) {
        case EstimateMethod::adamw:
            // 2M params + 2M grads + 12M state (master weights, m, v).
            e.param_bytes = w * M;
            e.grad_bytes = w * M;
            e.optim_bytes = st * 3 * M;
            break;
        case EstimateMethod::adafactor:
            e.param_bytes = w * M;
            e.grad_bytes = w * M;
            e.optim_bytes = st * (M + factored);  // master weights + r/c marginals
            break;
        case EstimateMethod::lora:
            // Frozen base in working precision; adapters carry grads and Adam state.
            e.param_bytes = w * M + w * N;
            e.grad_bytes = w * N;
            e.optim_bytes = st * 3 * N;
            break;
        case EstimateMethod::lomo:
            e.param_bytes = w * M;
            e.grad_bytes = 0;
            e.grad_transient_peak = w * two_adjacent_peak_elems(shapes);
            e.optim_bytes = 0;
            break;
        case EstimateMethod::adalomo:
            e.param_bytes = w * M;
            e.grad_bytes = 0;
            e.grad_transient_peak = w * two_adjacent_peak_elems(shapes);
            e.optim_bytes = st * factored;
            break;
    }
    e.total_bytes = e.param_bytes + e.grad_bytes + e.optim_bytes;
    return e;
}

std::string AnalyticEstimate::report_text() const {
    std::ostringstream os;
    os << "method: " << estimate_method_name(method) << "\n";
    os << "model_params: " << model_params << "\n";
    os << "adapter_params: " << adapter_params << "\n";
    os << "param_bytes: " << param_bytes << "\n";
    os << "grad_bytes: " << grad_bytes << "\n";
    os << "grad_transient_peak: " << grad_transient_peak << "\n";
    os << "optim_bytes: " << optim_bytes << "\n";
    os << "total_bytes: " << total_bytes << "\n";
    return os.str();
}

AnalyticEstimate analytic_estimate_for_count(EstimateMethod method, std::size_t model_params,
                                             std::size_t adapter_params, PrecisionPolicy policy) {
    if (model_params == 0) throw LedgerError("analytic estimate: model_params must be > 0");
    constexpr std::size_t kDim = 4096;
    std::vector<std::vector<std::size_t>> shapes;
    std::size_t left = model_params;
    while (left >= kDim * kDim) {
        shapes.push_back({kDim, kDim});
        left -= kDim * kDim;
    }
    if (left > 0) shapes.push_back({left});
    return analytic_estimate(method, shapes, adapter_params, policy);
}

std::vector<std::vector<std::size_t>> llama7b_shapes() {
    const std::size_t vocab = 32000, d = 4096, ffn = 11008, layers = 32;
    std::vector<std::vector<std::size_t>> shapes;
    shapes.push_back({vocab, d});  // token embedding
    for (std::size_t l = 0; l < layers; ++l) {
        shapes.push_back({d, d});    // wq
        shapes.push_back({d, d});    // wk
        shapes.push_back({d, d});    // wv
        shapes.push_back({d, d});    // wo
        shapes.push_back({d, ffn});  // gate
        shapes.push_back({d, ffn});  // up
        shapes.push_back({ffn, d});  // down
        shapes.push_back({d});       // attention norm gain
        shapes.push_back({d});       // ffn norm gain
    }
    shapes.push_back({d});          // final norm gain
    shapes.push_back({d, vocab});   // output head
    return shapes;
}

}  // namespace fusedopt
