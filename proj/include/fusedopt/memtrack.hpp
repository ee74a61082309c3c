#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fusedopt {

class LedgerError : public std::runtime_error {
public:
    explicit LedgerError(const std::string& what) : std::runtime_error(what) {}
};

enum class MemCategory : int { param = 0, grad = 1, optim_state = 2, activation = 3 };
constexpr int kNumMemCategories = 4;

const char* mem_category_name(MemCategory c);

// Logical-byte allocation ledger with per-category live totals and peaks.
// "Timestamps" are event sequence numbers so reports are deterministic.
class MemoryLedger {
public:
    struct Event {
        std::uint64_t seq;
        bool is_alloc;
        std::uint64_t id;
        std::size_t bytes;
        MemCategory category;
        std::string label;
    };

    std::uint64_t record_alloc(const std::string& label, std::size_t bytes, MemCategory category);
    void record_free(std::uint64_t id);

    std::size_t live_bytes(MemCategory c) const { return live_bytes_[static_cast<int>(c)]; }
    std::size_t peak_bytes(MemCategory c) const { return peak_bytes_[static_cast<int>(c)]; }
    int live_count(MemCategory c) const { return live_count_[static_cast<int>(c)]; }
    int peak_count(MemCategory c) const { return peak_count_[static_cast<int>(c)]; }
    std::size_t total_peak_bytes() const;

    const std::vector<Event>& events() const { return events_; }

    // Key: value text rendering of current peaks and live totals.
    std::string report_text() const;

private:
    struct LiveAlloc {
        std::size_t bytes;
        MemCategory category;
    };
    std::map<std::uint64_t, LiveAlloc> live_;
    std::array<std::size_t, kNumMemCategories> live_bytes_{};
    std::array<std::size_t, kNumMemCategories> peak_bytes_{};
    std::array<int, kNumMemCategories> live_count_{};
    std::array<int, kNumMemCategories> peak_count_{};
    std::vector<Event> events_;
    std::uint64_t next_id_ = 1;
};

// RAII wrapper for a single tracked allocation. Ledger may be null (no-op).
class TrackedAlloc {
public:
    TrackedAlloc() = default;
    TrackedAlloc(MemoryLedger* ledger, const std::string& label, std::size_t bytes,
                 MemCategory category);
    TrackedAlloc(const TrackedAlloc&) = delete;
    TrackedAlloc& operator=(const TrackedAlloc&) = delete;
    TrackedAlloc(TrackedAlloc&& other) noexcept;
    TrackedAlloc& operator=(TrackedAlloc&& other) noexcept;
    ~TrackedAlloc();
    void release();

private:
    MemoryLedger* ledger_ = nullptr;
    std::uint64_t id_ = 0;
};

enum class EstimateMethod { adamw, adafactor, lora, lomo, adalomo };

EstimateMethod parse_estimate_method(const std::string& name);  // throws LedgerError
const char* estimate_method_name(EstimateMethod m);

// Mixed-precision byte policy: working parameter/gradient width and the width
// of master weights and optimizer moments.
struct PrecisionPolicy {
    std::size_t working_bytes = 2;
    std::size_t state_bytes = 4;
};

// Analytic per-category byte model for a list of parameter shapes.
// `total_bytes` counts persistent residency; for fused methods the transient
// two-tensor gradient window is reported separately in `grad_transient_peak`.
struct AnalyticEstimate {
    EstimateMethod method;
    std::size_t model_params = 0;    // M
    std::size_t adapter_params = 0;  // N
    std::size_t param_bytes = 0;
    std::size_t grad_bytes = 0;  // persistent gradient residency
    std::size_t grad_transient_peak = 0;
    std::size_t optim_bytes = 0;
    std::size_t total_bytes = 0;  // param + grad + optim

    std::string report_text() const;
};

// Shapes are the trainable parameter tensors in backpropagation order.
AnalyticEstimate analytic_estimate(EstimateMethod method,
                                   const std::vector<std::vector<std::size_t>>& shapes,
                                   std::size_t adapter_params = 0,
                                   PrecisionPolicy policy = {});

// Convenience overload for a bare parameter count: models the M parameters
// as 4096 x 4096 square matrices plus a remainder vector.
AnalyticEstimate analytic_estimate_for_count(EstimateMethod method, std::size_t model_params,
                                             std::size_t adapter_params = 0,
                                             PrecisionPolicy policy = {});

// Parameter shape list of a LLaMA-7B-like decoder, used for the analytic model.
std::vector<std::vector<std::size_t>> llama7b_shapes();

}  // namespace fusedopt
