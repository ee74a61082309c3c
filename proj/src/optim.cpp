#include "fusedopt/optim.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fusedopt/serialize.hpp"

namespace fusedopt {

double schedule_alpha(const Schedule& s, long t) {
    if (t < 0) throw OptimError("schedule_alpha: negative step");
    if (s.kind == Schedule::Kind::constant) return s.alpha_max;
    if (s.total_steps <= s.warmup_steps)
        throw OptimError("schedule_alpha: total_steps must exceed warmup_steps");
    if (t < s.warmup_steps)
        return s.alpha_max * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
    if (t >= s.total_steps) return 0.0;
    const double progress = static_cast<double>(t - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.alpha_max * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void step_lomo(Tensor& theta, const Tensor& g, double alpha) {
    axpy_inplace(theta, -alpha, g);
}

void step_momentum(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1) {
    if (st.m.empty()) st.m = Tensor::zeros(theta.shape(), theta.precision());
    st.t += 1;
    const double corr = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
        theta[i] -= alpha * (st.m[i] / corr);
    }
}

void step_variance(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta2,
                   double eps) {
    if (st.v.empty()) st.v = Tensor::zeros(theta.shape(), theta.precision());
    st.t += 1;
    const double corr = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
        theta[i] -= alpha * g[i] / (std::sqrt(st.v[i] / corr) + eps);
    }
}

void step_adam(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1,
               double beta2, double eps) {
    if (st.m.empty()) st.m = Tensor::zeros(theta.shape(), theta.precision());
    if (st.v.empty()) st.v = Tensor::zeros(theta.shape(), theta.precision());
    st.t += 1;
    const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
        theta[i] -= alpha * (st.m[i] / corr1) / (std::sqrt(st.v[i] / corr2) + eps);
    }
}

void step_adamw(Tensor& theta, const Tensor& g, AdamState& st, double alpha, double beta1,
                double beta2, double eps, double weight_decay) {
    if (weight_decay != 0.0) {
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= alpha * weight_decay * theta[i];
    }
    step_adam(theta, g, st, alpha, beta1, beta2, eps);
}

void update_factored(FactoredMoment& fm, const Tensor& g, double beta) {
    if (g.rank() != 2) throw OptimError("update_factored: gradient must be rank 2");
    const std::size_t m = g.dim(0), n = g.dim(1);
    if (fm.r.empty()) fm.r = Tensor::zeros({m, 1}, g.precision());
    if (fm.c.empty()) fm.c = Tensor::zeros({1, n}, g.precision());
    if (fm.r.dim(0) != m || fm.c.dim(1) != n)
        throw OptimError("update_factored: state/gradient shape mismatch");
    const Tensor g2 = square(g);
    const Tensor rs = row_sums(g2);
    const Tensor cs = col_sums(g2);
    for (std::size_t i = 0; i < m; ++i) fm.r[i] = beta * fm.r[i] + (1.0 - beta) * rs[i];
    for (std::size_t j = 0; j < n; ++j) fm.c[j] = beta * fm.c[j] + (1.0 - beta) * cs[j];
}

Tensor reconstruct_v(const FactoredMoment& fm, bool* cold) {
    const std::size_t m = fm.r.dim(0), n = fm.c.dim(1);
    Tensor v({m, n}, fm.r.precision());
    const double rsum = sum(fm.r);
    if (cold) *cold = (rsum == 0.0);
    if (rsum == 0.0) return v;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = fm.r[i] * fm.c[j] / rsum;
    return v;
}

Tensor grouped_normalize(const Tensor& u, const Tensor& theta_prev, double eps) {
    if (!u.same_shape(theta_prev)) throw OptimError("grouped_normalize: shape mismatch");
    const double shrink = std::max(1.0, rms(u));
    const double magnitude = std::max(eps, rms(theta_prev));
    return scale(u, magnitude / shrink);
}

void step_adalomo(Tensor& theta, const Tensor& g, AdaLomoParamState& st, double alpha_t,
                  double beta, double eps1, double eps2, DenomMode mode) {
    if (!theta.same_shape(g)) throw OptimError("step_adalomo: shape mismatch");
    st.t += 1;
    Tensor v;
    if (g.rank() == 2) {
        st.factored = true;
        update_factored(st.fm, g, beta);
        v = reconstruct_v(st.fm);
    } else {
        if (st.v_full.empty()) st.v_full = Tensor::zeros(theta.shape(), theta.precision());
        for (std::size_t i = 0; i < g.size(); ++i)
            st.v_full[i] = beta * st.v_full[i] + (1.0 - beta) * g[i] * g[i];
        v = st.v_full;
    }
    Tensor u(theta.shape(), theta.precision());
    if (mode == DenomMode::sqrt_mode) {
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = g[i] / (std::sqrt(v[i]) + eps1);
    } else {
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = g[i] / (v[i] + eps1);
    }
    const Tensor u_hat = grouped_normalize(u, theta, eps2);
    axpy_inplace(theta, -alpha_t, u_hat);
}

OptMethod parse_opt_method(const std::string& name) {
    if (name == "sgd") return OptMethod::sgd;
    if (name == "lomo") return OptMethod::lomo;
    if (name == "momentum") return OptMethod::momentum;
    if (name == "variance") return OptMethod::variance;
    if (name == "adam") return OptMethod::adam;
    if (name == "adamw") return OptMethod::adamw;
    if (name == "adafactor") return OptMethod::adafactor;
    if (name == "adalomo") return OptMethod::adalomo;
    throw OptimError("unknown optimizer: " + name);
}

const char* opt_method_name(OptMethod m) {
    switch (m) {
        case OptMethod::sgd: return "sgd";
        case OptMethod::lomo: return "lomo";
        case OptMethod::momentum: return "momentum";
        case OptMethod::variance: return "variance";
        case OptMethod::adam: return "adam";
        case OptMethod::adamw: return "adamw";
        case OptMethod::adafactor: return "adafactor";
        case OptMethod::adalomo: return "adalomo";
    }
    return "?";
}

bool method_is_fused(OptMethod m) {
    return m == OptMethod::lomo || m == OptMethod::adalomo;
}

Optimizer::Optimizer(OptimizerConfig cfg, MemoryLedger* ledger)
    : cfg_(std::move(cfg)), ledger_(ledger) {}

void Optimizer::track_state(const Parameter& p, const char* kind, const Tensor& t) {
    if (!ledger_) return;
    state_allocs_.emplace_back(ledger_, p.name + "." + kind, t.byte_size(),
                               MemCategory::optim_state);
}

AdamState& Optimizer::adam_state(const Parameter& p) {
    auto [it, fresh] = adam_states_.try_emplace(p.id);
    if (fresh) {
        const bool wants_m = cfg_.method == OptMethod::momentum || cfg_.method == OptMethod::adam ||
                             cfg_.method == OptMethod::adamw;
        const bool wants_v = cfg_.method == OptMethod::variance || cfg_.method == OptMethod::adam ||
                             cfg_.method == OptMethod::adamw;
        if (wants_m) {
            it->second.m = Tensor::zeros(p.value.shape(), p.value.precision());
            track_state(p, "m", it->second.m);
        }
        if (wants_v) {
            it->second.v = Tensor::zeros(p.value.shape(), p.value.precision());
            track_state(p, "v", it->second.v);
        }
    }
    return it->second;
}

AdaLomoParamState& Optimizer::factored_state(const Parameter& p) {
    auto [it, fresh] = factored_states_.try_emplace(p.id);
    if (fresh) {
        if (p.value.rank() == 2) {
            it->second.factored = true;
            it->second.fm.r = Tensor::zeros({p.value.dim(0), 1}, p.value.precision());
            it->second.fm.c = Tensor::zeros({1, p.value.dim(1)}, p.value.precision());
            track_state(p, "r", it->second.fm.r);
            track_state(p, "c", it->second.fm.c);
        } else {
            it->second.v_full = Tensor::zeros(p.value.shape(), p.value.precision());
            track_state(p, "v", it->second.v_full);
        }
    }
    return it->second;
}

void Optimizer::apply(Parameter& p, const Tensor& g, double alpha_t) {
    switch (cfg_.method) {
        case OptMethod::sgd:
        case OptMethod::lomo:
            step_lomo(p.value, g, alpha_t);
            return;
        case OptMethod::momentum:
            step_momentum(p.value, g, adam_state(p), alpha_t, cfg_.beta1);
            return;
        case OptMethod::variance:
            step_variance(p.value, g, adam_state(p), alpha_t, cfg_.beta2, cfg_.eps1);
            return;
        case OptMethod::adam:
            step_adam(p.value, g, adam_state(p), alpha_t, cfg_.beta1, cfg_.beta2, cfg_.eps1);
            return;
        case OptMethod::adamw:
            step_adamw(p.value, g, adam_state(p), alpha_t, cfg_.beta1, cfg_.beta2, cfg_.eps1,
                       cfg_.weight_decay);
            return;
        case OptMethod::adafactor:
        case OptMethod::adalomo: {
            const double beta = cfg_.method == OptMethod::adafactor ? cfg_.beta2 : cfg_.beta;
            step_adalomo(p.value, g, factored_state(p), alpha_t, beta, cfg_.eps1, cfg_.eps2,
                         cfg_.denom);
            return;
        }
    }
}

std::size_t Optimizer::state_elements() const {
    std::size_t n = 0;
    for (const auto& [id, st] : adam_states_) n += st.m.size() + st.v.size();
    for (const auto& [id, st] : factored_states_) {
        if (st.factored) n += st.fm.r.size() + st.fm.c.size();
        n += st.v_full.size();
    }
    return n;
}

std::vector<Optimizer::Slot> Optimizer::slots_for(int param_id) const {
    std::vector<Slot> out;
    if (auto it = adam_states_.find(param_id); it != adam_states_.end()) {
        if (!it->second.m.empty()) out.push_back({"m", &it->second.m, it->second.t});
        if (!it->second.v.empty()) out.push_back({"v", &it->second.v, it->second.t});
    }
    if (auto it = factored_states_.find(param_id); it != factored_states_.end()) {
        if (it->second.factored) {
            out.push_back({"r", &it->second.fm.r, it->second.t});
            out.push_back({"c", &it->second.fm.c, it->second.t});
        } else {
            out.push_back({"v", &it->second.v_full, it->second.t});
        }
    }
    return out;
}

void save_optimizer_checkpoint(const Optimizer& opt, const ParameterStore& params,
                               const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw OptimError("cannot write checkpoint manifest in " + dir);
    for (const auto& p : params) {
        for (const auto& slot : opt.slots_for(p.id)) {
            const std::string file = "p" + std::to_string(p.id) + "_" + slot.kind + ".bin";
            save_tensor((fs::path(dir) / file).string(), *slot.tensor);
            manifest << p.name << "\t" << slot.kind << "\t" << slot.t << "\t" << file << "\n";
        }
    }
}

std::vector<CheckpointRecord> load_optimizer_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw OptimError("cannot read checkpoint manifest in " + dir);
    std::vector<CheckpointRecord> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        CheckpointRecord rec;
        std::string file;
        if (!(std::getline(ss, rec.param_name, '\t') && std::getline(ss, rec.kind, '\t') &&
              (ss >> rec.t) && ss.ignore(1) && std::getline(ss, file)))
            throw OptimError("malformed checkpoint manifest line: " + line);
        rec.tensor = load_tensor((fs::path(dir) / file).string());
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace fusedopt
