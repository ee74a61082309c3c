#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "fusedopt/optim.hpp"

using namespace fusedopt;

namespace {
constexpr double kTight = 1e-12;
}

TEST_CASE("schedule: constant and warmup-cosine shapes") {
    Schedule c{Schedule::Kind::constant, 0.01, 0, 0};
    CHECK(schedule_alpha(c, 0) == 0.01);
    CHECK(schedule_alpha(c, 12345) == 0.01);

    Schedule wc{Schedule::Kind::warmup_cosine, 0.1, 10, 110};
    CHECK(schedule_alpha(wc, 0) == 0.0);
    CHECK(schedule_alpha(wc, 5) == doctest::Approx(0.05).epsilon(kTight));
    CHECK(schedule_alpha(wc, 10) == doctest::Approx(0.1).epsilon(kTight));  // warmup peak
    CHECK(schedule_alpha(wc, 60) ==
          doctest::Approx(0.1 * 0.5 * (1.0 + std::cos(M_PI * 0.5))).epsilon(kTight));
    CHECK(schedule_alpha(wc, 110) == 0.0);
    CHECK(schedule_alpha(wc, 9999) == 0.0);  // clamps past the end
    CHECK_THROWS_AS(schedule_alpha(wc, -1), OptimError);
    Schedule bad{Schedule::Kind::warmup_cosine, 0.1, 10, 10};
    CHECK_THROWS_AS(schedule_alpha(bad, 0), OptimError);
}

TEST_CASE("sgd/lomo update is plain descent") {
    Tensor theta = Tensor::vector({1.0, -2.0});
    step_lomo(theta, Tensor::vector({0.5, -1.0}), 0.1);
    CHECK(theta[0] == doctest::Approx(0.95).epsilon(kTight));
    CHECK(theta[1] == doctest::Approx(-1.9).epsilon(kTight));
}

TEST_CASE("momentum matches the scalar recurrence") {
    const double alpha = 0.1, beta1 = 0.9;
    Tensor theta = Tensor::vector({1.0});
    AdamState st;
    double m = 0.0, x = 1.0;
    std::mt19937_64 eng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 1; t <= 25; ++t) {
        const double g = u(eng);
        step_momentum(theta, Tensor::vector({g}), st, alpha, beta1);
        m = beta1 * m + (1 - beta1) * g;
        x -= alpha * m / (1 - std::pow(beta1, t));
        CHECK(theta[0] == doctest::Approx(x).epsilon(kTight));
    }
    CHECK(st.t == 25);
}

TEST_CASE("variance-only matches the scalar recurrence") {
    const double alpha = 0.01, beta2 = 0.999, eps = 1e-8;
    Tensor theta = Tensor::vector({0.5});
    AdamState st;
    double v = 0.0, x = 0.5;
    std::mt19937_64 eng(4);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int t = 1; t <= 25; ++t) {
        const double g = u(eng);
        step_variance(theta, Tensor::vector({g}), st, alpha, beta2, eps);
        v = beta2 * v + (1 - beta2) * g * g;
        x -= alpha * g / (std::sqrt(v / (1 - std::pow(beta2, t))) + eps);
        CHECK(theta[0] == doctest::Approx(x).epsilon(kTight));
    }
}

TEST_CASE("adam matches the scalar recurrence and its first-step identity") {
    const double alpha = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    // first step: m-hat = g, v-hat = g^2, so the step is alpha * g/(|g|+eps)
    {
        Tensor theta = Tensor::vector({0.0});
        AdamState st;
        step_adam(theta, Tensor::vector({0.7}), st, alpha, beta1, beta2, eps);
        CHECK(theta[0] == doctest::Approx(-alpha * 0.7 / (0.7 + eps)).epsilon(kTight));
    }
    Tensor theta = Tensor::vector({1.0});
    AdamState st;
    double m = 0, v = 0, x = 1.0;
    std::mt19937_64 eng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 1; t <= 25; ++t) {
        const double g = u(eng);
        step_adam(theta, Tensor::vector({g}), st, alpha, beta1, beta2, eps);
        m = beta1 * m + (1 - beta1) * g;
        v = beta2 * v + (1 - beta2) * g * g;
        x -= alpha * (m / (1 - std::pow(beta1, t))) /
             (std::sqrt(v / (1 - std::pow(beta2, t))) + eps);
        CHECK(theta[0] == doctest::Approx(x).epsilon(kTight));
    }
}

TEST_CASE("adamw equals adam when weight decay is zero, and decays decoupled otherwise") {
    std::mt19937_64 eng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor a = Tensor::vector({0.8}), b = Tensor::vector({0.8});
    AdamState sa, sb;
    for (int t = 1; t <= 10; ++t) {
        const double g = u(eng);
        step_adam(a, Tensor::vector({g}), sa, 0.01, 0.9, 0.999, 1e-8);
        step_adamw(b, Tensor::vector({g}), sb, 0.01, 0.9, 0.999, 1e-8, 0.0);
        CHECK(a[0] == b[0]);
    }
    // one decoupled-decay step: theta shrinks before the adam update
    Tensor c = Tensor::vector({1.0});
    AdamState sc;
    step_adamw(c, Tensor::vector({0.5}), sc, 0.01, 0.9, 0.999, 1e-8, 0.1);
    Tensor ref = Tensor::vector({1.0 - 0.01 * 0.1});
    AdamState sr;
    step_adam(ref, Tensor::vector({0.5}), sr, 0.01, 0.9, 0.999, 1e-8);
    CHECK(c[0] == ref[0]);
}

TEST_CASE("lomo on a quadratic follows the closed form x_t = 0.8^t") {
    // f(x) = x^2 / 2 with alpha = 0.2: x <- x - 0.2 x = 0.8 x
    Tensor x = Tensor::vector({1.0});
    for (int t = 1; t <= 20; ++t) {
        step_lomo(x, Tensor::vector({x[0]}), 0.2);
        CHECK(x[0] == doctest::Approx(std::pow(0.8, t)).epsilon(1e-12));
    }
}

TEST_CASE("factored update: hand-computed marginals") {
    FactoredMoment fm;
    Tensor g = Tensor::matrix(2, 2, {1, 2, 3, 6});
    update_factored(fm, g, 0.0);  // beta=0 keeps only the new statistics
    // g^2 = [[1,4],[9,36]]
    CHECK(fm.r[0] == 5.0);
    CHECK(fm.r[1] == 45.0);
    CHECK(fm.c[0] == 10.0);
    CHECK(fm.c[1] == 40.0);

    // g has rank 1, so the factored reconstruction is exact: v == g^2
    Tensor v = reconstruct_v(fm);
    CHECK(v[0] == doctest::Approx(1.0).epsilon(kTight));
    CHECK(v[1] == doctest::Approx(4.0).epsilon(kTight));
    CHECK(v[2] == doctest::Approx(9.0).epsilon(kTight));
    CHECK(v[3] == doctest::Approx(36.0).epsilon(kTight));

    CHECK_THROWS_AS(update_factored(fm, Tensor::vector({1, 2}), 0.5), OptimError);
    CHECK_THROWS_AS(update_factored(fm, Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}), 0.5),
                    OptimError);
}

TEST_CASE("factored EMA accumulates like the elementwise recurrence on marginals") {
    const double beta = 0.9;
    FactoredMoment fm;
    double r0 = 0, r1 = 0, c0 = 0, c1 = 0;
    std::mt19937_64 eng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 10; ++t) {
        Tensor g({2, 2});
        for (std::size_t i = 0; i < 4; ++i) g[i] = u(eng);
        update_factored(fm, g, beta);
        const double a = g[0] * g[0], b = g[1] * g[1], c = g[2] * g[2], d = g[3] * g[3];
        r0 = beta * r0 + (1 - beta) * (a + b);
        r1 = beta * r1 + (1 - beta) * (c + d);
        c0 = beta * c0 + (1 - beta) * (a + c);
        c1 = beta * c1 + (1 - beta) * (b + d);
    }
    CHECK(fm.r[0] == doctest::Approx(r0).epsilon(kTight));
    CHECK(fm.r[1] == doctest::Approx(r1).epsilon(kTight));
    CHECK(fm.c[0] == doctest::Approx(c0).epsilon(kTight));
    CHECK(fm.c[1] == doctest::Approx(c1).epsilon(kTight));
    // conservation: sum(r) == sum(c) == EMA of sum(g^2)
    CHECK(sum(fm.r) == doctest::Approx(sum(fm.c)).epsilon(kTight));
}

TEST_CASE("factorization identity holds for rank-1 squared gradients") {
    // When g^2 = a b^T exactly, v reconstructs g^2; 1000 random cases.
    std::mt19937_64 eng(8);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t m = 1 + eng() % 4, n = 1 + eng() % 4;
        Tensor g({m, n});
        std::vector<double> a(m), b(n);
        for (auto& x : a) x = u(eng);
        for (auto& x : b) x = u(eng);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] = std::sqrt(a[i] * b[j]);
        FactoredMoment fm;
        update_factored(fm, g, 0.0);
        Tensor v = reconstruct_v(fm);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                CHECK(v[i * n + j] ==
                      doctest::Approx(a[i] * b[j]).epsilon(1e-9));
    }
}

TEST_CASE("reconstruct_v flags the cold-start all-zero state") {
    FactoredMoment fm;
    fm.r = Tensor::zeros({2, 1});
    fm.c = Tensor::zeros({1, 3});
    bool cold = false;
    Tensor v = reconstruct_v(fm, &cold);
    CHECK(cold);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == 0.0);
}

TEST_CASE("grouped normalization: shrink large updates, match parameter scale") {
    // rms(u) = 10 > 1 -> divide by 10; rms(theta) = 2 > eps -> multiply by 2
    Tensor u = Tensor::vector({10.0, -10.0});
    Tensor theta = Tensor::vector({2.0, -2.0});
    Tensor got = grouped_normalize(u, theta, 1e-3);
    CHECK(got[0] == doctest::Approx(2.0).epsilon(kTight));
    CHECK(got[1] == doctest::Approx(-2.0).epsilon(kTight));

    // small update (rms <= 1) passes through, scaled only by rms(theta)
    Tensor small = Tensor::vector({0.1, -0.1});
    Tensor got2 = grouped_normalize(small, theta, 1e-3);
    CHECK(got2[0] == doctest::Approx(0.2).epsilon(kTight));

    // tiny parameters fall back to the eps floor
    Tensor tiny = Tensor::vector({0.0, 0.0});
    Tensor got3 = grouped_normalize(small, tiny, 1e-3);
    CHECK(got3[0] == doctest::Approx(0.1 * 1e-3).epsilon(kTight));

    CHECK_THROWS_AS(grouped_normalize(u, Tensor::vector({1.0}), 1e-3), OptimError);
}

TEST_CASE("adalomo single step reproduces the hand trace") {
    // theta = [[1,1],[1,1]], g = [[1,2],[3,6]], beta = 0.9, alpha = 1e-4
    Tensor theta = Tensor::matrix(2, 2, {1, 1, 1, 1});
    Tensor g = Tensor::matrix(2, 2, {1, 2, 3, 6});
    AdaLomoParamState st;
    const double beta = 0.9, eps1 = 1e-6, eps2 = 1e-3, alpha = 1e-4;
    step_adalomo(theta, g, st, alpha, beta, eps1, eps2);
    CHECK(st.t == 1);
    CHECK(st.factored);

    // oracle: r = 0.1*[5,45], c = 0.1*[10,40]; v = r c^T / sum(r)
    const double r[2] = {0.5, 4.5}, c[2] = {1.0, 4.0}, rsum = 5.0;
    double u[4], urms = 0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double v = r[i] * c[j] / rsum;
            u[i * 2 + j] = g[i * 2 + j] / (std::sqrt(v) + eps1);
            urms += u[i * 2 + j] * u[i * 2 + j];
        }
    urms = std::sqrt(urms / 4);
    const double k = std::max(eps2, 1.0) / std::max(1.0, urms);  // rms(theta) = 1
    for (int i = 0; i < 4; ++i)
        CHECK(theta[i] == doctest::Approx(1.0 - alpha * k * u[i]).epsilon(kTight));
}

TEST_CASE("adalomo literal denominator mode divides by v + eps1") {
    Tensor ta = Tensor::vector({1.0}), tb = Tensor::vector({1.0});
    AdaLomoParamState sa, sb;
    Tensor g = Tensor::vector({0.5});
    step_adalomo(ta, g, sa, 1e-3, 0.0, 1e-6, 1e-3, DenomMode::sqrt_mode);
    step_adalomo(tb, g, sb, 1e-3, 0.0, 1e-6, 1e-3, DenomMode::literal);
    // sqrt mode: u = 0.5/(0.5+eps) ~ 1; literal: u = 0.5/(0.25+eps) ~ 2
    CHECK(ta[0] != tb[0]);
    const double u_sqrt = 0.5 / (std::sqrt(0.25) + 1e-6);
    const double u_lit = 0.5 / (0.25 + 1e-6);
    const double expect_a = 1.0 - 1e-3 * (1.0 / std::max(1.0, u_sqrt)) * u_sqrt;
    const double expect_b = 1.0 - 1e-3 * (1.0 / std::max(1.0, u_lit)) * u_lit;
    CHECK(ta[0] == doctest::Approx(expect_a).epsilon(kTight));
    CHECK(tb[0] == doctest::Approx(expect_b).epsilon(kTight));
}

TEST_CASE("optimizer dispatch: state shapes and tracked elements") {
    ParameterStore ps;
    Parameter& w = ps.add("w", Tensor::zeros({3, 5}));
    Parameter& gain = ps.add("gain", Tensor::zeros({7}));

    SUBCASE("adam keeps dense m and v") {
        MemoryLedger ledger;
        OptimizerConfig cfg;
        cfg.method = OptMethod::adam;
        Optimizer opt(cfg, &ledger);
        opt.apply(w, Tensor::zeros({3, 5}), 1e-3);
        opt.apply(gain, Tensor::zeros({7}), 1e-3);
        CHECK(opt.state_elements() == 2 * (15 + 7));
        CHECK(ledger.live_bytes(MemCategory::optim_state) == 2 * (15 + 7) * 8);
        auto slots = opt.slots_for(w.id);
        REQUIRE(slots.size() == 2);
        CHECK(slots[0].kind == "m");
        CHECK(slots[1].kind == "v");
    }
    SUBCASE("adalomo keeps factored marginals for matrices, dense v for vectors") {
        MemoryLedger ledger;
        OptimizerConfig cfg;
        cfg.method = OptMethod::adalomo;
        Optimizer opt(cfg, &ledger);
        opt.apply(w, Tensor::full({3, 5}, 0.1), 1e-3);
        opt.apply(gain, Tensor::full({7}, 0.1), 1e-3);
        CHECK(opt.state_elements() == (3 + 5) + 7);
        CHECK(ledger.live_bytes(MemCategory::optim_state) == ((3 + 5) + 7) * 8);
        auto slots = opt.slots_for(w.id);
        REQUIRE(slots.size() == 2);
        CHECK(slots[0].kind == "r");
        CHECK(slots[1].kind == "c");
        CHECK(opt.slots_for(gain.id).at(0).kind == "v");
    }
    SUBCASE("sgd keeps no state") {
        OptimizerConfig cfg;
        cfg.method = OptMethod::sgd;
        Optimizer opt(cfg);
        opt.apply(w, Tensor::zeros({3, 5}), 1e-3);
        CHECK(opt.state_elements() == 0);
        CHECK(opt.slots_for(w.id).empty());
    }
}

TEST_CASE("optimizer applies the same rule as the free function") {
    std::mt19937_64 eng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ParameterStore ps;
    Parameter& w = ps.add("w", Tensor::full({2, 3}, 0.5));
    OptimizerConfig cfg;
    cfg.method = OptMethod::adalomo;
    Optimizer opt(cfg);
    Tensor ref = w.value;
    AdaLomoParamState st;
    for (int t = 0; t < 5; ++t) {
        Tensor g({2, 3});
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = u(eng);
        opt.apply(w, g, 0.01);
        step_adalomo(ref, g, st, 0.01, cfg.beta, cfg.eps1, cfg.eps2, cfg.denom);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(w.value[i] == ref[i]);
    }
}

TEST_CASE("method parsing and fused classification") {
    CHECK(parse_opt_method("adalomo") == OptMethod::adalomo);
    CHECK(std::string(opt_method_name(OptMethod::adafactor)) == "adafactor");
    CHECK_THROWS_AS(parse_opt_method("rmsprop"), OptimError);
    CHECK(method_is_fused(OptMethod::lomo));
    CHECK(method_is_fused(OptMethod::adalomo));
    CHECK_FALSE(method_is_fused(OptMethod::sgd));
    CHECK_FALSE(method_is_fused(OptMethod::adamw));
    CHECK_FALSE(method_is_fused(OptMethod::adafactor));
}

TEST_CASE("checkpoint round trip preserves state bits and metadata") {
    namespace fs = std::filesystem;
    const std::string dir = "/tmp/fusedopt_test_ckpt";
    fs::remove_all(dir);

    std::mt19937_64 eng(10);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ParameterStore ps;
    ps.add("layer.w", Tensor::full({4, 3}, 0.25));
    ps.add("layer.gain", Tensor::full({3}, 1.0));
    OptimizerConfig cfg;
    cfg.method = OptMethod::adalomo;
    Optimizer opt(cfg);
    for (int t = 0; t < 3; ++t) {
        for (auto& p : ps) {
            Tensor g(p.value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = u(eng);
            opt.apply(p, g, 0.01);
        }
    }
    save_optimizer_checkpoint(opt, ps, dir);
    auto records = load_optimizer_checkpoint(dir);
    REQUIRE(records.size() == 3);  // r + c for the matrix, v for the gain
    for (const auto& rec : records) {
        CHECK(rec.t == 3);
        const Parameter& p = rec.param_name == "layer.w" ? ps[0] : ps[1];
        bool matched = false;
        for (const auto& slot : opt.slots_for(p.id)) {
            if (slot.kind != rec.kind) continue;
            matched = true;
            REQUIRE(rec.tensor.shape() == slot.tensor->shape());
            for (std::size_t i = 0; i < rec.tensor.size(); ++i)
                CHECK(rec.tensor[i] == (*slot.tensor)[i]);
        }
        CHECK(matched);
    }
    CHECK_THROWS_AS(load_optimizer_checkpoint("/tmp/no_such_ckpt_dir"), OptimError);
    fs::remove_all(dir);
}
