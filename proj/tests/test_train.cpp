// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/train.hpp"

#include <cmath>
#include <doctest.h>
#include <numeric>

using namespace ttmoe;

namespace {

ToyConfig toy_config() { return ToyConfig{}; } // 64-vocab, d=64, 2 layers

TrainConfig fast_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.max_epochs = 50;
    return cfg;
}

// Small hand-built dataset: label = parity of the (forced) last token, with
// exact class balance; trivially memorizable.
TaskDataset tiny_parity_task(const ToyConfig& cfg, std::size_t n) {
    TaskDataset t;
    t.name = "parity";
    t.num_classes = 2;
    t.tokens = TokenBatch(n, 4);
    t.labels.resize(n);
    Rng rng(5);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            t.tokens.at(i, j) = std::uint32_t(rng.uniform_index(cfg.vocab));
        }
        const std::size_t cls = i % 2;
        std::uint32_t last = std::uint32_t(rng.uniform_index(cfg.vocab / 2)) * 2 +
                             std::uint32_t(cls);
        t.tokens.at(i, 3) = last;
        t.labels[i] = cls;
    }
    t.train_idx.resize(n);
    std::iota(t.train_idx.begin(), t.train_idx.end(), 0);
    t.val_idx = t.train_idx; // memorization setup
    return t;
}

} // namespace

TEST_CASE("optimizer_step: plain arithmetic and zero-grad fixpoint") {
    TensorF p({1}, {1.0f});
    TensorF g({1}, {0.5f});
    OptimizerState st;
    optimizer_step({&p}, {&g}, {"p"}, st, OptimizerKind::PlainSgd, 0.1);
    CHECK(p[0] == doctest::Approx(0.95f));

    TensorF q({3}, {1.f, -2.f, 3.f});
    TensorF zero({3});
    OptimizerState st2;
    optimizer_step({&q}, {&zero}, {"q"}, st2, OptimizerKind::PlainSgd, 0.1);
    CHECK(q[0] == 1.f); // bit-exact
    CHECK(q[1] == -2.f);
    CHECK(q[2] == 3.f);
}

TEST_CASE("optimizer_step: adaptive first step has magnitude ~ lr") {
    TensorF p({1}, {0.f});
    TensorF g({1}, {1.f});
    OptimizerState st;
    optimizer_step({&p}, {&g}, {"p"}, st, OptimizerKind::AdaptiveMoment, 0.001);
    CHECK(std::abs(std::abs(p[0]) - 0.001f) < 1e-6f);
    CHECK(p[0] < 0.f); // moved against the gradient
}

TEST_CASE("optimizer_step: non-finite gradient aborts with the parameter name") {
    TensorF p({2});
    TensorF g({2}, {1.f, std::numeric_limits<float>::quiet_NaN()});
    OptimizerState st;
    try {
        optimizer_step({&p}, {&g}, {"layer1.q.core2"}, st, OptimizerKind::PlainSgd, 0.1);
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("layer1.q.core2") != std::string::npos);
    }
}

TEST_CASE("clip_global_norm: scales only when above the threshold") {
    TensorF g({2}, {3.f, 4.f}); // norm 5
    CHECK(clip_global_norm({&g}, 10.0) == false);
    CHECK(g[0] == 3.f);
    CHECK(clip_global_norm({&g}, 1.0) == true);
    CHECK(std::abs(std::sqrt(g[0] * g[0] + g[1] * g[1]) - 1.f) < 1e-5f);
}

TEST_CASE("train_expert: learns a separable synthetic task") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    auto tasks = gen_synthetic_tasks(base, 2, 1234);
    // The generator's own oracle: frozen features must already be probe-separable.
    CHECK(linear_probe_accuracy(base, tasks[0]) >= 0.9);

    const auto base_hash = base.weight_hash();
    auto [adapter, report] = train_expert(base, tasks[0], fast_config(7), 0);
    CHECK(report.best_val_accuracy >= 0.95);
    CHECK(report.epochs_run <= 50);
    CHECK(base.weight_hash() == base_hash); // frozen-base contract

    // Early stopping bound: epochs after the best are at most `patience`.
    CHECK(report.epochs_run - report.best_epoch <= 10);
    // best == max of the curve
    double mx = 0;
    for (double a : report.val_accuracy) mx = std::max(mx, a);
    CHECK(report.best_val_accuracy == doctest::Approx(mx));
}

TEST_CASE("train_expert: max_epochs=0 returns the zero-delta initialization") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    auto tasks = gen_synthetic_tasks(base, 1, 99);
    TrainConfig cfg = fast_config(3);
    cfg.max_epochs = 0;
    auto [adapter, report] = train_expert(base, tasks[0], cfg, 0);
    CHECK(report.epochs_run == 0);
    CHECK(report.val_accuracy.empty());

    // Zero delta: hidden equals the unadapted forward bit-for-bit.
    auto [tb, lab] = tasks[0].gather({tasks[0].val_idx[0]});
    (void)lab;
    auto plain = base.forward(tb);
    auto adapted = base.forward(tb, &adapter);
    for (std::size_t i = 0; i < plain.hidden.numel(); ++i) {
        CHECK(plain.hidden[i] == adapted.hidden[i]);
    }
    // And accuracy equals the frozen-head chance-level baseline.
    auto fresh = make_expert<float>(tc, 0, tasks[0].name, tasks[0].num_classes,
                                    cfg.q_shape(), cfg.v_shape(), float(cfg.alpha),
                                    cfg.init_std, cfg.seed);
    CHECK(evaluate(base, adapter, tasks[0], tasks[0].val_idx) ==
          doctest::Approx(evaluate(base, fresh, tasks[0], tasks[0].val_idx)));
}

TEST_CASE("train_expert: bit-reproducible given the seed") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    GenOptions opts;
    opts.n_per_task = 120;
    auto tasks = gen_synthetic_tasks(base, 1, 42, opts);
    TrainConfig cfg = fast_config(11);
    cfg.max_epochs = 4;
    auto [a1, r1] = train_expert(base, tasks[0], cfg, 0);
    auto [a2, r2] = train_expert(base, tasks[0], cfg, 0);
    REQUIRE(r1.train_loss.size() == r2.train_loss.size());
    for (std::size_t i = 0; i < r1.train_loss.size(); ++i) {
        CHECK(r1.train_loss[i] == r2.train_loss[i]);
        CHECK(r1.val_accuracy[i] == r2.val_accuracy[i]);
    }
    CHECK(adapter_hash(a1) == adapter_hash(a2));
}

TEST_CASE("train_expert: only cores move; head and base stay frozen") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    GenOptions opts;
    opts.n_per_task = 120;
    auto tasks = gen_synthetic_tasks(base, 1, 77, opts);
    TrainConfig cfg = fast_config(5);
    cfg.max_epochs = 3;

    auto fresh = make_expert<float>(tc, 0, tasks[0].name, tasks[0].num_classes,
                                    cfg.q_shape(), cfg.v_shape(), float(cfg.alpha),
                                    cfg.init_std, cfg.seed);
    auto [trained, report] = train_expert(base, tasks[0], cfg, 0);

    // Head identical to the deterministic fresh initialization.
    for (std::size_t i = 0; i < fresh.head_w.numel(); ++i) {
        CHECK(trained.head_w[i] == fresh.head_w[i]);
    }
    for (std::size_t i = 0; i < fresh.head_b.numel(); ++i) {
        CHECK(trained.head_b[i] == fresh.head_b[i]);
    }
    // Cores did move.
    bool cores_changed = false;
    for (std::size_t l = 0; l < fresh.q_cores.size() && !cores_changed; ++l) {
        for (std::size_t k = 0; k < fresh.q_cores[l].cores.size(); ++k) {
            for (std::size_t i = 0; i < fresh.q_cores[l].cores[k].numel(); ++i) {
                if (fresh.q_cores[l].cores[k][i] != trained.q_cores[l].cores[k][i]) {
                    cores_changed = true;
                    break;
                }
            }
        }
    }
    CHECK(cores_changed);
}

TEST_CASE("train_expert: empty dataset is a config error") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    TaskDataset empty;
    empty.name = "empty";
    CHECK_THROWS_AS(train_expert(base, empty, fast_config(1), 0), ConfigError);
}

TEST_CASE("evaluate: constant logits on a balanced set give 0.5") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    auto task = tiny_parity_task(tc, 40);
    // Zero-delta adapter with a zero head: all logits identical; ties resolve
    // to class 0, which covers exactly half of the balanced set.
    TrainConfig cfg = fast_config(1);
    auto adapter = make_expert<float>(tc, 0, "const", 2, cfg.q_shape(), cfg.v_shape(),
                                      1.0f, 0.02, 9);
    for (auto& v : adapter.head_w.data()) v = 0;
    for (auto& v : adapter.head_b.data()) v = 0;
    std::size_t zeros = 0;
    for (auto l : task.labels) zeros += (l == 0);
    REQUIRE(zeros * 2 == task.labels.size());
    CHECK(evaluate(base, adapter, task, task.train_idx) == doctest::Approx(0.5));
}

TEST_CASE("evaluate: memorizable 4-item set reaches accuracy 1.0") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    auto task = tiny_parity_task(tc, 4);
    TrainConfig cfg = fast_config(2);
    cfg.batch_size = 4;
    cfg.max_epochs = 200;
    cfg.patience = 200;
    auto [adapter, report] = train_expert(base, task, cfg, 0);
    CHECK(evaluate(base, adapter, task, task.val_idx) == doctest::Approx(1.0));
}

TEST_CASE("evaluate: matches an independent per-example counting oracle") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    auto task = tiny_parity_task(tc, 30);
    TrainConfig cfg = fast_config(3);
    auto adapter = make_expert<float>(tc, 0, "probe", 2, cfg.q_shape(), cfg.v_shape(),
                                      1.0f, 0.02, 31);
    const double got = evaluate(base, adapter, task, task.val_idx);

    std::size_t correct = 0;
    for (std::size_t idx : task.val_idx) {
        auto [tb, lab] = task.gather({idx});
        auto out = base.forward(tb, &adapter);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < out.logits->dim(1); ++j) {
            if ((*out.logits)(0, j) > (*out.logits)(0, arg)) arg = j;
        }
        if (arg == lab[0]) ++correct;
    }
    CHECK(got == doctest::Approx(double(correct) / double(task.val_idx.size())));
}

TEST_CASE("train_expert: adapter isolation, no cross-expert state") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    GenOptions opts;
    opts.n_per_task = 120;
    auto tasks = gen_synthetic_tasks(base, 2, 66, opts);
    TrainConfig cfg = fast_config(8);
    cfg.max_epochs = 2;

    // Expert j evaluated before training expert i...
    auto expert_j = make_expert<float>(tc, 1, tasks[1].name, tasks[1].num_classes,
                                       cfg.q_shape(), cfg.v_shape(), float(cfg.alpha),
                                       cfg.init_std, 999);
    auto [tb, lab] = tasks[1].gather({tasks[1].val_idx[0], tasks[1].val_idx[1]});
    (void)lab;
    auto before = base.forward(tb, &expert_j);

    auto [expert_i, rep] = train_expert(base, tasks[0], cfg, 0);
    (void)expert_i;

    // ...is bit-identical to expert j evaluated after.
    auto after = base.forward(tb, &expert_j);
    for (std::size_t i = 0; i < before.logits->numel(); ++i) {
        CHECK((*before.logits)[i] == (*after.logits)[i]);
    }
}

TEST_CASE("train_expert: divergence aborts with a diagnostic") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    GenOptions opts;
    opts.n_per_task = 60;
    auto tasks = gen_synthetic_tasks(base, 1, 70, opts);
    TrainConfig cfg = fast_config(9);
    cfg.optimizer = OptimizerKind::PlainSgd;
    cfg.learning_rate = 1e12; // force numeric blowup
    cfg.clip_norm = 0;        // clipping disabled
    cfg.max_epochs = 20;
    try {
        train_expert(base, tasks[0], cfg, 0);
        FAIL("expected divergence Error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        const bool mentions = msg.find("diverged") != std::string::npos ||
                              msg.find("non-finite") != std::string::npos;
        CHECK(mentions);
    }
}

TEST_CASE("train_lora_expert: baseline trains and only factors move") {
    ToyConfig tc = toy_config();
    BaseModel<float> base(tc);
    GenOptions opts;
    opts.n_per_task = 120;
    auto tasks = gen_synthetic_tasks(base, 1, 55, opts);
    TrainConfig cfg = TrainConfig::defaults_for(AdapterKind::Lora);
    cfg.seed = 4;
    cfg.max_epochs = 3;
    cfg.rank = 4;
    cfg.learning_rate = 5e-3;
    const auto base_hash = base.weight_hash();
    auto [adapter, report] = train_lora_expert(base, tasks[0], cfg, 0);
    CHECK(base.weight_hash() == base_hash);
    CHECK(report.trainable_params ==
          2 * (lora_param_count(64, 64, 4) + lora_param_count(64, 16, 4)));
}
