// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/data.hpp"

#include <algorithm>
#include <doctest.h>
#include <map>
#include <numeric>
#include <set>

using namespace ttmoe;

namespace {

BaseModel<float> toy_base(std::uint64_t seed = 9090) {
    ToyConfig cfg;
    cfg.seed = seed;
    return BaseModel<float>(cfg);
}

// Hand-built task of a given size whose splits have chosen sizes.
TaskDataset fake_task(std::size_t n_train, std::size_t n_val, std::size_t seq,
                      std::uint32_t token, std::size_t num_classes = 2) {
    TaskDataset t;
    t.name = "fake" + std::to_string(token);
    t.num_classes = num_classes;
    const std::size_t n = n_train + n_val;
    t.tokens = TokenBatch(n, seq);
    t.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < seq; ++j) t.tokens.at(i, j) = token;
        t.labels[i] = i % num_classes;
    }
    t.train_idx.resize(n_train);
    std::iota(t.train_idx.begin(), t.train_idx.end(), 0);
    t.val_idx.resize(n_val);
    std::iota(t.val_idx.begin(), t.val_idx.end(), n_train);
    return t;
}

bool dataset_equal(const TaskDataset& a, const TaskDataset& b) {
    return a.name == b.name && a.tokens.ids == b.tokens.ids && a.labels == b.labels &&
           a.train_idx == b.train_idx && a.val_idx == b.val_idx &&
           a.rule_id == b.rule_id && a.num_classes == b.num_classes;
}

} // namespace

TEST_CASE("gen_synthetic_tasks: one balanced probe-verified task") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 160;
    auto tasks = gen_synthetic_tasks(base, 1, 7, opts);
    REQUIRE(tasks.size() == 1);
    const auto& t = tasks[0];
    CHECK(t.num_classes == 2);

    std::size_t zeros = 0;
    for (auto l : t.labels) zeros += (l == 0);
    CHECK(zeros * 2 == t.labels.size()); // exact balance

    CHECK(linear_probe_accuracy(base, t) >= 0.9);
}

TEST_CASE("gen_synthetic_tasks: four tasks use disjoint 16-wide bands") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 80;
    auto tasks = gen_synthetic_tasks(base, 4, 11, opts);
    REQUIRE(tasks.size() == 4);
    const std::uint32_t pad = base.config().pad_id();
    for (std::size_t i = 0; i < 4; ++i) {
        std::set<std::uint32_t> support;
        for (std::uint32_t id : tasks[i].tokens.ids) {
            if (id != pad) support.insert(id);
        }
        for (std::uint32_t id : support) {
            CHECK(id >= i * 16);
            CHECK(id < (i + 1) * 16);
        }
    }
}

TEST_CASE("gen_synthetic_tasks: deterministic in the seed") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 60;
    auto a = gen_synthetic_tasks(base, 2, 5, opts);
    auto b = gen_synthetic_tasks(base, 2, 5, opts);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(dataset_equal(a[i], b[i]));
    auto c = gen_synthetic_tasks(base, 2, 6, opts);
    CHECK_FALSE(dataset_equal(a[0], c[0]));
}

TEST_CASE("gen_synthetic_tasks: vocab too small for the band layout") {
    auto base = toy_base();
    CHECK_THROWS_AS(gen_synthetic_tasks(base, 32, 3), ConfigError);
    CHECK_THROWS_AS(gen_synthetic_tasks(base, 0, 3), ConfigError);
}

TEST_CASE("gen_synthetic_tasks: splits are disjoint and cover the dataset") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 100;
    auto tasks = gen_synthetic_tasks(base, 2, 3, opts);
    for (const auto& t : tasks) {
        std::set<std::size_t> train(t.train_idx.begin(), t.train_idx.end());
        std::set<std::size_t> val(t.val_idx.begin(), t.val_idx.end());
        CHECK(train.size() == t.train_idx.size());
        CHECK(val.size() == t.val_idx.size());
        for (std::size_t v : val) CHECK(train.count(v) == 0);
        CHECK(train.size() + val.size() == t.size());
    }
}

TEST_CASE("gen_synthetic_tasks: class balance within 5% of uniform") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 120;
    opts.num_classes = 3;
    auto tasks = gen_synthetic_tasks(base, 2, 17, opts);
    for (const auto& t : tasks) {
        std::map<std::size_t, std::size_t> counts;
        for (auto l : t.labels) ++counts[l];
        const double uniform = double(t.labels.size()) / double(t.num_classes);
        for (auto& [cls, cnt] : counts) {
            CHECK(std::abs(double(cnt) - uniform) / uniform <= 0.05);
        }
    }
}

TEST_CASE("build_mixed: auto mode uses the smallest train split") {
    auto t1 = fake_task(100, 20, 6, 1);
    auto t2 = fake_task(60, 15, 6, 2);
    auto mixed = build_mixed({t1, t2}, 0, 9, 64);
    CHECK(mixed.per_task_train == 60);
    CHECK(mixed.train_idx.size() == 120);
    CHECK(mixed.per_task_eval == 15);
    CHECK(mixed.eval_idx.size() == 30);

    // t labels occur exactly per_task times each in each split.
    std::map<std::size_t, std::size_t> train_counts, eval_counts;
    for (std::size_t i : mixed.train_idx) ++train_counts[mixed.expert_labels[i]];
    for (std::size_t i : mixed.eval_idx) ++eval_counts[mixed.expert_labels[i]];
    CHECK(train_counts[0] == 60);
    CHECK(train_counts[1] == 60);
    CHECK(eval_counts[0] == 15);
    CHECK(eval_counts[1] == 15);
}

TEST_CASE("build_mixed: explicit per_task bounds") {
    auto t1 = fake_task(50, 10, 4, 1);
    auto t2 = fake_task(40, 10, 4, 2);
    auto ok = build_mixed({t1, t2}, 30, 1, 64);
    CHECK(ok.per_task_train == 30);
    CHECK_THROWS_AS(build_mixed({t1, t2}, 45, 1, 64), ConfigError);
    CHECK_THROWS_AS(build_mixed({}, 0, 1, 64), ConfigError);
}

TEST_CASE("build_mixed: seeds shuffle order but preserve the triple multiset") {
    auto base = toy_base();
    GenOptions opts;
    opts.n_per_task = 60;
    auto tasks = gen_synthetic_tasks(base, 2, 21, opts);
    auto a = build_mixed(tasks, 0, 1, base.config().pad_id());
    auto b = build_mixed(tasks, 0, 2, base.config().pad_id());

    auto triples = [](const MixedDataset& m, const std::vector<std::size_t>& rows) {
        std::multiset<std::string> out;
        for (std::size_t i : rows) {
            std::string key;
            for (std::size_t c = 0; c < m.tokens.seq; ++c) {
                key += std::to_string(m.tokens.at(i, c)) + ",";
            }
            key += "|" + std::to_string(m.labels[i]) + "|" +
                   std::to_string(m.expert_labels[i]);
            out.insert(key);
        }
        return out;
    };
    // Same multiset of train triples under both seeds (the sampled subset is
    // seed-dependent only through the shuffle because per_task == min size).
    CHECK(triples(a, a.train_idx) == triples(b, b.train_idx));
    CHECK(triples(a, a.eval_idx) == triples(b, b.eval_idx));

    // And the visit order differs.
    bool order_differs = false;
    for (std::size_t i = 0; i < a.train_idx.size(); ++i) {
        if (a.expert_labels[a.train_idx[i]] != b.expert_labels[b.train_idx[i]] ||
            a.labels[a.train_idx[i]] != b.labels[b.train_idx[i]]) {
            order_differs = true;
            break;
        }
    }
    CHECK(order_differs);
}

TEST_CASE("task gather: out-of-range index raises") {
    auto t = fake_task(4, 2, 3, 1);
    CHECK_THROWS_AS(t.gather({99}), IndexError);
}
