// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/data.hpp"

#include "ttmoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ttmoe {

std::pair<TokenBatch, std::vector<std::size_t>>
TaskDataset::gather(const std::vector<std::size_t>& idx) const {
    TokenBatch out(idx.size(), tokens.seq);
    std::vector<std::size_t> lab(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= tokens.batch) {
            throw IndexError("gather index " + std::to_string(idx[i]) +
                             " out of range for dataset of " +
                             std::to_string(tokens.batch));
        }
        for (std::size_t t = 0; t < tokens.seq; ++t) out.at(i, t) = tokens.at(idx[i], t);
        lab[i] = labels[idx[i]];
    }
    return {std::move(out), std::move(lab)};
}

namespace {

// Pooled frozen-base features for every sample of a task.
TensorF frozen_features(const BaseModel<float>& base, const TaskDataset& task) {
    const std::size_t d = base.config().d_model;
    TensorF h({task.size(), d});
    const std::size_t chunk = 64;
    for (std::size_t lo = 0; lo < task.size(); lo += chunk) {
        std::vector<std::size_t> part;
        for (std::size_t i = lo; i < std::min(task.size(), lo + chunk); ++i) {
            part.push_back(i);
        }
        auto [tb, lab] = task.gather(part);
        (void)lab;
        auto out = base.forward(tb);
        for (std::size_t i = 0; i < part.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) h(part[i], j) = out.hidden(i, j);
        }
    }
    return h;
}

// Marker scheme: the first 2*C offsets of a task's band are "marker" tokens;
// each sequence ends on a marker and the rule maps markers to classes. Context
// positions draw from the whole band. Keeping the label on a handful of
// distinct closing tokens makes tasks separable from frozen random features
// (verified by the probe) while the disjoint bands carry the routing signal.
std::size_t rule_label(std::uint32_t rule_id, std::size_t marker,
                       std::size_t n_markers, std::size_t num_classes) {
    if (rule_id % 2 == 0) return marker % num_classes;          // interleaved
    return std::min(num_classes - 1, marker * num_classes / n_markers); // blocks
}

TaskDataset gen_one_task(std::size_t task_index, std::size_t band_lo,
                         std::size_t band_width, std::uint32_t pad_id,
                         std::uint64_t seed, const GenOptions& opts) {
    const std::size_t n = opts.n_per_task - opts.n_per_task % opts.num_classes;
    const std::uint32_t rule = static_cast<std::uint32_t>(task_index % 2);
    const std::size_t n_markers = std::min(band_width, 2 * opts.num_classes);
    if (n_markers < opts.num_classes) {
        throw ConfigError("band width " + std::to_string(band_width) +
                          " cannot realize " + std::to_string(opts.num_classes) +
                          " classes");
    }

    std::vector<std::vector<std::size_t>> class_markers(opts.num_classes);
    for (std::size_t m = 0; m < n_markers; ++m) {
        class_markers[rule_label(rule, m, n_markers, opts.num_classes)].push_back(m);
    }
    for (std::size_t c = 0; c < opts.num_classes; ++c) {
        if (class_markers[c].empty()) {
            throw ConfigError("rule " + std::to_string(rule) + " leaves class " +
                              std::to_string(c) + " without markers");
        }
    }

    TaskDataset task;
    task.name = "task" + std::to_string(task_index);
    task.num_classes = opts.num_classes;
    task.seed = seed;
    task.rule_id = rule;
    task.tokens = TokenBatch(n, opts.seq_len);
    task.labels.resize(n);

    Rng rng(hash_mix(seed, 0x7a5b + task_index));
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t target = s % opts.num_classes; // exact class balance
        const std::size_t min_len =
            opts.seq_len > 3 ? opts.seq_len - 3 : std::size_t(1);
        const std::size_t len = min_len + rng.uniform_index(opts.seq_len - min_len + 1);
        for (std::size_t t = 0; t < len; ++t) {
            task.tokens.at(s, t) =
                static_cast<std::uint32_t>(band_lo + rng.uniform_index(band_width));
        }
        const auto& markers = class_markers[target];
        task.tokens.at(s, len - 1) = static_cast<std::uint32_t>(
            band_lo + markers[rng.uniform_index(markers.size())]);
        task.labels[s] = target;
        for (std::size_t t = len; t < opts.seq_len; ++t) task.tokens.at(s, t) = pad_id;
    }

    // Disjoint splits from a deterministic shuffle.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const std::size_t n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(double(n) * opts.val_fraction)));
    task.val_idx.assign(order.begin(), order.begin() + n_val);
    task.train_idx.assign(order.begin() + n_val, order.end());
    return task;
}

} // namespace

double linear_probe_accuracy(const BaseModel<float>& base, const TaskDataset& task,
                             std::size_t iters, double lr) {
    if (task.train_idx.empty() || task.val_idx.empty()) {
        throw ConfigError("linear probe needs non-empty splits");
    }
    const std::size_t d = base.config().d_model;
    const std::size_t c = task.num_classes;
    TensorF h = frozen_features(base, task);

    TensorD w({d, c}), b({c});
    const std::size_t n_train = task.train_idx.size();
    TensorD feats({n_train, d});
    std::vector<std::size_t> ys(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) feats(i, j) = h(task.train_idx[i], j);
        ys[i] = task.labels[task.train_idx[i]];
    }

    for (std::size_t it = 0; it < iters; ++it) {
        TensorD logits = matmul(feats, w);
        for (std::size_t i = 0; i < n_train; ++i)
            for (std::size_t j = 0; j < c; ++j) logits(i, j) += b[j];
        auto ce = cross_entropy(logits, ys);
        TensorD dw = matmul_tn(feats, ce.grad);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr * dw[i];
        for (std::size_t j = 0; j < c; ++j) {
            double g = 0;
            for (std::size_t i = 0; i < n_train; ++i) g += ce.grad(i, j);
            b[j] -= lr * g;
        }
    }

    std::size_t correct = 0;
    for (std::size_t vi : task.val_idx) {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            double score = b[j];
            for (std::size_t k = 0; k < d; ++k) score += double(h(vi, k)) * w(k, j);
            if (score > best_score) {
                best_score = score;
                best = j;
            }
        }
        if (best == task.labels[vi]) ++correct;
    }
    return double(correct) / double(task.val_idx.size());
}

std::vector<TaskDataset> gen_synthetic_tasks(const BaseModel<float>& base,
                                             std::size_t n_tasks, std::uint64_t seed,
                                             const GenOptions& opts) {
    if (n_tasks < 1) throw ConfigError("gen_synthetic_tasks: n_tasks must be >= 1");
    const ToyConfig& cfg = base.config();
    if (opts.seq_len > cfg.max_seq || opts.seq_len == 0) {
        throw ConfigError("gen_synthetic_tasks: seq_len must be in [1, max_seq]");
    }
    const std::size_t band_width = cfg.vocab / n_tasks;
    if (band_width < 4) {
        throw ConfigError("vocab " + std::to_string(cfg.vocab) + " too small for " +
                          std::to_string(n_tasks) + " disjoint token bands");
    }

    std::vector<TaskDataset> tasks;
    for (std::size_t i = 0; i < n_tasks; ++i) {
        std::uint64_t task_seed = seed;
        TaskDataset task;
        bool ok = false;
        for (std::size_t attempt = 0; attempt <= opts.max_regen; ++attempt) {
            task = gen_one_task(i, i * band_width, band_width, cfg.pad_id(), task_seed,
                                opts);
            if (linear_probe_accuracy(base, task) >= opts.probe_threshold) {
                ok = true;
                break;
            }
            ++task_seed; // regenerate with the next seed
        }
        if (!ok) {
            throw ConfigError("task " + std::to_string(i) +
                              " failed the linear-probe learnability check after " +
                              std::to_string(opts.max_regen + 1) + " seeds");
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

MixedDataset build_mixed(const std::vector<TaskDataset>& tasks, std::size_t per_task,
                         std::uint64_t seed, std::uint32_t pad_id) {
    if (tasks.empty()) throw ConfigError("build_mixed: no tasks");
    std::size_t min_train = tasks[0].train_idx.size();
    std::size_t min_val = tasks[0].val_idx.size();
    std::size_t width = tasks[0].tokens.seq;
    for (const auto& t : tasks) {
        min_train = std::min(min_train, t.train_idx.size());
        min_val = std::min(min_val, t.val_idx.size());
        width = std::max(width, t.tokens.seq);
    }
    if (per_task == 0) per_task = min_train;
    if (per_task > min_train) {
        throw ConfigError("build_mixed: per_task " + std::to_string(per_task) +
                          " exceeds smallest train split " + std::to_string(min_train));
    }
    if (min_val == 0) throw ConfigError("build_mixed: a task has no validation split");

    struct Triple {
        std::size_t task, sample;
    };
    std::vector<Triple> train_triples, eval_triples;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        Rng rng(hash_mix(seed, 0x300 + t));
        auto tr = tasks[t].train_idx;
        rng.shuffle(tr);
        for (std::size_t i = 0; i < per_task; ++i) train_triples.push_back({t, tr[i]});
        auto va = tasks[t].val_idx;
        rng.shuffle(va);
        for (std::size_t i = 0; i < min_val; ++i) eval_triples.push_back({t, va[i]});
    }
    Rng order_rng(hash_mix(seed, 0xABCD));
    order_rng.shuffle(train_triples);
    order_rng.shuffle(eval_triples);

    MixedDataset mixed;
    mixed.seed = seed;
    mixed.per_task_train = per_task;
    mixed.per_task_eval = min_val;
    for (const auto& t : tasks) mixed.task_num_classes.push_back(t.num_classes);

    const std::size_t total = train_triples.size() + eval_triples.size();
    mixed.tokens = TokenBatch(total, width);
    mixed.labels.resize(total);
    mixed.expert_labels.resize(total);
    std::size_t row = 0;
    auto emit = [&](const Triple& tr, std::vector<std::size_t>& idx_list) {
        const TaskDataset& task = tasks[tr.task];
        for (std::size_t col = 0; col < width; ++col) {
            // Rows from narrower tasks are right-padded up to the mixed width.
            mixed.tokens.at(row, col) =
                col < task.tokens.seq ? task.tokens.at(tr.sample, col) : pad_id;
        }
        mixed.labels[row] = task.labels[tr.sample];
        mixed.expert_labels[row] = tr.task;
        idx_list.push_back(row);
        ++row;
    };
    for (const auto& tr : train_triples) emit(tr, mixed.train_idx);
    for (const auto& tr : eval_triples) emit(tr, mixed.eval_idx);
    return mixed;
}

} // namespace ttmoe
