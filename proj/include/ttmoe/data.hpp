// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ttmoe {

// Labeled per-task examples with disjoint train/validation splits.
struct TaskDataset {
    std::string name;
    TokenBatch tokens; // [n x T], right-padded
    std::vector<std::size_t> labels;
    std::size_t num_classes = 2;
    std::vector<std::size_t> train_idx, val_idx;
    std::uint64_t seed = 0;
    std::uint32_t rule_id = 0;

    std::size_t size() const { return tokens.batch; }

    // Materializes the rows (and labels) for a list of sample indices.
    std::pair<TokenBatch, std::vector<std::size_t>>
    gather(const std::vector<std::size_t>& idx) const;
};

// Router-training corpus: (x, y, t) triples with exactly equal per-task counts,
// t being the source task's expert index.
struct MixedDataset {
    TokenBatch tokens;
    std::vector<std::size_t> labels;        // y
    std::vector<std::size_t> expert_labels; // t
    std::vector<std::size_t> task_num_classes;
    std::vector<std::size_t> train_idx, eval_idx;
    std::size_t per_task_train = 0;
    std::size_t per_task_eval = 0;
    std::uint64_t seed = 0;

    std::size_t num_tasks() const { return task_num_classes.size(); }
};

struct GenOptions {
    std::size_t n_per_task = 240;
    std::size_t seq_len = 12;       // must be <= ToyConfig::max_seq
    std::size_t num_classes = 2;
    double val_fraction = 0.25;
    double probe_threshold = 0.9; // minimum linear-probe accuracy on frozen features
    std::size_t max_regen = 8;    // reseed attempts before giving up
};

// Multinomial logistic probe trained on frozen base features; returns accuracy
// on the validation split. Independent of any adapter, so it serves as the
// learnability oracle for generated tasks.
double linear_probe_accuracy(const BaseModel<float>& base, const TaskDataset& task,
                             std::size_t iters = 300, double lr = 0.5);

// Synthetic task suite: each task draws tokens from a disjoint vocab band and
// labels sequences by a rule on the last token, verified learnable by the
// linear probe (regenerated with the next seed otherwise).
std::vector<TaskDataset> gen_synthetic_tasks(const BaseModel<float>& base,
                                             std::size_t n_tasks, std::uint64_t seed,
                                             const GenOptions& opts = {});

// Pools an equal number of samples from each task. per_task == 0 selects the
// smallest task's train-split size; the eval side always uses the smallest
// validation split. pad_id fills rows from tasks narrower than the mixed width.
MixedDataset build_mixed(const std::vector<TaskDataset>& tasks, std::size_t per_task,
                         std::uint64_t seed, std::uint32_t pad_id = 64);

} // namespace ttmoe
