// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/data.hpp"
#include "ttmoe/model.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ttmoe {

enum class OptimizerKind { PlainSgd, AdaptiveMoment };
enum class AdapterKind { Tt, Lora };

struct TrainConfig {
    double learning_rate = 5e-3; // TT default; the LoRA preset uses 5e-4
    std::size_t batch_size = 32;
    std::size_t max_epochs = 50;
    std::size_t patience = 10; // evaluations without improvement before stopping
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::AdaptiveMoment;
    AdapterKind adapter = AdapterKind::Tt;
    double alpha = 16.0;
    std::size_t rank = 4;
    std::vector<std::size_t> q_in_factors{8, 8}, q_out_factors{8, 8};
    std::vector<std::size_t> v_in_factors{8, 8}, v_out_factors{4, 4};
    double init_std = 0.02;
    double clip_norm = 1.0; // 0 disables clipping

    TtShape q_shape() const { return {q_in_factors, q_out_factors, rank}; }
    TtShape v_shape() const { return {v_in_factors, v_out_factors, rank}; }

    static TrainConfig defaults_for(AdapterKind kind) {
        TrainConfig c;
        c.adapter = kind;
        if (kind == AdapterKind::Lora) c.learning_rate = 5e-4;
        return c;
    }

    void validate() const {
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    }
};

struct TrainReport {
    std::vector<double> train_loss;   // per epoch
    std::vector<double> val_accuracy; // per epoch
    std::size_t best_epoch = 0;       // 1-based; 0 when no epoch ran
    double best_val_accuracy = 0;
    std::size_t trainable_params = 0;
    double wall_clock_sec = 0;
    std::size_t clip_events = 0;
    std::size_t epochs_run = 0;
    bool early_stopped = false;
};

// First/second-moment state for the adaptive optimizer; lazily sized on the
// first step.
struct OptimizerState {
    std::size_t step = 0;
    std::vector<TensorF> m, v;
};

// Plain mode: p <- p - lr*g. Adaptive mode: Adam with beta1=0.9, beta2=0.999,
// eps=1e-8 and bias correction. Throws on non-finite gradients, naming the
// offending parameter.
void optimizer_step(const std::vector<TensorF*>& params,
                    const std::vector<const TensorF*>& grads,
                    const std::vector<std::string>& names, OptimizerState& state,
                    OptimizerKind kind, double lr);

// Scales all gradients in place so their joint L2 norm is at most max_norm.
// Returns true when clipping fired.
bool clip_global_norm(const std::vector<TensorF*>& grads, double max_norm);

// Argmax-of-logits accuracy over the given sample indices; ties break toward
// the lowest class index.
double evaluate(const BaseModel<float>& base, const ExpertAdapter<float>& adapter,
                const TaskDataset& task, const std::vector<std::size_t>& indices);
double evaluate(const BaseModel<float>& base, const LoraAdapter<float>& adapter,
                const TaskDataset& task, const std::vector<std::size_t>& indices);

// Stage-1 expert training: only the TT cores move; the base and the frozen
// head are untouched. Early-stops when validation accuracy fails to improve
// for `patience` epochs and returns the best-validation checkpoint.
std::pair<ExpertAdapter<float>, TrainReport>
train_expert(const BaseModel<float>& base, const TaskDataset& task,
             const TrainConfig& cfg, std::uint32_t expert_id = 0);

// Same loop over the LoRA baseline's A/B factors.
std::pair<LoraAdapter<float>, TrainReport>
train_lora_expert(const BaseModel<float>& base, const TaskDataset& task,
                  const TrainConfig& cfg, std::uint32_t expert_id = 0);

} // namespace ttmoe
