// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/data.hpp"
#include "ttmoe/model.hpp"
#include "ttmoe/train.hpp"

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ttmoe {

// Gate and noise projections over the base hidden dim. The gate carries a
// bias of size N; the noise projection is bias-free (2*d*N + N trainables,
// matching the reported router parameter counts).
struct RouterParams {
    TensorF w_gate;  // [d x N]
    TensorF b_gate;  // [N]
    TensorF w_noise; // [d x N]

    std::size_t dim() const { return w_gate.dim(0); }
    std::size_t num_experts() const { return w_gate.dim(1); }
    std::size_t param_count() const {
        return w_gate.numel() + b_gate.numel() + w_noise.numel();
    }
};

RouterParams init_router(std::size_t d, std::size_t n, std::uint64_t seed);

// 2*d*n + n.
std::size_t router_param_count(std::size_t d, std::size_t n);

enum class GateMode { Train, Eval };

// Train mode adds per-(sample, expert) standard-normal noise scaled by
// softplus of the noise projection; eval mode returns the clean scores only,
// making the routing decision deterministic.
TensorF noisy_gate(const TensorF& h, const RouterParams& params, GateMode mode,
                   Rng& rng);

// Deterministic-noise variant: g = (h w_gate + b) + eps .* softplus(h w_noise).
// Exposes the intermediates the training backward needs.
struct NoisyGateDetail {
    TensorF g, clean, noise_proj, eps;
};
NoisyGateDetail noisy_gate_with_noise(const TensorF& h, const RouterParams& params,
                                      const TensorF& eps);

// Keeps the k largest entries, sets the rest to -inf. Ties break toward the
// lower index.
std::vector<float> topk_mask(std::span<const float> g, std::size_t k);

struct GateDecision {
    std::vector<float> noisy;  // raw gate scores g
    std::vector<float> masked; // after topk_mask
    std::vector<float> gate;   // softmax over masked; exactly one-hot for k=1
    std::size_t selected = 0;  // e* = argmax
};

// Softmax over the masked logits; with k=1 this is exactly one-hot.
GateDecision gate_vector(std::span<const float> g, std::size_t k = 1);

// Stacked frozen experts addressable by a gate index.
struct ExpertBank {
    std::vector<ExpertAdapter<float>> experts;
    std::uint64_t config_hash = 0;

    std::size_t size() const { return experts.size(); }
    const ExpertAdapter<float>& expert(std::size_t i) const { return experts.at(i); }
    std::vector<std::string> task_names() const {
        std::vector<std::string> names;
        for (const auto& e : experts) names.push_back(e.task_name);
        return names;
    }
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& e : experts) h = hash_mix(h, adapter_hash(e));
        return h;
    }
};

// Validates that all adapters share one base-model config hash.
ExpertBank make_bank(std::vector<ExpertAdapter<float>> experts);

struct MoeOutput {
    std::vector<std::vector<float>> task_logits; // per sample; width = C of e*
    std::vector<GateDecision> gates;
    TensorF router_logits; // [B x N], the scores the decisions used
    TensorF hidden;        // pass-1 representations [B x d]
};

// Two-pass inference: pass 1 runs the bare base model for the routing
// representation, the gate picks e* per sample, pass 2 reruns the base with
// the selected expert's cores and head. Samples in one batch may route to
// different experts.
MoeOutput moe_forward(const BaseModel<float>& base, const ExpertBank& bank,
                      const RouterParams& params, const TokenBatch& tokens,
                      GateMode mode, Rng& rng, std::size_t k = 1);

struct CombinedLoss {
    double total = 0;
    double task_part = 0;
    double router_part = 0;
    TensorF dg; // d(total)/d(router logits) = lambda * (softmax(g) - onehot(t)) / B
};

// L_total = L_task + lambda * L_router. Only router parameters receive
// gradients; the hard top-1 dispatch is not differentiated through, so dg is
// the full router-parameter gradient signal.
CombinedLoss combined_loss(const std::vector<std::vector<float>>& task_logits,
                           std::span<const std::size_t> y, const TensorF& g,
                           std::span<const std::size_t> t, double lambda);

struct RouterTrainConfig {
    double learning_rate = 0.02;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::AdaptiveMoment;
    bool final_task_eval = true; // run the two-pass evaluation on the eval split

    void validate() const {
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    }
};

struct RouterReport {
    std::vector<double> router_loss;      // per epoch, train split
    std::vector<double> routing_accuracy; // per epoch, eval split (clean gates)
    std::size_t best_epoch = 0;
    double best_routing_accuracy = 0;
    std::size_t trainable_params = 0;
    std::size_t epochs_run = 0;
    bool early_stopped = false;
    double wall_clock_sec = 0;
    // Final two-pass evaluation on the eval split (when enabled).
    double final_task_accuracy = 0;
    std::vector<double> per_task_accuracy;
    double final_total_loss = 0, final_task_loss = 0, final_router_loss = 0;
};

// Stage-2 training: only w_gate, b_gate and w_noise move; the bank and base
// are untouched. Reports routing accuracy per epoch and returns the
// best-routing checkpoint.
std::pair<RouterParams, RouterReport> train_router(const BaseModel<float>& base,
                                                   const ExpertBank& bank,
                                                   const MixedDataset& mixed,
                                                   const RouterTrainConfig& cfg);

// Fraction of rows whose clean-gate argmax matches the expert label.
double routing_accuracy(const TensorF& h, const RouterParams& params,
                        std::span<const std::size_t> t);

} // namespace ttmoe
