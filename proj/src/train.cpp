// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/train.hpp"

#include "ttmoe/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace ttmoe {

void optimizer_step(const std::vector<TensorF*>& params,
                    const std::vector<const TensorF*>& grads,
                    const std::vector<std::string>& names, OptimizerState& state,
                    OptimizerKind kind, double lr) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer_step: " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) + " grads");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!params[i]->same_shape(*grads[i])) {
            throw ShapeError("optimizer_step: gradient shape " + grads[i]->shape_str() +
                             " != param shape " + params[i]->shape_str());
        }
        for (float g : grads[i]->data()) {
            if (!std::isfinite(g)) {
                throw Error("non-finite gradient in " +
                            (i < names.size() ? names[i] : std::to_string(i)));
            }
        }
    }

    if (kind == OptimizerKind::PlainSgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->data();
            auto g = grads[i]->data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                p[j] -= static_cast<float>(lr) * g[j];
            }
        }
        ++state.step;
        return;
    }

    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (state.m.empty()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(beta2, double(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        auto g = grads[i]->data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * g[j]);
            v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * double(g[j]) * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

bool clip_global_norm(const std::vector<TensorF*>& grads, double max_norm) {
    if (max_norm <= 0) return false;
    double sq = 0;
    for (const auto* g : grads) {
        for (float v : g->data()) sq += double(v) * v;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return false;
    const float scale = static_cast<float>(max_norm / norm);
    for (auto* g : grads) {
        for (float& v : g->data()) v *= scale;
    }
    return true;
}

namespace {

std::size_t argmax_row(const TensorF& logits, std::size_t row) {
    std::size_t best = 0;
    float best_v = logits(row, 0);
    for (std::size_t j = 1; j < logits.dim(1); ++j) {
        if (logits(row, j) > best_v) { // strict: ties keep the lowest index
            best_v = logits(row, j);
            best = j;
        }
    }
    return best;
}

BaseOutput<float> forward_of(const BaseModel<float>& base,
                             const ExpertAdapter<float>& a, const TokenBatch& tb) {
    return base.forward(tb, &a);
}
BaseOutput<float> forward_of(const BaseModel<float>& base, const LoraAdapter<float>& a,
                             const TokenBatch& tb) {
    return base.forward(tb, a);
}

template <typename Adapter>
double evaluate_impl(const BaseModel<float>& base, const Adapter& adapter,
                     const TaskDataset& task, const std::vector<std::size_t>& indices) {
    if (indices.empty()) return 0.0;
    std::size_t correct = 0;
    const std::size_t chunk = 64;
    for (std::size_t lo = 0; lo < indices.size(); lo += chunk) {
        std::vector<std::size_t> part(indices.begin() + lo,
                                      indices.begin() +
                                          std::min(indices.size(), lo + chunk));
        auto [tb, lab] = task.gather(part);
        auto out = forward_of(base, adapter, tb);
        for (std::size_t i = 0; i < part.size(); ++i) {
            if (argmax_row(*out.logits, i) == lab[i]) ++correct;
        }
    }
    return double(correct) / double(indices.size());
}

// Flat views over an adapter's trainable tensors, grads in matching order.
struct ParamSet {
    std::vector<TensorF*> params;
    std::vector<const TensorF*> grads;
    std::vector<TensorF*> grads_mut;
    std::vector<std::string> names;
};

ParamSet param_set(ExpertAdapter<float>& a, AdapterGrads<float>& g) {
    ParamSet ps;
    for (std::size_t l = 0; l < a.q_cores.size(); ++l) {
        for (std::size_t k = 0; k < a.q_cores[l].cores.size(); ++k) {
            ps.params.push_back(&a.q_cores[l].cores[k]);
            ps.grads.push_back(&g.q_cores[l][k]);
            ps.grads_mut.push_back(&g.q_cores[l][k]);
            ps.names.push_back("layer" + std::to_string(l) + ".q.core" +
                               std::to_string(k));
        }
    }
    for (std::size_t l = 0; l < a.v_cores.size(); ++l) {
        for (std::size_t k = 0; k < a.v_cores[l].cores.size(); ++k) {
            ps.params.push_back(&a.v_cores[l].cores[k]);
            ps.grads.push_back(&g.v_cores[l][k]);
            ps.grads_mut.push_back(&g.v_cores[l][k]);
            ps.names.push_back("layer" + std::to_string(l) + ".v.core" +
                               std::to_string(k));
        }
    }
    return ps;
}

ParamSet param_set(LoraAdapter<float>& a, AdapterGrads<float>& g) {
    ParamSet ps;
    for (std::size_t l = 0; l < a.q.size(); ++l) {
        ps.params.push_back(&a.q[l].a);
        ps.grads.push_back(&g.q_a[l]);
        ps.grads_mut.push_back(&g.q_a[l]);
        ps.names.push_back("layer" + std::to_string(l) + ".q.a");
        ps.params.push_back(&a.q[l].b);
        ps.grads.push_back(&g.q_b[l]);
        ps.grads_mut.push_back(&g.q_b[l]);
        ps.names.push_back("layer" + std::to_string(l) + ".q.b");
    }
    for (std::size_t l = 0; l < a.v.size(); ++l) {
        ps.params.push_back(&a.v[l].a);
        ps.grads.push_back(&g.v_a[l]);
        ps.grads_mut.push_back(&g.v_a[l]);
        ps.names.push_back("layer" + std::to_string(l) + ".v.a");
        ps.params.push_back(&a.v[l].b);
        ps.grads.push_back(&g.v_b[l]);
        ps.grads_mut.push_back(&g.v_b[l]);
        ps.names.push_back("layer" + std::to_string(l) + ".v.b");
    }
    return ps;
}

template <typename Adapter>
std::pair<Adapter, TrainReport> train_impl(const BaseModel<float>& base,
                                           const TaskDataset& task,
                                           const TrainConfig& cfg, Adapter adapter) {
    cfg.validate();
    if (task.train_idx.empty() || task.val_idx.empty()) {
        throw ConfigError("train: dataset '" + task.name + "' has an empty split");
    }

    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    report.trainable_params = count_trainable(adapter);

    AdapterGrads<float> grads = make_grads(adapter);
    ParamSet ps = param_set(adapter, grads);
    OptimizerState opt;
    Rng shuffle_rng(hash_mix(cfg.seed, 0x1200));

    Adapter best = adapter;
    double best_acc = -1.0;
    std::size_t since_best = 0;

    std::vector<model_detail::SequenceTape<float>> tapes;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order = task.train_idx;
        shuffle_rng.shuffle(order);

        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
            std::vector<std::size_t> part(
                order.begin() + lo,
                order.begin() + std::min(order.size(), lo + cfg.batch_size));
            auto [tb, labels] = task.gather(part);
            auto out = base.forward_with_tape(tb, adapter, tapes);
            auto ce = cross_entropy(*out.logits, labels);
            if (!std::isfinite(ce.loss)) {
                throw Error("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch) + " (task '" + task.name + "')");
            }
            loss_sum += ce.loss;
            ++batches;
            grads.zero();
            base.backward(tb, adapter, tapes, ce.grad, grads);
            if (clip_global_norm(ps.grads_mut, cfg.clip_norm)) ++report.clip_events;
            optimizer_step(ps.params, ps.grads, ps.names, opt, cfg.optimizer,
                           cfg.learning_rate);
        }
        report.train_loss.push_back(loss_sum / double(batches));
        const double acc = evaluate_impl(base, adapter, task, task.val_idx);
        report.val_accuracy.push_back(acc);
        report.epochs_run = epoch;

        if (acc > best_acc) {
            best_acc = acc;
            best = adapter;
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= cfg.patience) {
                report.early_stopped = true;
                break;
            }
        }
    }
    report.best_val_accuracy = std::max(0.0, best_acc);
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(best), std::move(report)};
}

} // namespace

double evaluate(const BaseModel<float>& base, const ExpertAdapter<float>& adapter,
                const TaskDataset& task, const std::vector<std::size_t>& indices) {
    return evaluate_impl(base, adapter, task, indices);
}

double evaluate(const BaseModel<float>& base, const LoraAdapter<float>& adapter,
                const TaskDataset& task, const std::vector<std::size_t>& indices) {
    return evaluate_impl(base, adapter, task, indices);
}

std::pair<ExpertAdapter<float>, TrainReport>
train_expert(const BaseModel<float>& base, const TaskDataset& task,
             const TrainConfig& cfg, std::uint32_t expert_id) {
    auto adapter = make_expert<float>(base.config(), expert_id, task.name,
                                      task.num_classes, cfg.q_shape(), cfg.v_shape(),
                                      static_cast<float>(cfg.alpha), cfg.init_std,
                                      cfg.seed);
    return train_impl(base, task, cfg, std::move(adapter));
}

std::pair<LoraAdapter<float>, TrainReport>
train_lora_expert(const BaseModel<float>& base, const TaskDataset& task,
                  const TrainConfig& cfg, std::uint32_t expert_id) {
    auto adapter = make_lora_adapter<float>(base.config(), expert_id, task.name,
                                            task.num_classes, cfg.rank,
                                            static_cast<float>(cfg.alpha), cfg.init_std,
                                            cfg.seed);
    return train_impl(base, task, cfg, std::move(adapter));
}

} // namespace ttmoe
