// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/router.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace ttmoe {

RouterParams init_router(std::size_t d, std::size_t n, std::uint64_t seed) {
    if (d < 1 || n < 1) throw ConfigError("router needs d >= 1 and n >= 1");
    RouterParams p;
    p.w_gate = TensorF({d, n});
    p.b_gate = TensorF({n});
    p.w_noise = TensorF({d, n});
    Rng rng(hash_mix(seed, 0x6a7e));
    const double scale = 1.0 / std::sqrt(double(d));
    for (auto& v : p.w_gate.data()) v = float(rng.normal() * scale);
    for (auto& v : p.w_noise.data()) v = float(rng.normal() * scale);
    return p;
}

std::size_t router_param_count(std::size_t d, std::size_t n) {
    if (d < 1 || n < 1) throw ConfigError("router_param_count needs d, n >= 1");
    return 2 * d * n + n;
}

NoisyGateDetail noisy_gate_with_noise(const TensorF& h, const RouterParams& params,
                                      const TensorF& eps) {
    if (h.ndim() != 2 || h.dim(1) != params.dim()) {
        throw ShapeError("noisy_gate: hidden " + h.shape_str() +
                         " does not match router dim " + std::to_string(params.dim()));
    }
    NoisyGateDetail out;
    out.clean = matmul(h, params.w_gate);
    const std::size_t n = params.num_experts();
    for (std::size_t i = 0; i < h.dim(0); ++i) {
        for (std::size_t j = 0; j < n; ++j) out.clean(i, j) += params.b_gate[j];
    }
    out.noise_proj = matmul(h, params.w_noise);
    if (!eps.same_shape(out.clean)) {
        throw ShapeError("noisy_gate: eps " + eps.shape_str() + " != scores " +
                         out.clean.shape_str());
    }
    out.eps = eps;
    out.g = out.clean;
    for (std::size_t i = 0; i < out.g.numel(); ++i) {
        out.g[i] += eps[i] * softplus(out.noise_proj[i]);
    }
    return out;
}

TensorF noisy_gate(const TensorF& h, const RouterParams& params, GateMode mode,
                   Rng& rng) {
    if (mode == GateMode::Eval) {
        TensorF zero({h.dim(0), params.num_experts()});
        return noisy_gate_with_noise(h, params, zero).clean;
    }
    TensorF eps({h.dim(0), params.num_experts()});
    // One standard-normal draw per (sample, expert), row-major order.
    for (auto& v : eps.data()) v = float(rng.normal());
    return noisy_gate_with_noise(h, params, eps).g;
}

std::vector<float> topk_mask(std::span<const float> g, std::size_t k) {
    const std::size_t n = g.size();
    if (k < 1 || k > n) {
        throw ConfigError("topk_mask: k = " + std::to_string(k) + " out of range [1, " +
                          std::to_string(n) + "]");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return g[a] > g[b]; // stable: ties keep the lower index first
    });
    std::vector<float> masked(n, -std::numeric_limits<float>::infinity());
    for (std::size_t i = 0; i < k; ++i) masked[order[i]] = g[order[i]];
    return masked;
}

GateDecision gate_vector(std::span<const float> g, std::size_t k) {
    GateDecision d;
    d.noisy.assign(g.begin(), g.end());
    d.masked = topk_mask(g, k);
    d.gate = d.masked;
    softmax_inplace(std::span<float>(d.gate));
    d.selected = 0;
    for (std::size_t i = 1; i < d.gate.size(); ++i) {
        if (d.gate[i] > d.gate[d.selected]) d.selected = i;
    }
    return d;
}

ExpertBank make_bank(std::vector<ExpertAdapter<float>> experts) {
    if (experts.empty()) throw ConfigError("expert bank cannot be empty");
    ExpertBank bank;
    bank.config_hash = experts.front().config_hash;
    for (const auto& e : experts) {
        if (e.config_hash != bank.config_hash) {
            throw ConfigError("expert '" + e.task_name +
                              "' was built against a different base-model config");
        }
    }
    bank.experts = std::move(experts);
    return bank;
}

MoeOutput moe_forward(const BaseModel<float>& base, const ExpertBank& bank,
                      const RouterParams& params, const TokenBatch& tokens,
                      GateMode mode, Rng& rng, std::size_t k) {
    if (bank.size() == 0) throw ConfigError("moe_forward: empty bank");
    if (params.num_experts() != bank.size()) {
        throw ConfigError("router has " + std::to_string(params.num_experts()) +
                          " outputs for a bank of " + std::to_string(bank.size()));
    }
    MoeOutput out;
    // Pass 1: routing representation from the bare base model.
    auto pass1 = base.forward(tokens);
    out.hidden = std::move(pass1.hidden);
    out.router_logits = noisy_gate(out.hidden, params, mode, rng);

    out.gates.reserve(tokens.batch);
    std::vector<std::vector<std::size_t>> by_expert(bank.size());
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        std::span<const float> row(out.router_logits.raw() + b * bank.size(),
                                   bank.size());
        out.gates.push_back(gate_vector(row, k));
        by_expert[out.gates.back().selected].push_back(b);
    }

    // Pass 2: per-sample dispatch, grouped by selected expert. Sequences are
    // processed independently, so grouping cannot change any value.
    out.task_logits.resize(tokens.batch);
    for (std::size_t e = 0; e < bank.size(); ++e) {
        if (by_expert[e].empty()) continue;
        TokenBatch sub(by_expert[e].size(), tokens.seq);
        for (std::size_t i = 0; i < by_expert[e].size(); ++i) {
            for (std::size_t t = 0; t < tokens.seq; ++t) {
                sub.at(i, t) = tokens.at(by_expert[e][i], t);
            }
        }
        auto res = base.forward(sub, &bank.expert(e));
        const auto& logits = *res.logits;
        for (std::size_t i = 0; i < by_expert[e].size(); ++i) {
            std::vector<float> row(logits.dim(1));
            for (std::size_t j = 0; j < row.size(); ++j) row[j] = logits(i, j);
            out.task_logits[by_expert[e][i]] = std::move(row);
        }
    }
    return out;
}

CombinedLoss combined_loss(const std::vector<std::vector<float>>& task_logits,
                           std::span<const std::size_t> y, const TensorF& g,
                           std::span<const std::size_t> t, double lambda) {
    const std::size_t batch = task_logits.size();
    if (y.size() != batch || g.dim(0) != batch || t.size() != batch) {
        throw ShapeError("combined_loss: inconsistent batch sizes");
    }
    const std::size_t n = g.dim(1);
    CombinedLoss out;

    // Task part: per-sample stable log-softmax; rows may differ in width.
    double task_sum = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& row = task_logits[b];
        if (y[b] >= row.size()) {
            throw IndexError("combined_loss: task label " + std::to_string(y[b]) +
                             " out of range [0," + std::to_string(row.size()) + ")");
        }
        float mx = row[0];
        for (float v : row) mx = std::max(mx, v);
        double sum = 0;
        for (float v : row) sum += std::exp(double(v) - mx);
        task_sum += mx + std::log(sum) - row[y[b]];
    }
    out.task_part = task_sum / double(batch);

    // Router part: cross-entropy of the gate scores against the expert label.
    for (std::size_t b = 0; b < batch; ++b) {
        if (t[b] >= n) {
            throw IndexError("combined_loss: expert label " + std::to_string(t[b]) +
                             " out of range [0," + std::to_string(n) + ")");
        }
    }
    auto ce = cross_entropy(g, t);
    out.router_part = ce.loss;
    out.dg = std::move(ce.grad);
    for (auto& v : out.dg.data()) v = float(v * lambda);

    out.total = out.task_part + lambda * out.router_part;
    return out;
}

double routing_accuracy(const TensorF& h, const RouterParams& params,
                        std::span<const std::size_t> t) {
    if (h.dim(0) != t.size()) throw ShapeError("routing_accuracy: batch mismatch");
    if (t.empty()) return 0.0;
    Rng unused(0);
    TensorF g = noisy_gate(h, params, GateMode::Eval, unused);
    std::size_t correct = 0;
    const std::size_t n = params.num_experts();
    for (std::size_t b = 0; b < t.size(); ++b) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (g(b, j) > g(b, arg)) arg = j;
        }
        if (arg == t[b]) ++correct;
    }
    return double(correct) / double(t.size());
}

namespace {

// Pass-1 representations for a set of mixed-dataset rows, computed once; the
// base is frozen, so caching across epochs is exact.
TensorF cached_hidden(const BaseModel<float>& base, const MixedDataset& mixed,
                      const std::vector<std::size_t>& rows) {
    const std::size_t d = base.config().d_model;
    TensorF h({rows.size(), d});
    const std::size_t chunk = 64;
    for (std::size_t lo = 0; lo < rows.size(); lo += chunk) {
        const std::size_t hi = std::min(rows.size(), lo + chunk);
        TokenBatch tb(hi - lo, mixed.tokens.seq);
        for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t t = 0; t < mixed.tokens.seq; ++t) {
                tb.at(i - lo, t) = mixed.tokens.at(rows[i], t);
            }
        }
        auto out = base.forward(tb);
        for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t j = 0; j < d; ++j) h(i, j) = out.hidden(i - lo, j);
        }
    }
    return h;
}

} // namespace

std::pair<RouterParams, RouterReport> train_router(const BaseModel<float>& base,
                                                   const ExpertBank& bank,
                                                   const MixedDataset& mixed,
                                                   const RouterTrainConfig& cfg) {
    cfg.validate();
    if (mixed.train_idx.empty() || mixed.eval_idx.empty()) {
        throw ConfigError("train_router: mixed dataset has an empty split");
    }
    if (mixed.num_tasks() != bank.size()) {
        throw ConfigError("train_router: mixed dataset covers " +
                          std::to_string(mixed.num_tasks()) + " tasks, bank has " +
                          std::to_string(bank.size()));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t d = base.config().d_model;
    const std::size_t n = bank.size();

    RouterParams params = init_router(d, n, cfg.seed);
    RouterReport report;
    report.trainable_params = params.param_count();

    // The task term of the combined loss contributes no router gradient under
    // hard top-1 dispatch, so training batches only need pass-1 features;
    // those depend on the frozen base alone and are cached up front.
    TensorF h_train = cached_hidden(base, mixed, mixed.train_idx);
    TensorF h_eval = cached_hidden(base, mixed, mixed.eval_idx);
    std::vector<std::size_t> t_train, t_eval;
    for (std::size_t i : mixed.train_idx) t_train.push_back(mixed.expert_labels[i]);
    for (std::size_t i : mixed.eval_idx) t_eval.push_back(mixed.expert_labels[i]);

    OptimizerState opt;
    std::vector<TensorF*> p{&params.w_gate, &params.b_gate, &params.w_noise};
    std::vector<std::string> names{"w_gate", "b_gate", "w_noise"};

    Rng rng(hash_mix(cfg.seed, 0x5151));
    RouterParams best = params;
    double best_acc = -1.0;
    std::size_t since_best = 0;

    const std::size_t n_train = mixed.train_idx.size();
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < n_train; lo += cfg.batch_size) {
            const std::size_t hi = std::min(n_train, lo + cfg.batch_size);
            const std::size_t bsz = hi - lo;
            TensorF h({bsz, d});
            std::vector<std::size_t> t(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                const std::size_t r = order[lo + i];
                for (std::size_t j = 0; j < d; ++j) h(i, j) = h_train(r, j);
                t[i] = t_train[r];
            }
            TensorF eps({bsz, n});
            for (auto& v : eps.data()) v = float(rng.normal());
            NoisyGateDetail gd = noisy_gate_with_noise(h, params, eps);

            auto ce = cross_entropy(gd.g, t);
            if (!std::isfinite(ce.loss)) {
                throw Error("router training diverged at epoch " +
                            std::to_string(epoch));
            }
            loss_sum += ce.loss;
            ++batches;

            // dg = lambda * dCE/dg; chain through both projections.
            TensorF dg = ce.grad;
            for (auto& v : dg.data()) v = float(v * cfg.lambda);
            TensorF dw_gate = matmul_tn(h, dg);
            TensorF db({n});
            for (std::size_t i = 0; i < bsz; ++i) {
                for (std::size_t j = 0; j < n; ++j) db[j] += dg(i, j);
            }
            TensorF dnoise_proj = dg;
            for (std::size_t i = 0; i < dnoise_proj.numel(); ++i) {
                const float s = 1.0f / (1.0f + std::exp(-gd.noise_proj[i]));
                dnoise_proj[i] *= gd.eps[i] * s; // softplus' = sigmoid
            }
            TensorF dw_noise = matmul_tn(h, dnoise_proj);

            std::vector<const TensorF*> g{&dw_gate, &db, &dw_noise};
            optimizer_step(p, g, names, opt, cfg.optimizer, cfg.learning_rate);
        }
        report.router_loss.push_back(loss_sum / double(batches));
        const double acc = routing_accuracy(h_eval, params, t_eval);
        report.routing_accuracy.push_back(acc);
        report.epochs_run = epoch;
        if (acc > best_acc) {
            best_acc = acc;
            best = params;
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
    report.best_routing_accuracy = std::max(0.0, best_acc);

    if (cfg.final_task_eval) {
        // Two-pass evaluation of the returned router on the eval split.
        TokenBatch tb(mixed.eval_idx.size(), mixed.tokens.seq);
        std::vector<std::size_t> y, t;
        for (std::size_t i = 0; i < mixed.eval_idx.size(); ++i) {
            const std::size_t r = mixed.eval_idx[i];
            for (std::size_t c = 0; c < mixed.tokens.seq; ++c) {
                tb.at(i, c) = mixed.tokens.at(r, c);
            }
            y.push_back(mixed.labels[r]);
            t.push_back(mixed.expert_labels[r]);
        }
        Rng eval_rng(0);
        MoeOutput mo = moe_forward(base, bank, best, tb, GateMode::Eval, eval_rng, 1);
        std::vector<std::size_t> task_correct(bank.size()), task_total(bank.size());
        std::size_t correct = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const auto& row = mo.task_logits[i];
            std::size_t arg = 0;
            for (std::size_t j = 1; j < row.size(); ++j) {
                if (row[j] > row[arg]) arg = j;
            }
            const bool ok = y[i] < row.size() && arg == y[i];
            correct += ok;
            task_correct[t[i]] += ok;
            ++task_total[t[i]];
        }
        report.final_task_accuracy = double(correct) / double(y.size());
        for (std::size_t e = 0; e < bank.size(); ++e) {
            report.per_task_accuracy.push_back(
                task_total[e] ? double(task_correct[e]) / double(task_total[e]) : 0.0);
        }
        // Combined loss on the eval split; samples whose label exceeds their
        // selected expert's head width were already counted as errors and are
        // excluded from the loss average.
        std::vector<std::vector<float>> logits_ok;
        std::vector<std::size_t> y_ok, t_ok, keep;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] < mo.task_logits[i].size()) keep.push_back(i);
        }
        if (!keep.empty()) {
            TensorF g_keep({keep.size(), bank.size()});
            for (std::size_t i = 0; i < keep.size(); ++i) {
                logits_ok.push_back(mo.task_logits[keep[i]]);
                y_ok.push_back(y[keep[i]]);
                t_ok.push_back(t[keep[i]]);
                for (std::size_t j = 0; j < bank.size(); ++j) {
                    g_keep(i, j) = mo.router_logits(keep[i], j);
                }
            }
            auto cl = combined_loss(logits_ok, y_ok, g_keep, t_ok, cfg.lambda);
            report.final_total_loss = cl.total;
            report.final_task_loss = cl.task_part;
            report.final_router_loss = cl.router_part;
        }
    }

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(best), std::move(report)};
}

} // namespace ttmoe
