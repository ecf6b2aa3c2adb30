// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/tt.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ttmoe {

// Toy transformer dimensions. Defaults are large enough for nontrivial TT
// factorizations ([8,8] etc.) and small enough for seconds-scale tests.
struct ToyConfig {
    std::size_t vocab = 64;
    std::size_t d_model = 64;
    std::size_t d_v = 16; // value projection output dim, strictly < d_model
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_seq = 16;
    std::size_t d_ff = 128;
    std::uint64_t seed = 1234;

    std::uint32_t pad_id() const { return static_cast<std::uint32_t>(vocab); }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::uint64_t v : {vocab, d_model, d_v, n_layers, n_heads, max_seq, d_ff,
                                static_cast<std::size_t>(seed)}) {
            h = hash_mix(h, v);
        }
        return h;
    }
};

// Fixed-width token matrix; rows are right-padded with pad_id. The first pad
// in a row ends the sequence.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::uint32_t> ids;

    TokenBatch() = default;
    TokenBatch(std::size_t b, std::size_t t)
        : batch(b), seq(t), ids(b * t, 0) {}

    std::uint32_t& at(std::size_t b, std::size_t t) { return ids[b * seq + t]; }
    std::uint32_t at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
    std::span<const std::uint32_t> row(std::size_t b) const {
        return {ids.data() + b * seq, seq};
    }
};

// One adapted matrix of the LoRA baseline: delta(x) = alpha * (x a) b with
// a [d_in x r] random and b [r x d_out] zero at init.
template <typename T> struct LoraFactors {
    Tensor<T> a;
    Tensor<T> b;
    T alpha = 1;
};

template <typename T>
LoraFactors<T> init_lora(std::size_t d_in, std::size_t d_out, std::size_t rank,
                         std::uint64_t seed, double std_dev, T alpha) {
    LoraFactors<T> f;
    f.a = Tensor<T>({d_in, rank});
    f.b = Tensor<T>({rank, d_out});
    f.alpha = alpha;
    Rng rng(seed);
    for (auto& v : f.a.data()) v = static_cast<T>(rng.normal() * std_dev);
    return f;
}

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const LoraFactors<T>& f) {
    Tensor<T> y = matmul(matmul(x, f.a), f.b);
    for (auto& v : y.data()) v *= f.alpha;
    return y;
}

// Per-task expert: TT cores for the Q and V projections of every layer plus a
// frozen classification head. Only the cores are ever trained.
template <typename T> struct ExpertAdapter {
    std::uint32_t expert_id = 0;
    std::string task_name;
    std::size_t num_classes = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::vector<TtCores<T>> q_cores; // one chain per layer
    std::vector<TtCores<T>> v_cores;
    Tensor<T> head_w; // [d x C], frozen
    Tensor<T> head_b; // [C], frozen
};

// LoRA baseline adapter with the same layout (A/B pairs instead of TT chains).
template <typename T> struct LoraAdapter {
    std::uint32_t expert_id = 0;
    std::string task_name;
    std::size_t num_classes = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::vector<LoraFactors<T>> q;
    std::vector<LoraFactors<T>> v;
    Tensor<T> head_w;
    Tensor<T> head_b;
};

// Affine map through a frozen head.
template <typename T>
Tensor<T> head_forward(const Tensor<T>& hidden, const Tensor<T>& head_w,
                       const Tensor<T>& head_b) {
    if (hidden.ndim() != 2 || head_w.ndim() != 2 || hidden.dim(1) != head_w.dim(0)) {
        throw ShapeError("head_forward: hidden " + hidden.shape_str() +
                         " incompatible with head " + head_w.shape_str());
    }
    Tensor<T> out = matmul(hidden, head_w);
    const std::size_t c = head_w.dim(1);
    for (std::size_t i = 0; i < out.dim(0); ++i) {
        for (std::size_t j = 0; j < c; ++j) out(i, j) += head_b[j];
    }
    return out;
}

// Frozen base projection plus an optional trainable delta.
template <typename T>
Tensor<T> adapted_linear_forward(const Tensor<T>& x, const Tensor<T>& w0) {
    return matmul(x, w0);
}

template <typename T>
Tensor<T> adapted_linear_forward(const Tensor<T>& x, const Tensor<T>& w0,
                                 const TtCores<T>& delta) {
    Tensor<T> y = matmul(x, w0);
    Tensor<T> d = tt_contract_forward(x, delta);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += d[i];
    return y;
}

template <typename T>
Tensor<T> adapted_linear_forward(const Tensor<T>& x, const Tensor<T>& w0,
                                 const LoraFactors<T>& delta) {
    Tensor<T> y = matmul(x, w0);
    Tensor<T> d = lora_forward(x, delta);
    if (!y.same_shape(d)) {
        throw ShapeError("adapted_linear_forward: delta output " + d.shape_str() +
                         " does not match base output " + y.shape_str());
    }
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += d[i];
    return y;
}

namespace model_detail {

// View over one layer's Q or V delta; at most one pointer is set.
template <typename T> struct DeltaRef {
    const TtCores<T>* tt = nullptr;
    const LoraFactors<T>* lora = nullptr;
    bool present() const { return tt != nullptr || lora != nullptr; }
};

template <typename T> struct LnStats {
    std::vector<T> mean, rstd;
};

template <typename T> struct LayerTape {
    Tensor<T> x_in;              // residual stream entering the layer
    Tensor<T> u;                 // LN1 output (input to Q/K/V projections)
    Tensor<T> q, k, v;           // post-projection (delta included)
    std::vector<Tensor<T>> attn; // per-head softmax probabilities [len x len]
    Tensor<T> x_mid;             // after the attention residual
    Tensor<T> z;                 // LN2 output
    Tensor<T> f1;                // pre-activation of the FFN
    LnStats<T> ln1, ln2;
};

template <typename T> struct SequenceTape {
    std::size_t len = 0;
    std::vector<LayerTape<T>> layers;
    Tensor<T> x_final; // pre-final-norm stream
    LnStats<T> lnf;
};

template <typename T> inline T silu(T x) { return x / (T(1) + std::exp(-x)); }

template <typename T> inline T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     LnStats<T>* stats) {
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor<T> out({rows, cols});
    if (stats) {
        stats->mean.resize(rows);
        stats->rstd.resize(rows);
    }
    for (std::size_t i = 0; i < rows; ++i) {
        const T* row = x.raw() + i * cols;
        T mu = 0;
        for (std::size_t j = 0; j < cols; ++j) mu += row[j];
        mu /= T(cols);
        T var = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const T d = row[j] - mu;
            var += d * d;
        }
        var /= T(cols);
        const T rstd = T(1) / std::sqrt(var + T(1e-5));
        if (stats) {
            stats->mean[i] = mu;
            stats->rstd[i] = rstd;
        }
        for (std::size_t j = 0; j < cols; ++j) {
            out(i, j) = gamma[j] * (row[j] - mu) * rstd + beta[j];
        }
    }
    return out;
}

// dL/dx for y = gamma * (x - mu) / sigma + beta with frozen gamma/beta.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& x,
                              const Tensor<T>& gamma, const LnStats<T>& stats) {
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor<T> dx({rows, cols});
    std::vector<T> xhat(cols), dxh(cols);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xrow = x.raw() + i * cols;
        const T* dyrow = dy.raw() + i * cols;
        const T mu = stats.mean[i], rstd = stats.rstd[i];
        T mean_dxh = 0, mean_dxh_xhat = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            xhat[j] = (xrow[j] - mu) * rstd;
            dxh[j] = dyrow[j] * gamma[j];
            mean_dxh += dxh[j];
            mean_dxh_xhat += dxh[j] * xhat[j];
        }
        mean_dxh /= T(cols);
        mean_dxh_xhat /= T(cols);
        for (std::size_t j = 0; j < cols; ++j) {
            dx(i, j) = rstd * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat);
        }
    }
    return dx;
}

template <typename T>
Tensor<T> column_slice(const Tensor<T>& m, std::size_t lo, std::size_t width) {
    Tensor<T> out({m.dim(0), width});
    for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < width; ++j) out(i, j) = m(i, lo + j);
    return out;
}

template <typename T>
void column_scatter_add(Tensor<T>& dst, const Tensor<T>& src, std::size_t lo) {
    for (std::size_t i = 0; i < src.dim(0); ++i)
        for (std::size_t j = 0; j < src.dim(1); ++j) dst(i, lo + j) += src(i, j);
}

} // namespace model_detail

// Gradient buffers aligned with an adapter's trainable structure. Only the
// arrays matching the adapter kind are populated.
template <typename T> struct AdapterGrads {
    std::vector<std::vector<Tensor<T>>> q_cores, v_cores; // TT kind
    std::vector<Tensor<T>> q_a, q_b, v_a, v_b;            // LoRA kind

    void zero() {
        auto z = [](auto& vecs) {
            for (auto& t : vecs)
                for (auto& v : t.data()) v = 0;
        };
        for (auto& l : q_cores) z(l);
        for (auto& l : v_cores) z(l);
        z(q_a);
        z(q_b);
        z(v_a);
        z(v_b);
    }
};

template <typename T> AdapterGrads<T> make_grads(const ExpertAdapter<T>& a) {
    AdapterGrads<T> g;
    for (const auto& chain : a.q_cores) {
        std::vector<Tensor<T>> l;
        for (const auto& c : chain.cores) l.emplace_back(c.shape());
        g.q_cores.push_back(std::move(l));
    }
    for (const auto& chain : a.v_cores) {
        std::vector<Tensor<T>> l;
        for (const auto& c : chain.cores) l.emplace_back(c.shape());
        g.v_cores.push_back(std::move(l));
    }
    return g;
}

template <typename T> AdapterGrads<T> make_grads(const LoraAdapter<T>& a) {
    AdapterGrads<T> g;
    for (const auto& f : a.q) {
        g.q_a.emplace_back(f.a.shape());
        g.q_b.emplace_back(f.b.shape());
    }
    for (const auto& f : a.v) {
        g.v_a.emplace_back(f.a.shape());
        g.v_b.emplace_back(f.b.shape());
    }
    return g;
}

template <typename T> struct BaseOutput {
    Tensor<T> hidden;                // [B x d], pooled pre-head representation
    std::optional<Tensor<T>> logits; // [B x C] when an adapter (hence head) is set
};

// Frozen decoder-style toy transformer. Causal attention, pre-norm blocks,
// SiLU feed-forward, asymmetric value projection (d_v < d_model). All weights
// are fixed at construction; adapters inject deltas into the Q and V
// projections only.
template <typename T> class BaseModel {
public:
    explicit BaseModel(const ToyConfig& cfg) : cfg_(cfg) {
        if (cfg.d_v >= cfg.d_model) {
            throw ConfigError("toy config requires d_v < d_model");
        }
        if (cfg.d_model % cfg.n_heads != 0 || cfg.d_v % cfg.n_heads != 0) {
            throw ConfigError("toy config: n_heads must divide d_model and d_v");
        }
        const std::size_t d = cfg.d_model, dv = cfg.d_v, dff = cfg.d_ff;
        embed_ = gaussian({cfg.vocab, d}, 1, 1.0);
        pos_ = gaussian({cfg.max_seq, d}, 2, 0.5);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            Layer lw;
            const std::uint64_t tag = 100 + l * 10;
            lw.ln1_g = Tensor<T>::full({d}, T(1));
            lw.ln1_b = Tensor<T>({d});
            lw.wq = gaussian({d, d}, tag + 1, 1.0 / std::sqrt(double(d)));
            lw.wk = gaussian({d, d}, tag + 2, 1.0 / std::sqrt(double(d)));
            lw.wv = gaussian({d, dv}, tag + 3, 1.0 / std::sqrt(double(d)));
            lw.wo = gaussian({dv, d}, tag + 4, 1.0 / std::sqrt(double(dv)));
            lw.ln2_g = Tensor<T>::full({d}, T(1));
            lw.ln2_b = Tensor<T>({d});
            lw.w1 = gaussian({d, dff}, tag + 5, 1.0 / std::sqrt(double(d)));
            lw.w2 = gaussian({dff, d}, tag + 6, 1.0 / std::sqrt(double(dff)));
            layers_.push_back(std::move(lw));
        }
        lnf_g_ = Tensor<T>::full({d}, T(1));
        lnf_b_ = Tensor<T>({d});
    }

    const ToyConfig& config() const { return cfg_; }

    // FNV over all frozen weight bytes; the frozen-base contract is checked by
    // comparing this hash before and after training entry points.
    std::uint64_t weight_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](const Tensor<T>& t) {
            h = fnv1a64(t.raw(), t.numel() * sizeof(T), h);
        };
        mix(embed_);
        mix(pos_);
        for (const auto& l : layers_) {
            mix(l.ln1_g);
            mix(l.ln1_b);
            mix(l.wq);
            mix(l.wk);
            mix(l.wv);
            mix(l.wo);
            mix(l.ln2_g);
            mix(l.ln2_b);
            mix(l.w1);
            mix(l.w2);
        }
        mix(lnf_g_);
        mix(lnf_b_);
        return h;
    }

    BaseOutput<T> forward(const TokenBatch& tokens) const {
        return forward_ref(tokens, AdapterView{}, nullptr);
    }

    BaseOutput<T> forward(const TokenBatch& tokens, const ExpertAdapter<T>* adapter) const {
        if (!adapter) return forward(tokens);
        return forward_ref(tokens, view(*adapter), nullptr);
    }

    BaseOutput<T> forward(const TokenBatch& tokens, const LoraAdapter<T>& adapter) const {
        return forward_ref(tokens, view(adapter), nullptr);
    }

    // Training-path forward: like forward() but records per-sequence tapes for
    // the backward pass. The adapter must carry a head.
    BaseOutput<T> forward_with_tape(const TokenBatch& tokens, const ExpertAdapter<T>& a,
                                    std::vector<model_detail::SequenceTape<T>>& tapes) const {
        return forward_ref(tokens, view(a), &tapes);
    }

    BaseOutput<T> forward_with_tape(const TokenBatch& tokens, const LoraAdapter<T>& a,
                                    std::vector<model_detail::SequenceTape<T>>& tapes) const {
        return forward_ref(tokens, view(a), &tapes);
    }

    // Reverse pass from d(logits). Accumulates gradients for the adapter's
    // trainable tensors only; the base and head are frozen.
    void backward(const TokenBatch& tokens, const ExpertAdapter<T>& a,
                  const std::vector<model_detail::SequenceTape<T>>& tapes,
                  const Tensor<T>& dlogits, AdapterGrads<T>& grads) const {
        backward_ref(tokens, view(a), tapes, dlogits, grads);
    }

    void backward(const TokenBatch& tokens, const LoraAdapter<T>& a,
                  const std::vector<model_detail::SequenceTape<T>>& tapes,
                  const Tensor<T>& dlogits, AdapterGrads<T>& grads) const {
        backward_ref(tokens, view(a), tapes, dlogits, grads);
    }

private:
    struct Layer {
        Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2;
    };

    struct AdapterView {
        std::vector<model_detail::DeltaRef<T>> q, v;
        const Tensor<T>* head_w = nullptr;
        const Tensor<T>* head_b = nullptr;
    };

    AdapterView view(const ExpertAdapter<T>& a) const {
        check_adapter_layers(a.q_cores.size(), a.v_cores.size());
        AdapterView av;
        av.q.resize(cfg_.n_layers);
        av.v.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            av.q[l].tt = &a.q_cores[l];
            av.v[l].tt = &a.v_cores[l];
        }
        av.head_w = &a.head_w;
        av.head_b = &a.head_b;
        return av;
    }

    AdapterView view(const LoraAdapter<T>& a) const {
        check_adapter_layers(a.q.size(), a.v.size());
        AdapterView av;
        av.q.resize(cfg_.n_layers);
        av.v.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            av.q[l].lora = &a.q[l];
            av.v[l].lora = &a.v[l];
        }
        av.head_w = &a.head_w;
        av.head_b = &a.head_b;
        return av;
    }

    void check_adapter_layers(std::size_t nq, std::size_t nv) const {
        if (nq != cfg_.n_layers || nv != cfg_.n_layers) {
            throw ShapeError("adapter has " + std::to_string(nq) + "/" +
                             std::to_string(nv) + " Q/V chains, model has " +
                             std::to_string(cfg_.n_layers) + " layers");
        }
    }

    Tensor<T> gaussian(std::vector<std::size_t> shape, std::uint64_t tag,
                       double scale) const {
        Tensor<T> t(std::move(shape));
        Rng rng(hash_mix(cfg_.seed, tag));
        for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
        return t;
    }

    static Tensor<T> apply_delta(const Tensor<T>& x,
                                 const model_detail::DeltaRef<T>& d) {
        if (d.tt) return tt_contract_forward(x, *d.tt);
        return lora_forward(x, *d.lora);
    }

    std::size_t sequence_length(const TokenBatch& tokens, std::size_t b) const {
        const auto row = tokens.row(b);
        std::size_t len = 0;
        for (std::uint32_t id : row) {
            if (id == cfg_.pad_id()) break;
            if (id > cfg_.vocab) {
                throw IndexError("token id " + std::to_string(id) +
                                 " out of range for vocab " + std::to_string(cfg_.vocab));
            }
            ++len;
        }
        if (len == 0) {
            throw InvalidInputError("sequence " + std::to_string(b) +
                                    " has no non-padding tokens");
        }
        return len;
    }

    // Runs one sequence through all layers; fills `tape` when non-null.
    // Returns the full pre-pooling hidden states (post final norm) [len x d].
    Tensor<T> forward_sequence(std::span<const std::uint32_t> row, std::size_t len,
                               const AdapterView& av,
                               model_detail::SequenceTape<T>* tape) const {
        using namespace model_detail;
        const std::size_t d = cfg_.d_model, dv = cfg_.d_v, h_count = cfg_.n_heads;
        const std::size_t hd = d / h_count, vhd = dv / h_count;
        const T scale = T(1) / std::sqrt(T(hd));

        Tensor<T> x({len, d});
        for (std::size_t t = 0; t < len; ++t) {
            const std::uint32_t id = row[t];
            for (std::size_t j = 0; j < d; ++j) {
                x(t, j) = embed_(id, j) + pos_(t, j);
            }
        }
        if (tape) {
            tape->len = len;
            tape->layers.resize(layers_.size());
        }

        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& w = layers_[l];
            LayerTape<T>* lt = tape ? &tape->layers[l] : nullptr;
            LnStats<T> ln1_stats;
            Tensor<T> u = layer_norm(x, w.ln1_g, w.ln1_b, &ln1_stats);

            Tensor<T> q = matmul(u, w.wq);
            Tensor<T> k = matmul(u, w.wk);
            Tensor<T> v = matmul(u, w.wv);
            if (!av.q.empty() && av.q[l].present()) {
                Tensor<T> dq = apply_delta(u, av.q[l]);
                for (std::size_t i = 0; i < q.numel(); ++i) q[i] += dq[i];
            }
            if (!av.v.empty() && av.v[l].present()) {
                Tensor<T> dvt = apply_delta(u, av.v[l]);
                for (std::size_t i = 0; i < v.numel(); ++i) v[i] += dvt[i];
            }

            Tensor<T> attncat({len, dv});
            std::vector<Tensor<T>> attn_maps;
            for (std::size_t h = 0; h < h_count; ++h) {
                Tensor<T> qh = column_slice(q, h * hd, hd);
                Tensor<T> kh = column_slice(k, h * hd, hd);
                Tensor<T> vh = column_slice(v, h * vhd, vhd);
                Tensor<T> scores = matmul_nt(qh, kh); // [len x len]
                Tensor<T> probs({len, len});
                for (std::size_t i = 0; i < len; ++i) {
                    // causal: position i attends to 0..i
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j <= i; ++j) {
                        scores(i, j) *= scale;
                        mx = std::max(mx, scores(i, j));
                    }
                    T sum = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        probs(i, j) = std::exp(scores(i, j) - mx);
                        sum += probs(i, j);
                    }
                    for (std::size_t j = 0; j <= i; ++j) probs(i, j) /= sum;
                }
                Tensor<T> oh = matmul(probs, vh);
                column_scatter_add(attncat, oh, h * vhd);
                if (lt) attn_maps.push_back(std::move(probs));
            }
            Tensor<T> attn_out = matmul(attncat, w.wo);
            Tensor<T> x_mid = x;
            for (std::size_t i = 0; i < x_mid.numel(); ++i) x_mid[i] += attn_out[i];

            LnStats<T> ln2_stats;
            Tensor<T> z = layer_norm(x_mid, w.ln2_g, w.ln2_b, &ln2_stats);
            Tensor<T> f1 = matmul(z, w.w1);
            Tensor<T> act = f1;
            for (auto& vv : act.data()) vv = silu(vv);
            Tensor<T> f2 = matmul(act, w.w2);
            Tensor<T> x_out = x_mid;
            for (std::size_t i = 0; i < x_out.numel(); ++i) x_out[i] += f2[i];

            if (lt) {
                lt->x_in = std::move(x);
                lt->u = std::move(u);
                lt->q = std::move(q);
                lt->k = std::move(k);
                lt->v = std::move(v);
                lt->attn = std::move(attn_maps);
                lt->x_mid = std::move(x_mid);
                lt->z = std::move(z);
                lt->f1 = std::move(f1);
                lt->ln1 = std::move(ln1_stats);
                lt->ln2 = std::move(ln2_stats);
            }
            x = std::move(x_out);
        }

        LnStats<T> lnf_stats;
        Tensor<T> hfull = layer_norm(x, lnf_g_, lnf_b_, &lnf_stats);
        if (tape) {
            tape->x_final = std::move(x);
            tape->lnf = std::move(lnf_stats);
        }
        return hfull;
    }

    BaseOutput<T> forward_ref(const TokenBatch& tokens, const AdapterView& av,
                              std::vector<model_detail::SequenceTape<T>>* tapes) const {
        if (tokens.seq > cfg_.max_seq) {
            throw ShapeError("sequence length " + std::to_string(tokens.seq) +
                             " exceeds configured max " + std::to_string(cfg_.max_seq));
        }
        const std::size_t d = cfg_.d_model;
        BaseOutput<T> out;
        out.hidden = Tensor<T>({tokens.batch, d});
        if (tapes) {
            tapes->clear();
            tapes->resize(tokens.batch);
        }
        for (std::size_t b = 0; b < tokens.batch; ++b) {
            const std::size_t len = sequence_length(tokens, b);
            Tensor<T> hfull = forward_sequence(tokens.row(b), len, av,
                                               tapes ? &(*tapes)[b] : nullptr);
            // Pool the last non-padding token's state.
            for (std::size_t j = 0; j < d; ++j) out.hidden(b, j) = hfull(len - 1, j);
        }
        if (av.head_w) {
            out.logits = head_forward(out.hidden, *av.head_w, *av.head_b);
        }
        return out;
    }

    void backward_ref(const TokenBatch& tokens, const AdapterView& av,
                      const std::vector<model_detail::SequenceTape<T>>& tapes,
                      const Tensor<T>& dlogits, AdapterGrads<T>& grads) const {
        using namespace model_detail;
        if (tapes.size() != tokens.batch) {
            throw ShapeError("backward: tape count does not match batch");
        }
        const std::size_t d = cfg_.d_model, dv = cfg_.d_v, h_count = cfg_.n_heads;
        const std::size_t hd = d / h_count, vhd = dv / h_count;
        const T scale = T(1) / std::sqrt(T(hd));

        // d(hidden) = dlogits * head^T, one row per sample.
        Tensor<T> dhidden = matmul_nt(dlogits, *av.head_w);

        for (std::size_t b = 0; b < tokens.batch; ++b) {
            const SequenceTape<T>& tape = tapes[b];
            const std::size_t len = tape.len;

            Tensor<T> dhfull({len, d});
            for (std::size_t j = 0; j < d; ++j) dhfull(len - 1, j) = dhidden(b, j);
            Tensor<T> dx = layer_norm_backward(dhfull, tape.x_final, lnf_g_, tape.lnf);

            for (std::size_t l = layers_.size(); l-- > 0;) {
                const Layer& w = layers_[l];
                const LayerTape<T>& lt = tape.layers[l];

                // FFN block backward.
                Tensor<T> da = matmul_nt(dx, w.w2); // [len x dff]
                for (std::size_t i = 0; i < da.numel(); ++i) {
                    da[i] *= silu_grad(lt.f1[i]);
                }
                Tensor<T> dz = matmul_nt(da, w.w1);
                Tensor<T> dx_mid = layer_norm_backward(dz, lt.x_mid, w.ln2_g, lt.ln2);
                for (std::size_t i = 0; i < dx_mid.numel(); ++i) dx_mid[i] += dx[i];

                // Attention block backward.
                Tensor<T> dattncat = matmul_nt(dx_mid, w.wo); // [len x dv]
                Tensor<T> dq({len, d}), dk({len, d}), dvt({len, dv});
                for (std::size_t h = 0; h < h_count; ++h) {
                    Tensor<T> doh = column_slice(dattncat, h * vhd, vhd);
                    Tensor<T> vh = column_slice(lt.v, h * vhd, vhd);
                    Tensor<T> qh = column_slice(lt.q, h * hd, hd);
                    Tensor<T> kh = column_slice(lt.k, h * hd, hd);
                    const Tensor<T>& probs = lt.attn[h];
                    Tensor<T> dprobs = matmul_nt(doh, vh);    // [len x len]
                    Tensor<T> dvh = matmul_tn(probs, doh);    // [len x vhd]
                    // Softmax backward per causal row.
                    Tensor<T> dscores({len, len});
                    for (std::size_t i = 0; i < len; ++i) {
                        T dot = 0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            dot += dprobs(i, j) * probs(i, j);
                        }
                        for (std::size_t j = 0; j <= i; ++j) {
                            dscores(i, j) = probs(i, j) * (dprobs(i, j) - dot) * scale;
                        }
                    }
                    Tensor<T> dqh = matmul(dscores, kh);
                    Tensor<T> dkh = matmul_tn(dscores, qh);
                    column_scatter_add(dq, dqh, h * hd);
                    column_scatter_add(dk, dkh, h * hd);
                    column_scatter_add(dvt, dvh, h * vhd);
                }

                Tensor<T> du = matmul_nt(dq, w.wq);
                {
                    Tensor<T> duk = matmul_nt(dk, w.wk);
                    for (std::size_t i = 0; i < du.numel(); ++i) du[i] += duk[i];
                    Tensor<T> duv = matmul_nt(dvt, w.wv);
                    for (std::size_t i = 0; i < du.numel(); ++i) du[i] += duv[i];
                }
                accumulate_delta_grads(lt.u, dq, av.q.empty() ? DeltaRef<T>{} : av.q[l],
                                       grads.q_cores.empty() ? nullptr : &grads.q_cores[l],
                                       grads.q_a.empty() ? nullptr : &grads.q_a[l],
                                       grads.q_b.empty() ? nullptr : &grads.q_b[l], du);
                accumulate_delta_grads(lt.u, dvt, av.v.empty() ? DeltaRef<T>{} : av.v[l],
                                       grads.v_cores.empty() ? nullptr : &grads.v_cores[l],
                                       grads.v_a.empty() ? nullptr : &grads.v_a[l],
                                       grads.v_b.empty() ? nullptr : &grads.v_b[l], du);

                Tensor<T> dx_in = layer_norm_backward(du, lt.x_in, w.ln1_g, lt.ln1);
                for (std::size_t i = 0; i < dx_in.numel(); ++i) dx_in[i] += dx_mid[i];
                dx = std::move(dx_in);
            }
            // Gradients below the embedding are not needed (base frozen).
        }
    }

    // Routes d(projection output) into the delta's trainable tensors and adds
    // the delta's input-gradient contribution to du.
    void accumulate_delta_grads(const Tensor<T>& u, const Tensor<T>& dout,
                                const model_detail::DeltaRef<T>& ref,
                                std::vector<Tensor<T>>* tt_grads, Tensor<T>* a_grad,
                                Tensor<T>* b_grad, Tensor<T>& du) const {
        if (ref.tt && tt_grads) {
            TtBackwardResult<T> r = tt_contract_backward(u, *ref.tt, dout);
            for (std::size_t k = 0; k < r.core_grads.size(); ++k) {
                auto& dst = (*tt_grads)[k];
                for (std::size_t i = 0; i < dst.numel(); ++i) {
                    dst[i] += r.core_grads[k][i];
                }
            }
            for (std::size_t i = 0; i < du.numel(); ++i) du[i] += r.x_grad[i];
        } else if (ref.lora && a_grad && b_grad) {
            const LoraFactors<T>& f = *ref.lora;
            Tensor<T> t = matmul(u, f.a); // [len x r]
            Tensor<T> dt = matmul_nt(dout, f.b);
            for (auto& v : dt.data()) v *= f.alpha;
            Tensor<T> db = matmul_tn(t, dout);
            for (std::size_t i = 0; i < db.numel(); ++i) (*b_grad)[i] += f.alpha * db[i];
            Tensor<T> da = matmul_tn(u, dt);
            for (std::size_t i = 0; i < da.numel(); ++i) (*a_grad)[i] += da[i];
            Tensor<T> dxl = matmul_nt(dt, f.a); // dt carries alpha already
            for (std::size_t i = 0; i < du.numel(); ++i) du[i] += dxl[i];
        }
    }

    ToyConfig cfg_;
    Tensor<T> embed_, pos_;
    std::vector<Layer> layers_;
    Tensor<T> lnf_g_, lnf_b_;
};

// Builds a fresh expert: per-layer Q/V core chains (Gaussian with zero final
// core, so the initial delta is the zero map) plus a frozen uniformly
// initialized classification head, all derived from the expert's seed.
template <typename T>
ExpertAdapter<T> make_expert(const ToyConfig& cfg, std::uint32_t expert_id,
                             std::string task_name, std::size_t num_classes,
                             const TtShape& q_shape, const TtShape& v_shape, T alpha,
                             double init_std, std::uint64_t seed) {
    validate_shape(q_shape, cfg.d_model, cfg.d_model);
    validate_shape(v_shape, cfg.d_model, cfg.d_v);
    if (num_classes < 2) throw ConfigError("expert needs at least 2 classes");
    ExpertAdapter<T> a;
    a.expert_id = expert_id;
    a.task_name = std::move(task_name);
    a.num_classes = num_classes;
    a.config_hash = cfg.hash();
    a.seed = seed;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        a.q_cores.push_back(init_cores<T>(q_shape, hash_mix(seed, 2 * l), init_std, alpha));
        a.v_cores.push_back(
            init_cores<T>(v_shape, hash_mix(seed, 2 * l + 1), init_std, alpha));
    }
    const std::size_t d = cfg.d_model;
    a.head_w = Tensor<T>({d, num_classes});
    a.head_b = Tensor<T>({num_classes});
    Rng rng(hash_mix(seed, 0x6ea4ull));
    const double bound = 1.0 / std::sqrt(double(d));
    for (auto& v : a.head_w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : a.head_b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return a;
}

template <typename T>
LoraAdapter<T> make_lora_adapter(const ToyConfig& cfg, std::uint32_t expert_id,
                                 std::string task_name, std::size_t num_classes,
                                 std::size_t rank, T alpha, double init_std,
                                 std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("adapter needs at least 2 classes");
    LoraAdapter<T> a;
    a.expert_id = expert_id;
    a.task_name = std::move(task_name);
    a.num_classes = num_classes;
    a.config_hash = cfg.hash();
    a.seed = seed;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        a.q.push_back(init_lora<T>(cfg.d_model, cfg.d_model, rank, hash_mix(seed, 2 * l),
                                   init_std, alpha));
        a.v.push_back(init_lora<T>(cfg.d_model, cfg.d_v, rank, hash_mix(seed, 2 * l + 1),
                                   init_std, alpha));
    }
    const std::size_t d = cfg.d_model;
    a.head_w = Tensor<T>({d, num_classes});
    a.head_b = Tensor<T>({num_classes});
    Rng rng(hash_mix(seed, 0x6ea4ull));
    const double bound = 1.0 / std::sqrt(double(d));
    for (auto& v : a.head_w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : a.head_b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return a;
}

// Trainable parameter counts; the head and base are excluded.
template <typename T> std::size_t count_trainable(const ExpertAdapter<T>& a) {
    std::size_t n = 0;
    for (const auto& c : a.q_cores) n += c.param_count();
    for (const auto& c : a.v_cores) n += c.param_count();
    return n;
}

template <typename T> std::size_t count_trainable(const LoraAdapter<T>& a) {
    std::size_t n = 0;
    for (const auto& f : a.q) n += f.a.numel() + f.b.numel();
    for (const auto& f : a.v) n += f.a.numel() + f.b.numel();
    return n;
}

// Hash over an adapter's cores and head; used by the frozen-expert contract.
template <typename T> std::uint64_t adapter_hash(const ExpertAdapter<T>& a) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& chain : a.q_cores)
        for (const auto& c : chain.cores) h = fnv1a64(c.raw(), c.numel() * sizeof(T), h);
    for (const auto& chain : a.v_cores)
        for (const auto& c : chain.cores) h = fnv1a64(c.raw(), c.numel() * sizeof(T), h);
    h = fnv1a64(a.head_w.raw(), a.head_w.numel() * sizeof(T), h);
    h = fnv1a64(a.head_b.raw(), a.head_b.numel() * sizeof(T), h);
    return h;
}

} // namespace ttmoe
