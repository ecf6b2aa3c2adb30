// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/rng.hpp"
#include "ttmoe/tensor.hpp"

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace ttmoe {

// Factorization metadata for a [d_in x d_out] matrix: d_in = prod(input_factors),
// d_out = prod(output_factors), bond ranks [1, r, ..., r, 1].
struct TtShape {
    std::vector<std::size_t> input_factors;
    std::vector<std::size_t> output_factors;
    std::size_t rank = 1;

    std::size_t d_in() const {
        return std::accumulate(input_factors.begin(), input_factors.end(), std::size_t(1),
                               std::multiplies<>());
    }
    std::size_t d_out() const {
        return std::accumulate(output_factors.begin(), output_factors.end(), std::size_t(1),
                               std::multiplies<>());
    }
    std::size_t num_cores() const { return input_factors.size() + output_factors.size(); }

    // factorDim_k for core k (0-based): m_1..m_p then n_1..n_q.
    std::size_t factor_dim(std::size_t k) const {
        const std::size_t p = input_factors.size();
        return k < p ? input_factors[k] : output_factors[k - p];
    }

    // [1, r, r, ..., r, 1] of length p+q+1.
    std::vector<std::size_t> bond_ranks() const {
        std::vector<std::size_t> r(num_cores() + 1, rank);
        r.front() = 1;
        r.back() = 1;
        return r;
    }

    bool operator==(const TtShape&) const = default;
};

// Accepts iff the factor products match the layer dims and the factor
// constraints hold (p,q >= 1, all factors >= 2, rank >= 1).
inline void validate_shape(const TtShape& shape, std::size_t d_in, std::size_t d_out) {
    if (shape.input_factors.empty() || shape.output_factors.empty()) {
        throw ShapeError("tt shape needs at least one input and one output factor");
    }
    if (shape.rank < 1) {
        throw ShapeError("tt rank must be >= 1");
    }
    for (std::size_t f : shape.input_factors) {
        if (f < 2) throw ShapeError("tt input factor " + std::to_string(f) + " < 2");
    }
    for (std::size_t f : shape.output_factors) {
        if (f < 2) throw ShapeError("tt output factor " + std::to_string(f) + " < 2");
    }
    if (shape.d_in() != d_in) {
        throw ShapeError("tt input factor product " + std::to_string(shape.d_in()) +
                         " != expected d_in " + std::to_string(d_in));
    }
    if (shape.d_out() != d_out) {
        throw ShapeError("tt output factor product " + std::to_string(shape.d_out()) +
                         " != expected d_out " + std::to_string(d_out));
    }
}

// Chain of p+q 3-way cores, core k of shape [r_{k-1}, factorDim_k, r_k], plus
// the LoRA-style scaling alpha applied by the forward pass.
template <typename T> struct TtCores {
    TtShape shape;
    std::vector<Tensor<T>> cores;
    T alpha = 1;

    void validate() const {
        const auto ranks = shape.bond_ranks();
        if (cores.size() != shape.num_cores()) {
            throw ShapeError("tt core count " + std::to_string(cores.size()) +
                             " != expected " + std::to_string(shape.num_cores()));
        }
        for (std::size_t k = 0; k < cores.size(); ++k) {
            const std::vector<std::size_t> want{ranks[k], shape.factor_dim(k), ranks[k + 1]};
            if (cores[k].shape() != want) {
                throw ShapeError("tt core " + std::to_string(k) + " has shape " +
                                 cores[k].shape_str() + ", expected " +
                                 Tensor<T>::shape_string(want));
            }
        }
        if (!(alpha > T(0))) {
            throw ShapeError("tt alpha must be positive");
        }
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& c : cores) n += c.numel();
        return n;
    }
};

// Sum over cores of r_{k-1} * factorDim_k * r_k.
inline std::size_t tt_param_count(const TtShape& shape) {
    const auto ranks = shape.bond_ranks();
    std::size_t n = 0;
    for (std::size_t k = 0; k < shape.num_cores(); ++k) {
        n += ranks[k] * shape.factor_dim(k) * ranks[k + 1];
    }
    return n;
}

// r*d_in + d_out*r trainable parameters for a rank-r LoRA pair.
inline std::size_t lora_param_count(std::size_t d_in, std::size_t d_out, std::size_t rank) {
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    return rank * d_in + d_out * rank;
}

// Gaussian(0, std^2) cores with the final core zeroed, so the initial TT delta
// is exactly the zero map (the base model is unmodified at the start of
// training). Deterministic given the seed.
template <typename T>
TtCores<T> init_cores(const TtShape& shape, std::uint64_t seed, double std_dev,
                      T alpha = T(1)) {
    validate_shape(shape, shape.d_in(), shape.d_out());
    const auto ranks = shape.bond_ranks();
    TtCores<T> out;
    out.shape = shape;
    out.alpha = alpha;
    Rng rng(seed);
    for (std::size_t k = 0; k < shape.num_cores(); ++k) {
        Tensor<T> core({ranks[k], shape.factor_dim(k), ranks[k + 1]});
        if (k + 1 < shape.num_cores()) {
            for (auto& v : core.data()) v = static_cast<T>(rng.normal() * std_dev);
        }
        out.cores.push_back(std::move(core));
    }
    out.validate();
    return out;
}

namespace tt_detail {

// One input-factor contraction: in [B, r_prev*m, rest] -> out [B, r_next, rest],
// out(b,c,t) = sum_{a,i} in(b,(a,i),t) * g((a,i),c) with g row-major
// [r_prev, m, r_next] so the (a,i) pair fuses into one axis.
template <typename T>
Tensor<T> contract_input_step(const Tensor<T>& in, std::size_t batch, std::size_t fused,
                              std::size_t rest, std::size_t r_next, const Tensor<T>& g) {
    Tensor<T> out({batch, r_next * rest});
    const T* gd = g.raw();
    for (std::size_t b = 0; b < batch; ++b) {
        const T* ib = in.raw() + b * fused * rest;
        T* ob = out.raw() + b * r_next * rest;
        for (std::size_t f = 0; f < fused; ++f) {
            const T* irow = ib + f * rest;
            for (std::size_t c = 0; c < r_next; ++c) {
                const T w = gd[f * r_next + c];
                if (w == T(0)) continue;
                T* orow = ob + c * rest;
                for (std::size_t t = 0; t < rest; ++t) orow[t] += w * irow[t];
            }
        }
    }
    return out;
}

// One output-factor append: in [B, r_prev, J] -> out [B, r_next, J*n],
// out(b,c,(u,j)) = sum_a in(b,a,u) * g(a,j,c).
template <typename T>
Tensor<T> append_output_step(const Tensor<T>& in, std::size_t batch, std::size_t r_prev,
                             std::size_t j_prev, std::size_t n, std::size_t r_next,
                             const Tensor<T>& g) {
    Tensor<T> out({batch, r_next * j_prev * n});
    for (std::size_t b = 0; b < batch; ++b) {
        const T* ib = in.raw() + b * r_prev * j_prev;
        T* ob = out.raw() + b * r_next * j_prev * n;
        for (std::size_t a = 0; a < r_prev; ++a) {
            const T* irow = ib + a * j_prev;
            for (std::size_t c = 0; c < r_next; ++c) {
                T* oplane = ob + c * j_prev * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const T w = g(a, j, c);
                    if (w == T(0)) continue;
                    for (std::size_t u = 0; u < j_prev; ++u) {
                        oplane[u * n + j] += w * irow[u];
                    }
                }
            }
        }
    }
    return out;
}

// Runs the full contraction, optionally collecting every intermediate state
// S^(0)..S^(p+q) (needed by the backward pass). States are stored flattened as
// [B, length] with the structured layout documented per step.
template <typename T>
std::vector<Tensor<T>> contract_states(const Tensor<T>& x, const TtCores<T>& tt,
                                       bool keep_all) {
    const auto& sh = tt.shape;
    const auto ranks = sh.bond_ranks();
    const std::size_t batch = x.dim(0);
    const std::size_t p = sh.input_factors.size();
    const std::size_t q = sh.output_factors.size();

    std::vector<Tensor<T>> states;
    Tensor<T> state = x; // S^(0): [B, m_1*...*m_p] seen as [B, 1*m_1, rest]
    if (keep_all) states.push_back(state);

    std::size_t rest = sh.d_in();
    for (std::size_t k = 0; k < p; ++k) {
        const std::size_t m = sh.input_factors[k];
        rest /= m;
        state = contract_input_step(state, batch, ranks[k] * m, rest, ranks[k + 1],
                                    tt.cores[k]);
        if (keep_all) states.push_back(state);
    }
    // S^(p): [B, r_p]
    std::size_t j_prev = 1;
    for (std::size_t i = 0; i < q; ++i) {
        const std::size_t n = sh.output_factors[i];
        state = append_output_step(state, batch, ranks[p + i], j_prev, n, ranks[p + i + 1],
                                   tt.cores[p + i]);
        j_prev *= n;
        if (keep_all) states.push_back(state);
    }
    if (!keep_all) states.push_back(std::move(state));
    return states;
}

} // namespace tt_detail

// The contraction forward pass: reshape each input row into [m_1..m_p],
// contract it through the input cores into [B, r_p], append the output factors
// through the remaining cores, flatten and scale by alpha. No [d_in x d_out]
// matrix is ever materialized. Equals alpha * x * tt_reconstruct(cores).
template <typename T>
Tensor<T> tt_contract_forward(const Tensor<T>& x, const TtCores<T>& tt) {
    detail::require_matrix(x, "tt_contract_forward input");
    tt.validate();
    if (x.dim(1) != tt.shape.d_in()) {
        throw ShapeError("tt_contract_forward: input " + x.shape_str() +
                         " does not match d_in " + std::to_string(tt.shape.d_in()));
    }
    auto states = tt_detail::contract_states(x, tt, false);
    Tensor<T> out = std::move(states.back());
    out.reshape({x.dim(0), tt.shape.d_out()});
    for (auto& v : out.data()) v *= tt.alpha;
    return out;
}

template <typename T> struct TtBackwardResult {
    std::vector<Tensor<T>> core_grads; // same shapes as the cores
    Tensor<T> x_grad;                  // [B, d_in]
};

// Jacobian-transpose products of the forward map (alpha included). The map is
// multilinear in each core, so each core's gradient is itself a contraction of
// the input, the remaining cores and the upstream gradient; here that is
// realized by re-running the forward to recover the intermediate states and
// walking the two contraction phases in reverse.
template <typename T>
TtBackwardResult<T> tt_contract_backward(const Tensor<T>& x, const TtCores<T>& tt,
                                         const Tensor<T>& upstream) {
    detail::require_matrix(x, "tt_contract_backward input");
    detail::require_matrix(upstream, "tt_contract_backward upstream");
    tt.validate();
    const auto& sh = tt.shape;
    if (x.dim(1) != sh.d_in()) {
        throw ShapeError("tt_contract_backward: input " + x.shape_str() +
                         " does not match d_in " + std::to_string(sh.d_in()));
    }
    if (upstream.dim(0) != x.dim(0) || upstream.dim(1) != sh.d_out()) {
        throw ShapeError("tt_contract_backward: upstream " + upstream.shape_str() +
                         " does not match [" + std::to_string(x.dim(0)) + "x" +
                         std::to_string(sh.d_out()) + "]");
    }

    const auto ranks = sh.bond_ranks();
    const std::size_t batch = x.dim(0);
    const std::size_t p = sh.input_factors.size();
    const std::size_t q = sh.output_factors.size();
    const auto states = tt_detail::contract_states(x, tt, true);

    TtBackwardResult<T> res;
    res.core_grads.reserve(p + q);
    for (const auto& c : tt.cores) res.core_grads.push_back(Tensor<T>(c.shape()));

    // d(state p+q) = alpha * upstream.
    Tensor<T> dstate = upstream;
    for (auto& v : dstate.data()) v *= tt.alpha;

    // Output phase in reverse.
    std::size_t j_prev_total = sh.d_out();
    for (std::size_t ii = q; ii-- > 0;) {
        const std::size_t k = p + ii;
        const std::size_t n = sh.output_factors[ii];
        const std::size_t r_prev = ranks[k], r_next = ranks[k + 1];
        const std::size_t j_prev = j_prev_total / n;
        j_prev_total = j_prev;
        const Tensor<T>& in = states[k]; // [B, r_prev*j_prev]
        const Tensor<T>& g = tt.cores[k];
        Tensor<T>& dg = res.core_grads[k];
        Tensor<T> din({batch, r_prev * j_prev});
        for (std::size_t b = 0; b < batch; ++b) {
            const T* ib = in.raw() + b * r_prev * j_prev;
            const T* dob = dstate.raw() + b * r_next * j_prev * n;
            T* dib = din.raw() + b * r_prev * j_prev;
            for (std::size_t a = 0; a < r_prev; ++a) {
                for (std::size_t c = 0; c < r_next; ++c) {
                    const T* doplane = dob + c * j_prev * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T w = g(a, j, c);
                        T acc = 0;
                        for (std::size_t u = 0; u < j_prev; ++u) {
                            const T d = doplane[u * n + j];
                            acc += d * ib[a * j_prev + u];
                            dib[a * j_prev + u] += w * d;
                        }
                        dg(a, j, c) += acc;
                    }
                }
            }
        }
        dstate = std::move(din);
    }

    // Input phase in reverse.
    std::size_t rest = 1;
    for (std::size_t k = p; k-- > 0;) {
        const std::size_t m = sh.input_factors[k];
        const std::size_t fused = ranks[k] * m;
        const std::size_t r_next = ranks[k + 1];
        const Tensor<T>& in = states[k]; // [B, fused*rest]
        const Tensor<T>& g = tt.cores[k];
        Tensor<T>& dg = res.core_grads[k];
        Tensor<T> din({batch, fused * rest});
        const T* gd = g.raw();
        T* dgd = dg.raw();
        for (std::size_t b = 0; b < batch; ++b) {
            const T* ib = in.raw() + b * fused * rest;
            const T* dob = dstate.raw() + b * r_next * rest;
            T* dib = din.raw() + b * fused * rest;
            for (std::size_t f = 0; f < fused; ++f) {
                const T* irow = ib + f * rest;
                T* dirow = dib + f * rest;
                for (std::size_t c = 0; c < r_next; ++c) {
                    const T w = gd[f * r_next + c];
                    const T* dorow = dob + c * rest;
                    T acc = 0;
                    for (std::size_t t = 0; t < rest; ++t) {
                        acc += irow[t] * dorow[t];
                        dirow[t] += w * dorow[t];
                    }
                    dgd[f * r_next + c] += acc;
                }
            }
        }
        dstate = std::move(din);
        rest *= m;
    }

    dstate.reshape({batch, sh.d_in()});
    res.x_grad = std::move(dstate);
    return res;
}

// Full contraction of the core chain into a [d_in x d_out] matrix, axis order
// consistent with tt_contract_forward so that forward(x) == alpha * x * W.
// Alpha is excluded; callers apply it.
template <typename T> Tensor<T> tt_reconstruct(const TtCores<T>& tt) {
    tt.validate();
    const auto& sh = tt.shape;
    const auto ranks = sh.bond_ranks();
    // Accumulate M[prefix, r_k]; appending core k multiplies by its
    // [r_{k-1}, f_k*r_k] matricization and folds f_k into the prefix.
    Tensor<T> m = Tensor<T>::full({1, 1}, T(1));
    for (std::size_t k = 0; k < sh.num_cores(); ++k) {
        const std::size_t f = sh.factor_dim(k);
        Tensor<T> core_mat = tt.cores[k];
        core_mat.reshape({ranks[k], f * ranks[k + 1]});
        Tensor<T> next = matmul(m, core_mat);
        next.reshape({m.dim(0) * f, ranks[k + 1]});
        m = std::move(next);
    }
    m.reshape({sh.d_in(), sh.d_out()});
    return m;
}

} // namespace ttmoe
