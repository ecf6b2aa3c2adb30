// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ttmoe/common.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace ttmoe {

// Dense row-major tensor (last axis varies fastest). Values are immutable by
// convention once a structure is frozen; the class itself is a plain value
// type and may be freely copied or moved.
template <typename T> class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* raw() { return data_.data(); }
    const T* raw() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    // Reinterprets the layout; the element count must be preserved.
    void reshape(std::vector<std::size_t> shape) {
        if (checked_numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " (" +
                             std::to_string(data_.size()) + " elements) to " +
                             shape_string(shape));
        }
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_str() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << "x";
            os << s[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        // A zero extent yields zero elements; allowed (e.g. batch 0).
        for (std::size_t d : shape) n *= d;
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {
template <typename T>
inline void require_matrix(const Tensor<T>& t, const char* name) {
    if (t.ndim() != 2) {
        throw ShapeError(std::string(name) + " must be 2-D, got " + t.shape_str());
    }
}
} // namespace detail

// C[B,n] = A[B,m] * B[m,n]. Contraction over the shared axis.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul lhs");
    detail::require_matrix(b, "matmul rhs");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dimensions differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
    Tensor<T> c({p, r});
    const T* ad = a.raw();
    const T* bd = b.raw();
    T* cd = c.raw();
    for (std::size_t i = 0; i < p; ++i) {
        T* crow = cd + i * r;
        for (std::size_t k = 0; k < q; ++k) {
            const T aik = ad[i * q + k];
            if (aik == T(0)) continue;
            const T* brow = bd + k * r;
            for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// C[p,r] = A[p,q] * B[r,q]^T. Contiguous dot products over q.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_nt lhs");
    detail::require_matrix(b, "matmul_nt rhs");
    if (a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt inner dimensions differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(0);
    Tensor<T> c({p, r});
    for (std::size_t i = 0; i < p; ++i) {
        const T* arow = a.raw() + i * q;
        for (std::size_t j = 0; j < r; ++j) {
            const T* brow = b.raw() + j * q;
            T acc = 0;
            for (std::size_t k = 0; k < q; ++k) acc += arow[k] * brow[k];
            c(i, j) = acc;
        }
    }
    return c;
}

// C[p,r] = A[q,p]^T * B[q,r]. Rank-1 accumulation per shared row.
template <typename T> Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_tn lhs");
    detail::require_matrix(b, "matmul_tn rhs");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("matmul_tn inner dimensions differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    const std::size_t q = a.dim(0), p = a.dim(1), r = b.dim(1);
    Tensor<T> c({p, r});
    for (std::size_t k = 0; k < q; ++k) {
        const T* arow = a.raw() + k * p;
        const T* brow = b.raw() + k * r;
        for (std::size_t i = 0; i < p; ++i) {
            const T aki = arow[i];
            if (aki == T(0)) continue;
            T* crow = c.raw() + i * r;
            for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

// Stable softmax over a span (max-subtraction). -inf entries map to exactly 0;
// all entries -inf is rejected.
template <typename T> void softmax_inplace(std::span<T> v) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T x : v) mx = std::max(mx, x);
    if (!(mx > -std::numeric_limits<T>::infinity())) {
        throw InvalidInputError("softmax: all entries are -inf");
    }
    T sum = 0;
    for (T& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (T& x : v) x /= sum;
}

template <typename T> Tensor<T> softmax(const Tensor<T>& v) {
    if (v.ndim() != 1) {
        throw ShapeError("softmax expects a 1-D tensor, got " + v.shape_str());
    }
    Tensor<T> out = v;
    softmax_inplace(out.data());
    return out;
}

// Row-wise softmax of a [B,N] tensor.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& m) {
    detail::require_matrix(m, "softmax_rows input");
    Tensor<T> out = m;
    const std::size_t n = m.dim(1);
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        softmax_inplace(std::span<T>(out.raw() + i * n, n));
    }
    return out;
}

// log(1 + exp(x)), overflow-safe: for x > 30 the identity branch is exact to
// float precision.
template <typename T> T softplus(T x) {
    if (x > T(30)) return x;
    return std::log1p(std::exp(x));
}

template <typename T> Tensor<T> softplus(const Tensor<T>& t) {
    Tensor<T> out = t;
    for (auto& v : out.data()) v = softplus(v);
    return out;
}

template <typename T> struct CrossEntropyResult {
    T loss;         // mean over the batch of -log softmax(logits)[label]
    Tensor<T> grad; // (softmax - one_hot) / B
};

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits,
                                    std::span<const std::size_t> labels) {
    detail::require_matrix(logits, "cross_entropy logits");
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
    }
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= c) {
            throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                             " out of range [0," + std::to_string(c) + ")");
        }
    }
    Tensor<T> grad({b, c});
    T loss = 0;
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = logits.raw() + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const T log_z = mx + std::log(sum);
        loss += log_z - row[labels[i]];
        for (std::size_t j = 0; j < c; ++j) {
            grad(i, j) = std::exp(row[j] - log_z) / T(b);
        }
        grad(i, labels[i]) -= T(1) / T(b);
    }
    return {loss / T(b), std::move(grad)};
}

} // namespace ttmoe
