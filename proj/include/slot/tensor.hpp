// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major matrices and the handful of kernels the decoder and the
// delta optimizer need. Every kernel accumulates in a fixed order, so equal
// inputs give bit-identical outputs within one build.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "slot/error.hpp"

namespace slot {

template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + shape_string(rows_, cols_));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        std::transform(data_.begin(), data_.end(), out.data().begin(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool operator==(const Matrix&) const = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

namespace detail {

template <typename A, typename B>
using accum_t = std::common_type_t<A, B>;

} // namespace detail

// Inner product with eight interleaved partial sums combined in a fixed tree.
template <typename A, typename B>
detail::accum_t<A, B> dot(std::span<const A> a, std::span<const B> b) {
    using Acc = detail::accum_t<A, B>;
    if (a.size() != b.size()) {
        throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    const std::size_t n = a.size();
    Acc lane[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) {
            lane[l] += static_cast<Acc>(a[i + l]) * static_cast<Acc>(b[i + l]);
        }
    }
    for (std::size_t l = 0; i < n; ++i, ++l) {
        lane[l] += static_cast<Acc>(a[i]) * static_cast<Acc>(b[i]);
    }
    return ((lane[0] + lane[4]) + (lane[2] + lane[6])) + ((lane[1] + lane[5]) + (lane[3] + lane[7]));
}

template <typename A, typename B>
    requires(!std::is_const_v<A> || !std::is_const_v<B>)
auto dot(std::span<A> a, std::span<B> b) {
    return dot(std::span<const std::remove_const_t<A>>(a), std::span<const std::remove_const_t<B>>(b));
}

template <typename A, typename B>
detail::accum_t<A, B> dot(const std::vector<A>& a, const std::vector<B>& b) {
    return dot(std::span<const A>(a), std::span<const B>(b));
}

// y += alpha * x
template <typename T, typename U>
void axpy(T alpha, std::span<const U> x, std::span<T> y) noexcept {
    const std::size_t n = y.size();
    for (std::size_t j = 0; j < n; ++j) y[j] += alpha * static_cast<T>(x[j]);
}

// C = A * B, accumulating over the inner index in order k = 0..K-1.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape() + " x " + b.shape());
    }
    Matrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            axpy<T, T>(a(i, k), b.row(k), out);
        }
    }
    return c;
}

// C = A * B^T with B stored row-major as [n x k]. Each entry is one dot().
// B may have a narrower element type; it is widened before multiplying.
template <typename A, typename B>
Matrix<detail::accum_t<A, B>> matmul_transposed(const Matrix<A>& a, const Matrix<B>& b) {
    using Acc = detail::accum_t<A, B>;
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_transposed: inner dimensions disagree, " + a.shape() + " x " +
                         b.shape() + "^T");
    }
    Matrix<Acc> c(a.rows(), b.rows());
    const std::size_t k = b.cols();
    const std::size_t n = b.rows();
    constexpr std::size_t J = 4;
    std::vector<Acc> widened(J * k);
    std::size_t j = 0;
    // J rows of b are widened together and every row of a is dotted with all of
    // them at once; each entry still follows dot()'s exact summation order.
    for (; j + J <= n; j += J) {
        for (std::size_t t = 0; t < J; ++t) {
            auto src = b.row(j + t);
            std::transform(src.begin(), src.end(), widened.begin() + static_cast<std::ptrdiff_t>(t * k),
                           [](B v) { return static_cast<Acc>(v); });
        }
        const Acc* w = widened.data();
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const A* x = a.row(i).data();
            Acc lane[J][8] = {};
            std::size_t p = 0;
            for (; p + 8 <= k; p += 8) {
                for (std::size_t l = 0; l < 8; ++l) {
                    const Acc xv = static_cast<Acc>(x[p + l]);
                    for (std::size_t t = 0; t < J; ++t) lane[t][l] += xv * w[t * k + p + l];
                }
            }
            for (std::size_t l = 0; p < k; ++p, ++l) {
                const Acc xv = static_cast<Acc>(x[p]);
                for (std::size_t t = 0; t < J; ++t) lane[t][l] += xv * w[t * k + p];
            }
            for (std::size_t t = 0; t < J; ++t) {
                const Acc* v = lane[t];
                c(i, j + t) = ((v[0] + v[4]) + (v[2] + v[6])) + ((v[1] + v[5]) + (v[3] + v[7]));
            }
        }
    }
    for (; j < n; ++j) {
        auto src = b.row(j);
        std::transform(src.begin(), src.end(), widened.begin(), [](B v) { return static_cast<Acc>(v); });
        std::span<const Acc> bj(widened.data(), k);
        for (std::size_t i = 0; i < a.rows(); ++i) c(i, j) = dot(a.row(i), bj);
    }
    return c;
}

// y = W^T x for W stored [rows x cols]; returns a length-cols vector.
// Accumulates over rows in order, so it is the exact adjoint loop of dot().
template <typename A, typename B>
std::vector<detail::accum_t<A, B>> transposed_matvec(const Matrix<A>& w, std::span<const B> x) {
    using Acc = detail::accum_t<A, B>;
    if (w.rows() != x.size()) {
        throw ShapeError("transposed_matvec: " + w.shape() + "^T with vector of length " +
                         std::to_string(x.size()));
    }
    std::vector<Acc> y(w.cols(), Acc{0});
    for (std::size_t r = 0; r < w.rows(); ++r) {
        if (x[r] == B{0}) continue;
        axpy<Acc, A>(static_cast<Acc>(x[r]), w.row(r), std::span<Acc>(y));
    }
    return y;
}

// Numerically stable softmax of one row, in place.
template <typename T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) return;
    const T peak = *std::max_element(row.begin(), row.end());
    T total{0};
    for (auto& v : row) {
        v = std::exp(v - peak);
        total += v;
    }
    for (auto& v : row) v /= total;
}

template <typename T>
Matrix<T> row_softmax(const Matrix<T>& logits) {
    Matrix<T> out = logits;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

// log(sum(exp(row))) with the max shifted out.
template <typename T>
T log_sum_exp(std::span<const T> row) {
    const T peak = *std::max_element(row.begin(), row.end());
    T total{0};
    for (T v : row) total += std::exp(v - peak);
    return peak + std::log(total);
}

// Per-row (x - mean) / sqrt(var + eps) * gain + bias with a biased two-pass variance.
template <typename T>
void layer_norm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                    T eps, std::span<T> out) {
    const std::size_t n = x.size();
    T mean{0};
    for (T v : x) mean += v;
    mean /= static_cast<T>(n);
    T var{0};
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<T>(n);
    const T inv = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, std::span<const T> gain, std::span<const T> bias, T eps) {
    if (gain.size() != x.cols() || bias.size() != x.cols()) {
        throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                         std::to_string(bias.size()) + " for input " + x.shape());
    }
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) layer_norm_row(x.row(r), gain, bias, eps, out.row(r));
    return out;
}

// tanh approximation used by GPT-2 checkpoints.
template <typename T>
T gelu(T x) noexcept {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
    Matrix<T> out = x;
    for (auto& v : out.data()) v = gelu(v);
    return out;
}

// Index of the largest element; ties go to the lowest index.
template <typename T>
std::size_t argmax_row(std::span<const T> row) {
    if (row.empty()) throw ShapeError("argmax_row: empty row");
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

template <typename T>
std::size_t argmax_row(const std::vector<T>& row) {
    return argmax_row(std::span<const T>(row));
}

// Indices of the k largest values, descending; equal values ranked by lower index first.
template <typename T>
std::vector<std::size_t> top_k(std::span<const T> values, std::size_t k) {
    if (k < 1 || k > values.size()) {
        throw ConfigError("top_k: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(values.size()) + "]");
    }
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
    return idx;
}

template <typename T>
std::vector<std::size_t> top_k(const std::vector<T>& values, std::size_t k) {
    return top_k(std::span<const T>(values), k);
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

} // namespace slot
