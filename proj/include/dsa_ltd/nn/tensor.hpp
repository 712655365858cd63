#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dsa_ltd::nn {

/// NCHW activation tensor.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T{})
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * static_cast<std::size_t>(c_) *
                   static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_),
               fill) {}

    std::size_t plane() const noexcept {
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * plane(); }
    std::size_t size() const noexcept { return data.size(); }

    T* sample(int i) noexcept { return data.data() + static_cast<std::size_t>(i) * sample_size(); }
    const T* sample(int i) const noexcept {
        return data.data() + static_cast<std::size_t>(i) * sample_size();
    }
    T* channel(int i, int ch) noexcept { return sample(i) + static_cast<std::size_t>(ch) * plane(); }
    const T* channel(int i, int ch) const noexcept {
        return sample(i) + static_cast<std::size_t>(ch) * plane();
    }

    bool same_shape(const Tensor& o) const noexcept {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_string() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }
};

/// Concatenates along channels; all parts share n, h, w.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const auto& first = *parts.front();
    int channels = 0;
    for (const auto* p : parts) {
        if (p->n != first.n || p->h != first.h || p->w != first.w)
            throw std::invalid_argument("concat_channels: shape mismatch " + p->shape_string() +
                                        " vs " + first.shape_string());
        channels += p->c;
    }
    Tensor<T> out(first.n, channels, first.h, first.w);
    for (int i = 0; i < first.n; ++i) {
        T* dst = out.sample(i);
        for (const auto* p : parts) {
            std::copy_n(p->sample(i), p->sample_size(), dst);
            dst += p->sample_size();
        }
    }
    return out;
}

/// Copies channels [first, first+count) of every sample.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int first, int count) {
    if (first < 0 || count < 0 || first + count > x.c)
        throw std::invalid_argument("slice_channels: range outside tensor");
    Tensor<T> out(x.n, count, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        std::copy_n(x.channel(i, first), out.sample_size(), out.sample(i));
    return out;
}

/// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Stride = Eigen::OuterStride<>;
    using ConstMap = Eigen::Map<const Matrix, 0, Stride>;
    Eigen::Map<Matrix, 0, Stride> out(c, m, n, Stride(ldc));
    if (beta == T(0))
        out.setZero();
    else if (beta != T(1))
        out *= beta;
    const ConstMap lhs(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
    const ConstMap rhs(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
    if (!trans_a && !trans_b)
        out.noalias() += alpha * lhs * rhs;
    else if (!trans_a)
        out.noalias() += alpha * lhs * rhs.transpose();
    else if (!trans_b)
        out.noalias() += alpha * lhs.transpose() * rhs;
    else
        out.noalias() += alpha * lhs.transpose() * rhs.transpose();
}

}  // namespace dsa_ltd::nn
