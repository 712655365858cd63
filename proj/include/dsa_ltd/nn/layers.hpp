#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dsa_ltd/nn/tensor.hpp"

namespace dsa_ltd::nn {

/// Trainable array with its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    std::vector<T> value;
    std::vector<T> grad;

    Param() = default;
    Param(std::string n, std::size_t size) : name(std::move(n)), value(size, T{}), grad(size, T{}) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

/// Named non-trainable state (batch-norm running statistics).
template <typename T>
struct Buffer {
    std::string name;
    std::vector<T> value;
};

template <typename T>
void he_normal(std::vector<T>& w, int fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : w) v = static_cast<T>(dist(rng));
}

/// Square convolution with stride 1 and "same" zero padding (kernel 1 or 3).
template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, int in, int out, int kernel)
        : in_(in), out_(out), k_(kernel),
          weight_(name + ".weight", static_cast<std::size_t>(out) * static_cast<std::size_t>(in * kernel * kernel)),
          bias_(name + ".bias", static_cast<std::size_t>(out)) {
        if (kernel != 1 && kernel != 3) throw std::invalid_argument("Conv2d: kernel must be 1 or 3");
    }

    int in_channels() const noexcept { return in_; }
    int out_channels() const noexcept { return out_; }

    void init(std::mt19937_64& rng) {
        he_normal(weight_.value, in_ * k_ * k_, rng);
        std::fill(bias_.value.begin(), bias_.value.end(), T{});
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        check_input(x);
        Tensor<T> y(x.n, out_, x.h, x.w);
        const int hw = x.h * x.w;
        const int kdim = in_ * k_ * k_;
        std::vector<T> col;
        for (int i = 0; i < x.n; ++i) {
            const T* src = columns(x, i, col);
            T* dst = y.sample(i);
            for (int o = 0; o < out_; ++o)
                std::fill_n(dst + static_cast<std::size_t>(o) * static_cast<std::size_t>(hw), hw,
                            bias_.value[static_cast<std::size_t>(o)]);
            gemm(false, false, out_, hw, kdim, T(1), weight_.value.data(), kdim, src, hw, T(1), dst, hw);
        }
        return y;
    }

    /// Accumulates parameter gradients; fills `dx` when non-null.
    void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
        const int hw = x.h * x.w;
        const int kdim = in_ * k_ * k_;
        std::vector<T> col, dcol;
        if (dx) *dx = Tensor<T>(x.n, in_, x.h, x.w);
        for (int i = 0; i < x.n; ++i) {
            const T* src = columns(x, i, col);
            const T* g = dy.sample(i);
            gemm(false, true, out_, kdim, hw, T(1), g, hw, src, hw, T(1), weight_.grad.data(), kdim);
            for (int o = 0; o < out_; ++o) {
                const T* row = g + static_cast<std::size_t>(o) * static_cast<std::size_t>(hw);
                T s{};
                for (int p = 0; p < hw; ++p) s += row[p];
                bias_.grad[static_cast<std::size_t>(o)] += s;
            }
            if (!dx) continue;
            if (k_ == 1) {
                gemm(true, false, kdim, hw, out_, T(1), weight_.value.data(), kdim, g, hw, T(0),
                     dx->sample(i), hw);
            } else {
                dcol.assign(static_cast<std::size_t>(kdim) * static_cast<std::size_t>(hw), T{});
                gemm(true, false, kdim, hw, out_, T(1), weight_.value.data(), kdim, g, hw, T(0),
                     dcol.data(), hw);
                col2im(dcol.data(), x.h, x.w, dx->sample(i));
            }
        }
    }

    Param<T>& weight() noexcept { return weight_; }
    Param<T>& bias() noexcept { return bias_; }
    const Param<T>& weight() const noexcept { return weight_; }
    const Param<T>& bias() const noexcept { return bias_; }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    void check_input(const Tensor<T>& x) const {
        if (x.c != in_)
            throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) +
                                        " input channels, got " + std::to_string(x.c));
    }

    const T* columns(const Tensor<T>& x, int i, std::vector<T>& col) const {
        if (k_ == 1) return x.sample(i);
        im2col(x.sample(i), x.h, x.w, col);
        return col.data();
    }

    void im2col(const T* src, int h, int w, std::vector<T>& col) const {
        const auto hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
        col.assign(static_cast<std::size_t>(in_) * 9 * hw, T{});
        for (int ci = 0; ci < in_; ++ci) {
            const T* plane = src + static_cast<std::size_t>(ci) * hw;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    T* row = col.data() + (static_cast<std::size_t>(ci) * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                    const int dy = ky - 1, dx = kx - 1;
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y)
                        std::copy(plane + (y + dy) * w + x0 + dx, plane + (y + dy) * w + x1 + dx,
                                  row + y * w + x0);
                }
            }
        }
    }

    void col2im(const T* col, int h, int w, T* dst) const {
        const auto hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
        for (int ci = 0; ci < in_; ++ci) {
            T* plane = dst + static_cast<std::size_t>(ci) * hw;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const T* row = col + (static_cast<std::size_t>(ci) * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                    const int dy = ky - 1, dx = kx - 1;
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
                        T* out = plane + (y + dy) * w + dx;
                        const T* in = row + y * w;
                        for (int xx = x0; xx < x1; ++xx) out[xx] += in[xx];
                    }
                }
            }
        }
    }

    int in_ = 0, out_ = 0, k_ = 3;
    Param<T> weight_;  // [out][in*k*k]
    Param<T> bias_;
};

/// 2x2 stride-2 transposed convolution (doubles spatial size).
template <typename T>
class UpConv2x2 {
public:
    UpConv2x2() = default;
    UpConv2x2(const std::string& name, int in, int out)
        : in_(in), out_(out),
          weight_(name + ".weight", static_cast<std::size_t>(out) * 4 * static_cast<std::size_t>(in)),
          bias_(name + ".bias", static_cast<std::size_t>(out)) {}

    void init(std::mt19937_64& rng) {
        he_normal(weight_.value, in_, rng);
        std::fill(bias_.value.begin(), bias_.value.end(), T{});
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.c != in_) throw std::invalid_argument(weight_.name + ": channel mismatch");
        const int hw = x.h * x.w;
        Tensor<T> y(x.n, out_, x.h * 2, x.w * 2);
        std::vector<T> ycol(static_cast<std::size_t>(out_) * 4 * static_cast<std::size_t>(hw));
        for (int i = 0; i < x.n; ++i) {
            gemm(false, false, out_ * 4, hw, in_, T(1), weight_.value.data(), in_, x.sample(i), hw,
                 T(0), ycol.data(), hw);
            for (int o = 0; o < out_; ++o) {
                T* plane = y.channel(i, o);
                const T b = bias_.value[static_cast<std::size_t>(o)];
                for (int tap = 0; tap < 4; ++tap) {
                    const T* src = ycol.data() + static_cast<std::size_t>(o * 4 + tap) * static_cast<std::size_t>(hw);
                    const int ty = tap / 2, tx = tap % 2;
                    for (int r = 0; r < x.h; ++r)
                        for (int c = 0; c < x.w; ++c)
                            plane[(2 * r + ty) * y.w + 2 * c + tx] = src[r * x.w + c] + b;
                }
            }
        }
        return y;
    }

    void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
        const int hw = x.h * x.w;
        std::vector<T> gcol(static_cast<std::size_t>(out_) * 4 * static_cast<std::size_t>(hw));
        if (dx) *dx = Tensor<T>(x.n, in_, x.h, x.w);
        for (int i = 0; i < x.n; ++i) {
            for (int o = 0; o < out_; ++o) {
                const T* plane = dy.channel(i, o);
                T s{};
                for (int tap = 0; tap < 4; ++tap) {
                    T* dst = gcol.data() + static_cast<std::size_t>(o * 4 + tap) * static_cast<std::size_t>(hw);
                    const int ty = tap / 2, tx = tap % 2;
                    for (int r = 0; r < x.h; ++r)
                        for (int c = 0; c < x.w; ++c) {
                            const T g = plane[(2 * r + ty) * dy.w + 2 * c + tx];
                            dst[r * x.w + c] = g;
                            s += g;
                        }
                }
                bias_.grad[static_cast<std::size_t>(o)] += s;
            }
            gemm(false, true, out_ * 4, in_, hw, T(1), gcol.data(), hw, x.sample(i), hw, T(1),
                 weight_.grad.data(), in_);
            if (dx)
                gemm(true, false, in_, hw, out_ * 4, T(1), weight_.value.data(), in_, gcol.data(), hw,
                     T(0), dx->sample(i), hw);
        }
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    int in_ = 0, out_ = 0;
    Param<T> weight_;  // [out*4][in], tap = dy*2+dx
    Param<T> bias_;
};

/// Per-channel batch normalization. With a single-sample batch in training
/// mode the layer passes its input through unchanged and leaves the running
/// statistics alone.
template <typename T>
class BatchNorm2d {
public:
    struct Cache {
        bool identity = false;
        Tensor<T> xhat;
        std::vector<T> inv_std;
        std::vector<T> batch_mean;
        std::vector<T> batch_var;  // unbiased
    };

    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, int channels)
        : channels_(channels),
          gamma_(name + ".gamma", static_cast<std::size_t>(channels)),
          beta_(name + ".beta", static_cast<std::size_t>(channels)),
          running_mean_{name + ".running_mean", std::vector<T>(static_cast<std::size_t>(channels), T(0))},
          running_var_{name + ".running_var", std::vector<T>(static_cast<std::size_t>(channels), T(1))} {
        std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
    }

    /// Training-mode forward when `cache` is non-null, inference otherwise.
    Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
        Tensor<T> y(x.n, x.c, x.h, x.w);
        const auto plane = x.plane();
        if (cache && x.n == 1) {
            cache->identity = true;
            y.data = x.data;
            return y;
        }
        if (!cache) {
            for (int ch = 0; ch < channels_; ++ch) {
                const auto c = static_cast<std::size_t>(ch);
                const T scale = gamma_.value[c] / std::sqrt(running_var_.value[c] + T(kEps));
                const T shift = beta_.value[c] - running_mean_.value[c] * scale;
                for (int i = 0; i < x.n; ++i) {
                    const T* src = x.channel(i, ch);
                    T* dst = y.channel(i, ch);
                    for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] * scale + shift;
                }
            }
            return y;
        }
        cache->identity = false;
        cache->xhat = Tensor<T>(x.n, x.c, x.h, x.w);
        cache->inv_std.assign(static_cast<std::size_t>(channels_), T{});
        cache->batch_mean.assign(static_cast<std::size_t>(channels_), T{});
        cache->batch_var.assign(static_cast<std::size_t>(channels_), T{});
        const double count = static_cast<double>(x.n) * static_cast<double>(plane);
        for (int ch = 0; ch < channels_; ++ch) {
            const auto c = static_cast<std::size_t>(ch);
            double sum = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* src = x.channel(i, ch);
                for (std::size_t p = 0; p < plane; ++p) sum += static_cast<double>(src[p]);
            }
            const double mean = sum / count;
            double sq = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* src = x.channel(i, ch);
                for (std::size_t p = 0; p < plane; ++p) {
                    const double d = static_cast<double>(src[p]) - mean;
                    sq += d * d;
                }
            }
            const double var = sq / count;
            const double inv = 1.0 / std::sqrt(var + kEps);
            cache->inv_std[c] = static_cast<T>(inv);
            cache->batch_mean[c] = static_cast<T>(mean);
            cache->batch_var[c] = static_cast<T>(count > 1 ? sq / (count - 1) : var);
            for (int i = 0; i < x.n; ++i) {
                const T* src = x.channel(i, ch);
                T* xh = cache->xhat.channel(i, ch);
                T* dst = y.channel(i, ch);
                for (std::size_t p = 0; p < plane; ++p) {
                    xh[p] = static_cast<T>((static_cast<double>(src[p]) - mean) * inv);
                    dst[p] = gamma_.value[c] * xh[p] + beta_.value[c];
                }
            }
        }
        return y;
    }

    void commit_running_stats(const Cache& cache) {
        if (cache.identity) return;
        for (std::size_t c = 0; c < static_cast<std::size_t>(channels_); ++c) {
            running_mean_.value[c] = static_cast<T>((1.0 - kMomentum) * running_mean_.value[c] +
                                                    kMomentum * cache.batch_mean[c]);
            running_var_.value[c] = static_cast<T>((1.0 - kMomentum) * running_var_.value[c] +
                                                   kMomentum * cache.batch_var[c]);
        }
    }

    Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) {
        if (cache.identity) return dy;
        Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
        const auto plane = dy.plane();
        const double count = static_cast<double>(dy.n) * static_cast<double>(plane);
        for (int ch = 0; ch < channels_; ++ch) {
            const auto c = static_cast<std::size_t>(ch);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < dy.n; ++i) {
                const T* g = dy.channel(i, ch);
                const T* xh = cache.xhat.channel(i, ch);
                for (std::size_t p = 0; p < plane; ++p) {
                    sum_dy += static_cast<double>(g[p]);
                    sum_dy_xhat += static_cast<double>(g[p]) * static_cast<double>(xh[p]);
                }
            }
            gamma_.grad[c] += static_cast<T>(sum_dy_xhat);
            beta_.grad[c] += static_cast<T>(sum_dy);
            const double k = static_cast<double>(gamma_.value[c]) * static_cast<double>(cache.inv_std[c]) / count;
            for (int i = 0; i < dy.n; ++i) {
                const T* g = dy.channel(i, ch);
                const T* xh = cache.xhat.channel(i, ch);
                T* dst = dx.channel(i, ch);
                for (std::size_t p = 0; p < plane; ++p)
                    dst[p] = static_cast<T>(k * (count * static_cast<double>(g[p]) - sum_dy -
                                                 static_cast<double>(xh[p]) * sum_dy_xhat));
            }
        }
        return dx;
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

private:
    int channels_ = 0;
    Param<T> gamma_;
    Param<T> beta_;
    Buffer<T> running_mean_;
    Buffer<T> running_var_;
};

template <typename T>
void relu_inplace(Tensor<T>& x) {
    for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

/// dy masked by the positive part of the activation output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, Tensor<T> dy) {
    for (std::size_t i = 0; i < dy.data.size(); ++i)
        if (!(out.data[i] > T(0))) dy.data[i] = T(0);
    return dy;
}

template <typename T>
struct PoolCache {
    int in_h = 0, in_w = 0;
    std::vector<std::uint32_t> argmax;  // flat in-plane index per output element
};

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x, PoolCache<T>* cache) {
    if (x.h % 2 != 0 || x.w % 2 != 0)
        throw std::invalid_argument("max_pool2: spatial size " + std::to_string(x.h) + "x" +
                                    std::to_string(x.w) + " is not even");
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    if (cache) {
        cache->in_h = x.h;
        cache->in_w = x.w;
        cache->argmax.assign(y.size(), 0);
    }
    std::size_t k = 0;
    for (int i = 0; i < x.n; ++i) {
        for (int ch = 0; ch < x.c; ++ch) {
            const T* src = x.channel(i, ch);
            T* dst = y.channel(i, ch);
            for (int r = 0; r < y.h; ++r) {
                for (int c = 0; c < y.w; ++c, ++k) {
                    std::uint32_t best = static_cast<std::uint32_t>(2 * r * x.w + 2 * c);
                    for (const int off : {1, x.w, x.w + 1}) {
                        const auto cand = static_cast<std::uint32_t>(2 * r * x.w + 2 * c + off);
                        if (src[cand] > src[best]) best = cand;
                    }
                    dst[r * y.w + c] = src[best];
                    if (cache) cache->argmax[k] = best;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> max_pool2_backward(const PoolCache<T>& cache, const Tensor<T>& dy) {
    Tensor<T> dx(dy.n, dy.c, cache.in_h, cache.in_w);
    std::size_t k = 0;
    for (int i = 0; i < dy.n; ++i)
        for (int ch = 0; ch < dy.c; ++ch) {
            const T* g = dy.channel(i, ch);
            T* dst = dx.channel(i, ch);
            for (std::size_t p = 0; p < dy.plane(); ++p, ++k) dst[cache.argmax[k]] += g[p];
        }
    return dx;
}

template <typename T>
void sigmoid_inplace(Tensor<T>& x) {
    for (auto& v : x.data) v = T(1) / (T(1) + std::exp(-v));
}

}  // namespace dsa_ltd::nn
