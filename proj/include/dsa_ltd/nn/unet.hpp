#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsa_ltd/nn/layers.hpp"

namespace dsa_ltd::nn {

enum class FinalActivation { Sigmoid, None };

struct BackboneConfig {
    int in_channels = 1;
    int out_channels = 1;
    int base_width = 16;
    int depth = 4;
    FinalActivation final_activation = FinalActivation::Sigmoid;

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void validate(const BackboneConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.out_channels < 1)
        throw std::invalid_argument("BackboneConfig: channel counts must be positive");
    if (cfg.depth < 2) throw std::invalid_argument("BackboneConfig: depth must be >= 2");
    if (cfg.base_width < 4) throw std::invalid_argument("BackboneConfig: base_width must be >= 4");
}

/// conv3x3 -> BN -> ReLU, twice.
template <typename T>
class ConvBlock {
public:
    struct Cache {
        Tensor<T> input;
        Tensor<T> a_pre;
        typename BatchNorm2d<T>::Cache bn_a;
        Tensor<T> a_act;
        Tensor<T> b_pre;
        typename BatchNorm2d<T>::Cache bn_b;
        Tensor<T> out;
    };

    ConvBlock() = default;
    ConvBlock(const std::string& name, int in, int out)
        : conv_a_(name + ".conv_a", in, out, 3), bn_a_(name + ".bn_a", out),
          conv_b_(name + ".conv_b", out, out, 3), bn_b_(name + ".bn_b", out) {}

    void init(std::mt19937_64& rng) {
        conv_a_.init(rng);
        conv_b_.init(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
        auto a_pre = conv_a_.forward(x);
        auto a = bn_a_.forward(a_pre, cache ? &cache->bn_a : nullptr);
        relu_inplace(a);
        auto b_pre = conv_b_.forward(a);
        auto b = bn_b_.forward(b_pre, cache ? &cache->bn_b : nullptr);
        relu_inplace(b);
        if (cache) {
            cache->input = x;
            cache->a_pre = std::move(a_pre);
            cache->a_act = a;
            cache->b_pre = std::move(b_pre);
            cache->out = b;
        }
        return b;
    }

    void commit(const Cache& cache) {
        bn_a_.commit_running_stats(cache.bn_a);
        bn_b_.commit_running_stats(cache.bn_b);
    }

    Tensor<T> backward(const Cache& cache, const Tensor<T>& dy, bool need_input_grad) {
        auto g = bn_b_.backward(cache.bn_b, relu_backward(cache.out, dy));
        Tensor<T> da;
        conv_b_.backward(cache.a_act, g, &da);
        g = bn_a_.backward(cache.bn_a, relu_backward(cache.a_act, std::move(da)));
        Tensor<T> dx;
        conv_a_.backward(cache.input, g, need_input_grad ? &dx : nullptr);
        return dx;
    }

    void collect(std::vector<Param<T>*>& out) {
        conv_a_.collect(out);
        bn_a_.collect(out);
        conv_b_.collect(out);
        bn_b_.collect(out);
    }
    void collect_buffers(std::vector<Buffer<T>*>& out) {
        bn_a_.collect_buffers(out);
        bn_b_.collect_buffers(out);
    }

private:
    Conv2d<T> conv_a_;
    BatchNorm2d<T> bn_a_;
    Conv2d<T> conv_b_;
    BatchNorm2d<T> bn_b_;
};

/// Symmetric encoder-decoder with a skip connection at every level.
/// Channel width doubles per level starting from base_width; upsampling is a
/// 2x2 transposed convolution; the head is a 1x1 convolution.
template <typename T>
class UNet {
public:
    struct Cache {
        std::vector<typename ConvBlock<T>::Cache> enc;
        std::vector<PoolCache<T>> pool;
        typename ConvBlock<T>::Cache bottleneck;
        std::vector<Tensor<T>> up_out;
        std::vector<typename ConvBlock<T>::Cache> dec;
        Tensor<T> output;
    };

    UNet() = default;
    UNet(const std::string& name, const BackboneConfig& cfg) : name_(name), cfg_(cfg) {
        validate(cfg);
        int in = cfg.in_channels;
        for (int l = 0; l < cfg.depth; ++l) {
            enc_.emplace_back(name + ".enc" + std::to_string(l), in, width(l));
            in = width(l);
        }
        bottleneck_ = ConvBlock<T>(name + ".bottleneck", in, width(cfg.depth));
        for (int l = cfg.depth - 1; l >= 0; --l) {
            ups_.emplace_back(name + ".up" + std::to_string(l), width(l + 1), width(l));
            dec_.emplace_back(name + ".dec" + std::to_string(l), 2 * width(l), width(l));
        }
        head_ = Conv2d<T>(name + ".head", width(0), cfg.out_channels, 1);
    }

    const BackboneConfig& config() const noexcept { return cfg_; }
    const std::string& name() const noexcept { return name_; }

    void init(std::mt19937_64& rng) {
        for (auto& b : enc_) b.init(rng);
        bottleneck_.init(rng);
        for (std::size_t i = 0; i < ups_.size(); ++i) {
            ups_[i].init(rng);
            dec_[i].init(rng);
        }
        head_.init(rng);
    }

    /// Sets the 1x1 head to zero, making a sigmoid network emit 0.5 everywhere.
    void zero_head() {
        std::fill(head_.weight().value.begin(), head_.weight().value.end(), T{});
        std::fill(head_.bias().value.begin(), head_.bias().value.end(), T{});
    }

    void check_input(const Tensor<T>& x) const {
        if (x.c != cfg_.in_channels)
            throw std::invalid_argument(name_ + ": expected " + std::to_string(cfg_.in_channels) +
                                        " input channels, got " + std::to_string(x.c));
        const int m = 1 << cfg_.depth;
        if (x.h % m != 0 || x.w % m != 0 || x.h == 0 || x.w == 0)
            throw std::invalid_argument(name_ + ": spatial size " + std::to_string(x.h) + "x" +
                                        std::to_string(x.w) + " not divisible by " +
                                        std::to_string(m));
    }

    /// Inference using running batch-norm statistics.
    Tensor<T> infer(const Tensor<T>& x) const { return run(x, nullptr); }

    /// Training-mode forward; records activations in `cache` and updates
    /// batch-norm running statistics.
    Tensor<T> forward_train(const Tensor<T>& x, Cache& cache) {
        auto y = run(x, &cache);
        for (std::size_t l = 0; l < enc_.size(); ++l) enc_[l].commit(cache.enc[l]);
        bottleneck_.commit(cache.bottleneck);
        for (std::size_t i = 0; i < dec_.size(); ++i) dec_[i].commit(cache.dec[i]);
        return y;
    }

    /// Accumulates parameter gradients from dL/d(output). Returns dL/d(input)
    /// when requested, otherwise an empty tensor.
    Tensor<T> backward(const Cache& cache, const Tensor<T>& dout, bool need_input_grad) {
        Tensor<T> g = dout;
        if (cfg_.final_activation == FinalActivation::Sigmoid)
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const T p = cache.output.data[i];
                g.data[i] *= p * (T(1) - p);
            }
        Tensor<T> dfeat;
        head_.backward(cache.dec.back().out, g, &dfeat);
        const int depth = cfg_.depth;
        std::vector<Tensor<T>> dskip(static_cast<std::size_t>(depth));
        for (int i = depth - 1; i >= 0; --i) {
            const int level = depth - 1 - i;
            auto dcat = dec_[static_cast<std::size_t>(i)].backward(cache.dec[static_cast<std::size_t>(i)], dfeat, true);
            const int half = dcat.c / 2;
            auto dup = slice_channels(dcat, 0, half);
            dskip[static_cast<std::size_t>(level)] = slice_channels(dcat, half, half);
            const Tensor<T>& up_in = i == 0 ? cache.bottleneck.out : cache.dec[static_cast<std::size_t>(i - 1)].out;
            ups_[static_cast<std::size_t>(i)].backward(up_in, dup, &dfeat);
        }
        dfeat = bottleneck_.backward(cache.bottleneck, dfeat, true);
        for (int l = depth - 1; l >= 0; --l) {
            const auto ul = static_cast<std::size_t>(l);
            auto d = max_pool2_backward(cache.pool[ul], dfeat);
            const auto& skip = dskip[ul];
            for (std::size_t k = 0; k < d.data.size(); ++k) d.data[k] += skip.data[k];
            dfeat = enc_[ul].backward(cache.enc[ul], d, l > 0 || need_input_grad);
        }
        return need_input_grad ? dfeat : Tensor<T>{};
    }

    std::vector<Param<T>*> parameters() {
        std::vector<Param<T>*> out;
        for (auto& b : enc_) b.collect(out);
        bottleneck_.collect(out);
        for (std::size_t i = 0; i < ups_.size(); ++i) {
            ups_[i].collect(out);
            dec_[i].collect(out);
        }
        head_.collect(out);
        return out;
    }

    std::vector<Buffer<T>*> buffers() {
        std::vector<Buffer<T>*> out;
        for (auto& b : enc_) b.collect_buffers(out);
        bottleneck_.collect_buffers(out);
        for (auto& b : dec_) b.collect_buffers(out);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto* p : const_cast<UNet*>(this)->parameters()) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

private:
    int width(int level) const { return cfg_.base_width << level; }

    Tensor<T> run(const Tensor<T>& x, Cache* cache) const {
        check_input(x);
        const auto depth = static_cast<std::size_t>(cfg_.depth);
        if (cache) {
            cache->enc.assign(depth, {});
            cache->pool.assign(depth, {});
            cache->dec.assign(depth, {});
        }
        std::vector<Tensor<T>> skips;
        skips.reserve(depth);
        Tensor<T> cur = x;
        for (std::size_t l = 0; l < depth; ++l) {
            auto s = enc_[l].forward(cur, cache ? &cache->enc[l] : nullptr);
            cur = max_pool2(s, cache ? &cache->pool[l] : nullptr);
            skips.push_back(std::move(s));
        }
        cur = bottleneck_.forward(cur, cache ? &cache->bottleneck : nullptr);
        for (std::size_t i = 0; i < depth; ++i) {
            auto up = ups_[i].forward(cur);
            const Tensor<T>* parts[] = {&up, &skips[depth - 1 - i]};
            auto cat = concat_channels<T>(parts);
            cur = dec_[i].forward(cat, cache ? &cache->dec[i] : nullptr);
        }
        auto y = head_.forward(cur);
        if (cfg_.final_activation == FinalActivation::Sigmoid) sigmoid_inplace(y);
        if (cache) cache->output = y;
        return y;
    }

    std::string name_;
    BackboneConfig cfg_;
    std::vector<ConvBlock<T>> enc_;
    ConvBlock<T> bottleneck_;
    std::vector<UpConv2x2<T>> ups_;  // ordered deepest first
    std::vector<ConvBlock<T>> dec_;  // ordered deepest first
    Conv2d<T> head_;
};

}  // namespace dsa_ltd::nn
