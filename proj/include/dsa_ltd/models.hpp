#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsa_ltd/core.hpp"
#include "dsa_ltd/nn/unet.hpp"

namespace dsa_ltd {

using nn::BackboneConfig;
using nn::FinalActivation;

/// What occupies the FFS motion channel.
enum class MotionInput { None, FrameDifference, OpticalFlow, BackgroundSubtraction, Tdl };

inline const char* to_string(MotionInput m) {
    switch (m) {
        case MotionInput::None: return "none";
        case MotionInput::FrameDifference: return "frame_difference";
        case MotionInput::OpticalFlow: return "optical_flow";
        case MotionInput::BackgroundSubtraction: return "background_subtraction";
        case MotionInput::Tdl: return "tdl_output";
    }
    return "unknown";
}

inline MotionInput motion_input_from_string(const std::string& s) {
    for (auto m : {MotionInput::None, MotionInput::FrameDifference, MotionInput::OpticalFlow,
                   MotionInput::BackgroundSubtraction, MotionInput::Tdl})
        if (s == to_string(m)) return m;
    throw std::invalid_argument("unknown motion input '" + s + "'");
}

/// FFS input channels in order: key frame, then the motion map (if any),
/// then the liver map (if any).
struct FusionLayout {
    MotionInput motion = MotionInput::Tdl;
    bool liver = true;

    int ffs_channels() const noexcept { return 1 + (motion != MotionInput::None) + (liver ? 1 : 0); }
    int motion_channel() const noexcept { return motion == MotionInput::None ? -1 : 1; }
    int liver_channel() const noexcept { return liver ? ffs_channels() - 1 : -1; }
    bool has_tdl() const noexcept { return motion == MotionInput::Tdl; }

    friend bool operator==(const FusionLayout&, const FusionLayout&) = default;
};

struct BundleConfig {
    FusionLayout layout;
    BackboneConfig tdl{kTemporalStack, 1, 16, 4, FinalActivation::Sigmoid};
    BackboneConfig lrs{1, 1, 16, 4, FinalActivation::Sigmoid};
    BackboneConfig ffs{3, 1, 16, 4, FinalActivation::Sigmoid};

    /// Configs for a layout with one shared width/depth, FFS channels derived.
    static BundleConfig uniform(FusionLayout layout, int base_width, int depth) {
        BundleConfig c;
        c.layout = layout;
        for (auto* b : {&c.tdl, &c.lrs, &c.ffs}) {
            b->base_width = base_width;
            b->depth = depth;
        }
        c.ffs.in_channels = layout.ffs_channels();
        return c;
    }

    friend bool operator==(const BundleConfig&, const BundleConfig&) = default;
};

inline void validate(const BundleConfig& c) {
    const auto check = [](const BackboneConfig& b, int in, const char* name) {
        nn::validate(b);
        if (b.in_channels != in)
            throw std::invalid_argument(std::string(name) + " expects " + std::to_string(in) +
                                        " input channels, config has " +
                                        std::to_string(b.in_channels));
        if (b.out_channels != 1)
            throw std::invalid_argument(std::string(name) + " must have one output channel");
        if (b.final_activation != FinalActivation::Sigmoid)
            throw std::invalid_argument(std::string(name) + " must end in a sigmoid");
    };
    if (c.layout.has_tdl()) check(c.tdl, kTemporalStack, "tdl");
    if (c.layout.liver) check(c.lrs, 1, "lrs");
    check(c.ffs, c.layout.ffs_channels(), "ffs");
}

/// The TDL, LRS and FFS networks. TDL and LRS exist only when the layout
/// routes their outputs into FFS.
template <typename T>
struct ModelBundle {
    BundleConfig config;
    std::optional<nn::UNet<T>> tdl;
    std::optional<nn::UNet<T>> lrs;
    nn::UNet<T> ffs;

    std::vector<nn::UNet<T>*> networks() {
        std::vector<nn::UNet<T>*> out;
        if (tdl) out.push_back(&*tdl);
        if (lrs) out.push_back(&*lrs);
        out.push_back(&ffs);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = ffs.parameter_count();
        if (tdl) n += tdl->parameter_count();
        if (lrs) n += lrs->parameter_count();
        return n;
    }
};

/// Networks are initialized from one seeded stream in the order TDL, LRS, FFS.
template <typename T>
ModelBundle<T> build_bundle(const BundleConfig& config, std::uint64_t seed) {
    validate(config);
    ModelBundle<T> b;
    b.config = config;
    std::mt19937_64 rng(seed);
    if (config.layout.has_tdl()) {
        b.tdl.emplace("tdl", config.tdl);
        b.tdl->init(rng);
    }
    if (config.layout.liver) {
        b.lrs.emplace("lrs", config.lrs);
        b.lrs->init(rng);
    }
    b.ffs = nn::UNet<T>("ffs", config.ffs);
    b.ffs.init(rng);
    return b;
}

/// Batched network inputs. `stack` is needed when the layout has TDL and
/// `motion` when it consumes a precomputed motion map.
template <typename T>
struct BatchInputs {
    nn::Tensor<T> key_frame;  // N x 1 x H x W
    nn::Tensor<T> stack;      // N x 10 x H x W, frames k-9..k
    nn::Tensor<T> motion;     // N x 1 x H x W
};

template <typename T>
struct BatchOutputs {
    nn::Tensor<T> ltd;  // empty when the layout has no TDL
    nn::Tensor<T> lrs;  // empty when the layout has no LRS
    nn::Tensor<T> seg;
};

template <typename T>
struct BundleCache {
    typename nn::UNet<T>::Cache tdl, lrs, ffs;
};

template <typename T>
nn::Tensor<T> assemble_ffs_input(const FusionLayout& layout, const BatchInputs<T>& in,
                                 const BatchOutputs<T>& out) {
    std::vector<const nn::Tensor<T>*> parts{&in.key_frame};
    if (layout.has_tdl())
        parts.push_back(&out.ltd);
    else if (layout.motion != MotionInput::None)
        parts.push_back(&in.motion);
    if (layout.liver) parts.push_back(&out.lrs);
    return nn::concat_channels<T>(parts);
}

/// Full DSA-LTDNet pass. Training mode (batch statistics, recorded
/// activations) when `cache` is non-null.
template <typename T>
BatchOutputs<T> bundle_forward(ModelBundle<T>& b, const BatchInputs<T>& in, BundleCache<T>* cache) {
    BatchOutputs<T> out;
    const auto& layout = b.config.layout;
    if (layout.has_tdl()) out.ltd = cache ? b.tdl->forward_train(in.stack, cache->tdl) : b.tdl->infer(in.stack);
    if (layout.liver) out.lrs = cache ? b.lrs->forward_train(in.key_frame, cache->lrs) : b.lrs->infer(in.key_frame);
    const auto fused = assemble_ffs_input(layout, in, out);
    out.seg = cache ? b.ffs.forward_train(fused, cache->ffs) : b.ffs.infer(fused);
    return out;
}

template <typename T>
BatchOutputs<T> bundle_infer(const ModelBundle<T>& b, const BatchInputs<T>& in) {
    BatchOutputs<T> out;
    const auto& layout = b.config.layout;
    if (layout.has_tdl()) out.ltd = b.tdl->infer(in.stack);
    if (layout.liver) out.lrs = b.lrs->infer(in.key_frame);
    out.seg = b.ffs.infer(assemble_ffs_input(layout, in, out));
    return out;
}

/// Gradients of the loss with respect to each network output.
template <typename T>
struct OutputGrads {
    nn::Tensor<T> ltd;
    nn::Tensor<T> lrs;
    nn::Tensor<T> seg;
};

/// Backpropagates through FFS and on into TDL and LRS via the fused
/// channels. With `detach_aux` the fusion path into TDL/LRS is cut and they
/// receive only their own loss gradients.
template <typename T>
void bundle_backward(ModelBundle<T>& b, const BundleCache<T>& cache, const OutputGrads<T>& g,
                     bool detach_aux = false) {
    const auto& layout = b.config.layout;
    const bool feeds_aux = !detach_aux && (layout.has_tdl() || layout.liver);
    auto d_in = b.ffs.backward(cache.ffs, g.seg, feeds_aux);
    const auto route = [&](nn::UNet<T>& net, const typename nn::UNet<T>::Cache& c,
                           const nn::Tensor<T>& own, int channel) {
        nn::Tensor<T> d = own;
        if (feeds_aux) {
            auto fused = nn::slice_channels(d_in, channel, 1);
            for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] += fused.data[i];
        }
        net.backward(c, d, false);
    };
    if (layout.has_tdl()) route(*b.tdl, cache.tdl, g.ltd, layout.motion_channel());
    if (layout.liver) route(*b.lrs, cache.lrs, g.lrs, layout.liver_channel());
}

// ---------------------------------------------------------------------------
// Single-sample conveniences over the image types.

template <typename T, typename G>
void copy_into(const G& grid, nn::Tensor<T>& t, int sample, int channel) {
    T* dst = t.channel(sample, channel);
    for (std::size_t i = 0; i < grid.size(); ++i) dst[i] = static_cast<T>(grid[i]);
}

template <typename T>
ProbabilityMap to_probability_map(const nn::Tensor<T>& t, int sample = 0) {
    ProbabilityMap m(t.h, t.w);
    const T* src = t.channel(sample, 0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(src[i]);
    return m;
}

template <typename T>
ProbabilityMap tdl_forward(const ModelBundle<T>& b, std::span<const Frame> stack) {
    if (!b.tdl) throw std::invalid_argument("tdl_forward: bundle has no TDL network");
    if (static_cast<int>(stack.size()) != kTemporalStack)
        throw std::invalid_argument("tdl_forward: expected " + std::to_string(kTemporalStack) +
                                    " frames, got " + std::to_string(stack.size()));
    nn::Tensor<T> x(1, kTemporalStack, stack.front().height(), stack.front().width());
    for (int c = 0; c < kTemporalStack; ++c) {
        require_same_shape(stack[static_cast<std::size_t>(c)], stack.front(), "tdl_forward");
        copy_into(stack[static_cast<std::size_t>(c)], x, 0, c);
    }
    return to_probability_map(b.tdl->infer(x));
}

template <typename T>
ProbabilityMap lrs_forward(const ModelBundle<T>& b, const Frame& key_frame) {
    if (!b.lrs) throw std::invalid_argument("lrs_forward: bundle has no LRS network");
    nn::Tensor<T> x(1, 1, key_frame.height(), key_frame.width());
    copy_into(key_frame, x, 0, 0);
    return to_probability_map(b.lrs->infer(x));
}

/// FFS on the full three-channel layout.
template <typename T>
ProbabilityMap ffs_forward(const ModelBundle<T>& b, const Frame& key_frame,
                           const ProbabilityMap& temporal_diff, const ProbabilityMap& liver_map) {
    if (b.config.layout.ffs_channels() != 3)
        throw std::invalid_argument("ffs_forward: bundle FFS does not take three channels");
    require_same_shape(key_frame, temporal_diff, "ffs_forward");
    require_same_shape(key_frame, liver_map, "ffs_forward");
    nn::Tensor<T> x(1, 3, key_frame.height(), key_frame.width());
    copy_into(key_frame, x, 0, 0);
    copy_into(temporal_diff, x, 0, 1);
    copy_into(liver_map, x, 0, 2);
    return to_probability_map(b.ffs.infer(x));
}

struct FullOutputs {
    ProbabilityMap ltd;
    ProbabilityMap lrs;
    ProbabilityMap seg;
};

/// Stack of frames j-9..j as a 1 x 10 x H x W tensor slot.
template <typename T>
void copy_stack(const DsaVideo& video, int j, nn::Tensor<T>& t, int sample) {
    if (j < kDifferenceOffset || j >= video.frame_count())
        throw std::invalid_argument("temporal stack ending at frame " + std::to_string(j) +
                                    " is outside the video");
    for (int c = 0; c < kTemporalStack; ++c) copy_into(video.frame(j - kDifferenceOffset + c), t, sample, c);
}

/// TDL on frames k-9..k, LRS on frame k, FFS on their fusion (inference mode).
template <typename T>
FullOutputs full_forward(const ModelBundle<T>& b, const Sample& s) {
    if (!b.config.layout.has_tdl() || !b.config.layout.liver)
        throw std::invalid_argument("full_forward: bundle is not the full three-network layout");
    const int k = s.key_frame_index;
    if (k < kDifferenceOffset || k >= s.video.frame_count())
        throw std::invalid_argument("full_forward: key frame " + std::to_string(k) + " invalid");
    const int h = s.video.height(), w = s.video.width();
    BatchInputs<T> in;
    in.key_frame = nn::Tensor<T>(1, 1, h, w);
    copy_into(s.video.frame(k), in.key_frame, 0, 0);
    in.stack = nn::Tensor<T>(1, kTemporalStack, h, w);
    copy_stack(s.video, k, in.stack, 0);
    auto out = bundle_infer(b, in);
    return {to_probability_map(out.ltd), to_probability_map(out.lrs), to_probability_map(out.seg)};
}

}  // namespace dsa_ltd
