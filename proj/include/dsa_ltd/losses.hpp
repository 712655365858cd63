#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include "dsa_ltd/core.hpp"
#include "dsa_ltd/motion.hpp"

namespace dsa_ltd {

inline constexpr double kBceEps = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct LossWeights {
    double a = 0.5;
    double lambda0 = 0.1;
    double lambda1 = 1.0;

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void validate(const LossWeights& w) {
    if (!(w.a >= 0.0 && w.a <= 1.0)) throw std::invalid_argument("LossWeights: a must lie in [0,1]");
    if (!(w.lambda0 >= 0.0) || !(w.lambda1 >= 0.0))
        throw std::invalid_argument("LossWeights: lambda0 and lambda1 must be >= 0");
}

struct LossReport {
    double l_ltd = 0.0;
    double l_lrs = 0.0;
    double l_seg = 0.0;
    double total = 0.0;
};

namespace losses {

/// Value and gradient routines over flat arrays. When `grad` is non-empty it
/// receives d(loss)/d(pred) scaled by `scale` (added, not overwritten).
/// Every loss is a mean over pixels.

template <typename T>
void require_sizes(std::span<const T> pred, std::size_t target_size, std::span<T> grad, const char* what) {
    if (pred.size() != target_size || (!grad.empty() && grad.size() != pred.size()))
        throw ShapeError(std::string(what) + ": size mismatch");
    if (pred.empty()) throw ShapeError(std::string(what) + ": empty input");
}

template <typename T, typename U>
double l1(std::span<const T> pred, std::span<const U> target, std::span<T> grad = {}, double scale = 1.0) {
    require_sizes(pred, target.size(), grad, "l1_loss");
    const double n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        sum += std::abs(d);
        if (!grad.empty()) grad[i] += static_cast<T>(scale * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / n);
    }
    return sum / n;
}

template <typename T, typename U>
double bce(std::span<const T> pred, std::span<const U> target, std::span<T> grad = {}, double scale = 1.0) {
    require_sizes(pred, target.size(), grad, "bce_loss");
    const double n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double raw = static_cast<double>(pred[i]);
        const double p = std::clamp(raw, kBceEps, 1.0 - kBceEps);
        const double t = static_cast<double>(target[i]);
        sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        if (!grad.empty() && raw > kBceEps && raw < 1.0 - kBceEps)
            grad[i] += static_cast<T>(scale * (-t / p + (1.0 - t) / (1.0 - p)) / n);
    }
    return sum / n;
}

/// 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), s = kDiceSmooth.
template <typename T, typename U>
double soft_dice(std::span<const T> pred, std::span<const U> target, std::span<T> grad = {}, double scale = 1.0) {
    require_sizes(pred, target.size(), grad, "soft_dice_loss");
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = static_cast<double>(pred[i]);
        const double t = static_cast<double>(target[i]);
        inter += p * t;
        total += p + t;
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = total + kDiceSmooth;
    if (!grad.empty()) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double t = static_cast<double>(target[i]);
            const double d_ratio = (2.0 * t * den - num) / (den * den);
            grad[i] += static_cast<T>(-scale * d_ratio);
        }
    }
    return 1.0 - num / den;
}

template <typename T, typename U>
double composite(std::span<const T> pred, std::span<const U> target, double a, std::span<T> grad = {},
                 double scale = 1.0) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("composite_mask_loss: a must lie in [0,1]");
    const double b = bce(pred, target, grad, scale * a);
    const double d = soft_dice(pred, target, grad, scale * (1.0 - a));
    return a * b + (1.0 - a) * d;
}

}  // namespace losses

inline double l1_loss(const ProbabilityMap& pred, const MotionMap& target) {
    require_same_shape(pred, target.pixels, "l1_loss");
    return losses::l1<float, float>(pred.pixels(), target.pixels.pixels());
}

inline double bce_loss(const ProbabilityMap& pred, const BinaryMask& target) {
    require_same_shape(pred, target, "bce_loss");
    return losses::bce<float, std::uint8_t>(pred.pixels(), target.pixels());
}

inline double soft_dice_loss(const ProbabilityMap& pred, const BinaryMask& target) {
    require_same_shape(pred, target, "soft_dice_loss");
    return losses::soft_dice<float, std::uint8_t>(pred.pixels(), target.pixels());
}

inline double composite_mask_loss(const ProbabilityMap& pred, const BinaryMask& target, double a) {
    require_same_shape(pred, target, "composite_mask_loss");
    return losses::composite<float, std::uint8_t>(pred.pixels(), target.pixels(), a);
}

/// lambda0 * l_ltd + lambda1 * l_lrs + l_seg.
inline LossReport total_loss(double l_ltd, double l_lrs, double l_seg, const LossWeights& w) {
    validate(w);
    if (l_ltd < 0.0 || l_lrs < 0.0 || l_seg < 0.0)
        throw std::invalid_argument("total_loss: component losses must be >= 0");
    return {l_ltd, l_lrs, l_seg, w.lambda0 * l_ltd + w.lambda1 * l_lrs + l_seg};
}

}  // namespace dsa_ltd
