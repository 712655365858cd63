#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsa_ltd/core.hpp"

namespace dsa_ltd {

enum class MotionKind { FrameDifference, OpticalFlowMagnitude, BackgroundSubtraction };

inline const char* to_string(MotionKind k) {
    switch (k) {
        case MotionKind::FrameDifference: return "frame_difference";
        case MotionKind::OpticalFlowMagnitude: return "optical_flow_magnitude";
        case MotionKind::BackgroundSubtraction: return "background_subtraction";
    }
    return "unknown";
}

struct MotionTag {};

/// Single-channel motion map in [0,1] with the source frame dimensions.
struct MotionMap {
    Grid<float, MotionTag> pixels;
    MotionKind kind = MotionKind::FrameDifference;

    int height() const noexcept { return pixels.height(); }
    int width() const noexcept { return pixels.width(); }
};

inline constexpr double kBackgroundDecay = 0.95;
inline constexpr int kFlowWindow = 5;

namespace detail {

inline void require_frame(const DsaVideo& video, int k, const char* what) {
    if (k < 0 || k >= video.frame_count())
        throw std::invalid_argument(std::string(what) + ": frame " + std::to_string(k) +
                                    " outside video of " + std::to_string(video.frame_count()) +
                                    " frames");
}

inline MotionMap absolute_difference(const Frame& a, const std::vector<double>& b, MotionKind kind) {
    MotionMap out{Grid<float, MotionTag>(a.height(), a.width()), kind};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(static_cast<double>(a[i]) - b[i]);
        out.pixels[i] = static_cast<float>(std::clamp(d, 0.0, 1.0));
    }
    return out;
}

}  // namespace detail

/// |F[k] - F[k-offset]| clipped to [0,1].
inline MotionMap frame_difference(const DsaVideo& video, int k, int offset = kDifferenceOffset) {
    if (offset < 1) throw std::invalid_argument("frame_difference: offset must be >= 1");
    if (k - offset < 0)
        throw std::invalid_argument("frame_difference: k - offset = " + std::to_string(k - offset) +
                                    " is before the first frame");
    detail::require_frame(video, k, "frame_difference");
    const Frame& cur = video.frame(k);
    const Frame& ref = video.frame(k - offset);
    MotionMap out{Grid<float, MotionTag>(cur.height(), cur.width()), MotionKind::FrameDifference};
    for (std::size_t i = 0; i < cur.size(); ++i) {
        const float d = std::abs(cur[i] - ref[i]);
        out.pixels[i] = std::clamp(d, 0.0f, 1.0f);
    }
    return out;
}

/// |F[k] - B| where B is the exponential running average of frames 0..k-1,
/// B <- alpha*F[t] + (1-alpha)*B seeded with F[0]. alpha = 1 keeps only F[k-1].
inline MotionMap background_subtraction(const DsaVideo& video, int k, double alpha = kBackgroundDecay) {
    if (k < 1) throw std::invalid_argument("background_subtraction: k must be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("background_subtraction: alpha must lie in (0,1]");
    detail::require_frame(video, k, "background_subtraction");
    const Frame& first = video.frame(0);
    std::vector<double> background(first.pixels().begin(), first.pixels().end());
    for (int t = 1; t < k; ++t) {
        const auto f = video.frame(t).pixels();
        for (std::size_t i = 0; i < background.size(); ++i)
            background[i] = alpha * static_cast<double>(f[i]) + (1.0 - alpha) * background[i];
    }
    return detail::absolute_difference(video.frame(k), background, MotionKind::BackgroundSubtraction);
}

/// Local least-squares (Lucas-Kanade) flow between frames k-1 and k over
/// square windows, reduced to magnitude and divided by the map maximum.
/// Pixels whose structure tensor is near-singular get zero flow.
inline MotionMap optical_flow_magnitude(const DsaVideo& video, int k, int window = kFlowWindow) {
    if (k < 1) throw std::invalid_argument("optical_flow_magnitude: k must be >= 1");
    if (window < 3 || window % 2 == 0)
        throw std::invalid_argument("optical_flow_magnitude: window must be odd and >= 3");
    detail::require_frame(video, k, "optical_flow_magnitude");
    const Frame& prev = video.frame(k - 1);
    const Frame& cur = video.frame(k);
    const int h = cur.height();
    const int w = cur.width();
    const auto n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);

    // Spatial gradients of the mean of both frames (central differences,
    // one-sided at the border); temporal gradient is the plain difference.
    std::vector<double> ix(n), iy(n), it(n);
    const auto avg = [&](int r, int c) {
        return 0.5 * (static_cast<double>(prev(r, c)) + static_cast<double>(cur(r, c)));
    };
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const int c0 = std::max(c - 1, 0), c1 = std::min(c + 1, w - 1);
            const int r0 = std::max(r - 1, 0), r1 = std::min(r + 1, h - 1);
            const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(w) +
                           static_cast<std::size_t>(c);
            ix[i] = (avg(r, c1) - avg(r, c0)) / static_cast<double>(c1 - c0);
            iy[i] = (avg(r1, c) - avg(r0, c)) / static_cast<double>(r1 - r0);
            it[i] = static_cast<double>(cur(r, c)) - static_cast<double>(prev(r, c));
        }
    }

    constexpr double kMinEigen = 1e-6;
    const int half = window / 2;
    std::vector<double> magnitude(n, 0.0);
    double peak = 0.0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double sxx = 0, sxy = 0, syy = 0, sxt = 0, syt = 0;
            for (int dr = -half; dr <= half; ++dr) {
                const int rr = r + dr;
                if (rr < 0 || rr >= h) continue;
                for (int dc = -half; dc <= half; ++dc) {
                    const int cc = c + dc;
                    if (cc < 0 || cc >= w) continue;
                    const auto j = static_cast<std::size_t>(rr) * static_cast<std::size_t>(w) +
                                   static_cast<std::size_t>(cc);
                    sxx += ix[j] * ix[j];
                    sxy += ix[j] * iy[j];
                    syy += iy[j] * iy[j];
                    sxt += ix[j] * it[j];
                    syt += iy[j] * it[j];
                }
            }
            const double tr = sxx + syy;
            const double det = sxx * syy - sxy * sxy;
            const double min_eigen = 0.5 * (tr - std::sqrt(std::max(tr * tr - 4.0 * det, 0.0)));
            if (min_eigen < kMinEigen) continue;
            const double u = (-syy * sxt + sxy * syt) / det;
            const double v = (sxy * sxt - sxx * syt) / det;
            const double m = std::hypot(u, v);
            const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(w) +
                           static_cast<std::size_t>(c);
            magnitude[i] = m;
            peak = std::max(peak, m);
        }
    }

    MotionMap out{Grid<float, MotionTag>(h, w), MotionKind::OpticalFlowMagnitude};
    if (peak > 0.0)
        for (std::size_t i = 0; i < n; ++i)
            out.pixels[i] = static_cast<float>(std::clamp(magnitude[i] / peak, 0.0, 1.0));
    return out;
}

inline MotionMap extract_motion(const DsaVideo& video, int k, MotionKind kind) {
    switch (kind) {
        case MotionKind::FrameDifference: return frame_difference(video, k);
        case MotionKind::OpticalFlowMagnitude: return optical_flow_magnitude(video, k);
        case MotionKind::BackgroundSubtraction: return background_subtraction(video, k);
    }
    throw std::invalid_argument("extract_motion: unknown kind");
}

}  // namespace dsa_ltd
