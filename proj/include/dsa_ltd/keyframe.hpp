#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsa_ltd/core.hpp"

namespace dsa_ltd {

inline constexpr int kKeyFrameWindow = 15;

struct KeyFrameResult {
    int index = -1;
    /// (absolute frame index, stability score) for every interior candidate.
    std::vector<std::pair<int, double>> scores;
};

/// Sum of |F[s+j+1] - F[s+j]| over pixels for each adjacent pair in the last
/// `window` frames, s = frame_count - window.
inline std::vector<double> adjacent_differences(const DsaVideo& video, int window = kKeyFrameWindow) {
    if (window < 2) throw std::invalid_argument("adjacent_differences: window must be >= 2");
    if (window > video.frame_count())
        throw std::invalid_argument("adjacent_differences: window " + std::to_string(window) +
                                    " exceeds frame count " +
                                    std::to_string(video.frame_count()));
    const int start = video.frame_count() - window;
    std::vector<double> sums;
    sums.reserve(static_cast<std::size_t>(window - 1));
    for (int j = 0; j + 1 < window; ++j) {
        const auto a = video.frame(start + j).pixels();
        const auto b = video.frame(start + j + 1).pixels();
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            s += std::abs(static_cast<double>(b[i]) - static_cast<double>(a[i]));
        sums.push_back(s);
    }
    return sums;
}

/// Mean of the difference sums on either side of window-local frame `candidate`.
inline double stability_score(const std::vector<double>& diff_sums, int candidate) {
    if (candidate < 1 || static_cast<std::size_t>(candidate) >= diff_sums.size())
        throw std::invalid_argument("stability_score: candidate " + std::to_string(candidate) +
                                    " lacks a difference image on both sides");
    const auto c = static_cast<std::size_t>(candidate);
    return (diff_sums[c - 1] + diff_sums[c]) / 2.0;
}

/// Picks the most stable frame in the trailing window. Window boundary frames
/// are not candidates; ties go to the earliest frame; the result is never
/// below the difference offset.
inline KeyFrameResult select_key_frame(const DsaVideo& video, int window = kKeyFrameWindow) {
    if (video.frame_count() < kMinVideoFrames)
        throw std::invalid_argument("select_key_frame: video has " +
                                    std::to_string(video.frame_count()) +
                                    " frames, need at least " + std::to_string(kMinVideoFrames));
    if (window < 3) throw std::invalid_argument("select_key_frame: window must be >= 3");
    const auto sums = adjacent_differences(video, window);
    const int start = video.frame_count() - window;

    KeyFrameResult result;
    double best = 0.0;
    for (int local = 1; local + 1 < window; ++local) {
        const double score = stability_score(sums, local);
        result.scores.emplace_back(start + local, score);
        if (result.index < 0 || score < best) {
            best = score;
            result.index = start + local;
        }
    }
    if (result.index < kDifferenceOffset) {
        for (const auto& [idx, score] : result.scores) {
            if (idx >= kDifferenceOffset) {
                result.index = idx;
                break;
            }
        }
    }
    return result;
}

}  // namespace dsa_ltd
