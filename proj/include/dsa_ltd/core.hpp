#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsa_ltd {

/// Raised whenever two images that must share dimensions do not.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major 2-D grid. The tag parameter keeps frames, masks and
/// probability maps from being mixed up at call sites.
template <typename T, typename Tag>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int height, int width, T fill = T{})
        : height_(height), width_(width),
          pixels_(static_cast<std::size_t>(checked_area(height, width)), fill) {}
    Grid(int height, int width, std::vector<T> pixels)
        : height_(height), width_(width), pixels_(std::move(pixels)) {
        if (pixels_.size() != static_cast<std::size_t>(checked_area(height, width)))
            throw ShapeError("grid: pixel count does not match height*width");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return pixels_.size(); }
    bool empty() const noexcept { return pixels_.empty(); }

    T& operator()(int row, int col) { return pixels_[index(row, col)]; }
    const T& operator()(int row, int col) const { return pixels_[index(row, col)]; }
    T& operator[](std::size_t i) { return pixels_[i]; }
    const T& operator[](std::size_t i) const { return pixels_[i]; }

    std::span<T> pixels() noexcept { return pixels_; }
    std::span<const T> pixels() const noexcept { return pixels_; }
    T* data() noexcept { return pixels_.data(); }
    const T* data() const noexcept { return pixels_.data(); }

    template <typename U, typename OtherTag>
    bool same_shape(const Grid<U, OtherTag>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    static long checked_area(int h, int w) {
        if (h < 0 || w < 0) throw ShapeError("grid: negative dimension");
        return static_cast<long>(h) * w;
    }
    std::size_t index(int row, int col) const noexcept {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<T> pixels_;
};

struct FrameTag {};
struct BinaryMaskTag {};
struct ProbabilityTag {};

/// Grayscale intensities in [0,1].
using Frame = Grid<float, FrameTag>;
/// Pixel labels in {0,1}.
using BinaryMask = Grid<std::uint8_t, BinaryMaskTag>;
/// Per-pixel probabilities in [0,1].
using ProbabilityMap = Grid<float, ProbabilityTag>;

inline constexpr int kMinFrameSide = 16;
inline constexpr int kMinVideoFrames = 16;
/// Offset between the key frame and the earlier frame of the supervising difference.
inline constexpr int kDifferenceOffset = 9;
/// Number of consecutive frames fed to the temporal-difference network.
inline constexpr int kTemporalStack = kDifferenceOffset + 1;

inline float normalize_8bit(std::uint8_t v) noexcept { return static_cast<float>(v) / 255.0f; }

inline std::uint8_t quantize_8bit(float v) noexcept {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(c * 255.0f + 0.5f);
}

class DsaVideo {
public:
    DsaVideo() = default;
    explicit DsaVideo(std::vector<Frame> frames) : frames_(std::move(frames)) {
        for (const auto& f : frames_)
            if (!f.same_shape(frames_.front()))
                throw ShapeError("video: frames have differing dimensions");
    }

    int frame_count() const noexcept { return static_cast<int>(frames_.size()); }
    int height() const noexcept { return frames_.empty() ? 0 : frames_.front().height(); }
    int width() const noexcept { return frames_.empty() ? 0 : frames_.front().width(); }

    const Frame& frame(int i) const { return frames_.at(static_cast<std::size_t>(i)); }
    Frame& frame(int i) { return frames_.at(static_cast<std::size_t>(i)); }
    const std::vector<Frame>& frames() const noexcept { return frames_; }

    friend bool operator==(const DsaVideo&, const DsaVideo&) = default;

private:
    std::vector<Frame> frames_;
};

struct Sample {
    DsaVideo video;
    int key_frame_index = 0;
    BinaryMask tumor_mask;
    BinaryMask liver_mask;
    std::string sample_id;
};

template <typename TA, typename TagA, typename TB, typename TagB>
void require_same_shape(const Grid<TA, TagA>& a, const Grid<TB, TagB>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": dimension mismatch (" + std::to_string(a.height()) +
                         "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                         "x" + std::to_string(b.width()) + ")");
}

inline std::size_t count_ones(const BinaryMask& m) {
    return static_cast<std::size_t>(std::count(m.pixels().begin(), m.pixels().end(), 1));
}

/// Overlap 2|A∩B|/(|A|+|B|). Two empty masks agree perfectly and score 1.
inline double dice_score(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "dice_score");
    std::size_t inter = 0, na = 0, nb = 0;
    const auto pa = a.pixels();
    const auto pb = b.pixels();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        na += pa[i];
        nb += pb[i];
        inter += static_cast<std::size_t>(pa[i] & pb[i]);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline constexpr double kDefaultThreshold = 0.5;

/// Pixel is set iff probability >= threshold.
inline BinaryMask binarize(const ProbabilityMap& p, double threshold = kDefaultThreshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("binarize: threshold must lie in (0,1)");
    BinaryMask out(p.height(), p.width());
    for (std::size_t i = 0; i < p.size(); ++i)
        out[i] = static_cast<double>(p[i]) >= threshold ? 1 : 0;
    return out;
}

enum class ViolationKind {
    VideoTooShort,
    FrameTooSmall,
    FrameSizeMismatch,
    IntensityOutOfRange,
    KeyFrameOutOfRange,
    OffsetFrameMissing,
    MaskDimensionMismatch,
    MaskNotBinary,
};

struct Violation {
    ViolationKind kind;
    std::string message;
};

inline bool all_in_unit_interval(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
}

inline bool is_binary(const BinaryMask& m) {
    return std::all_of(m.pixels().begin(), m.pixels().end(), [](std::uint8_t x) { return x <= 1; });
}

/// One entry per violated invariant; an empty result means the sample is usable.
inline std::vector<Violation> validate_sample(const Sample& s) {
    std::vector<Violation> out;
    const auto& video = s.video;
    const int n = video.frame_count();
    if (n < kMinVideoFrames)
        out.push_back({ViolationKind::VideoTooShort,
                       "video has " + std::to_string(n) + " frames, need at least " +
                           std::to_string(kMinVideoFrames)});
    if (n > 0) {
        const int h = video.frame(0).height();
        const int w = video.frame(0).width();
        if (h < kMinFrameSide || w < kMinFrameSide)
            out.push_back({ViolationKind::FrameTooSmall, "frames smaller than 16x16"});
        bool mismatch = false, range = false;
        for (const auto& f : video.frames()) {
            mismatch |= f.height() != h || f.width() != w;
            range |= !all_in_unit_interval(f.pixels());
        }
        if (mismatch) out.push_back({ViolationKind::FrameSizeMismatch, "frames differ in size"});
        if (range)
            out.push_back({ViolationKind::IntensityOutOfRange, "intensity outside [0,1]"});

        const auto check_mask = [&](const BinaryMask& m, const char* name) {
            if (m.height() != h || m.width() != w)
                out.push_back({ViolationKind::MaskDimensionMismatch,
                               std::string(name) + " dimension mismatch: " +
                                   std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                                   " vs frames " + std::to_string(h) + "x" + std::to_string(w)});
            if (!is_binary(m))
                out.push_back({ViolationKind::MaskNotBinary, std::string(name) + " is not binary"});
        };
        check_mask(s.tumor_mask, "tumor_mask");
        check_mask(s.liver_mask, "liver_mask");
    }
    if (s.key_frame_index < 0 || s.key_frame_index >= n)
        out.push_back({ViolationKind::KeyFrameOutOfRange,
                       "key_frame_index " + std::to_string(s.key_frame_index) + " outside video"});
    if (s.key_frame_index < kDifferenceOffset)
        out.push_back({ViolationKind::OffsetFrameMissing,
                       "offset frame missing: key_frame_index " +
                           std::to_string(s.key_frame_index) + " < " +
                           std::to_string(kDifferenceOffset)});
    return out;
}

}  // namespace dsa_ltd
