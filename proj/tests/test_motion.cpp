#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dsa_ltd/motion.hpp"
#include "test_support.hpp"

using namespace dsa_ltd;

namespace {

DsaVideo random_video(int n, int h, int w, std::mt19937_64& rng) {
    std::vector<Frame> frames;
    for (int i = 0; i < n; ++i) frames.push_back(fixtures::random_frame(h, w, rng));
    return DsaVideo(frames);
}

bool all_in_unit(const MotionMap& m) {
    for (std::size_t i = 0; i < m.pixels.size(); ++i)
        if (!(m.pixels[i] >= 0.0f && m.pixels[i] <= 1.0f)) return false;
    return true;
}

float texture(double x, double y) {
    using std::numbers::pi;
    return static_cast<float>(0.5 + 0.2 * std::sin(2 * pi * x / 32.0) * std::cos(2 * pi * y / 27.0) +
                              0.15 * std::sin(2 * pi * (x + y) / 23.0));
}

}  // namespace

TEST(FrameDifference, IdenticalFramesGiveZero) {
    std::mt19937_64 rng(1);
    auto v = random_video(12, 16, 16, rng);
    v.frame(1) = v.frame(10);
    const auto m = frame_difference(v, 10);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) EXPECT_EQ(m.pixels[i], 0.0f);
    EXPECT_EQ(m.kind, MotionKind::FrameDifference);
}

TEST(FrameDifference, UniformFramesGiveUniformHalf) {
    std::vector<Frame> frames(12, Frame(16, 16, 0.1f));
    frames[2] = Frame(16, 16, 0.3f);
    frames[11] = Frame(16, 16, 0.8f);
    const auto m = frame_difference(DsaVideo(frames), 11);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) EXPECT_NEAR(m.pixels[i], 0.5f, 1e-6f);
}

TEST(FrameDifference, MixedValuesMatchHandComputation) {
    std::vector<Frame> frames(10, Frame(16, 16, 0.0f));
    const float a[4] = {0.9f, 0.1f, 0.5f, 0.25f};
    const float b[4] = {0.2f, 0.6f, 0.5f, 1.0f};
    const float expect[4] = {0.7f, 0.5f, 0.0f, 0.75f};
    for (int i = 0; i < 4; ++i) {
        frames[9][static_cast<std::size_t>(i)] = a[i];
        frames[0][static_cast<std::size_t>(i)] = b[i];
    }
    const auto m = frame_difference(DsaVideo(frames), 9);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(m.pixels[static_cast<std::size_t>(i)], expect[i], 1e-6f);
}

TEST(FrameDifference, RejectsFrameBeforeStart) {
    const auto v = fixtures::constant_video(20, 16, 16, 0.2f);
    EXPECT_THROW(frame_difference(v, 8), std::invalid_argument);
    EXPECT_NO_THROW(frame_difference(v, 9));
    EXPECT_NO_THROW(frame_difference(v, 3, 3));
}

TEST(FrameDifference, SymmetricInItsTwoFrames) {
    std::mt19937_64 rng(2);
    auto v = random_video(15, 16, 16, rng);
    auto swapped = v;
    std::swap(swapped.frame(12), swapped.frame(3));
    EXPECT_EQ(frame_difference(v, 12).pixels, frame_difference(swapped, 12).pixels);
}

TEST(FrameDifference, DependsOnlyOnFramesKAndKMinusOffset) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        auto v = random_video(24, 16, 16, rng);
        const int k = 9 + static_cast<int>(rng() % 15);
        const auto base = frame_difference(v, k).pixels;
        for (int f = 0; f < v.frame_count(); ++f) {
            if (f == k || f == k - 9) continue;
            auto p = v;
            p.frame(f) = fixtures::random_frame(16, 16, rng);
            EXPECT_EQ(frame_difference(p, k).pixels, base);
        }
    }
}

TEST(BackgroundSubtraction, StaticVideoGivesZero) {
    const auto v = fixtures::constant_video(20, 16, 16, 0.4f);
    for (int k = 1; k < 20; k += 5) {
        const auto m = background_subtraction(v, k);
        for (std::size_t i = 0; i < m.pixels.size(); ++i) EXPECT_EQ(m.pixels[i], 0.0f);
    }
}

TEST(BackgroundSubtraction, BrightRegionOverConstantPrefix) {
    std::vector<Frame> frames(12, Frame(16, 16, 0.2f));
    for (int r = 4; r < 8; ++r)
        for (int c = 4; c < 8; ++c) frames[11](r, c) = 0.6f;
    const auto m = background_subtraction(DsaVideo(frames), 11);
    EXPECT_NEAR(m.pixels(5, 5), 0.4f, 1e-6f);
    EXPECT_EQ(m.pixels(0, 0), 0.0f);
}

TEST(BackgroundSubtraction, RunningAverageClosedForm) {
    std::mt19937_64 rng(4);
    const auto v = random_video(8, 16, 16, rng);
    const double alpha = 0.7;
    const int k = 6;
    const auto m = background_subtraction(v, k, alpha);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) {
        // B = (1-a)^(k-1) F0 + sum_{t=1}^{k-1} a (1-a)^(k-1-t) Ft
        double b = std::pow(1 - alpha, k - 1) * v.frame(0)[i];
        for (int t = 1; t < k; ++t) b += alpha * std::pow(1 - alpha, k - 1 - t) * v.frame(t)[i];
        EXPECT_NEAR(m.pixels[i], std::abs(v.frame(k)[i] - b), 1e-6);
    }
}

TEST(BackgroundSubtraction, AlphaOneEqualsOneFrameDifference) {
    std::mt19937_64 rng(5);
    const auto v = random_video(14, 16, 16, rng);
    for (int k = 1; k < 14; ++k)
        EXPECT_EQ(background_subtraction(v, k, 1.0).pixels, frame_difference(v, k, 1).pixels);
}

TEST(BackgroundSubtraction, RejectsFirstFrame) {
    EXPECT_THROW(background_subtraction(fixtures::constant_video(16, 16, 16, 0.f), 0), std::invalid_argument);
}

TEST(OpticalFlow, StaticVideoGivesZero) {
    std::vector<Frame> frames(4, Frame(32, 32));
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) frames[0](r, c) = texture(c, r);
    frames[1] = frames[2] = frames[3] = frames[0];
    const auto m = optical_flow_magnitude(DsaVideo(frames), 2);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) EXPECT_EQ(m.pixels[i], 0.0f);
}

TEST(OpticalFlow, MovingPatchOutweighsStaticBackground) {
    // Textured background stays put while a textured patch in the centre
    // shifts one pixel to the right.
    const int n = 48;
    Frame a(n, n), b(n, n);
    const auto inside = [](int r, int c) { return r >= 16 && r < 32 && c >= 16 && c < 32; };
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            a(r, c) = inside(r, c) ? texture(c, r) : texture(r + 7, c + 3);
            b(r, c) = inside(r, c) ? texture(c - 1, r) : texture(r + 7, c + 3);
        }
    const auto m = optical_flow_magnitude(DsaVideo({a, b}), 1);
    double moving = 0.0, still = 0.0;
    int nm = 0, ns = 0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            if (r >= 19 && r < 29 && c >= 19 && c < 29) {
                moving += m.pixels(r, c);
                ++nm;
            } else if (r < 10 || r >= 38 || c < 10 || c >= 38) {
                still += m.pixels(r, c);
                ++ns;
            }
        }
    EXPECT_GT(moving / nm, 0.2);
    EXPECT_LT(still / ns, 0.01);
}

TEST(OpticalFlow, GradientFreeFramesGiveZero) {
    const auto v = DsaVideo({Frame(16, 16, 0.2f), Frame(16, 16, 0.7f)});
    const auto m = optical_flow_magnitude(v, 1);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) EXPECT_EQ(m.pixels[i], 0.0f);
}

TEST(OpticalFlow, RejectsFirstFrame) {
    EXPECT_THROW(optical_flow_magnitude(fixtures::constant_video(16, 16, 16, 0.f), 0), std::invalid_argument);
}

TEST(Motion, AllExtractorsStayInUnitRangeAndKeepShape) {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 10; ++t) {
        const auto v = random_video(16, 24, 20, rng);
        for (auto kind : {MotionKind::FrameDifference, MotionKind::OpticalFlowMagnitude,
                          MotionKind::BackgroundSubtraction}) {
            const auto m = extract_motion(v, 12, kind);
            EXPECT_EQ(m.height(), 24);
            EXPECT_EQ(m.width(), 20);
            EXPECT_EQ(m.kind, kind);
            EXPECT_TRUE(all_in_unit(m));
            EXPECT_EQ(extract_motion(v, 12, kind).pixels, m.pixels);
        }
    }
}
