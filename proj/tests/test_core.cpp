#include <gtest/gtest.h>

#include <random>
#include <set>

#include "dsa_ltd/core.hpp"
#include "test_support.hpp"

using namespace dsa_ltd;
using dsa_ltd::fixtures::random_mask;

namespace {

BinaryMask mask_from(int h, int w, std::initializer_list<int> ones) {
    BinaryMask m(h, w);
    for (int i : ones) m[static_cast<std::size_t>(i)] = 1;
    return m;
}

// Independent oracle: build the two foreground sets and count.
double set_dice(const BinaryMask& a, const BinaryMask& b) {
    std::set<std::size_t> sa, sb, inter;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]) sa.insert(i);
        if (b[i]) sb.insert(i);
    }
    for (auto i : sa)
        if (sb.count(i)) inter.insert(i);
    if (sa.empty() && sb.empty()) return 1.0;
    return 2.0 * static_cast<double>(inter.size()) / static_cast<double>(sa.size() + sb.size());
}

Sample well_formed_sample() {
    Sample s;
    s.video = fixtures::constant_video(20, 32, 32, 0.25f);
    s.key_frame_index = 12;
    s.tumor_mask = BinaryMask(32, 32);
    s.liver_mask = BinaryMask(32, 32);
    s.sample_id = "x";
    return s;
}

bool has_kind(const std::vector<Violation>& v, ViolationKind k) {
    for (const auto& x : v)
        if (x.kind == k) return true;
    return false;
}

}  // namespace

TEST(Dice, IdenticalNonemptyIsOne) {
    const auto a = mask_from(4, 4, {1, 5, 6});
    EXPECT_EQ(dice_score(a, a), 1.0);
}

TEST(Dice, DisjointIsZero) {
    EXPECT_EQ(dice_score(mask_from(4, 4, {0, 1}), mask_from(4, 4, {2, 3})), 0.0);
}

TEST(Dice, HalfOverlapOfFourPixelMasks) {
    const auto a = mask_from(4, 4, {0, 1, 2, 3});
    const auto b = mask_from(4, 4, {2, 3, 4, 5});
    EXPECT_EQ(dice_score(a, b), 0.5);
    EXPECT_EQ(set_dice(a, b), 0.5);
}

TEST(Dice, BothEmptyIsOne) { EXPECT_EQ(dice_score(BinaryMask(8, 8), BinaryMask(8, 8)), 1.0); }

TEST(Dice, EmptyVersusNonemptyIsZero) { EXPECT_EQ(dice_score(BinaryMask(4, 4), mask_from(4, 4, {3})), 0.0); }

TEST(Dice, ShapeMismatchThrows) { EXPECT_THROW(dice_score(BinaryMask(4, 4), BinaryMask(4, 5)), ShapeError); }

TEST(Dice, PropertiesOnRandomMasks) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 500; ++t) {
        const double p = static_cast<double>(t % 10) / 10.0;
        const auto a = random_mask(16, 16, p, rng);
        const auto b = random_mask(16, 16, 1.0 - p * 0.5, rng);
        const double d = dice_score(a, b);
        EXPECT_NEAR(d, set_dice(a, b), 1e-12);
        EXPECT_EQ(d, dice_score(b, a));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
        if (count_ones(a) > 0) {
            EXPECT_EQ(dice_score(a, a), 1.0);
        }
    }
}

TEST(Binarize, ThresholdIsInclusive) {
    const auto m = binarize(ProbabilityMap(4, 4, 0.5f), 0.5);
    EXPECT_EQ(count_ones(m), 16u);
}

TEST(Binarize, BelowThresholdIsZero) { EXPECT_EQ(count_ones(binarize(ProbabilityMap(4, 4, 0.49f))), 0u); }

TEST(Binarize, MixedMap) {
    ProbabilityMap p(1, 2);
    p[0] = 0.2f;
    p[1] = 0.8f;
    const auto m = binarize(p, 0.5);
    EXPECT_EQ(m[0], 0);
    EXPECT_EQ(m[1], 1);
}

TEST(Binarize, ThresholdOutsideOpenIntervalThrows) {
    const ProbabilityMap p(2, 2, 0.3f);
    EXPECT_THROW(binarize(p, 0.0), std::invalid_argument);
    EXPECT_THROW(binarize(p, 1.0), std::invalid_argument);
    EXPECT_THROW(binarize(p, -0.1), std::invalid_argument);
}

TEST(Binarize, MonotoneInProbability) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int t = 0; t < 200; ++t) {
        ProbabilityMap p(8, 8);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = u(rng);
        const double thr = 0.05 + 0.9 * u(rng);
        const auto before = binarize(p, thr);
        ProbabilityMap raised = p;
        for (std::size_t i = 0; i < p.size(); ++i) raised[i] = std::min(1.0f, p[i] + u(rng) * 0.3f);
        const auto after = binarize(raised, thr);
        for (std::size_t i = 0; i < p.size(); ++i)
            if (before[i]) {
                EXPECT_EQ(after[i], 1);
            }
    }
}

TEST(ValidateSample, WellFormedHasNoViolations) { EXPECT_TRUE(validate_sample(well_formed_sample()).empty()); }

TEST(ValidateSample, EarlyKeyFrameReportsOffsetMissing) {
    auto s = well_formed_sample();
    s.key_frame_index = 3;
    const auto v = validate_sample(s);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].kind, ViolationKind::OffsetFrameMissing);
    EXPECT_NE(v[0].message.find("offset frame missing"), std::string::npos);
}

TEST(ValidateSample, MaskSizeMismatchReportsDimensions) {
    Sample s;
    s.video = fixtures::constant_video(20, 256, 256, 0.1f);
    s.key_frame_index = 12;
    s.tumor_mask = BinaryMask(128, 128);
    s.liver_mask = BinaryMask(256, 256);
    const auto v = validate_sample(s);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].kind, ViolationKind::MaskDimensionMismatch);
    EXPECT_NE(v[0].message.find("dimension mismatch"), std::string::npos);
}

TEST(ValidateSample, ReportsEveryBrokenInvariant) {
    Sample s;
    std::vector<Frame> frames(10, Frame(8, 8, 0.5f));
    frames[3][0] = 1.5f;
    s.video = DsaVideo(frames);
    s.key_frame_index = 12;
    s.tumor_mask = BinaryMask(8, 8, 2);
    s.liver_mask = BinaryMask(8, 8);
    const auto v = validate_sample(s);
    EXPECT_TRUE(has_kind(v, ViolationKind::VideoTooShort));
    EXPECT_TRUE(has_kind(v, ViolationKind::FrameTooSmall));
    EXPECT_TRUE(has_kind(v, ViolationKind::IntensityOutOfRange));
    EXPECT_TRUE(has_kind(v, ViolationKind::MaskNotBinary));
    EXPECT_TRUE(has_kind(v, ViolationKind::KeyFrameOutOfRange));
    EXPECT_FALSE(has_kind(v, ViolationKind::OffsetFrameMissing));
}

TEST(ValidateSample, EmptySampleDoesNotThrow) {
    const Sample s;
    std::vector<Violation> v;
    EXPECT_NO_THROW(v = validate_sample(s));
    EXPECT_FALSE(v.empty());
}

TEST(Video, RejectsMixedFrameSizes) {
    std::vector<Frame> frames{Frame(16, 16), Frame(16, 17)};
    EXPECT_THROW(DsaVideo{frames}, ShapeError);
}

TEST(Quantize, RoundTripsEveryByte) {
    for (int v = 0; v < 256; ++v) EXPECT_EQ(quantize_8bit(normalize_8bit(static_cast<std::uint8_t>(v))), v);
}
