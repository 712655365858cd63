#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dsa_ltd/core.hpp"
#include "dsa_ltd/dataset.hpp"
#include "dsa_ltd/image_io.hpp"
#include "dsa_ltd/json_util.hpp"
#include "dsa_ltd/util.hpp"

namespace dsa_ltd {

/// Fraction of clinical samples held out for testing (124 of 486).
inline constexpr double kClinicalTestFraction = 124.0 / 486.0;
/// Share of poor-blood tumors among all annotated tumors (212 of 760).
inline constexpr double kClinicalPoorBloodShare = 212.0 / 760.0;

struct PhantomConfig {
    std::uint64_t seed = 0;
    int num_samples = 80;
    int frame_count = 24;
    int height = 256;
    int width = 256;
    std::array<int, 2> tumors_per_sample_range{1, 10};
    /// Pixel radii at this resolution; sampled log-uniformly. The upper end
    /// is the clinical maximum diameter (217 px at 1021 px width) rescaled
    /// to 256 px, the lower end is clamped to stay renderable.
    std::array<double, 2> tumor_radius_range{2.0, 27.2};
    double poor_blood_probability = kClinicalPoorBloodShare;
    /// Per-slot probability for each of `max_confounders` tumor-like
    /// structures outside the liver.
    double confounder_probability = 0.5;
    int max_confounders = 3;
    /// Bound on the rigid per-frame jitter, pixels.
    double artifact_amplitude = 2.0;
    /// Frames at which individual tumors finish washing in.
    std::array<int, 2> washin_midpoint_range{12, 18};
    /// Frames from first enhancement to plateau.
    int washin_ramp = 10;
    /// Gaussian edge softness, pixels.
    double feather_width = 1.5;
    double noise_amplitude = 0.02;
    double test_fraction = kClinicalTestFraction;

    friend bool operator==(const PhantomConfig&, const PhantomConfig&) = default;
};

inline void validate(const PhantomConfig& c) {
    const auto fail = [](const std::string& m) { throw ConfigError("PhantomConfig: " + m); };
    if (c.num_samples < 1) fail("num_samples must be >= 1");
    if (c.frame_count < kMinVideoFrames) fail("frame_count must be >= 16");
    if (c.height < kMinFrameSide || c.width < kMinFrameSide) fail("height and width must be >= 16");
    const auto [tmin, tmax] = c.tumors_per_sample_range;
    if (tmin < 1 || tmax > 10 || tmin > tmax) fail("tumors_per_sample_range must lie within [1,10]");
    if (!(c.tumor_radius_range[0] > 0.0) || c.tumor_radius_range[0] > c.tumor_radius_range[1])
        fail("tumor_radius_range must be positive and ordered");
    if (!(c.poor_blood_probability >= 0.0 && c.poor_blood_probability <= 1.0))
        fail("poor_blood_probability must lie in [0,1]");
    if (!(c.confounder_probability >= 0.0 && c.confounder_probability <= 1.0))
        fail("confounder_probability must lie in [0,1]");
    if (c.max_confounders < 0) fail("max_confounders must be >= 0");
    if (!(c.artifact_amplitude >= 0.0)) fail("artifact_amplitude must be >= 0");
    const auto [wmin, wmax] = c.washin_midpoint_range;
    if (wmin < kDifferenceOffset || wmin > wmax) fail("washin_midpoint_range must start at >= 9 and be ordered");
    if (wmax + 2 >= c.frame_count) fail("washin_midpoint_range must leave two frames after the key frame");
    if (c.washin_ramp < 1) fail("washin_ramp must be >= 1");
    if (!(c.feather_width >= 0.0)) fail("feather_width must be >= 0");
    if (!(c.noise_amplitude >= 0.0)) fail("noise_amplitude must be >= 0");
    if (!(c.test_fraction >= 0.0 && c.test_fraction < 1.0)) fail("test_fraction must lie in [0,1)");
}

inline json to_json(const PhantomConfig& c) {
    return json{{"seed", c.seed},
                {"num_samples", c.num_samples},
                {"frame_count", c.frame_count},
                {"height", c.height},
                {"width", c.width},
                {"tumors_per_sample_range", c.tumors_per_sample_range},
                {"tumor_radius_range", c.tumor_radius_range},
                {"poor_blood_probability", c.poor_blood_probability},
                {"confounder_probability", c.confounder_probability},
                {"max_confounders", c.max_confounders},
                {"artifact_amplitude", c.artifact_amplitude},
                {"washin_midpoint_range", c.washin_midpoint_range},
                {"washin_ramp", c.washin_ramp},
                {"feather_width", c.feather_width},
                {"noise_amplitude", c.noise_amplitude},
                {"test_fraction", c.test_fraction}};
}

inline PhantomConfig phantom_config_from_json(const json& j) {
    constexpr const char* ctx = "phantom config";
    reject_unknown_keys(j, {"seed", "num_samples", "frame_count", "height", "width",
                            "tumors_per_sample_range", "tumor_radius_range", "poor_blood_probability",
                            "confounder_probability", "max_confounders", "artifact_amplitude",
                            "washin_midpoint_range", "washin_ramp", "feather_width",
                            "noise_amplitude", "test_fraction"},
                        ctx);
    PhantomConfig c;
    read_optional(j, "seed", c.seed, ctx);
    read_optional(j, "num_samples", c.num_samples, ctx);
    read_optional(j, "frame_count", c.frame_count, ctx);
    read_optional(j, "height", c.height, ctx);
    read_optional(j, "width", c.width, ctx);
    read_optional(j, "tumors_per_sample_range", c.tumors_per_sample_range, ctx);
    read_optional(j, "tumor_radius_range", c.tumor_radius_range, ctx);
    read_optional(j, "poor_blood_probability", c.poor_blood_probability, ctx);
    read_optional(j, "confounder_probability", c.confounder_probability, ctx);
    read_optional(j, "max_confounders", c.max_confounders, ctx);
    read_optional(j, "artifact_amplitude", c.artifact_amplitude, ctx);
    read_optional(j, "washin_midpoint_range", c.washin_midpoint_range, ctx);
    read_optional(j, "washin_ramp", c.washin_ramp, ctx);
    read_optional(j, "feather_width", c.feather_width, ctx);
    read_optional(j, "noise_amplitude", c.noise_amplitude, ctx);
    read_optional(j, "test_fraction", c.test_fraction, ctx);
    validate(c);
    return c;
}

struct Ellipse {
    double cx = 0, cy = 0;  // pixel coordinates, x = column
    double rx = 1, ry = 1;
    double angle = 0;       // radians

    /// 1 on the boundary, < 1 inside.
    double normalized_distance(double x, double y) const {
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double dx = x - cx, dy = y - cy;
        const double u = (ca * dx + sa * dy) / rx;
        const double v = (-sa * dx + ca * dy) / ry;
        return std::sqrt(u * u + v * v);
    }
    bool contains(double x, double y) const { return normalized_distance(x, y) <= 1.0; }

    friend bool operator==(const Ellipse&, const Ellipse&) = default;
};

enum class BloodSupply { Rich, Poor };

struct TumorSpec {
    Ellipse shape;
    BloodSupply supply = BloodSupply::Rich;
    double contrast = 0.0;
    int plateau_frame = 0;

    friend bool operator==(const TumorSpec&, const TumorSpec&) = default;
};

struct ConfounderSpec {
    Ellipse shape;
    double contrast = 0.0;

    friend bool operator==(const ConfounderSpec&, const ConfounderSpec&) = default;
};

struct LiverSpec {
    Ellipse shape;
    double enhancement = 0.0;
    int plateau_frame = 0;

    friend bool operator==(const LiverSpec&, const LiverSpec&) = default;
};

struct BackgroundWave {
    double kx = 0, ky = 0, phase = 0, amplitude = 0;

    friend bool operator==(const BackgroundWave&, const BackgroundWave&) = default;
};

struct PhantomScene {
    int index = 0;
    int height = 0, width = 0, frame_count = 0;
    std::uint64_t noise_key = 0;
    double base_level = 0.0;
    std::vector<BackgroundWave> waves;
    LiverSpec liver;
    std::vector<TumorSpec> tumors;
    std::vector<ConfounderSpec> confounders;
    /// Per-frame (dx, dy) translation in pixels.
    std::vector<std::array<double, 2>> artifact_trajectory;

    friend bool operator==(const PhantomScene&, const PhantomScene&) = default;
};

/// Tumor centers lie at most this far (normalized) from the liver center.
inline constexpr double kTumorCenterReach = 0.85;
/// Confounder centers lie at least this far (normalized) from the liver center.
inline constexpr double kConfounderClearance = 1.3;
/// Tumor footprint at the start of wash-in relative to its plateau size.
inline constexpr double kInitialTumorScale = 0.7;

/// Pixel margin around the liver mask that contains every tumor mask.
inline int tumor_liver_margin(const PhantomConfig& c) {
    return static_cast<int>(std::ceil(c.tumor_radius_range[1])) + 1;
}

/// Smoothstep wash-in level in [0,1]; reaches 1 at `plateau` and stays there.
inline double washin_level(int frame, int plateau, int ramp) {
    const double x = std::clamp(static_cast<double>(frame - (plateau - ramp)) / ramp, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
    if (lo == hi) return lo;
    return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

inline double feathered_alpha(double normalized_distance, double mean_radius, double feather) {
    const double signed_px = (normalized_distance - 1.0) * mean_radius;
    if (feather <= 0.0) return signed_px <= 0.0 ? 1.0 : 0.0;
    return 0.5 * std::erfc(signed_px / (feather * std::numbers::sqrt2));
}

}  // namespace detail

/// Deterministic in (config.seed, index).
inline PhantomScene generate_scene(const PhantomConfig& config, int index) {
    validate(config);
    if (index < 0 || index >= config.num_samples)
        throw std::invalid_argument("generate_scene: index " + std::to_string(index) +
                                    " outside [0, num_samples)");
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed & 0xffffffffu),
                      static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(index), 0x0d5a1u};
    std::mt19937_64 rng(seq);
    using detail::uniform;
    const double w = config.width, h = config.height;

    PhantomScene s;
    s.index = index;
    s.height = config.height;
    s.width = config.width;
    s.frame_count = config.frame_count;
    s.noise_key = rng();
    s.base_level = uniform(rng, 0.12, 0.20);
    for (int i = 0; i < 3; ++i) {
        const double period = uniform(rng, 0.5, 2.0) * std::max(w, h);
        const double theta = uniform(rng, 0.0, std::numbers::pi);
        const double k = 2.0 * std::numbers::pi / period;
        s.waves.push_back({k * std::cos(theta), k * std::sin(theta),
                           uniform(rng, 0.0, 2.0 * std::numbers::pi), uniform(rng, 0.01, 0.025)});
    }

    const auto [wmin, wmax] = config.washin_midpoint_range;
    s.liver.shape = {uniform(rng, 0.28, 0.40) * w, uniform(rng, 0.28, 0.40) * h,
                     uniform(rng, 0.20, 0.26) * w, uniform(rng, 0.15, 0.20) * h,
                     uniform(rng, -0.3, 0.3)};
    s.liver.enhancement = uniform(rng, 0.06, 0.10);
    s.liver.plateau_frame = detail::uniform_int(rng, std::max(wmin - 4, 1), wmin);

    const auto sample_radius = [&] {
        return detail::log_uniform(rng, config.tumor_radius_range[0], config.tumor_radius_range[1]);
    };
    const auto sample_contrast = [&](BloodSupply supply) {
        return supply == BloodSupply::Rich ? uniform(rng, 0.30, 0.45) : uniform(rng, 0.12, 0.20);
    };

    const int n_tumors = detail::uniform_int(rng, config.tumors_per_sample_range[0],
                                             config.tumors_per_sample_range[1]);
    const auto& L = s.liver.shape;
    for (int t = 0; t < n_tumors; ++t) {
        // Uniform point in the disk of radius kTumorCenterReach, mapped into the liver frame.
        double u, v;
        do {
            u = uniform(rng, -1.0, 1.0);
            v = uniform(rng, -1.0, 1.0);
        } while (u * u + v * v > 1.0);
        u *= kTumorCenterReach * L.rx;
        v *= kTumorCenterReach * L.ry;
        const double ca = std::cos(L.angle), sa = std::sin(L.angle);
        TumorSpec tumor;
        const double r = sample_radius();
        tumor.shape = {L.cx + ca * u - sa * v, L.cy + sa * u + ca * v, r,
                       r * uniform(rng, 0.75, 1.0), uniform(rng, 0.0, std::numbers::pi)};
        tumor.supply = uniform(rng, 0.0, 1.0) < config.poor_blood_probability ? BloodSupply::Poor
                                                                              : BloodSupply::Rich;
        tumor.contrast = sample_contrast(tumor.supply);
        tumor.plateau_frame = detail::uniform_int(rng, wmin, wmax);
        s.tumors.push_back(tumor);
    }

    for (int k = 0; k < config.max_confounders; ++k) {
        if (!(uniform(rng, 0.0, 1.0) < config.confounder_probability)) continue;
        const double r = sample_radius();
        double x = 0, y = 0;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            x = uniform(rng, r, w - r);
            y = uniform(rng, r, h - r);
            placed = L.normalized_distance(x, y) > kConfounderClearance;
        }
        if (!placed) continue;
        const auto supply = uniform(rng, 0.0, 1.0) < config.poor_blood_probability ? BloodSupply::Poor
                                                                                   : BloodSupply::Rich;
        s.confounders.push_back({{x, y, r, r * uniform(rng, 0.75, 1.0), uniform(rng, 0.0, std::numbers::pi)},
                                 sample_contrast(supply)});
    }

    s.artifact_trajectory.assign(static_cast<std::size_t>(config.frame_count), {0.0, 0.0});
    if (config.artifact_amplitude > 0.0) {
        std::normal_distribution<double> step(0.0, 0.5 * config.artifact_amplitude);
        std::array<double, 2> pos{0.0, 0.0};
        for (auto& p : s.artifact_trajectory) {
            for (auto& c : pos)
                c = std::clamp(c + step(rng), -config.artifact_amplitude, config.artifact_amplitude);
            p = pos;
        }
    }
    return s;
}

/// First frame at which every tumor has reached its plateau.
inline int scene_key_frame(const PhantomScene& scene) {
    int k = scene.liver.plateau_frame;
    for (const auto& t : scene.tumors) k = std::max(k, t.plateau_frame);
    return k;
}

inline std::string sample_id_for(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04d", index);
    return buf;
}

/// Renders frames (quantized to 8-bit levels) and ground-truth masks.
inline Sample render_video(const PhantomScene& scene, const PhantomConfig& config) {
    const int key = scene_key_frame(scene);
    if (key < kDifferenceOffset)
        throw std::invalid_argument("render_video: scene plateaus at frame " + std::to_string(key) +
                                    ", before frame 9");
    if (key >= scene.frame_count)
        throw std::invalid_argument("render_video: scene plateaus after the last frame");
    const int h = scene.height, w = scene.width;
    const double feather = config.feather_width;
    const double noise_amp = config.noise_amplitude;

    const auto mean_radius = [](const Ellipse& e) { return std::sqrt(e.rx * e.ry); };
    const auto noise_at = [&](double x, double y) {
        const auto xi = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(x)));
        const auto yi = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(y)));
        const std::uint64_t hsh = mix64(scene.noise_key ^ mix64(xi * 0x9E3779B1ULL + (yi << 32)));
        const double unit = static_cast<double>(hsh >> 11) * 0x1.0p-53;
        return noise_amp * (2.0 * unit - 1.0);
    };

    std::vector<Frame> frames;
    frames.reserve(static_cast<std::size_t>(scene.frame_count));
    for (int t = 0; t < scene.frame_count; ++t) {
        const auto [dx, dy] = scene.artifact_trajectory[static_cast<std::size_t>(t)];
        const double liver_level = scene.liver.enhancement *
                                   washin_level(t, scene.liver.plateau_frame, config.washin_ramp);
        std::vector<double> tumor_level, tumor_scale;
        for (const auto& tm : scene.tumors) {
            const double lv = washin_level(t, tm.plateau_frame, config.washin_ramp);
            tumor_level.push_back(tm.contrast * lv);
            tumor_scale.push_back(kInitialTumorScale + (1.0 - kInitialTumorScale) * lv);
        }
        Frame f(h, w);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const double x = c + 0.5 - dx, y = r + 0.5 - dy;
                double v = scene.base_level + noise_at(x, y);
                for (const auto& wv : scene.waves) v += wv.amplitude * std::cos(wv.kx * x + wv.ky * y + wv.phase);
                if (liver_level > 0.0) {
                    const auto& L = scene.liver.shape;
                    v += liver_level * detail::feathered_alpha(L.normalized_distance(x, y), mean_radius(L), feather);
                }
                for (std::size_t i = 0; i < scene.tumors.size(); ++i) {
                    if (tumor_level[i] <= 0.0) continue;
                    const auto& e = scene.tumors[i].shape;
                    const double d = e.normalized_distance(x, y) / tumor_scale[i];
                    v += tumor_level[i] * detail::feathered_alpha(d, mean_radius(e) * tumor_scale[i], feather);
                }
                for (const auto& cf : scene.confounders)
                    v += cf.contrast * detail::feathered_alpha(cf.shape.normalized_distance(x, y),
                                                               mean_radius(cf.shape), feather);
                f(r, c) = normalize_8bit(quantize_8bit(static_cast<float>(v)));
            }
        }
        frames.push_back(std::move(f));
    }

    Sample s;
    s.video = DsaVideo(std::move(frames));
    s.key_frame_index = key;
    s.sample_id = sample_id_for(scene.index);
    s.liver_mask = BinaryMask(h, w);
    s.tumor_mask = BinaryMask(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double x = c + 0.5, y = r + 0.5;
            s.liver_mask(r, c) = scene.liver.shape.contains(x, y) ? 1 : 0;
            for (const auto& tm : scene.tumors)
                if (tm.shape.contains(x, y)) {
                    s.tumor_mask(r, c) = 1;
                    break;
                }
        }
    return s;
}

/// train = floor(N * (1 - test_fraction)), test = the rest; the first
/// indices go to training.
inline int train_count(const PhantomConfig& c) {
    return static_cast<int>(std::floor(c.num_samples * (1.0 - c.test_fraction) + 1e-9));
}

/// Desk-scale preset: 80 samples of 64x64 split 64/16. The radius range is
/// the clinical size range rescaled to 64 px; edges are softened a little
/// more than at full size so boundaries stay ambiguous.
inline PhantomConfig desk_scale_config(std::uint64_t seed = 0) {
    PhantomConfig c;
    c.seed = seed;
    c.num_samples = 80;
    c.height = 64;
    c.width = 64;
    c.tumor_radius_range = {2.0, 6.8};
    c.feather_width = 0.75;
    c.artifact_amplitude = 0.5;
    c.test_fraction = 0.2;
    return c;
}

/// Writes every sample and manifest.json under `out_dir`. Refuses to write
/// into a directory that already holds a manifest unless `overwrite`.
inline DatasetManifest generate_dataset(const PhantomConfig& config, const fs::path& out_dir,
                                        bool overwrite = false) {
    validate(config);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw io::IoError("cannot create output directory " + out_dir.string());
    const auto manifest_path = out_dir / "manifest.json";
    if (fs::exists(manifest_path)) {
        if (!overwrite)
            throw io::IoError(out_dir.string() + " already holds a dataset; refusing to overwrite");
        const auto old = load_manifest(out_dir);
        for (const auto& e : old.samples) fs::remove_all(out_dir / e.id);
        fs::remove(manifest_path);
    }

    const int n = config.num_samples;
    const int n_train = train_count(config);
    std::vector<ManifestEntry> entries(static_cast<std::size_t>(n));
    std::vector<std::string> errors(static_cast<std::size_t>(n));
    std::atomic<int> next{0};
    const auto worker = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                const auto scene = generate_scene(config, i);
                const auto sample = render_video(scene, config);
                const auto dir = out_dir / sample.sample_id;
                fs::create_directories(dir);
                for (int f = 0; f < sample.video.frame_count(); ++f)
                    io::write_frame(dir / frame_file_name(f), sample.video.frame(f));
                io::write_mask(dir / "tumor_mask.png", sample.tumor_mask);
                io::write_mask(dir / "liver_mask.png", sample.liver_mask);
                auto& e = entries[static_cast<std::size_t>(i)];
                e.id = sample.sample_id;
                e.split = i < n_train ? Split::Train : Split::Test;
                e.key_frame_index = sample.key_frame_index;
                e.frame_count = sample.video.frame_count();
                if (e.split == Split::Train) e.aug_frame_indices = {e.key_frame_index + 1, e.key_frame_index + 2};
            } catch (const std::exception& ex) {
                errors[static_cast<std::size_t>(i)] = ex.what();
            }
        }
    };
    const unsigned threads = deterministic_mode() ? 1u : std::max(1u, std::thread::hardware_concurrency());
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }
    for (const auto& err : errors)
        if (!err.empty()) throw io::IoError("generate_dataset: " + err);

    const json manifest = manifest_to_json(to_json(config), entries);
    const auto text = manifest_text(manifest);
    write_text_file(manifest_path, text);

    DatasetManifest m;
    m.root = out_dir;
    m.config = to_json(config);
    m.samples = std::move(entries);
    m.hash = hex64(fnv1a(text));
    return m;
}

}  // namespace dsa_ltd
