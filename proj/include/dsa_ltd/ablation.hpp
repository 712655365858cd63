#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dsa_ltd/train.hpp"

namespace dsa_ltd {

inline constexpr int kReportSchemaVersion = 1;

struct AblationVariant {
    std::string name;
    /// Human-readable row label.
    std::string label;
    FusionLayout layout;
    bool tdl_supervised = true;
    /// Reference clinical DICE (%) and its stated delta to the baseline;
    /// metadata only. Deltas are stored as stated, not recomputed (the
    /// full-model row states +2.97 for a 2.93 difference).
    double reference_dice = std::numeric_limits<double>::quiet_NaN();
    double reference_delta = std::numeric_limits<double>::quiet_NaN();

    bool includes_lrs() const { return layout.liver; }

    std::vector<std::string> ffs_inputs() const {
        std::vector<std::string> in{"key_frame"};
        if (layout.motion != MotionInput::None) in.push_back(to_string(layout.motion));
        if (layout.liver) in.push_back("liver_map");
        return in;
    }
};

inline constexpr double kReferenceBaselineDice = 70.75;

inline std::vector<AblationVariant> canonical_variants() {
    using M = MotionInput;
    return {
        {"baseline", "U-Net (baseline)", {M::None, false}, true, kReferenceBaselineDice, 0.0},
        {"kf_of", "FFS KF + OF", {M::OpticalFlow, false}, true, 68.35, -2.40},
        {"kf_fd", "FFS KF + FD", {M::FrameDifference, false}, true, 71.73, 0.98},
        {"kf_bs", "FFS KF + BS", {M::BackgroundSubtraction, false}, true, 68.89, -1.86},
        {"kf_tdl_unsupervised", "FFS KF + TDL w/o supervision", {M::Tdl, false}, false, 69.90, -0.85},
        {"kf_tdl_supervised", "FFS + TDL", {M::Tdl, false}, true, 72.32, 1.57},
        {"ffs_lrs", "FFS + LRS", {M::None, true}, true, 72.01, 1.26},
        {"dsa_ltdnet", "DSA-LTDNet", {M::Tdl, true}, true, 73.68, 2.97},
    };
}

/// Training config for one variant: an unsupervised TDL gets lambda0 = 0 and
/// no warmup, everything else runs the shared config.
inline TrainConfig variant_train_config(const AblationVariant& v, TrainConfig cfg) {
    if (v.layout.has_tdl() && !v.tdl_supervised) {
        cfg.weights.lambda0 = 0.0;
        cfg.tdl_warmup_epochs = 0;
    }
    return cfg;
}

struct VariantResult {
    AblationVariant variant;
    bool ok = false;
    std::string error;
    std::vector<std::string> ids;
    std::vector<double> dice;
    double mean_dice = 0.0;
    double std_dice = 0.0;
    /// Relative to the report directory.
    std::string train_log_path;
    std::string config_hash;
    int best_epoch = -1;
    /// Binarized test predictions, same order as `ids`. Not serialized.
    std::vector<BinaryMask> predictions;
};

struct AblationReport {
    std::string dataset_hash;
    std::uint64_t seed = 0;
    int base_width = 0;
    int depth = 0;
    std::vector<VariantResult> variants;
};

struct AblationHooks {
    std::function<void(const AblationVariant&)> on_variant_start;
    std::function<void(const VariantResult&)> on_variant_done;
    TrainHooks train;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    const double n = static_cast<double>(v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / n)};
}

/// Trains and scores each variant on the shared test split. A variant that
/// throws is recorded as failed and the rest still run.
inline AblationReport run_ablation(const DatasetManifest& manifest, const std::vector<AblationVariant>& variants,
                                   int base_width, int depth, const TrainConfig& cfg,
                                   const std::filesystem::path& out_dir, const AblationHooks& hooks = {}) {
    if (variants.empty()) throw std::invalid_argument("run_ablation: no variants");
    validate(cfg);
    auto test = prepare_split(manifest, Split::Test);
    if (test.empty()) throw std::invalid_argument("run_ablation: test split is empty");

    AblationReport report;
    report.dataset_hash = manifest.hash;
    report.seed = cfg.seed;
    report.base_width = base_width;
    report.depth = depth;
    for (const auto& v : variants) {
        if (hooks.on_variant_start) hooks.on_variant_start(v);
        VariantResult r;
        r.variant = v;
        const auto rel = std::filesystem::path("variants") / v.name;
        r.train_log_path = (rel / "train_log.csv").generic_string();
        try {
            const auto model = BundleConfig::uniform(v.layout, base_width, depth);
            const auto tcfg = variant_train_config(v, cfg);
            r.config_hash = hex64(fnv1a(json{{"model", to_json(model)}, {"train", to_json(tcfg)}}.dump()));
            auto trained = train(manifest, model, tcfg, out_dir / rel, hooks.train);
            r.best_epoch = trained.best_epoch;
            const auto ck = load_checkpoint(trained.best_checkpoint);
            const auto maps = predict(ck.bundle, test, tcfg.batch_size);
            for (std::size_t i = 0; i < test.size(); ++i) {
                r.predictions.push_back(binarize(maps[i]));
                r.ids.push_back(test[i].sample.sample_id);
                r.dice.push_back(dice_score(r.predictions.back(), test[i].sample.tumor_mask));
            }
            std::tie(r.mean_dice, r.std_dice) = mean_std(r.dice);
            r.ok = true;
        } catch (const std::exception& e) {
            r.ok = false;
            r.error = e.what();
            r.ids.clear();
            r.dice.clear();
            r.predictions.clear();
        }
        if (hooks.on_variant_done) hooks.on_variant_done(r);
        report.variants.push_back(std::move(r));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report files

inline json report_to_json(const AblationReport& report) {
    json variants = json::array();
    for (const auto& r : report.variants) {
        json v{{"name", r.variant.name},
               {"label", r.variant.label},
               {"ffs_inputs", r.variant.ffs_inputs()},
               {"tdl_supervised", r.variant.layout.has_tdl() && r.variant.tdl_supervised},
               {"includes_lrs", r.variant.includes_lrs()},
               {"status", r.ok ? "ok" : "failed"},
               {"train_log_path", r.train_log_path},
               {"config_hash", r.config_hash},
               {"reference_dice", r.variant.reference_dice},
               {"reference_delta", r.variant.reference_delta}};
        if (r.ok) {
            v["mean_dice"] = r.mean_dice;
            v["std_dice"] = r.std_dice;
            v["best_epoch"] = r.best_epoch;
            json ps = json::array();
            for (std::size_t i = 0; i < r.ids.size(); ++i) ps.push_back(json{{"id", r.ids[i]}, {"dice", r.dice[i]}});
            v["per_sample"] = ps;
        } else {
            v["mean_dice"] = nullptr;
            v["std_dice"] = nullptr;
            v["per_sample"] = json::array();
            v["error"] = r.error;
        }
        variants.push_back(std::move(v));
    }
    return json{{"schema_version", kReportSchemaVersion},
                {"dataset_hash", report.dataset_hash},
                {"seed", report.seed},
                {"base_width", report.base_width},
                {"depth", report.depth},
                {"reference_note",
                 "reference_dice values come from a private clinical dataset and are not expected to match"},
                {"variants", variants}};
}

inline std::string format_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// One row per variant: method, inputs, DICE (%), delta to the baseline row,
/// and the clinical reference value.
inline std::string report_to_csv(const AblationReport& report) {
    const VariantResult* base = nullptr;
    for (const auto& r : report.variants)
        if (r.ok && r.variant.layout == FusionLayout{MotionInput::None, false}) base = &r;
    std::string out = "method,inputs,dice_pct,std_pct,delta_vs_baseline,reference_dice_pct,reference_delta\n";
    for (const auto& r : report.variants) {
        std::string inputs;
        for (const auto& s : r.variant.ffs_inputs()) inputs += (inputs.empty() ? "" : "+") + s;
        out += r.variant.label + "," + inputs + ",";
        if (r.ok) {
            out += format_pct(100.0 * r.mean_dice) + "," + format_pct(100.0 * r.std_dice) + ",";
            out += base ? format_pct(100.0 * (r.mean_dice - base->mean_dice)) : "";
        } else {
            out += "failed,,";
        }
        out += ",";
        if (!std::isnan(r.variant.reference_dice))
            out += format_pct(r.variant.reference_dice) + "," + format_pct(r.variant.reference_delta);
        else
            out += ",";
        out += "\n";
    }
    return out;
}

namespace detail {

inline void imwrite_checked(const std::filesystem::path& p, const cv::Mat& img) {
    bool ok = false;
    try {
        ok = cv::imwrite(p.string(), img, {cv::IMWRITE_PNG_COMPRESSION, 6});
    } catch (const cv::Exception& e) {
        throw io::IoError("cannot write " + p.string() + ": " + e.what());
    }
    if (!ok) throw io::IoError("cannot write " + p.string());
}

inline cv::Mat mask_mat(const BinaryMask& m, int scale) {
    cv::Mat small(m.height(), m.width(), CV_8UC1);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c) small.at<std::uint8_t>(r, c) = m(r, c) ? 255 : 0;
    cv::Mat big;
    cv::resize(small, big, {}, scale, scale, cv::INTER_NEAREST);
    return big;
}

}  // namespace detail

/// Key frame with the ground-truth contour in yellow and the predicted
/// contour in cyan.
inline cv::Mat render_overlay(const Frame& key_frame, const BinaryMask& truth, const BinaryMask& pred, int scale) {
    cv::Mat gray(key_frame.height(), key_frame.width(), CV_8UC1);
    for (int r = 0; r < key_frame.height(); ++r)
        for (int c = 0; c < key_frame.width(); ++c) gray.at<std::uint8_t>(r, c) = quantize_8bit(key_frame(r, c));
    cv::Mat big, color;
    cv::resize(gray, big, {}, scale, scale, cv::INTER_NEAREST);
    cv::cvtColor(big, color, cv::COLOR_GRAY2BGR);
    const auto draw = [&](const BinaryMask& m, cv::Scalar bgr) {
        std::vector<std::vector<cv::Point>> contours;
        cv::findContours(detail::mask_mat(m, scale), contours, cv::RETR_LIST, cv::CHAIN_APPROX_NONE);
        cv::drawContours(color, contours, -1, bgr, 1);
    };
    draw(truth, {0, 255, 255});
    draw(pred, {255, 255, 0});
    return color;
}

inline cv::Mat render_bar_chart(const AblationReport& report) {
    const int bar_w = 60, gap = 20, left = 60, top = 30, plot_h = 300, bottom = 170;
    const int n = static_cast<int>(report.variants.size());
    const int width = left + n * (bar_w + gap) + gap;
    cv::Mat img(top + plot_h + bottom, width, CV_8UC3, cv::Scalar(255, 255, 255));
    const int y0 = top + plot_h;
    for (int t = 0; t <= 10; t += 2) {
        const int y = y0 - plot_h * t / 10;
        cv::line(img, {left - 5, y}, {width - gap / 2, y}, {220, 220, 220}, 1);
        cv::putText(img, std::to_string(t * 10), {10, y + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                    cv::LINE_8);
    }
    cv::line(img, {left - 5, y0}, {width - gap / 2, y0}, {0, 0, 0}, 1);
    for (int i = 0; i < n; ++i) {
        const auto& r = report.variants[static_cast<std::size_t>(i)];
        const int x = left + gap / 2 + i * (bar_w + gap);
        if (r.ok) {
            const int h = static_cast<int>(std::lround(plot_h * std::clamp(r.mean_dice, 0.0, 1.0)));
            const cv::Scalar fill = r.variant.layout == FusionLayout{} ? cv::Scalar(40, 90, 200) : cv::Scalar(180, 120, 40);
            cv::rectangle(img, {x, y0 - h}, {x + bar_w, y0}, fill, cv::FILLED);
            cv::putText(img, format_pct(100.0 * r.mean_dice), {x + 4, y0 - h - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                        {0, 0, 0}, 1, cv::LINE_8);
        } else {
            cv::putText(img, "failed", {x + 4, y0 - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 200}, 1, cv::LINE_8);
        }
        // Rotated name under the bar.
        cv::Mat label(24, bottom - 10, CV_8UC3, cv::Scalar(255, 255, 255));
        cv::putText(label, r.variant.name, {2, 17}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_8);
        cv::Mat rotated;
        cv::rotate(label, rotated, cv::ROTATE_90_CLOCKWISE);
        rotated.copyTo(img(cv::Rect(x + bar_w / 2 - 12, y0 + 6, rotated.cols, rotated.rows)));
    }
    return img;
}

inline constexpr int kOverlaysPerSide = 4;

/// Writes results.json, results.csv, dice_bar.png and, for each successful
/// variant, overlays/<name>/{best,worst}_<rank>_<id>.png. Returns the list of
/// files that could not be written (empty on full success).
inline std::vector<std::string> emit_report(const AblationReport& report, const DatasetManifest& manifest,
                                            const std::filesystem::path& out_dir) {
    std::vector<std::string> failures;
    const auto attempt = [&](const std::filesystem::path& p, auto&& fn) {
        try {
            fn(p);
        } catch (const std::exception& e) {
            failures.push_back(p.string() + ": " + e.what());
        }
    };
    std::filesystem::create_directories(out_dir);
    attempt(out_dir / "results.json",
            [&](const auto& p) { write_text_file(p, report_to_json(report).dump(2) + "\n"); });
    attempt(out_dir / "results.csv", [&](const auto& p) { write_text_file(p, report_to_csv(report)); });
    attempt(out_dir / "dice_bar.png", [&](const auto& p) { detail::imwrite_checked(p, render_bar_chart(report)); });

    std::vector<PreparedSample> test;
    try {
        test = prepare_split(manifest, Split::Test);
    } catch (const std::exception& e) {
        failures.push_back(std::string("overlays: ") + e.what());
        return failures;
    }
    for (const auto& r : report.variants) {
        if (!r.ok || r.ids.empty()) continue;
        const auto dir = out_dir / "overlays" / r.variant.name;
        std::filesystem::create_directories(dir);
        std::vector<std::size_t> order(r.ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return r.dice[a] != r.dice[b] ? r.dice[a] > r.dice[b] : r.ids[a] < r.ids[b];
        });
        const int k = std::min<int>(kOverlaysPerSide, static_cast<int>(order.size()));
        const auto write_one = [&](std::size_t idx, const std::string& tag) {
            const auto it = std::find_if(test.begin(), test.end(),
                                         [&](const PreparedSample& p) { return p.sample.sample_id == r.ids[idx]; });
            const auto p = dir / (tag + "_" + r.ids[idx] + ".png");
            attempt(p, [&](const auto& path) {
                if (it == test.end()) throw io::IoError("sample not in test split");
                const auto& s = it->sample;
                const int scale = std::max(1, 256 / s.video.width());
                detail::imwrite_checked(path, render_overlay(s.video.frame(s.key_frame_index), s.tumor_mask,
                                                             r.predictions[idx], scale));
            });
        };
        for (int i = 0; i < k; ++i) write_one(order[static_cast<std::size_t>(i)], "best_" + std::to_string(i + 1));
        for (int i = 0; i < k; ++i)
            write_one(order[order.size() - 1 - static_cast<std::size_t>(i)], "worst_" + std::to_string(i + 1));
    }
    return failures;
}

}  // namespace dsa_ltd
