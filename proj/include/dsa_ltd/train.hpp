#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dsa_ltd/checkpoint.hpp"
#include "dsa_ltd/core.hpp"
#include "dsa_ltd/dataset.hpp"
#include "dsa_ltd/losses.hpp"
#include "dsa_ltd/models.hpp"
#include "dsa_ltd/motion.hpp"
#include "dsa_ltd/nn/adam.hpp"

namespace dsa_ltd {

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Device { Cpu, Accelerator };

struct TrainConfig {
    int batch_size = 8;
    int epochs = 150;
    double initial_lr = 1e-3;
    double lr_min = 0.0;
    LossWeights weights;
    /// TDL-only epochs on the frame-difference loss, run before `epochs`.
    int tdl_warmup_epochs = 10;
    std::uint64_t seed = 0;
    Device device = Device::Cpu;
    /// Share of the train split held out for checkpoint selection.
    double val_fraction = 0.2;
    /// Train on k+1 and k+2 as well as k.
    bool augment = true;
    /// Cut the fusion gradient into TDL and LRS.
    bool detach_aux = false;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
    const auto fail = [](const std::string& m) { throw ConfigError("TrainConfig: " + m); };
    if (c.batch_size < 1) fail("batch_size must be >= 1");
    if (c.epochs < 1) fail("epochs must be >= 1");
    if (!(c.initial_lr > 0.0)) fail("initial_lr must be > 0");
    if (!(c.lr_min >= 0.0) || c.lr_min > c.initial_lr) fail("lr_min must lie in [0, initial_lr]");
    if (c.tdl_warmup_epochs < 0 || c.tdl_warmup_epochs >= c.epochs)
        fail("tdl_warmup_epochs must lie in [0, epochs)");
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) fail("val_fraction must lie in [0,1)");
    try {
        validate(c.weights);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

inline json to_json(const TrainConfig& c) {
    return json{{"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"initial_lr", c.initial_lr},
                {"lr_min", c.lr_min},
                {"weights", {{"a", c.weights.a}, {"lambda0", c.weights.lambda0}, {"lambda1", c.weights.lambda1}}},
                {"tdl_warmup_epochs", c.tdl_warmup_epochs},
                {"seed", c.seed},
                {"device", c.device == Device::Cpu ? "cpu" : "accelerator"},
                {"val_fraction", c.val_fraction},
                {"augment", c.augment},
                {"detach_aux", c.detach_aux}};
}

inline TrainConfig train_config_from_json(const json& j) {
    constexpr const char* ctx = "train";
    reject_unknown_keys(j, {"batch_size", "epochs", "initial_lr", "lr_min", "weights", "tdl_warmup_epochs", "seed",
                            "device", "val_fraction", "augment", "detach_aux"},
                        ctx);
    TrainConfig c;
    read_optional(j, "batch_size", c.batch_size, ctx);
    read_optional(j, "epochs", c.epochs, ctx);
    read_optional(j, "initial_lr", c.initial_lr, ctx);
    read_optional(j, "lr_min", c.lr_min, ctx);
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        reject_unknown_keys(w, {"a", "lambda0", "lambda1"}, "train.weights");
        read_optional(w, "a", c.weights.a, "train.weights");
        read_optional(w, "lambda0", c.weights.lambda0, "train.weights");
        read_optional(w, "lambda1", c.weights.lambda1, "train.weights");
    }
    read_optional(j, "tdl_warmup_epochs", c.tdl_warmup_epochs, ctx);
    read_optional(j, "seed", c.seed, ctx);
    std::string device = "cpu";
    read_optional(j, "device", device, ctx);
    if (device != "cpu" && device != "accelerator") throw ConfigError("train.device: expected cpu or accelerator");
    c.device = device == "cpu" ? Device::Cpu : Device::Accelerator;
    read_optional(j, "val_fraction", c.val_fraction, ctx);
    read_optional(j, "augment", c.augment, ctx);
    read_optional(j, "detach_aux", c.detach_aux, ctx);
    validate(c);
    return c;
}

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(int step, int total_steps, const TrainConfig& cfg) {
    if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(total_steps) + "]");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return cfg.lr_min + 0.5 * (cfg.initial_lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Data

/// A decoded sample plus lazily computed motion maps, keyed by frame.
struct PreparedSample {
    Sample sample;
    /// Frames usable as training key frames (k, then augmentation frames).
    std::vector<int> draw_frames;
    std::map<int, MotionMap> fd_cache;
    std::map<int, MotionMap> motion_cache;

    const MotionMap& frame_difference_at(int j) {
        auto it = fd_cache.find(j);
        if (it == fd_cache.end()) it = fd_cache.emplace(j, frame_difference(sample.video, j)).first;
        return it->second;
    }

    const MotionMap& motion_at(int j, MotionInput kind) {
        if (kind == MotionInput::FrameDifference) return frame_difference_at(j);
        auto it = motion_cache.find(j);
        if (it == motion_cache.end()) {
            const MotionKind mk = kind == MotionInput::OpticalFlow ? MotionKind::OpticalFlowMagnitude
                                                                    : MotionKind::BackgroundSubtraction;
            it = motion_cache.emplace(j, extract_motion(sample.video, j, mk)).first;
        }
        return it->second;
    }
};

inline PreparedSample prepare_sample(const DatasetManifest& m, const ManifestEntry& e, bool with_aug) {
    PreparedSample p;
    try {
        p.sample = load_sample(m, e);
    } catch (const std::exception& ex) {
        throw TrainError("sample " + e.id + ": " + ex.what());
    }
    const auto violations = validate_sample(p.sample);
    if (!violations.empty()) throw TrainError("sample " + e.id + ": " + violations.front().message);
    p.draw_frames.push_back(e.key_frame_index);
    if (with_aug)
        for (int j : e.aug_frame_indices) {
            if (j < kDifferenceOffset || j >= p.sample.video.frame_count())
                throw TrainError("sample " + e.id + ": augmentation frame " + std::to_string(j) + " out of range");
            p.draw_frames.push_back(j);
        }
    return p;
}

/// Splits train entries into (fit, validation) by hashing sample ids.
inline std::pair<std::vector<const ManifestEntry*>, std::vector<const ManifestEntry*>> split_validation(
    std::vector<const ManifestEntry*> entries, double fraction) {
    std::sort(entries.begin(), entries.end(), [](const ManifestEntry* a, const ManifestEntry* b) {
        const auto ha = fnv1a(a->id), hb = fnv1a(b->id);
        return ha != hb ? ha < hb : a->id < b->id;
    });
    auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(entries.size()) * fraction + 1e-9));
    if (n_val >= entries.size()) n_val = entries.empty() ? 0 : entries.size() - 1;
    std::vector<const ManifestEntry*> val(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<const ManifestEntry*> fit(entries.begin() + static_cast<std::ptrdiff_t>(n_val), entries.end());
    const auto by_id = [](const ManifestEntry* a, const ManifestEntry* b) { return a->id < b->id; };
    std::sort(fit.begin(), fit.end(), by_id);
    std::sort(val.begin(), val.end(), by_id);
    return {fit, val};
}

struct Draw {
    std::size_t sample = 0;
    int frame = 0;
};

/// Builds the tensors a layout needs for a list of (sample, frame) draws.
inline BatchInputs<float> build_inputs(const FusionLayout& layout, std::vector<PreparedSample>& data,
                                       std::span<const Draw> draws, bool need_stack) {
    const int n = static_cast<int>(draws.size());
    const auto& first = data[draws.front().sample].sample.video;
    const int h = first.height(), w = first.width();
    BatchInputs<float> in;
    in.key_frame = nn::Tensor<float>(n, 1, h, w);
    if (need_stack) in.stack = nn::Tensor<float>(n, kTemporalStack, h, w);
    const bool raw_motion = layout.motion != MotionInput::None && !layout.has_tdl();
    if (raw_motion) in.motion = nn::Tensor<float>(n, 1, h, w);
    for (int i = 0; i < n; ++i) {
        auto& p = data[draws[static_cast<std::size_t>(i)].sample];
        const int j = draws[static_cast<std::size_t>(i)].frame;
        if (p.sample.video.height() != h || p.sample.video.width() != w)
            throw TrainError("sample " + p.sample.sample_id + ": frame size differs from the rest of the batch");
        copy_into(p.sample.video.frame(j), in.key_frame, i, 0);
        if (need_stack) copy_stack(p.sample.video, j, in.stack, i);
        if (raw_motion) copy_into(p.motion_at(j, layout.motion).pixels, in.motion, i, 0);
    }
    return in;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    std::vector<std::string> ids;
    std::vector<double> dice;
    double mean = 0.0;
};

/// Inference-mode segmentation maps at each sample's key frame.
inline std::vector<ProbabilityMap> predict(const ModelBundle<float>& b, std::vector<PreparedSample>& data,
                                           int batch_size = 8) {
    std::vector<ProbabilityMap> out;
    out.reserve(data.size());
    std::vector<Draw> draws;
    for (std::size_t i = 0; i < data.size(); ++i) draws.push_back({i, data[i].sample.key_frame_index});
    for (std::size_t s = 0; s < draws.size(); s += static_cast<std::size_t>(batch_size)) {
        const auto e = std::min(draws.size(), s + static_cast<std::size_t>(batch_size));
        const std::span<const Draw> chunk(draws.data() + s, e - s);
        const auto in = build_inputs(b.config.layout, data, chunk, b.config.layout.has_tdl());
        const auto res = bundle_infer(b, in);
        for (int i = 0; i < static_cast<int>(chunk.size()); ++i) out.push_back(to_probability_map(res.seg, i));
    }
    return out;
}

/// Per-sample DICE of the binarized (>= 0.5) prediction and their mean.
inline EvalResult evaluate(const ModelBundle<float>& b, std::vector<PreparedSample>& data, int batch_size = 8) {
    if (data.empty()) throw std::invalid_argument("evaluate: split is empty");
    const auto maps = predict(b, data, batch_size);
    EvalResult r;
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double d = dice_score(binarize(maps[i]), data[i].sample.tumor_mask);
        r.ids.push_back(data[i].sample.sample_id);
        r.dice.push_back(d);
        sum += d;
    }
    r.mean = sum / static_cast<double>(data.size());
    return r;
}

inline std::vector<PreparedSample> prepare_split(const DatasetManifest& m, Split split) {
    std::vector<PreparedSample> out;
    for (const auto* e : m.split(split)) out.push_back(prepare_sample(m, *e, false));
    return out;
}

/// Loads a checkpoint and evaluates it on one split of a dataset.
inline EvalResult evaluate(const DatasetManifest& m, Split split, const std::filesystem::path& checkpoint,
                           const BundleConfig* expected = nullptr) {
    auto data = prepare_split(m, split);
    if (data.empty()) throw std::invalid_argument(std::string("evaluate: ") + to_string(split) + " split is empty");
    auto ck = load_checkpoint(checkpoint);
    if (expected && !(ck.meta.config == *expected))
        throw CheckpointError("checkpoint config does not match the requested model config");
    return evaluate(ck.bundle, data);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    LossReport loss;
    double train_dice = 0.0;
    /// NaN when no validation samples were held out.
    double val_dice = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::string_view kTrainLogHeader = "epoch,lr,l_ltd,l_lrs,l_seg,total,train_dice,val_dice";

inline std::string format_log_row(const EpochLog& e) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", e.epoch, e.lr, e.loss.l_ltd,
                  e.loss.l_lrs, e.loss.l_seg, e.loss.total, e.train_dice, e.val_dice);
    return buf;
}

struct TrainResult {
    std::vector<EpochLog> log;
    std::filesystem::path log_path;
    std::filesystem::path best_checkpoint;
    std::filesystem::path final_checkpoint;
    int best_epoch = -1;
    long optimizer_steps = 0;
    /// Optimizer steps per phase-2 epoch.
    long joint_steps_per_epoch = 0;
    ModelBundle<float> final_bundle;
};

struct TrainHooks {
    std::function<void(const EpochLog&)> on_epoch;
    /// Called after every phase-2 optimizer step.
    std::function<void(long step, const ModelBundle<float>&)> on_step;
};

namespace detail {

inline std::uint64_t next_u64(std::mt19937_64& rng) { return rng(); }

/// Fisher-Yates with a modulo draw; portable across standard libraries.
template <typename V>
void portable_shuffle(V& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(next_u64(rng) % i);
        std::swap(v[i - 1], v[j]);
    }
}

template <typename GetTarget>
double mask_loss(const nn::Tensor<float>& pred, nn::Tensor<float>* grad, double a, double scale, GetTarget target) {
    const std::size_t plane = static_cast<std::size_t>(pred.h) * static_cast<std::size_t>(pred.w);
    double sum = 0.0;
    for (int i = 0; i < pred.n; ++i) {
        std::span<const float> p(pred.channel(i, 0), plane);
        std::span<float> g = grad ? std::span<float>(grad->channel(i, 0), plane) : std::span<float>{};
        sum += losses::composite<float, std::uint8_t>(p, target(i), a, g, scale / pred.n);
    }
    return sum / pred.n;
}

inline bool finite(const LossReport& r) {
    return std::isfinite(r.l_ltd) && std::isfinite(r.l_lrs) && std::isfinite(r.l_seg) && std::isfinite(r.total);
}

}  // namespace detail

/// Two-phase training: `tdl_warmup_epochs` of TDL alone on the L1 loss
/// against the frame difference, then `epochs` of joint optimization of the
/// weighted total. Writes train_log.csv, train_config.json, best.ckpt and
/// final.ckpt into `out_dir`.
inline TrainResult train(const DatasetManifest& manifest, const BundleConfig& model_cfg, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir, const TrainHooks& hooks = {}) {
    validate(cfg);
    validate(model_cfg);
    if (cfg.device == Device::Accelerator) throw TrainError("device 'accelerator' is not available in this build");
    const auto& layout = model_cfg.layout;

    auto [fit_entries, val_entries] = split_validation(manifest.split(Split::Train), cfg.val_fraction);
    if (fit_entries.empty()) throw TrainError("train split is empty");
    std::vector<PreparedSample> fit, fit_eval, val;
    for (const auto* e : fit_entries) fit.push_back(prepare_sample(manifest, *e, cfg.augment));
    for (const auto* e : fit_entries) fit_eval.push_back(prepare_sample(manifest, *e, false));
    for (const auto* e : val_entries) val.push_back(prepare_sample(manifest, *e, false));

    std::filesystem::create_directories(out_dir);
    TrainResult result;
    result.log_path = out_dir / "train_log.csv";
    result.best_checkpoint = out_dir / "best.ckpt";
    result.final_checkpoint = out_dir / "final.ckpt";

    const json echo{{"dataset_hash", manifest.hash},
                    {"dataset_root", manifest.root.string()},
                    {"model", to_json(model_cfg)},
                    {"train", to_json(cfg)},
                    {"fit_ids", [&] {
                         json a = json::array();
                         for (const auto& p : fit) a.push_back(p.sample.sample_id);
                         return a;
                     }()},
                    {"val_ids", [&] {
                         json a = json::array();
                         for (const auto& p : val) a.push_back(p.sample.sample_id);
                         return a;
                     }()}};
    write_text_file(out_dir / "train_config.json", echo.dump(2) + "\n");

    auto bundle = build_bundle<float>(model_cfg, cfg.seed);
    std::vector<nn::Adam<float>> optim;
    nn::Adam<float>* tdl_optim = nullptr;
    for (auto* net : bundle.networks()) optim.emplace_back(net->parameters());
    if (layout.has_tdl()) tdl_optim = &optim.front();

    std::mt19937_64 rng(mix64(cfg.seed ^ 0x7a3c5e91d2b4f608ULL));
    std::vector<Draw> draws;
    for (std::size_t i = 0; i < fit.size(); ++i)
        for (int j : fit[i].draw_frames) draws.push_back({i, j});

    const int warmup = layout.has_tdl() ? cfg.tdl_warmup_epochs : 0;
    const int total_epochs = warmup + cfg.epochs;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    result.joint_steps_per_epoch = static_cast<long>((draws.size() + bs - 1) / bs);
    const auto& w = cfg.weights;

    std::ofstream log(result.log_path, std::ios::trunc);
    if (!log) throw TrainError("cannot write " + result.log_path.string());
    log << kTrainLogHeader << "\n";

    double best_metric = -1.0;
    long step = 0;
    BundleCache<float> cache;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        const bool warm = epoch < warmup;
        const double lr = warm ? cfg.initial_lr : cosine_lr(epoch - warmup, cfg.epochs, cfg);
        detail::portable_shuffle(draws, rng);
        LossReport sum;
        for (std::size_t s = 0; s < draws.size(); s += bs) {
            const std::span<const Draw> batch(draws.data() + s, std::min(draws.size(), s + bs) - s);
            const auto in = build_inputs(layout, fit, batch, layout.has_tdl());
            const int n = static_cast<int>(batch.size());
            const std::size_t plane = static_cast<std::size_t>(in.key_frame.h) * static_cast<std::size_t>(in.key_frame.w);
            const auto fd_target = [&](int i) {
                return fit[batch[static_cast<std::size_t>(i)].sample].frame_difference_at(batch[static_cast<std::size_t>(i)].frame).pixels.pixels();
            };
            const auto tumor = [&](int i) { return fit[batch[static_cast<std::size_t>(i)].sample].sample.tumor_mask.pixels(); };
            const auto liver = [&](int i) { return fit[batch[static_cast<std::size_t>(i)].sample].sample.liver_mask.pixels(); };
            const auto l1_batch = [&](const nn::Tensor<float>& pred, nn::Tensor<float>* grad, double scale) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) {
                    std::span<const float> p(pred.channel(i, 0), plane);
                    std::span<float> g = grad ? std::span<float>(grad->channel(i, 0), plane) : std::span<float>{};
                    acc += losses::l1<float, float>(p, fd_target(i), g, scale / n);
                }
                return acc / n;
            };

            LossReport r;
            if (warm) {
                typename nn::UNet<float>::Cache tc;
                auto ltd = bundle.tdl->forward_train(in.stack, tc);
                nn::Tensor<float> g(ltd.n, ltd.c, ltd.h, ltd.w);
                r.l_ltd = l1_batch(ltd, &g, 1.0);
                BatchOutputs<float> out;
                out.ltd = std::move(ltd);
                if (layout.liver) {
                    out.lrs = bundle.lrs->infer(in.key_frame);
                    r.l_lrs = detail::mask_loss(out.lrs, nullptr, w.a, 1.0, liver);
                }
                out.seg = bundle.ffs.infer(assemble_ffs_input(layout, in, out));
                r.l_seg = detail::mask_loss(out.seg, nullptr, w.a, 1.0, tumor);
                r.total = w.lambda0 * r.l_ltd + w.lambda1 * r.l_lrs + r.l_seg;
                if (!detail::finite(r)) throw TrainError("non-finite loss at step " + std::to_string(step));
                bundle.tdl->zero_grad();
                bundle.tdl->backward(tc, g, false);
                tdl_optim->step(lr);
            } else {
                auto out = bundle_forward(bundle, in, &cache);
                OutputGrads<float> g;
                g.seg = nn::Tensor<float>(out.seg.n, 1, out.seg.h, out.seg.w);
                r.l_seg = detail::mask_loss(out.seg, &g.seg, w.a, 1.0, tumor);
                if (layout.has_tdl()) {
                    g.ltd = nn::Tensor<float>(out.ltd.n, 1, out.ltd.h, out.ltd.w);
                    r.l_ltd = l1_batch(out.ltd, &g.ltd, w.lambda0);
                }
                if (layout.liver) {
                    g.lrs = nn::Tensor<float>(out.lrs.n, 1, out.lrs.h, out.lrs.w);
                    r.l_lrs = detail::mask_loss(out.lrs, &g.lrs, w.a, w.lambda1, liver);
                }
                r.total = w.lambda0 * r.l_ltd + w.lambda1 * r.l_lrs + r.l_seg;
                if (!detail::finite(r)) throw TrainError("non-finite loss at step " + std::to_string(step));
                for (auto* net : bundle.networks()) net->zero_grad();
                bundle_backward(bundle, cache, g, cfg.detach_aux);
                for (auto& o : optim) o.step(lr);
            }
            ++step;
            if (!warm && hooks.on_step) hooks.on_step(step, bundle);
            sum.l_ltd += r.l_ltd * n;
            sum.l_lrs += r.l_lrs * n;
            sum.l_seg += r.l_seg * n;
            sum.total += r.total * n;
        }

        EpochLog row;
        row.epoch = epoch;
        row.lr = lr;
        const double nd = static_cast<double>(draws.size());
        row.loss = {sum.l_ltd / nd, sum.l_lrs / nd, sum.l_seg / nd, sum.total / nd};
        row.train_dice = evaluate(bundle, fit_eval, cfg.batch_size).mean;
        if (!val.empty()) row.val_dice = evaluate(bundle, val, cfg.batch_size).mean;
        result.log.push_back(row);
        log << format_log_row(row) << "\n";
        log.flush();
        if (hooks.on_epoch) hooks.on_epoch(row);

        const double metric = val.empty() ? row.train_dice : row.val_dice;
        if (!warm && metric > best_metric) {
            best_metric = metric;
            result.best_epoch = epoch;
            save_checkpoint(result.best_checkpoint, bundle,
                            {model_cfg, step, epoch, json{{"selection", val.empty() ? "train_dice" : "val_dice"},
                                                          {"metric", metric}}});
        }
    }
    save_checkpoint(result.final_checkpoint, bundle, {model_cfg, step, total_epochs - 1, json{{"final", true}}});
    result.optimizer_steps = step;
    result.final_bundle = std::move(bundle);
    return result;
}

}  // namespace dsa_ltd
