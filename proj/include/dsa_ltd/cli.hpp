#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsa_ltd/ablation.hpp"
#include "dsa_ltd/keyframe.hpp"
#include "dsa_ltd/synthgen.hpp"
#include "dsa_ltd/train.hpp"

namespace dsa_ltd::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitSchema = 2;

/// Parsed command line before any config is read.
struct Invocation {
    std::string subcommand;
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool overwrite = false;
    // subcommand-specific
    std::string video;
    std::string data;
    std::string checkpoint;
    std::string split = "test";
    int window = kKeyFrameWindow;
    int frame = -1;
    std::vector<std::string> kinds;
    std::vector<std::string> variants;
};

/// One JSON object on one line, for scripts reading stderr.
inline void report_error(std::ostream& err, const char* kind, const std::string& subcommand, const std::string& msg) {
    err << json{{"error", kind}, {"subcommand", subcommand}, {"message", msg}}.dump() << "\n";
}

/// Sets a dotted key ("train.epochs") in `j`. The value is parsed as JSON and
/// falls back to a plain string.
inline void apply_override(json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
        if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

inline json load_config(const Invocation& inv) {
    json j = json::object();
    if (!inv.config_path.empty()) {
        std::string text;
        try {
            text = read_text_file(inv.config_path);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw ConfigError(inv.config_path + ": " + e.what());
        }
        require_object(j, inv.config_path);
    }
    for (const auto& o : inv.overrides) apply_override(j, o);
    return j;
}

// ---------------------------------------------------------------------------
// Resolved per-subcommand configs. Every resolver rejects unknown keys.

/// "model" section: uniform width/depth plus optional per-network overrides.
inline BundleConfig model_config_from_json(const json& j, const FusionLayout& default_layout = {}) {
    reject_unknown_keys(j, {"layout", "base_width", "depth", "tdl", "lrs", "ffs"}, "model");
    FusionLayout layout = default_layout;
    if (j.contains("layout")) layout = fusion_layout_from_json(j.at("layout"));
    int width = 16, depth = 4;
    read_optional(j, "base_width", width, "model");
    read_optional(j, "depth", depth, "model");
    auto c = BundleConfig::uniform(layout, width, depth);
    json full = to_json(c);
    for (const char* net : {"tdl", "lrs", "ffs"})
        if (j.contains(net)) {
            require_object(j.at(net), std::string("model.") + net);
            full[net].update(j.at(net));
        }
    return bundle_config_from_json(full);
}

struct TrainJob {
    fs::path dataset;
    BundleConfig model;
    TrainConfig train;
};

inline TrainJob train_job_from_json(const json& j) {
    reject_unknown_keys(j, {"dataset", "model", "train"}, "train config");
    TrainJob job;
    if (!j.contains("dataset")) throw ConfigError("train config: 'dataset' is required");
    job.dataset = j.at("dataset").get<std::string>();
    job.model = model_config_from_json(j.value("model", json::object()));
    job.train = train_config_from_json(j.value("train", json::object()));
    return job;
}

struct EvalJob {
    fs::path dataset;
    fs::path checkpoint;
    Split split = Split::Test;
    std::optional<BundleConfig> model;
};

inline EvalJob eval_job_from_json(const json& j) {
    reject_unknown_keys(j, {"dataset", "checkpoint", "split", "model"}, "evaluate config");
    EvalJob job;
    if (!j.contains("dataset")) throw ConfigError("evaluate config: 'dataset' is required");
    if (!j.contains("checkpoint")) throw ConfigError("evaluate config: 'checkpoint' is required");
    job.dataset = j.at("dataset").get<std::string>();
    job.checkpoint = j.at("checkpoint").get<std::string>();
    const auto split = j.value("split", std::string("test"));
    if (split != "train" && split != "test") throw ConfigError("evaluate config: split must be train or test");
    job.split = split == "train" ? Split::Train : Split::Test;
    if (j.contains("model")) job.model = model_config_from_json(j.at("model"));
    return job;
}

struct AblateJob {
    fs::path dataset;
    int base_width = 16;
    int depth = 4;
    TrainConfig train;
    std::vector<AblationVariant> variants;
};

inline AblateJob ablate_job_from_json(const json& j) {
    reject_unknown_keys(j, {"dataset", "model", "train", "variants"}, "ablate config");
    AblateJob job;
    if (!j.contains("dataset")) throw ConfigError("ablate config: 'dataset' is required");
    job.dataset = j.at("dataset").get<std::string>();
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown_keys(m, {"base_width", "depth"}, "ablate config.model");
        read_optional(m, "base_width", job.base_width, "model");
        read_optional(m, "depth", job.depth, "model");
        nn::validate(BackboneConfig{1, 1, job.base_width, job.depth, FinalActivation::Sigmoid});
    }
    job.train = train_config_from_json(j.value("train", json::object()));
    const auto all = canonical_variants();
    if (j.contains("variants")) {
        for (const auto& name : j.at("variants").get<std::vector<std::string>>()) {
            const auto it = std::find_if(all.begin(), all.end(), [&](const auto& v) { return v.name == name; });
            if (it == all.end()) throw ConfigError("ablate config: unknown variant '" + name + "'");
            job.variants.push_back(*it);
        }
        if (job.variants.empty()) throw ConfigError("ablate config: variants is empty");
    } else {
        job.variants = all;
    }
    return job;
}

struct MotionJob {
    fs::path video;
    int frame = -1;
    std::vector<MotionKind> kinds;
};

inline MotionKind motion_kind_from_string(const std::string& s) {
    if (s == "fd" || s == "frame_difference") return MotionKind::FrameDifference;
    if (s == "of" || s == "optical_flow" || s == "optical_flow_magnitude") return MotionKind::OpticalFlowMagnitude;
    if (s == "bs" || s == "background_subtraction") return MotionKind::BackgroundSubtraction;
    throw ConfigError("unknown motion kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Command implementations. Each returns an exit code; exceptions from the
// config phase map to kExitSchema, the rest to kExitRuntime.

struct Streams {
    std::ostream& out;
    std::ostream& err;
};

inline void write_json(const fs::path& p, const json& j) { write_text_file(p, j.dump(2) + "\n"); }

class Command {
public:
    virtual ~Command() = default;
    /// Resolves and validates configuration without side effects.
    virtual void prepare(const Invocation& inv) = 0;
    virtual int run(const Invocation& inv, Streams s) = 0;
};

class GenData : public Command {
public:
    void prepare(const Invocation& inv) override {
        if (inv.out.empty()) throw ConfigError("gen-data: --out is required");
        json j = load_config(inv);
        if (inv.seed) j["seed"] = *inv.seed;
        cfg_ = phantom_config_from_json(j);
    }
    int run(const Invocation& inv, Streams s) override {
        const auto m = generate_dataset(cfg_, inv.out, inv.overwrite);
        s.out << "wrote " << m.samples.size() << " samples (" << m.split(Split::Train).size() << " train, "
              << m.split(Split::Test).size() << " test) to " << inv.out << " manifest " << m.hash << "\n";
        return kExitOk;
    }

private:
    PhantomConfig cfg_;
};

class SelectKeyframe : public Command {
public:
    void prepare(const Invocation& inv) override {
        if (inv.video.empty()) throw ConfigError("select-keyframe: --video is required");
        json j = load_config(inv);
        reject_unknown_keys(j, {"window"}, "select-keyframe config");
        window_ = inv.window;
        read_optional(j, "window", window_, "select-keyframe config");
        if (window_ < 3) throw ConfigError("select-keyframe: window must be >= 3");
    }
    int run(const Invocation& inv, Streams s) override {
        const auto video = load_video(inv.video);
        const auto r = select_key_frame(video, window_);
        json scores = json::array();
        for (const auto& [frame, score] : r.scores) scores.push_back(json{{"frame", frame}, {"score", score}});
        const json out{{"video", inv.video}, {"frame_count", video.frame_count()}, {"window", window_},
                       {"key_frame_index", r.index}, {"scores", scores}};
        s.out << out.dump(2) << "\n";
        if (!inv.out.empty()) {
            fs::create_directories(inv.out);
            write_json(fs::path(inv.out) / "keyframe.json", out);
        }
        return kExitOk;
    }

private:
    int window_ = kKeyFrameWindow;
};

class ExtractMotion : public Command {
public:
    void prepare(const Invocation& inv) override {
        json j = load_config(inv);
        reject_unknown_keys(j, {"video", "frame", "kinds"}, "extract-motion config");
        job_.video = inv.video.empty() ? j.value("video", std::string()) : inv.video;
        if (job_.video.empty()) throw ConfigError("extract-motion: --video is required");
        job_.frame = inv.frame;
        if (job_.frame < 0) read_optional(j, "frame", job_.frame, "extract-motion config");
        auto kinds = inv.kinds;
        if (kinds.empty()) read_optional(j, "kinds", kinds, "extract-motion config");
        if (kinds.empty()) kinds = {"fd", "of", "bs"};
        for (const auto& k : kinds) job_.kinds.push_back(motion_kind_from_string(k));
    }
    int run(const Invocation& inv, Streams s) override {
        const auto video = load_video(job_.video);
        int k = job_.frame;
        if (k < 0) {
            const auto manifest_dir = job_.video.parent_path();
            const auto id = job_.video.filename().string();
            k = -1;
            if (fs::exists(manifest_dir / "manifest.json")) {
                const auto m = load_manifest(manifest_dir);
                for (const auto& e : m.samples)
                    if (e.id == id) k = e.key_frame_index;
            }
            if (k < 0) k = select_key_frame(video).index;
        }
        const fs::path out = inv.out.empty() ? job_.video : fs::path(inv.out);
        fs::create_directories(out);
        for (auto kind : job_.kinds) {
            const auto map = extract_motion(video, k, kind);
            char name[96];
            std::snprintf(name, sizeof name, "motion_%s_%03d.png", to_string(kind), k);
            io::write_unit_map(out / name, map.pixels);
            s.out << (out / name).string() << "\n";
        }
        return kExitOk;
    }

private:
    MotionJob job_;
};

inline json resolve_dataset(json j, const Invocation& inv) {
    if (!inv.data.empty()) j["dataset"] = inv.data;
    return j;
}

class Train : public Command {
public:
    void prepare(const Invocation& inv) override {
        if (inv.out.empty()) throw ConfigError("train: --out is required");
        json j = resolve_dataset(load_config(inv), inv);
        if (inv.seed) j["train"]["seed"] = *inv.seed;
        job_ = train_job_from_json(j);
    }
    int run(const Invocation& inv, Streams s) override {
        const auto m = load_manifest(job_.dataset);
        TrainHooks hooks;
        hooks.on_epoch = [&](const EpochLog& e) { s.out << format_log_row(e) << "\n" << std::flush; };
        s.out << kTrainLogHeader << "\n";
        const auto r = train(m, job_.model, job_.train, inv.out, hooks);
        s.out << "best epoch " << r.best_epoch << ", checkpoints in " << inv.out << "\n";
        return kExitOk;
    }

private:
    TrainJob job_;
};

class Evaluate : public Command {
public:
    void prepare(const Invocation& inv) override {
        if (inv.out.empty()) throw ConfigError("evaluate: --out is required");
        json j = resolve_dataset(load_config(inv), inv);
        if (!inv.checkpoint.empty()) j["checkpoint"] = inv.checkpoint;
        if (!inv.split.empty() && inv.split != "test") j["split"] = inv.split;
        job_ = eval_job_from_json(j);
    }
    int run(const Invocation& inv, Streams s) override {
        const auto m = load_manifest(job_.dataset);
        const auto r = evaluate(m, job_.split, job_.checkpoint, job_.model ? &*job_.model : nullptr);
        json per = json::array();
        for (std::size_t i = 0; i < r.ids.size(); ++i) per.push_back(json{{"id", r.ids[i]}, {"dice", r.dice[i]}});
        const json out{{"dataset_hash", m.hash}, {"checkpoint", job_.checkpoint.string()},
                       {"split", to_string(job_.split)}, {"mean_dice", r.mean}, {"per_sample", per}};
        fs::create_directories(inv.out);
        write_json(fs::path(inv.out) / "eval.json", out);
        s.out << "mean_dice " << r.mean << " over " << r.ids.size() << " samples\n";
        return kExitOk;
    }

private:
    EvalJob job_;
};

class Ablate : public Command {
public:
    void prepare(const Invocation& inv) override {
        if (inv.out.empty()) throw ConfigError("ablate: --out is required");
        json j = resolve_dataset(load_config(inv), inv);
        if (inv.seed) j["train"]["seed"] = *inv.seed;
        if (!inv.variants.empty()) j["variants"] = inv.variants;
        job_ = ablate_job_from_json(j);
    }
    int run(const Invocation& inv, Streams s) override {
        const auto m = load_manifest(job_.dataset);
        AblationHooks hooks;
        hooks.on_variant_start = [&](const AblationVariant& v) { s.out << "variant " << v.name << "\n" << std::flush; };
        hooks.on_variant_done = [&](const VariantResult& r) {
            if (r.ok)
                s.out << "  " << r.variant.name << " test dice " << r.mean_dice << "\n" << std::flush;
            else
                s.out << "  " << r.variant.name << " failed: " << r.error << "\n" << std::flush;
        };
        const auto report = run_ablation(m, job_.variants, job_.base_width, job_.depth, job_.train, inv.out, hooks);
        const auto failures = emit_report(report, m, inv.out);
        for (const auto& f : failures) report_error(s.err, "io", "ablate", f);
        s.out << report_to_csv(report);
        const bool any_ok = std::any_of(report.variants.begin(), report.variants.end(), [](const auto& r) { return r.ok; });
        return any_ok && failures.empty() ? kExitOk : kExitRuntime;
    }

private:
    AblateJob job_;
};

// ---------------------------------------------------------------------------

inline void add_common(CLI::App* sub, Invocation& inv, bool seed) {
    sub->add_option("--config", inv.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out", inv.out, "Output directory");
    if (seed) sub->add_option("--seed", inv.seed, "Override the config seed");
    sub->add_option("--override", inv.overrides, "Dotted key=value config override (repeatable)")
        ->allow_extra_args(false)
        ->take_all();
}

/// Runs one command line. `args` excludes the program name.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    Invocation inv;
    CLI::App app{"Liver tumor segmentation from DSA videos: data generation, training and evaluation", "dsa_ltd"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    add_common(gen, inv, true);
    gen->add_flag("--overwrite", inv.overwrite, "Replace an existing dataset in --out");

    auto* key = app.add_subcommand("select-keyframe", "Pick the most stable frame of a video");
    add_common(key, inv, false);
    key->add_option("--video", inv.video, "Directory of frame_###.png files")->check(CLI::ExistingDirectory);
    key->add_option("--window", inv.window, "Number of trailing frames searched");

    auto* mot = app.add_subcommand("extract-motion", "Write frame difference, optical flow and background maps");
    add_common(mot, inv, false);
    mot->add_option("--video", inv.video, "Sample directory; output goes here unless --out is set")
        ->check(CLI::ExistingDirectory);
    mot->add_option("--frame", inv.frame, "Key frame index (default: manifest entry or selected key frame)");
    mot->add_option("--kind", inv.kinds, "fd, of or bs (repeatable; default all)");

    auto* tr = app.add_subcommand("train", "Train a model bundle");
    add_common(tr, inv, true);
    tr->add_option("--data", inv.data, "Dataset directory (overrides config 'dataset')");

    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a dataset split");
    add_common(ev, inv, false);
    ev->add_option("--data", inv.data, "Dataset directory (overrides config 'dataset')");
    ev->add_option("--checkpoint", inv.checkpoint, "Checkpoint file");
    ev->add_option("--split", inv.split, "train or test")->check(CLI::IsMember({"train", "test"}));

    auto* ab = app.add_subcommand("ablate", "Train and score every ablation variant");
    add_common(ab, inv, true);
    ab->add_option("--data", inv.data, "Dataset directory (overrides config 'dataset')");
    ab->add_option("--variant", inv.variants, "Restrict to these variants (repeatable)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        report_error(err, "usage", app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(),
                     e.what());
        return kExitSchema;
    }

    const auto* chosen = app.get_subcommands().front();
    inv.subcommand = chosen->get_name();
    std::unique_ptr<Command> cmd;
    if (inv.subcommand == "gen-data") cmd = std::make_unique<GenData>();
    else if (inv.subcommand == "select-keyframe") cmd = std::make_unique<SelectKeyframe>();
    else if (inv.subcommand == "extract-motion") cmd = std::make_unique<ExtractMotion>();
    else if (inv.subcommand == "train") cmd = std::make_unique<Train>();
    else if (inv.subcommand == "evaluate") cmd = std::make_unique<Evaluate>();
    else cmd = std::make_unique<Ablate>();

    try {
        cmd->prepare(inv);
    } catch (const std::exception& e) {
        report_error(err, "config", inv.subcommand, e.what());
        return kExitSchema;
    }
    try {
        return cmd->run(inv, {out, err});
    } catch (const std::exception& e) {
        report_error(err, "runtime", inv.subcommand, e.what());
        return kExitRuntime;
    }
}

}  // namespace dsa_ltd::cli
