#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dsa_ltd/json_util.hpp"
#include "dsa_ltd/models.hpp"

namespace dsa_ltd {

inline constexpr std::string_view kCheckpointHeader = "dsa-ltd-ckpt/1\n";

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline json to_json(const BackboneConfig& b) {
    return json{{"in_channels", b.in_channels},
                {"out_channels", b.out_channels},
                {"base_width", b.base_width},
                {"depth", b.depth},
                {"final_activation", b.final_activation == FinalActivation::Sigmoid ? "sigmoid" : "none"}};
}

inline BackboneConfig backbone_config_from_json(const json& j, const BackboneConfig& defaults, const char* ctx) {
    reject_unknown_keys(j, {"in_channels", "out_channels", "base_width", "depth", "final_activation"}, ctx);
    BackboneConfig b = defaults;
    read_optional(j, "in_channels", b.in_channels, ctx);
    read_optional(j, "out_channels", b.out_channels, ctx);
    read_optional(j, "base_width", b.base_width, ctx);
    read_optional(j, "depth", b.depth, ctx);
    std::string act = b.final_activation == FinalActivation::Sigmoid ? "sigmoid" : "none";
    read_optional(j, "final_activation", act, ctx);
    if (act != "sigmoid" && act != "none") throw ConfigError(std::string(ctx) + ".final_activation: sigmoid|none");
    b.final_activation = act == "sigmoid" ? FinalActivation::Sigmoid : FinalActivation::None;
    return b;
}

inline json to_json(const FusionLayout& l) { return json{{"motion", to_string(l.motion)}, {"liver", l.liver}}; }

inline FusionLayout fusion_layout_from_json(const json& j) {
    reject_unknown_keys(j, {"motion", "liver"}, "layout");
    FusionLayout l;
    std::string motion = to_string(l.motion);
    read_optional(j, "motion", motion, "layout");
    try {
        l.motion = motion_input_from_string(motion);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("layout.motion: ") + e.what());
    }
    read_optional(j, "liver", l.liver, "layout");
    return l;
}

inline json to_json(const BundleConfig& c) {
    return json{{"layout", to_json(c.layout)}, {"tdl", to_json(c.tdl)}, {"lrs", to_json(c.lrs)}, {"ffs", to_json(c.ffs)}};
}

inline BundleConfig bundle_config_from_json(const json& j) {
    reject_unknown_keys(j, {"layout", "tdl", "lrs", "ffs"}, "bundle");
    BundleConfig c;
    if (j.contains("layout")) c.layout = fusion_layout_from_json(j.at("layout"));
    c.ffs.in_channels = c.layout.ffs_channels();
    if (j.contains("tdl")) c.tdl = backbone_config_from_json(j.at("tdl"), c.tdl, "bundle.tdl");
    if (j.contains("lrs")) c.lrs = backbone_config_from_json(j.at("lrs"), c.lrs, "bundle.lrs");
    if (j.contains("ffs")) c.ffs = backbone_config_from_json(j.at("ffs"), c.ffs, "bundle.ffs");
    try {
        validate(c);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    }
    return c;
}

struct CheckpointMeta {
    BundleConfig config;
    long step = 0;
    int epoch = 0;
    /// Free-form training context (config echo, metrics).
    json extra = json::object();
};

namespace detail {

template <typename Fn>
void for_each_array(ModelBundle<float>& b, Fn&& fn) {
    for (auto* net : b.networks()) {
        for (auto* p : net->parameters()) fn(p->name, p->value);
        for (auto* buf : net->buffers()) fn(buf->name, buf->value);
    }
}

}  // namespace detail

/// Layout: header line, little-endian uint64 JSON length, JSON metadata,
/// then every parameter and buffer as raw float32 in metadata order.
inline void save_checkpoint(const std::filesystem::path& path, const ModelBundle<float>& bundle,
                            const CheckpointMeta& meta) {
    auto& b = const_cast<ModelBundle<float>&>(bundle);
    json arrays = json::array();
    detail::for_each_array(b, [&](const std::string& name, const std::vector<float>& v) {
        arrays.push_back(json{{"name", name}, {"size", v.size()}});
    });
    const json head{{"config", to_json(bundle.config)},
                    {"step", meta.step},
                    {"epoch", meta.epoch},
                    {"extra", meta.extra},
                    {"arrays", arrays}};
    const std::string text = head.dump();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(kCheckpointHeader.data(), static_cast<std::streamsize>(kCheckpointHeader.size()));
        std::uint8_t len[8];
        std::uint64_t n = text.size();
        for (int i = 0; i < 8; ++i) len[i] = static_cast<std::uint8_t>(n >> (8 * i));
        out.write(reinterpret_cast<const char*>(len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        detail::for_each_array(b, [&](const std::string&, const std::vector<float>& v) {
            out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
        });
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    ModelBundle<float> bundle;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string header(kCheckpointHeader.size(), '\0');
    in.read(header.data(), static_cast<std::streamsize>(header.size()));
    if (!in || header != kCheckpointHeader) throw CheckpointError(path.string() + ": not a dsa-ltd-ckpt/1 file");
    std::uint8_t len[8];
    in.read(reinterpret_cast<char*>(len), 8);
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
    if (!in || n > (1u << 26)) throw CheckpointError(path.string() + ": corrupt metadata length");
    std::string text(n, '\0');
    in.read(text.data(), static_cast<std::streamsize>(n));
    if (!in) throw CheckpointError(path.string() + ": truncated metadata");

    LoadedCheckpoint out;
    json head;
    try {
        head = json::parse(text);
        out.meta.config = bundle_config_from_json(head.at("config"));
        out.meta.step = head.at("step").get<long>();
        out.meta.epoch = head.at("epoch").get<int>();
        out.meta.extra = head.value("extra", json::object());
    } catch (const json::exception& e) {
        throw CheckpointError(path.string() + ": bad metadata: " + e.what());
    }
    out.bundle = build_bundle<float>(out.meta.config, 0);
    const auto& arrays = head.at("arrays");
    std::size_t idx = 0;
    detail::for_each_array(out.bundle, [&](const std::string& name, std::vector<float>& v) {
        if (idx >= arrays.size()) throw CheckpointError(path.string() + ": missing array " + name);
        const auto& a = arrays[idx++];
        if (a.at("name").get<std::string>() != name || a.at("size").get<std::size_t>() != v.size())
            throw CheckpointError(path.string() + ": array " + name + " does not match the stored layout");
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (!in) throw CheckpointError(path.string() + ": truncated data at " + name);
    });
    if (idx != arrays.size()) throw CheckpointError(path.string() + ": extra arrays in checkpoint");
    return out;
}

}  // namespace dsa_ltd
