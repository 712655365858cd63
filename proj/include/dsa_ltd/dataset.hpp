#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dsa_ltd/core.hpp"
#include "dsa_ltd/image_io.hpp"
#include "dsa_ltd/json_util.hpp"
#include "dsa_ltd/util.hpp"

namespace dsa_ltd {

namespace fs = std::filesystem;

inline constexpr int kManifestSchemaVersion = 1;

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct ManifestEntry {
    std::string id;
    Split split = Split::Train;
    int key_frame_index = 0;
    /// Extra training key frames (k+1, k+2); empty for test entries.
    std::vector<int> aug_frame_indices;
    /// Number of frame_###.png files; not part of the manifest schema.
    int frame_count = 0;
};

struct DatasetManifest {
    fs::path root;
    json config;
    std::vector<ManifestEntry> samples;
    /// FNV-1a of the manifest.json bytes.
    std::string hash;

    std::vector<const ManifestEntry*> split(Split s) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : samples)
            if (e.split == s) out.push_back(&e);
        return out;
    }
};

inline std::string frame_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03d.png", index);
    return buf;
}

inline json manifest_to_json(const json& config, const std::vector<ManifestEntry>& entries) {
    json samples = json::array();
    for (const auto& e : entries) {
        json s{{"id", e.id}, {"split", to_string(e.split)}, {"key_frame_index", e.key_frame_index}};
        if (e.split == Split::Train) s["aug_frame_indices"] = e.aug_frame_indices;
        samples.push_back(std::move(s));
    }
    return json{{"schema_version", kManifestSchemaVersion}, {"config", config}, {"samples", samples}};
}

inline std::string manifest_text(const json& manifest) { return manifest.dump(2) + "\n"; }

inline DatasetManifest load_manifest(const fs::path& dir) {
    const auto path = dir / "manifest.json";
    if (!fs::exists(path)) throw io::IoError("no manifest.json in " + dir.string());
    const std::string text = read_text_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("manifest.json: " + std::string(e.what()));
    }
    reject_unknown_keys(j, {"schema_version", "config", "samples"}, "manifest");
    if (j.value("schema_version", 0) != kManifestSchemaVersion)
        throw ConfigError("manifest: unsupported schema_version");
    DatasetManifest m;
    m.root = dir;
    m.config = j.at("config");
    m.hash = hex64(fnv1a(text));
    const int frame_count = m.config.value("frame_count", 0);
    for (const auto& s : j.at("samples")) {
        reject_unknown_keys(s, {"id", "split", "key_frame_index", "aug_frame_indices"}, "manifest.samples");
        ManifestEntry e;
        e.id = s.at("id").get<std::string>();
        const auto split = s.at("split").get<std::string>();
        if (split != "train" && split != "test") throw ConfigError("manifest: bad split '" + split + "'");
        e.split = split == "train" ? Split::Train : Split::Test;
        e.key_frame_index = s.at("key_frame_index").get<int>();
        if (s.contains("aug_frame_indices")) e.aug_frame_indices = s.at("aug_frame_indices").get<std::vector<int>>();
        e.frame_count = frame_count;
        m.samples.push_back(std::move(e));
    }
    return m;
}

inline DsaVideo load_video(const fs::path& sample_dir, int frame_count = -1) {
    std::vector<Frame> frames;
    for (int i = 0; frame_count < 0 || i < frame_count; ++i) {
        const auto p = sample_dir / frame_file_name(i);
        if (!fs::exists(p)) {
            if (frame_count < 0) break;
            throw io::IoError("missing " + p.string());
        }
        frames.push_back(io::read_frame(p));
    }
    if (frames.empty()) throw io::IoError("no frames in " + sample_dir.string());
    return DsaVideo(std::move(frames));
}

inline Sample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
    const auto dir = m.root / e.id;
    Sample s;
    s.sample_id = e.id;
    s.video = load_video(dir, e.frame_count > 0 ? e.frame_count : -1);
    s.key_frame_index = e.key_frame_index;
    s.tumor_mask = io::read_mask(dir / "tumor_mask.png");
    s.liver_mask = io::read_mask(dir / "liver_mask.png");
    return s;
}

}  // namespace dsa_ltd
