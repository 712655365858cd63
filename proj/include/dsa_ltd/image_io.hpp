#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dsa_ltd/core.hpp"

namespace dsa_ltd::io {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void write_gray8(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& bytes) {
    cv::Mat img(height, width, CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), img, {cv::IMWRITE_PNG_COMPRESSION, 6});
    } catch (const cv::Exception& e) {
        throw IoError("cannot write " + path.string() + ": " + e.what());
    }
    if (!ok) throw IoError("cannot write " + path.string());
}

inline cv::Mat read_gray8_mat(const fs::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw IoError("cannot read image " + path.string());
    if (img.type() != CV_8UC1) throw IoError(path.string() + " is not 8-bit grayscale");
    return img;
}

inline void write_frame(const fs::path& path, const Frame& f) {
    std::vector<std::uint8_t> bytes(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) bytes[i] = quantize_8bit(f[i]);
    write_gray8(path, f.height(), f.width(), bytes);
}

template <typename G>
void write_unit_map(const fs::path& path, const G& g) {
    std::vector<std::uint8_t> bytes(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) bytes[i] = quantize_8bit(static_cast<float>(g[i]));
    write_gray8(path, g.height(), g.width(), bytes);
}

/// Masks are stored as 0/255.
inline void write_mask(const fs::path& path, const BinaryMask& m) {
    std::vector<std::uint8_t> bytes(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) bytes[i] = m[i] ? 255 : 0;
    write_gray8(path, m.height(), m.width(), bytes);
}

inline Frame read_frame(const fs::path& path) {
    const cv::Mat img = read_gray8_mat(path);
    Frame f(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) f(r, c) = normalize_8bit(img.at<std::uint8_t>(r, c));
    return f;
}

inline BinaryMask read_mask(const fs::path& path) {
    const cv::Mat img = read_gray8_mat(path);
    BinaryMask m(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) {
            const auto v = img.at<std::uint8_t>(r, c);
            if (v != 0 && v != 255) throw IoError(path.string() + ": mask values must be 0 or 255");
            m(r, c) = v ? 1 : 0;
        }
    return m;
}

}  // namespace dsa_ltd::io
