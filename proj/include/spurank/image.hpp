#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "common.hpp"

namespace spurank {

/// 8-bit RGB raster, row-major HWC. This is what lives on disk.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

    std::uint8_t* at(int r, int c) { return &pixels[(static_cast<std::size_t>(r) * width + c) * 3]; }
    const std::uint8_t* at(int r, int c) const { return &pixels[(static_cast<std::size_t>(r) * width + c) * 3]; }
};

/// Real-valued HWC tensor in model-input scale, nominally [0,1] but unclamped.
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<float> values;  // height * width * 3

    ImageTensor() = default;
    ImageTensor(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

    std::size_t size() const { return values.size(); }
    float& at(int r, int c, int ch) { return values[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    float at(int r, int c, int ch) const { return values[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
};

inline ImageTensor to_tensor(const RgbImage& img) {
    ImageTensor t(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t.values[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    return t;
}

inline RgbImage read_png(const fs::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::io, "cannot read image " + path.string() + ": " + msg);
    }
    image.format = PNG_FORMAT_RGB;
    RgbImage out(static_cast<int>(image.height), static_cast<int>(image.width));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::io, "corrupt image " + path.string() + ": " + msg);
    }
    return out;
}

inline void write_png(const fs::path& path, const RgbImage& img) {
    if (img.height <= 0 || img.width <= 0 || img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * 3)
        throw Error(ErrorKind::invalid_argument, "write_png: malformed image");
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    fs::path tmp = path;
    tmp += ".tmp";
    if (!png_image_write_to_file(&image, tmp.c_str(), 0, img.pixels.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::io, "cannot write image " + path.string() + ": " + msg);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::io, "cannot write image " + path.string() + ": " + ec.message());
}

}  // namespace spurank
