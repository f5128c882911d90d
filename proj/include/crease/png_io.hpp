#pragma once

#include <png.h>

#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "crease/image.hpp"

namespace crease {

/// 8-bit grayscale PNG in, [-1, 1] single-channel image out.
inline ImageTensor read_png_gray(const std::filesystem::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw std::runtime_error("read_png_gray: " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw std::runtime_error("read_png_gray: " + path.string() + ": " + img.message);
    }
    ImageTensor out(static_cast<int>(img.height), static_cast<int>(img.width), 1);
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = from_u8(buf[i]);
    return out;
}

inline void write_png_gray(const std::filesystem::path& path, const ImageTensor& image) {
    if (image.channels() != 1) throw ValidationError("write_png_gray: expected one channel");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<png_byte> buf(image.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_u8(image[i]);
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width());
    img.height = static_cast<png_uint_32>(image.height());
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("write_png_gray: " + path.string() + ": " + img.message);
}

/// Quantizes to the 8-bit grid a PNG round trip would produce.
inline ImageTensor quantize_u8(ImageTensor image) {
    for (auto& v : image.values()) v = from_u8(to_u8(v));
    return image;
}

}  // namespace crease
