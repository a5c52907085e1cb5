#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace etstpm {

/// 8-bit interleaved image. channels is 1 (gray) or 3 (RGB).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
};

/// Decodes PNG (any bit depth / colour type, alpha dropped, 16-bit reduced)
/// into gray or RGB. Throws IoError.
Image8 read_png(const std::filesystem::path& path);

/// Writes a gray or RGB PNG. Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const Image8& img);

/// Row-major float map with top row first in memory.
struct FloatMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> values;
};

/// Portable Float Map, grayscale ("Pf"), little-endian, rows stored bottom-up
/// as the format requires.
void write_pfm(const std::filesystem::path& path, const FloatMap& map);
FloatMap read_pfm(const std::filesystem::path& path);

} // namespace etstpm
