#include "etstpm/image_io.hpp"

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "etstpm/errors.hpp"

namespace etstpm {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
    auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
    if (buf) *buf = msg;
    png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

} // namespace

Image8 read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    Image8 img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported channel layout in " + path.string());
    }
    img.pixels.resize(img.width * img.height * img.channels);
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("write_png: channels must be 1 or 3");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write image " + path.string());
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows(img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("cannot encode " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(fp.get()) != 0) throw IoError("cannot write image " + path.string());
}

void write_pfm(const std::filesystem::path& path, const FloatMap& map) {
    if (map.values.size() != map.width * map.height) throw IoError("write_pfm: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write map " + path.string());
    out << "Pf\n" << map.width << ' ' << map.height << "\n-1.0\n";
    std::vector<unsigned char> row(map.width * 4);
    for (std::size_t y = map.height; y-- > 0;) {
        for (std::size_t x = 0; x < map.width; ++x) {
            const auto bits = std::bit_cast<std::uint32_t>(map.values[y * map.width + x]);
            for (int b = 0; b < 4; ++b) row[x * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("cannot write map " + path.string());
}

FloatMap read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open map " + path.string());
    std::string magic;
    FloatMap map;
    double scale = 0.0;
    in >> magic >> map.width >> map.height >> scale;
    in.get();
    if (!in || magic != "Pf" || scale == 0.0) throw IoError("not a grayscale PFM file: " + path.string());
    const bool little = scale < 0.0;
    map.values.resize(map.width * map.height);
    std::vector<unsigned char> row(map.width * 4);
    for (std::size_t y = map.height; y-- > 0;) {
        if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size())))
            throw IoError("truncated PFM file: " + path.string());
        for (std::size_t x = 0; x < map.width; ++x) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                const int shift = little ? 8 * b : 8 * (3 - b);
                bits |= static_cast<std::uint32_t>(row[x * 4 + b]) << shift;
            }
            map.values[y * map.width + x] = std::bit_cast<float>(bits);
        }
    }
    return map;
}

} // namespace etstpm
