#include "cprobe/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"

namespace cprobe {

namespace {

struct ReadCursor {
    const std::string* bytes;
    std::size_t pos;
};

void read_callback(png_structp png, png_bytep out, png_size_t len) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + len > cur->bytes->size()) png_error(png, "unexpected end of PNG data");
    std::memcpy(out, cur->bytes->data() + cur->pos, len);
    cur->pos += len;
}

void write_callback(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), len);
}

void flush_callback(png_structp) {}

[[noreturn]] void error_callback(png_structp, png_const_charp msg) { throw DecodeError(std::string("PNG: ") + msg); }

void warning_callback(png_structp, png_const_charp) {}

}  // namespace

Tensor decode_png(const std::string& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw DecodeError("not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
    if (!png) throw DecodeError("PNG: cannot allocate decoder");
    png_infop info = png_create_info_struct(png);
    ReadCursor cursor{&bytes, 0};
    try {
        png_set_read_fn(png, &cursor, read_callback);
        png_read_info(png, info);
        const png_byte color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
        png_set_strip_16(png);
        png_read_update_info(png, info);

        const std::size_t w = png_get_image_width(png, info);
        const std::size_t h = png_get_image_height(png, info);
        const std::size_t c = png_get_channels(png, info);
        const std::size_t rowbytes = png_get_rowbytes(png, info);
        std::vector<png_byte> buf(rowbytes * h);
        std::vector<png_bytep> rows(h);
        for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
        png_read_image(png, rows.data());
        png_destroy_read_struct(&png, &info, nullptr);

        Tensor out({h, w, c});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = rows[y][x * c + k] / 255.0;
        return out;
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
}

Tensor read_png(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const IoError& e) {
        throw DecodeError(e.what());
    }
    try {
        return decode_png(bytes);
    } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": " + e.what());
    }
}

std::string encode_png(const Tensor& image) {
    if (image.rank() != 3 || (image.shape()[2] != 1 && image.shape()[2] != 3))
        throw ParameterError("PNG encoding needs an (h, w, 1|3) tensor");
    const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    std::string out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
    if (!png) throw IoError("PNG: cannot allocate encoder");
    png_infop info = png_create_info_struct(png);
    try {
        png_set_write_fn(png, &out, write_callback, flush_callback);
        png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                     c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        std::vector<png_byte> row(w * c);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t k = 0; k < c; ++k)
                    row[x * c + k] = static_cast<png_byte>(std::lround(std::clamp(image.at(y, x, k), 0.0, 1.0) * 255.0));
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) { write_file_atomic(path, encode_png(image)); }

}  // namespace cprobe
