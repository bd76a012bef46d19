#pragma once

#include <filesystem>
#include <string>

#include "cprobe/tensor.hpp"

namespace cprobe {

// Decodes a PNG into an (h, w, c) tensor with values in [0, 1]. Palette and
// 16-bit images are expanded; alpha is dropped. `channels` is 1 or 3 as stored.
Tensor read_png(const std::filesystem::path& path);
Tensor decode_png(const std::string& bytes);

// Encodes an (h, w, 1|3) tensor, clamping to [0, 1] and quantizing to 8 bits.
std::string encode_png(const Tensor& image);
void write_png(const std::filesystem::path& path, const Tensor& image);

}  // namespace cprobe
