#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cprobe/tensor.hpp"

namespace cprobe {

// Binary tensor container shared by model files and snapshots. Each entry is
// a little-endian u32 dimension count, that many u64 dimensions, then the
// row-major values as little-endian IEEE-754 float32.
struct TensorEntry {
    Shape shape;
    std::vector<float> values;
    std::uint64_t offset = 0;  // byte offset of the entry header
};

class TensorBlobWriter {
public:
    // Returns the entry index.
    std::size_t add(const Shape& shape, std::span<const double> values);
    std::size_t add(const Shape& shape, std::span<const float> values);
    std::size_t add(const Tensor& t) { return add(t.shape(), t.values()); }

    std::size_t count() const noexcept { return count_; }
    const std::string& bytes() const noexcept { return bytes_; }

private:
    std::string bytes_;
    std::size_t count_ = 0;
};

// Throws FormatError (with byte offset) on truncated or malformed input.
std::vector<TensorEntry> read_tensor_blob(std::string_view bytes);

Tensor to_tensor(const TensorEntry& entry);

}  // namespace cprobe
