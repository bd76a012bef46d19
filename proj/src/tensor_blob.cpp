#include "cprobe/tensor_blob.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "cprobe/errors.hpp"

namespace cprobe {

namespace {

static_assert(std::numeric_limits<float>::is_iec559);

template <class T>
void put_le(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    out.append(buf, sizeof(T));
}

template <class T>
T get_le(std::string_view bytes, std::size_t& pos, const char* what) {
    if (bytes.size() - pos < sizeof(T)) throw FormatError(std::string("truncated tensor data reading ") + what, pos);
    char buf[sizeof(T)];
    std::memcpy(buf, bytes.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    pos += sizeof(T);
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

constexpr std::uint32_t kMaxRank = 8;

}  // namespace

std::size_t TensorBlobWriter::add(const Shape& shape, std::span<const double> values) {
    put_le<std::uint32_t>(bytes_, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_le<std::uint64_t>(bytes_, d);
    for (double v : values) put_le<float>(bytes_, static_cast<float>(v));
    return count_++;
}

std::size_t TensorBlobWriter::add(const Shape& shape, std::span<const float> values) {
    put_le<std::uint32_t>(bytes_, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_le<std::uint64_t>(bytes_, d);
    for (float v : values) put_le<float>(bytes_, v);
    return count_++;
}

std::vector<TensorEntry> read_tensor_blob(std::string_view bytes) {
    std::vector<TensorEntry> entries;
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        TensorEntry e;
        e.offset = pos;
        const auto rank = get_le<std::uint32_t>(bytes, pos, "dimension count");
        if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds limit", e.offset);
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = get_le<std::uint64_t>(bytes, pos, "dimension");
            if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d)
                throw FormatError("tensor dimensions overflow", pos - 8);
            count *= d;
            e.shape.push_back(static_cast<std::size_t>(d));
        }
        if (count > (bytes.size() - pos) / sizeof(float))
            throw FormatError("truncated tensor data: entry needs " + std::to_string(count) + " floats", pos);
        e.values.resize(static_cast<std::size_t>(count));
        for (auto& v : e.values) v = get_le<float>(bytes, pos, "value");
        entries.push_back(std::move(e));
    }
    return entries;
}

Tensor to_tensor(const TensorEntry& entry) {
    return Tensor(entry.shape, std::vector<double>(entry.values.begin(), entry.values.end()));
}

}  // namespace cprobe
