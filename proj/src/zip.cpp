#include "cprobe/zip.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>

#include "cprobe/errors.hpp"

namespace cprobe {

namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;

std::uint32_t rd32(std::string_view b, std::size_t pos) {
    if (pos + 4 > b.size()) throw FormatError("truncated zip archive", pos);
    const auto* p = reinterpret_cast<const unsigned char*>(b.data() + pos);
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd16(std::string_view b, std::size_t pos) {
    if (pos + 2 > b.size()) throw FormatError("truncated zip archive", pos);
    const auto* p = reinterpret_cast<const unsigned char*>(b.data() + pos);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void wr16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

std::string inflate_raw(std::string_view data, std::size_t expected, std::size_t offset) {
    std::string out(expected, '\0');
    z_stream zs{};
    if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw FormatError("zlib init failed", offset);
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
    zs.avail_in = static_cast<uInt>(data.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    const std::size_t produced = zs.total_out;
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || produced != expected) throw FormatError("corrupt deflate stream", offset);
    return out;
}

std::uint32_t crc_of(std::string_view data) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

}  // namespace

bool looks_like_zip(std::string_view bytes) { return bytes.size() >= 4 && rd32(bytes, 0) == kLocalSig; }

std::map<std::string, std::string> read_zip(std::string_view archive) {
    if (archive.size() < 22) throw FormatError("file too small to be a zip archive", archive.size());
    std::size_t end = std::string_view::npos;
    const std::size_t lowest = archive.size() >= 22 + 65535 ? archive.size() - 22 - 65535 : 0;
    for (std::size_t pos = archive.size() - 22 + 1; pos-- > lowest;) {
        if (rd32(archive, pos) == kEndSig) {
            end = pos;
            break;
        }
    }
    if (end == std::string_view::npos) throw FormatError("zip end-of-central-directory not found", archive.size());
    const std::uint16_t count = rd16(archive, end + 10);
    std::size_t pos = rd32(archive, end + 16);

    std::map<std::string, std::string> files;
    for (std::uint16_t i = 0; i < count; ++i) {
        if (rd32(archive, pos) != kCentralSig) throw FormatError("bad zip central directory entry", pos);
        const std::uint16_t method = rd16(archive, pos + 10);
        const std::uint32_t crc = rd32(archive, pos + 16);
        const std::uint32_t csize = rd32(archive, pos + 20);
        const std::uint32_t usize = rd32(archive, pos + 24);
        const std::uint16_t name_len = rd16(archive, pos + 28);
        const std::uint16_t extra_len = rd16(archive, pos + 30);
        const std::uint16_t comment_len = rd16(archive, pos + 32);
        const std::uint32_t local = rd32(archive, pos + 42);
        if (pos + 46 + name_len > archive.size()) throw FormatError("truncated zip entry name", pos);
        std::string name(archive.substr(pos + 46, name_len));
        pos += 46 + name_len + extra_len + comment_len;

        if (rd32(archive, local) != kLocalSig) throw FormatError("bad zip local header", local);
        const std::size_t data_pos = local + 30 + rd16(archive, local + 26) + rd16(archive, local + 28);
        if (data_pos + csize > archive.size()) throw FormatError("truncated zip entry data for " + name, data_pos);
        std::string_view raw = archive.substr(data_pos, csize);
        std::string content;
        if (method == 0) {
            content.assign(raw);
        } else if (method == 8) {
            content = inflate_raw(raw, usize, data_pos);
        } else {
            throw FormatError("unsupported zip compression method " + std::to_string(method), pos);
        }
        if (crc_of(content) != crc) throw FormatError("zip CRC mismatch for " + name, data_pos);
        files.emplace(std::move(name), std::move(content));
    }
    return files;
}

std::string write_zip(const std::map<std::string, std::string>& files) {
    std::string out, central;
    std::uint16_t count = 0;
    for (const auto& [name, content] : files) {
        const std::uint32_t offset = static_cast<std::uint32_t>(out.size());
        const std::uint32_t crc = crc_of(content);
        const auto size = static_cast<std::uint32_t>(content.size());
        const auto name_len = static_cast<std::uint16_t>(name.size());

        wr32(out, kLocalSig);
        wr16(out, 20);  // version needed
        wr16(out, 0);   // flags
        wr16(out, 0);   // stored
        wr16(out, 0);   // mod time
        wr16(out, 0x21);  // mod date 1980-01-01
        wr32(out, crc);
        wr32(out, size);
        wr32(out, size);
        wr16(out, name_len);
        wr16(out, 0);
        out += name;
        out += content;

        wr32(central, kCentralSig);
        wr16(central, 20);
        wr16(central, 20);
        wr16(central, 0);
        wr16(central, 0);
        wr16(central, 0);
        wr16(central, 0x21);
        wr32(central, crc);
        wr32(central, size);
        wr32(central, size);
        wr16(central, name_len);
        wr16(central, 0);
        wr16(central, 0);
        wr16(central, 0);
        wr16(central, 0);
        wr32(central, 0);
        wr32(central, offset);
        central += name;
        ++count;
    }
    const auto central_offset = static_cast<std::uint32_t>(out.size());
    out += central;
    wr32(out, kEndSig);
    wr16(out, 0);
    wr16(out, 0);
    wr16(out, count);
    wr16(out, count);
    wr32(out, static_cast<std::uint32_t>(central.size()));
    wr32(out, central_offset);
    wr16(out, 0);
    return out;
}

}  // namespace cprobe
