#pragma once

#include <map>
#include <string>
#include <string_view>

namespace cprobe {

// Minimal zip archive support: reads stored and deflated entries, writes
// stored entries. Enough for two-file model containers.
std::map<std::string, std::string> read_zip(std::string_view archive);
std::string write_zip(const std::map<std::string, std::string>& files);

bool looks_like_zip(std::string_view bytes);

}  // namespace cprobe
