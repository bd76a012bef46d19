#pragma once

#include <filesystem>
#include <string>

#include "cprobe/model.hpp"

namespace cprobe {

enum class ModelContainer { directory, zip };

// Reads `model.json` + `tensors.bin` from a directory or from a zip holding both.
// Malformed bytes raise FormatError; inconsistent shapes raise ValidationError
// naming the layer.
ModelGraph load_model(const std::filesystem::path& path);

// Same, from in-memory file contents.
ModelGraph parse_model(const std::string& manifest_json, const std::string& tensor_bytes);

void save_model(const ModelGraph& model, const std::filesystem::path& path,
                ModelContainer container = ModelContainer::directory);

}  // namespace cprobe
