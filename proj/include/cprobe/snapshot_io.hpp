#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "cprobe/snapshot.hpp"

namespace cprobe {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

nlohmann::json config_to_json(const PipelineConfig& config);
// Missing fields take their defaults; malformed ones raise ParameterError.
PipelineConfig config_from_json(const nlohmann::json& doc);
// Reads a config file; relative dataset/model paths are resolved against its directory.
PipelineConfig load_config(const std::filesystem::path& path);

// Full-precision JSON form of concept entries, used for stage checkpoints.
nlohmann::json concept_entries_to_json(const std::vector<ConceptEntry>& entries);
std::vector<ConceptEntry> concept_entries_from_json(const nlohmann::json& doc);

// Rounds every value that is stored as float32 so that an in-memory snapshot
// equals its persisted form.
void quantize_for_storage(Snapshot& snapshot);

struct SerializedSnapshot {
    std::string manifest;  // manifest.json
    std::string tensors;   // tensors.bin
};

SerializedSnapshot serialize_snapshot(const Snapshot& snapshot);

// Content hash over the canonical manifest (without snapshot_id and
// created_at) and the tensor blob; 16 hex characters.
std::string compute_snapshot_id(const Snapshot& snapshot);

// The manifest with every tensor written inline, for export.
nlohmann::json snapshot_to_json(const Snapshot& snapshot);

// Throws UnsupportedVersionError for other schema versions and
// CorruptionError when the content does not match snapshot_id.
Snapshot parse_snapshot(const std::string& manifest, const std::string& tensors);

// Assigns snapshot_id and created_at, then writes root/{snapshot_id}/ with
// manifest.json, tensors.bin and patches/. Returns that directory.
std::filesystem::path save_snapshot(Snapshot& snapshot, const std::filesystem::path& root);

Snapshot load_snapshot(const std::filesystem::path& dir);

}  // namespace cprobe
