#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "cprobe/errors.hpp"
#include "cprobe/snapshot.hpp"

namespace cprobe {

enum class Stage { queued, segmenting, discovering, scoring, filtering, clustering, layouting, persisting, done, failed };

std::string to_string(Stage stage);

// A pipeline failure tagged with the stage it happened in.
class StageError : public Error {
public:
    StageError(Stage stage, const std::string& cause)
        : Error(to_string(stage) + ": " + cause), stage_(stage), cause_(cause) {}
    Stage stage() const noexcept { return stage_; }
    const std::string& cause() const noexcept { return cause_; }

private:
    Stage stage_;
    std::string cause_;
};

struct PipelineOptions {
    // Called on every stage change and progress step; progress is in [0, 1] over the whole run.
    std::function<void(Stage, double)> on_progress;
    std::function<void(const std::string&)> on_warning;
    // Per-class scoring results are stored here and reused by a later run with the same configuration.
    std::optional<std::filesystem::path> checkpoint_dir;
};

// Seed the clustering stage uses for `config`.
std::uint64_t clustering_seed(const PipelineConfig& config);

// Runs every stage up to (not including) persistence. Relative paths in the
// config are resolved against the working directory and stored absolute.
// Throws StageError.
Snapshot run_pipeline(PipelineConfig config, const PipelineOptions& options = {});

}  // namespace cprobe
