#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cprobe/dataset.hpp"
#include "cprobe/model.hpp"
#include "cprobe/pipeline.hpp"
#include "cprobe/snapshot.hpp"

namespace cprobe {

struct Annotation {
    std::string text;
    std::string created_at;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

// Cluster annotations kept in one JSON file beside the snapshots, keyed by
// snapshot id and cluster id. Writes are serialized and atomic on disk.
class AnnotationStore {
public:
    explicit AnnotationStore(std::filesystem::path file);

    Annotation append(const std::string& snapshot_id, const std::string& cluster_id, const std::string& text);
    // Oldest first.
    std::vector<Annotation> list(const std::string& snapshot_id, const std::string& cluster_id) const;
    const std::filesystem::path& file() const noexcept { return file_; }

private:
    nlohmann::json read() const;

    std::filesystem::path file_;
    mutable std::mutex mutex_;
};

struct RunStatus {
    std::string run_id;
    Stage stage = Stage::queued;
    double progress = 0.0;
    std::vector<std::string> warnings;
    std::optional<std::string> snapshot_id;
    std::optional<Stage> failed_stage;
    std::string error;
};

nlohmann::json to_json(const RunStatus& status);

// Executes submitted pipeline runs one at a time on a worker thread. Each
// finished run is persisted under `snapshot_root` and handed to `on_done`.
class RunQueue {
public:
    using DoneCallback = std::function<void(const std::filesystem::path& dir, std::shared_ptr<const Snapshot>)>;

    RunQueue(std::filesystem::path snapshot_root, DoneCallback on_done,
             std::optional<std::filesystem::path> checkpoint_dir = {});
    // Lets the active run finish; queued runs are dropped.
    ~RunQueue();

    RunQueue(const RunQueue&) = delete;
    RunQueue& operator=(const RunQueue&) = delete;

    std::string submit(PipelineConfig config);
    std::optional<RunStatus> status(const std::string& run_id) const;
    // Runs submitted before this one that have not started.
    std::size_t queue_position(const std::string& run_id) const;
    // Blocks until no run is active or queued.
    void wait_idle();

private:
    void work();

    std::filesystem::path root_;
    DoneCallback on_done_;
    std::optional<std::filesystem::path> checkpoint_dir_;
    mutable std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable idle_;
    std::deque<std::pair<std::string, PipelineConfig>> pending_;
    std::map<std::string, RunStatus> statuses_;
    bool busy_ = false;
    bool stopping_ = false;
    std::size_t next_id_ = 1;
    std::thread worker_;
};

// A snapshot together with the dataset and model it was computed from. The
// latter are optional: endpoints that need them answer 503 when absent.
struct ServedSnapshot {
    std::filesystem::path dir;
    std::shared_ptr<const Snapshot> snapshot;
    std::optional<DatasetManifest> dataset;
    std::optional<ModelGraph> model;
    std::string inputs_error;

    static std::shared_ptr<const ServedSnapshot> open(const std::filesystem::path& dir,
                                                      std::shared_ptr<const Snapshot> snapshot);
};

struct ApiRequest {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
};

struct ApiResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

struct ServiceOptions {
    std::optional<std::filesystem::path> web_root;
    std::optional<std::filesystem::path> checkpoint_dir;
};

// The HTTP API over a served snapshot, independent of the transport. The
// snapshot directory's parent holds annotations.json and receives new runs.
class ApiService {
public:
    explicit ApiService(const std::filesystem::path& snapshot_dir, ServiceOptions options = {});

    ApiResponse handle(const ApiRequest& request) const;

    std::shared_ptr<const ServedSnapshot> current() const;
    // Replaces the served snapshot; readers holding the old one keep it alive.
    void swap(std::shared_ptr<const ServedSnapshot> next);

    RunQueue& run_queue() const { return *runs_; }
    AnnotationStore& annotation_store() const { return annotations_; }
    const ServiceOptions& options() const { return options_; }

private:
    ApiResponse dispatch(const ApiRequest& request) const;

    ServiceOptions options_;
    std::filesystem::path root_;
    mutable std::mutex swap_mutex_;
    std::shared_ptr<const ServedSnapshot> served_;
    mutable AnnotationStore annotations_;
    std::unique_ptr<RunQueue> runs_;
};

// Binds the API (and the optional static web root) to a socket.
class HttpServer {
public:
    explicit HttpServer(ApiService& api);
    ~HttpServer();

    // Throws IoError when the address cannot be bound. Port 0 picks a free
    // port. Returns the bound port.
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// "HOST:PORT" split into its parts; throws ParameterError.
std::pair<std::string, int> parse_address(const std::string& address);

}  // namespace cprobe
