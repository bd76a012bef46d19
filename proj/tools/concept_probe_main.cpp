// concept-probe: run the pipeline, serve a snapshot, inspect or export it.
#include <CLI11.hpp>
#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "cprobe/errors.hpp"
#include "cprobe/pipeline.hpp"
#include "cprobe/service.hpp"
#include "cprobe/snapshot_io.hpp"

namespace {

using namespace cprobe;

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out,
            const std::string& checkpoint_dir) {
    PipelineConfig config = load_config(config_path);
    if (seed) config.seed = *seed;
    PipelineOptions options;
    if (!checkpoint_dir.empty()) options.checkpoint_dir = checkpoint_dir;
    Stage last = Stage::done;
    options.on_progress = [&](Stage stage, double progress) {
        if (stage != last) std::cerr << "[" << std::setw(3) << static_cast<int>(progress * 100) << "%] " << to_string(stage) << "\n";
        last = stage;
    };
    options.on_warning = [](const std::string& w) { std::cerr << "warning: " << w << "\n"; };
    Snapshot snap;
    try {
        snap = run_pipeline(config, options);
    } catch (const StageError& e) {
        std::cerr << "run failed at stage " << to_string(e.stage()) << ": " << e.cause() << "\n";
        return 1;
    }
    std::cerr << "[ 97%] persisting\n";
    std::filesystem::create_directories(out);
    const auto dir = save_snapshot(snap, out);
    std::cout << snap.snapshot_id << " " << dir.string() << "\n";
    return 0;
}

int cmd_serve(const std::string& snapshot, const std::string& addr, const std::string& web_root,
              const std::string& checkpoint_dir) {
    const auto [host, port] = parse_address(addr);
    ServiceOptions options;
    if (!web_root.empty()) options.web_root = web_root;
    if (!checkpoint_dir.empty()) options.checkpoint_dir = checkpoint_dir;
    ApiService api(snapshot, options);
    HttpServer server(api);
    const int bound = server.bind(host, port);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "serving snapshot " << api.current()->snapshot->snapshot_id << " on http://" << host << ":" << bound
              << std::endl;
    server.listen();
    g_server = nullptr;
    return 0;
}

int cmd_inspect(const std::string& dir, std::optional<std::size_t> class_k) {
    const Snapshot s = load_snapshot(dir);
    std::cout << "snapshot " << s.snapshot_id << " created " << s.created_at << "\n"
              << "layer " << s.config.layer << ", seed " << s.config.seed << ", " << s.n_clusters << " concept clusters\n";
    if (!class_k) {
        for (const auto& c : s.classes) {
            std::size_t total = 0, retained = 0;
            for (const auto& e : s.concepts)
                if (e.record.class_k == c.class_k) {
                    ++total;
                    retained += e.retained;
                }
            std::cout << "  [" << c.class_k << "] " << c.name << "  accuracy " << c.accuracy.correct << "/"
                      << c.accuracy.total << "  concepts " << retained << "/" << total << " retained\n";
        }
        for (const auto& w : s.warnings) std::cout << "warning: " << w << "\n";
        return 0;
    }
    if (*class_k >= s.class_names.size()) throw LookupError("unknown class " + std::to_string(*class_k));
    std::cout << "class " << *class_k << " " << s.class_names[*class_k] << "\n";
    for (const auto& e : s.concepts) {
        if (e.record.class_k != *class_k) continue;
        std::cout << "  " << std::left << std::setw(28) << e.record.concept_id << std::right << " size "
                  << std::setw(5) << e.record.member_segment_ids.size();
        if (e.record.tcav)
            std::cout << "  tcav " << std::fixed << std::setprecision(3) << e.record.tcav->mean_score << "  p "
                      << std::scientific << std::setprecision(2) << e.record.tcav->p_value << std::defaultfloat;
        else
            std::cout << "  untestable";
        std::cout << "  " << (e.retained ? "retained" : "filtered");
        if (e.record.cluster_id) std::cout << "  " << *e.record.cluster_id;
        std::cout << "\n";
    }
    return 0;
}

int cmd_export(const std::string& dir, const std::string& out) {
    const Snapshot s = load_snapshot(dir);
    const std::string text = snapshot_to_json(s).dump(2) + "\n";
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        std::ofstream f(out, std::ios::binary);
        if (!(f << text)) throw IoError("cannot write " + out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Concept-based probing of an image classifier"};
    app.require_subcommand(1);

    std::string config, out = "snapshots", checkpoint_dir;
    std::optional<std::uint64_t> seed;
    auto* run = app.add_subcommand("run", "Run the pipeline and persist a snapshot");
    run->add_option("--config", config, "Pipeline configuration JSON")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Override the configured seed");
    run->add_option("--out", out, "Snapshot root directory")->capture_default_str();
    run->add_option("--checkpoint-dir", checkpoint_dir, "Reuse per-stage checkpoints from this directory");

    std::string snapshot, addr = "127.0.0.1:8080", web_root;
    auto* serve = app.add_subcommand("serve", "Serve a snapshot over HTTP");
    serve->add_option("--snapshot", snapshot, "Snapshot directory")->required()->check(CLI::ExistingDirectory);
    serve->add_option("--addr", addr, "HOST:PORT to listen on")->capture_default_str();
    serve->add_option("--web-root", web_root, "Static frontend bundle to serve at /");
    serve->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory for runs started over HTTP");

    std::optional<std::size_t> class_k;
    auto* inspect = app.add_subcommand("inspect", "Summarize a snapshot");
    inspect->add_option("--snapshot", snapshot, "Snapshot directory")->required()->check(CLI::ExistingDirectory);
    inspect->add_option("--class", class_k, "Class index to list concepts for");

    std::string format = "json", export_out;
    auto* exp = app.add_subcommand("export", "Write a snapshot as a single JSON document");
    exp->add_option("--snapshot", snapshot, "Snapshot directory")->required()->check(CLI::ExistingDirectory);
    exp->add_option("--format", format, "Output format")->check(CLI::IsMember({"json"}))->capture_default_str();
    exp->add_option("--out", export_out, "Output file (default stdout)");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) return cmd_run(config, seed, out, checkpoint_dir);
        if (*serve) return cmd_serve(snapshot, addr, web_root, checkpoint_dir);
        if (*inspect) return cmd_inspect(snapshot, class_k);
        if (*exp) return cmd_export(snapshot, export_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
