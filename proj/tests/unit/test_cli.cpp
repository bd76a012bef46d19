#include <gtest/gtest.h>

#include <httplib.h>
#include <signal.h>
#include <sys/wait.h>

#include <cstdio>
#include <sstream>

#include "cprobe/file_util.hpp"
#include "cprobe/pipeline.hpp"
#include "cprobe/service.hpp"
#include "cprobe/snapshot_io.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
    int exit_code = -1;
    std::string output;  // stdout followed by stderr
};

Outcome run_cli(const std::string& args, const char* binary = CPROBE_CLI_PATH) {
    const std::string cmd = std::string("'") + binary + "' " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {};
    Outcome out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.output.append(buf, n);
    const int status = pclose(pipe);
    out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return out;
}

fs::path write_small_config(const fs::path& dir, const std::string& layer = "pool1") {
    PipelineConfig c = load_config(testing::fixture_root() / "pipeline.json");
    c.images_per_class = 12;
    c.segment_resolutions = {15};
    c.concepts_per_class = 3;
    c.n_cavs = 4;
    c.discovery.min_concept_size = 5;
    c.layer = layer;
    const fs::path file = dir / ("config-" + layer + ".json");
    write_file_atomic(file, config_to_json(c).dump(2));
    return file;
}

TEST(Cli, RunInspectExport) {
    const fs::path dir = testing::fresh_dir("cli-run");
    const fs::path config = write_small_config(dir);
    const Outcome first = run_cli("run --config " + config.string() + " --out " + (dir / "snaps").string() + " --seed 3");
    ASSERT_EQ(first.exit_code, 0) << first.output;
    EXPECT_NE(first.output.find("scoring"), std::string::npos);
    EXPECT_NE(first.output.find("persisting"), std::string::npos);

    // The last line is "<snapshot id> <directory>".
    std::istringstream lines(first.output);
    std::string line, last;
    while (std::getline(lines, line))
        if (!line.empty()) last = line;
    std::istringstream fields(last);
    std::string id, snap_dir;
    fields >> id >> snap_dir;
    ASSERT_EQ(id.size(), 16u) << first.output;
    EXPECT_EQ(fs::path(snap_dir), dir / "snaps" / id);
    const Snapshot snap = load_snapshot(snap_dir);
    EXPECT_EQ(snap.config.seed, 3u);

    const Outcome again = run_cli("run --config " + config.string() + " --out " + (dir / "snaps").string() + " --seed 3");
    ASSERT_EQ(again.exit_code, 0);
    EXPECT_NE(again.output.find(id + " "), std::string::npos);

    const Outcome inspect = run_cli("inspect --snapshot " + snap_dir);
    EXPECT_EQ(inspect.exit_code, 0);
    EXPECT_NE(inspect.output.find("snapshot " + id), std::string::npos);
    EXPECT_NE(inspect.output.find("striped"), std::string::npos);
    const Outcome by_class = run_cli("inspect --snapshot " + snap_dir + " --class 0");
    EXPECT_EQ(by_class.exit_code, 0);
    EXPECT_NE(by_class.output.find("striped_concept_1"), std::string::npos);
    EXPECT_EQ(run_cli("inspect --snapshot " + snap_dir + " --class 7").exit_code, 1);

    const fs::path exported = dir / "export.json";
    const Outcome exp = run_cli("export --snapshot " + snap_dir + " --format json --out " + exported.string());
    ASSERT_EQ(exp.exit_code, 0) << exp.output;
    const json doc = json::parse(read_file(exported));
    EXPECT_EQ(doc.at("snapshot_id"), id);
    EXPECT_EQ(doc.at("concepts").size(), snap.concepts.size());
    const Outcome to_stdout = run_cli("export --snapshot " + snap_dir);
    EXPECT_EQ(json::parse(to_stdout.output), doc);
}

TEST(Cli, FailuresExitNonZero) {
    const fs::path dir = testing::fresh_dir("cli-fail");
    const Outcome bad_layer = run_cli("run --config " + write_small_config(dir, "logits").string() + " --out " +
                                      (dir / "snaps").string());
    EXPECT_EQ(bad_layer.exit_code, 1);
    EXPECT_NE(bad_layer.output.find("run failed at stage queued"), std::string::npos) << bad_layer.output;
    EXPECT_FALSE(fs::exists(dir / "snaps"));

    write_file_atomic(dir / "broken.json", "{\"layer\": ");
    const Outcome broken = run_cli("run --config " + (dir / "broken.json").string());
    EXPECT_EQ(broken.exit_code, 1);
    EXPECT_NE(broken.output.find("error:"), std::string::npos);

    EXPECT_NE(run_cli("run --config " + (dir / "absent.json").string()).exit_code, 0);
    EXPECT_NE(run_cli("").exit_code, 0);
    EXPECT_NE(run_cli("export --snapshot " + testing::fixture_snapshot_dir().string() + " --format csv").exit_code, 0);
    EXPECT_EQ(run_cli("inspect --snapshot " + dir.string()).exit_code, 1);
}

TEST(Cli, ServeAnswersRequestsAndStopsOnSignal) {
    const fs::path dir = testing::copy_snapshot(testing::fixture_snapshot_dir(), testing::fresh_dir("cli-serve"));
    // `exec` keeps the shell's pid, which is printed first.
    const std::string cmd = "echo $$; exec '" CPROBE_CLI_PATH "' serve --snapshot " + dir.string() +
                            " --addr 127.0.0.1:0";
    FILE* pipe = popen(cmd.c_str(), "r");
    ASSERT_NE(pipe, nullptr);
    char buf[512];
    ASSERT_NE(std::fgets(buf, sizeof buf, pipe), nullptr);
    const pid_t pid = static_cast<pid_t>(std::stol(buf));
    ASSERT_NE(std::fgets(buf, sizeof buf, pipe), nullptr);
    const std::string banner = buf;
    const auto colon = banner.rfind(':');
    ASSERT_NE(colon, std::string::npos) << banner;
    const int port = std::stoi(banner.substr(colon + 1));
    EXPECT_NE(banner.find(testing::fixture_snapshot().snapshot_id), std::string::npos);

    httplib::Client client("127.0.0.1", port);
    const auto r = client.Get("/api/clusters");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);

    // A second server on the same port fails to bind.
    const Outcome busy = run_cli("serve --snapshot " + dir.string() + " --addr 127.0.0.1:" + std::to_string(port));
    EXPECT_EQ(busy.exit_code, 1);
    EXPECT_NE(busy.output.find("cannot bind"), std::string::npos) << busy.output;

    ::kill(pid, SIGTERM);
    const int status = pclose(pipe);
    EXPECT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 0);
}

TEST(FixtureCli, WritesTheSharedFixture) {
    const fs::path dir = testing::fresh_dir("fixture-cli");
    const Outcome out = run_cli("--out " + (dir / "fx").string(), CPROBE_FIXTURE_CLI_PATH);
    ASSERT_EQ(out.exit_code, 0) << out.output;
    for (const char* file : {"oracle.json", "pipeline.json", "dataset/dataset.json", "model/tensors.bin"})
        EXPECT_EQ(read_file(dir / "fx" / file), read_file(testing::fixture_root() / file)) << file;
    EXPECT_NE(run_cli("", CPROBE_FIXTURE_CLI_PATH).exit_code, 0);
}

}  // namespace
}  // namespace cprobe
