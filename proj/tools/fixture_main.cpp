// Writes the planted three-class fixture: dataset, model, oracle and a run config.
#include <CLI11.hpp>
#include <iostream>

#include "cprobe/errors.hpp"
#include "cprobe/fixture.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generate the planted concept fixture"};
    std::string out;
    cprobe::fixture::FixtureParams params;
    app.add_option("--out", out, "Output directory")->required();
    app.add_option("--seed", params.seed, "Generator seed");
    app.add_option("--probe", params.probe_per_class, "Probe images per class");
    app.add_option("--eval", params.eval_per_class, "Eval images per class");
    CLI11_PARSE(app, argc, argv);
    try {
        cprobe::fixture::write_fixture(out, params);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cout << "fixture written to " << out << "\n";
    return 0;
}
