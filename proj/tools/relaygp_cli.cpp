#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "relaygp/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Relay-function identification experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int jobs = 1;
    bool validate_only = false;

    CLI::App* run = app.add_subcommand("run", "Run the experiment described by a config file");
    run->add_option("config", config_path, "Path to a key=value config file")->required();
    run->add_option("--out-dir", out_dir, "Override the config's output_dir");
    run->add_option("--seed", seed, "Override the config's master_seed")
        ->each([&](const std::string&) { seed_given = true; });
    run->add_option("--jobs", jobs, "Worker threads for independent trials")
        ->check(CLI::PositiveNumber);
    run->add_flag("--validate-only", validate_only,
                  "Parse and validate the config, then exit without running");

    CLI11_PARSE(app, argc, argv);

    try {
        relaygp::ExperimentConfig cfg = relaygp::parse_config(config_path);
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        if (seed_given) cfg.master_seed = seed;
        relaygp::validate_config(cfg);
        if (validate_only) {
            std::cout << "config OK: " << config_path << "\n";
            return 0;
        }
        relaygp::run_experiment(cfg, jobs);
        std::cout << "wrote results to " << cfg.output_dir << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
