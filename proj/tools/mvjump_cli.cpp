// mvjump — experiment runner for the jump-driven mean-field Monte Carlo lab.
//
//   mvjump run <config.json> [--out DIR] [--seed N] [--threads N]
//   mvjump list
//
// Exit codes: 0 pass, 1 assertion failure, 2 config error, 3 numerical
// failure. Results never depend on --threads; reruns with the same seed
// produce byte-identical CSVs.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "mvjump/errors.hpp"
#include "mvjump/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo lab for mean-field jump diffusions"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(mvj::version_string()));

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    int threads = -1;
    bool have_seed = false;

    CLI::App* run = app.add_subcommand("run", "run one experiment from a JSON config");
    run->add_option("config", config_path, "path to the JSON config")->required();
    run->add_option("--out", out_dir, "output directory (overrides config out_dir)");
    run->add_option("--seed", seed, "master seed (overrides config sim.seed)")
        ->each([&](const std::string&) { have_seed = true; });
    run->add_option("--threads", threads, "worker threads, 0 = hardware (overrides config)");

    CLI::App* list = app.add_subcommand("list", "list the available experiments");

    CLI11_PARSE(app, argc, argv);

    if (list->parsed()) {
        for (const auto& [name, desc] : mvj::list_experiments())
            std::cout << name << "\t" << desc << "\n";
        return 0;
    }

    try {
        mvj::RunConfig cfg = mvj::parse_config_file(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (have_seed) {
            cfg.seed = seed;
            cfg.seed_set = true;
        }
        if (threads >= 0) cfg.threads = threads;
        return mvj::run_experiment(cfg);
    } catch (const mvj::MvjError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == mvj::ErrorCode::ConfigError ? 2 : 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
