#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mvj {

// Resolved run configuration. Parsed from a single JSON file with sections
// model / levy / sim / tangent / weights / density / pde plus `experiment`,
// `out_dir` and a mandatory seed (no wall-clock default). Unknown keys are
// rejected; missing required keys report their full field path.
struct RunConfig {
    // model
    std::string family = "linear_meanfield";
    double beta = 0.5;
    double beta_bar = 0.25;
    double sigma = 1.0;
    double sigma_x = 0.0;
    double sigma_m = 0.0;
    double kappa = 0.3;         // nonlinear_bench only
    double x0 = 1.0;            // starting point / initial-law center
    // levy
    double alpha = 0.5;
    double k = 1.0;
    double eps = 0.05;
    double R0 = 1.0;
    std::string psi = "u2";
    // sim
    double T = 1.0;
    double h = 1e-3;
    int n_particles = 2000;
    long n_paths = 20000;
    std::uint64_t seed = 0;
    bool seed_set = false;
    // tangent
    int bank_size = 64;
    int fp_sweeps = 2;
    std::vector<double> v_points;
    // weights
    std::string weights_kind = "Z1";
    double gamma_floor = 1e-10;
    // density
    std::vector<double> density_grid;
    // pde
    std::string pde_g = "linear_x";
    double pde_t = 1.0;
    double pde_x = 1.0;
    double pde_dt = 0.01;
    // run
    std::string experiment;
    std::string out_dir = ".";
    int threads = 1;
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_json(const std::string& json_text);

// Executes the named experiment, writing manifest.json, one CSV per result
// table and summary.json (pass/fail per assertion) into out_dir. Returns the
// process exit code: 0 ok, 1 assertion failure, 2 config error, 3 numerical
// failure.
int run_experiment(const RunConfig& cfg);

// name -> one-line description, in registry order.
std::vector<std::pair<std::string, std::string>> list_experiments();

const char* version_string();

} // namespace mvj
