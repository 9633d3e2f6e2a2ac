#include "mvjump/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <limits>
#include <random>
#include <sstream>

#include "mvjump/errors.hpp"
#include "mvjump/malliavin.hpp"
#include "mvjump/pde.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/simulator.hpp"
#include "mvjump/stats.hpp"
#include "mvjump/tangent.hpp"
#include "mvjump/threading.hpp"

namespace mvj {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config parsing (strict: unknown keys are errors, errors carry field paths)
// ---------------------------------------------------------------------------

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* a : allowed)
            if (it.key() == a) {
                known = true;
                break;
            }
        if (!known)
            fail(ErrorCode::ConfigError,
                 "unknown config key '" + (section.empty() ? "" : section + ".") + it.key() +
                     "'");
    }
}

const json* section(const json& j, const char* name) {
    if (!j.contains(name)) return nullptr;
    const json& s = j.at(name);
    if (!s.is_object())
        fail(ErrorCode::ConfigError, std::string("config section '") + name +
                                         "' must be an object");
    return &s;
}

double num(const json& s, const std::string& path, double def) {
    if (!s.contains(path.substr(path.find('.') + 1))) return def;
    const json& v = s.at(path.substr(path.find('.') + 1));
    if (!v.is_number())
        fail(ErrorCode::ConfigError, "config key '" + path + "' must be a number");
    return v.get<double>();
}

long integer(const json& s, const std::string& path, long def) {
    const std::string key = path.substr(path.find('.') + 1);
    if (!s.contains(key)) return def;
    const json& v = s.at(key);
    if (!v.is_number_integer())
        fail(ErrorCode::ConfigError, "config key '" + path + "' must be an integer");
    return v.get<long>();
}

std::string str(const json& s, const std::string& path, const std::string& def) {
    const std::string key = path.substr(path.find('.') + 1);
    if (!s.contains(key)) return def;
    const json& v = s.at(key);
    if (!v.is_string())
        fail(ErrorCode::ConfigError, "config key '" + path + "' must be a string");
    return v.get<std::string>();
}

std::vector<double> num_array(const json& s, const std::string& path) {
    const std::string key = path.substr(path.find('.') + 1);
    if (!s.contains(key)) return {};
    const json& v = s.at(key);
    if (!v.is_array())
        fail(ErrorCode::ConfigError, "config key '" + path + "' must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
        if (!e.is_number())
            fail(ErrorCode::ConfigError,
                 "config key '" + path + "' must be an array of numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

} // namespace

RunConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        fail(ErrorCode::ConfigError, std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(ErrorCode::ConfigError, "config root must be a JSON object");
    check_keys(j, "",
               {"model", "levy", "sim", "tangent", "weights", "density", "pde", "experiment",
                "out_dir", "threads", "version", "timestamp"});

    RunConfig cfg;
    if (const json* m = section(j, "model")) {
        check_keys(*m, "model",
                   {"family", "beta", "beta_bar", "sigma", "sigma_x", "sigma_m", "kappa", "x0"});
        cfg.family = str(*m, "model.family", cfg.family);
        cfg.beta = num(*m, "model.beta", cfg.beta);
        cfg.beta_bar = num(*m, "model.beta_bar", cfg.beta_bar);
        cfg.sigma = num(*m, "model.sigma", cfg.sigma);
        cfg.sigma_x = num(*m, "model.sigma_x", cfg.sigma_x);
        cfg.sigma_m = num(*m, "model.sigma_m", cfg.sigma_m);
        cfg.kappa = num(*m, "model.kappa", cfg.kappa);
        cfg.x0 = num(*m, "model.x0", cfg.x0);
    }
    const json* lv = section(j, "levy");
    if (!lv || !lv->contains("alpha"))
        fail(ErrorCode::ConfigError, "required config key 'levy.alpha' is missing");
    check_keys(*lv, "levy", {"alpha", "k", "eps", "R0", "psi"});
    cfg.alpha = num(*lv, "levy.alpha", cfg.alpha);
    cfg.k = num(*lv, "levy.k", cfg.k);
    cfg.eps = num(*lv, "levy.eps", cfg.eps);
    cfg.R0 = num(*lv, "levy.R0", cfg.R0);
    cfg.psi = str(*lv, "levy.psi", cfg.psi);

    if (const json* s = section(j, "sim")) {
        check_keys(*s, "sim", {"T", "h", "n_particles", "n_paths", "seed"});
        cfg.T = num(*s, "sim.T", cfg.T);
        cfg.h = num(*s, "sim.h", cfg.h);
        cfg.n_particles = static_cast<int>(integer(*s, "sim.n_particles", cfg.n_particles));
        cfg.n_paths = integer(*s, "sim.n_paths", cfg.n_paths);
        if (s->contains("seed")) {
            const json& v = s->at("seed");
            const bool neg = v.is_number_integer() && !v.is_number_unsigned() &&
                             v.get<long long>() < 0;
            if (!v.is_number_integer() || neg)
                fail(ErrorCode::ConfigError,
                     "config key 'sim.seed' must be a non-negative integer");
            cfg.seed = v.get<std::uint64_t>();
            cfg.seed_set = true;
        }
    }
    if (const json* t = section(j, "tangent")) {
        check_keys(*t, "tangent", {"bank_size", "fp_sweeps", "v_points"});
        cfg.bank_size = static_cast<int>(integer(*t, "tangent.bank_size", cfg.bank_size));
        cfg.fp_sweeps = static_cast<int>(integer(*t, "tangent.fp_sweeps", cfg.fp_sweeps));
        cfg.v_points = num_array(*t, "tangent.v_points");
    }
    if (const json* w = section(j, "weights")) {
        check_keys(*w, "weights", {"kind", "gamma_floor"});
        cfg.weights_kind = str(*w, "weights.kind", cfg.weights_kind);
        cfg.gamma_floor = num(*w, "weights.gamma_floor", cfg.gamma_floor);
    }
    if (const json* d = section(j, "density")) {
        check_keys(*d, "density", {"grid"});
        cfg.density_grid = num_array(*d, "density.grid");
    }
    if (const json* p = section(j, "pde")) {
        check_keys(*p, "pde", {"g", "t", "x", "dt"});
        cfg.pde_g = str(*p, "pde.g", cfg.pde_g);
        cfg.pde_t = num(*p, "pde.t", cfg.pde_t);
        cfg.pde_x = num(*p, "pde.x", cfg.pde_x);
        cfg.pde_dt = num(*p, "pde.dt", cfg.pde_dt);
    }
    if (j.contains("experiment")) {
        if (!j.at("experiment").is_string())
            fail(ErrorCode::ConfigError, "config key 'experiment' must be a string");
        cfg.experiment = j.at("experiment").get<std::string>();
    } else {
        fail(ErrorCode::ConfigError, "required config key 'experiment' is missing");
    }
    if (j.contains("out_dir")) {
        if (!j.at("out_dir").is_string())
            fail(ErrorCode::ConfigError, "config key 'out_dir' must be a string");
        cfg.out_dir = j.at("out_dir").get<std::string>();
    }
    if (j.contains("threads")) {
        if (!j.at("threads").is_number_integer() || j.at("threads").get<long>() < 0)
            fail(ErrorCode::ConfigError,
                 "config key 'threads' must be a non-negative integer");
        cfg.threads = static_cast<int>(j.at("threads").get<long>());
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::ConfigError, "cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str());
}

const char* version_string() {
#ifdef MVJUMP_VERSION
    return MVJUMP_VERSION;
#else
    return "0.0.0";
#endif
}

std::vector<std::pair<std::string, std::string>> list_experiments() {
    return {
        {"ibp_x", "x-gradient of E[f(X_T)] by divergence weights vs shared-noise FD"},
        {"ibp_mu", "Lions-derivative gradient at v by Zmu weights vs measure-shift FD"},
        {"ibp_deltax", "total derivative when the initial law is delta_x vs joint-shift FD"},
        {"density_1d", "terminal density by the Z2 pairing vs an independent histogram"},
        {"gamma_scaling", "small-time inverse-moment scaling of Gamma[X]"},
        {"pde_residual", "residual of the nonlocal backward equation at one query point"},
        {"chain_rule", "measure-flow chain rule for F in {m, m^2} along the particle system"},
        {"flow_property", "restart consistency of the decoupled flow (O(h) law-freeze lag)"},
        {"picard", "Picard-in-law iteration: stage gaps and limit vs the coupled system"},
        {"moments", "mark-space scaling fits and small-time path increment moments"},
    };
}

namespace {

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorCode::ConfigError, "cannot write '" + p.string() + "'");
    out << text;
}

json config_json(const RunConfig& cfg) {
    json j;
    j["experiment"] = cfg.experiment;
    j["out_dir"] = cfg.out_dir;
    j["threads"] = cfg.threads;
    j["model"] = {{"family", cfg.family}, {"beta", cfg.beta},   {"beta_bar", cfg.beta_bar},
                  {"sigma", cfg.sigma},   {"sigma_x", cfg.sigma_x}, {"sigma_m", cfg.sigma_m},
                  {"kappa", cfg.kappa},   {"x0", cfg.x0}};
    j["levy"] = {{"alpha", cfg.alpha}, {"k", cfg.k}, {"eps", cfg.eps}, {"R0", cfg.R0},
                 {"psi", cfg.psi}};
    j["sim"] = {{"T", cfg.T},
                {"h", cfg.h},
                {"n_particles", cfg.n_particles},
                {"n_paths", cfg.n_paths},
                {"seed", cfg.seed}};
    j["tangent"] = {{"bank_size", cfg.bank_size},
                    {"fp_sweeps", cfg.fp_sweeps},
                    {"v_points", cfg.v_points}};
    j["weights"] = {{"kind", cfg.weights_kind}, {"gamma_floor", cfg.gamma_floor}};
    j["density"] = {{"grid", cfg.density_grid}};
    j["pde"] = {{"g", cfg.pde_g}, {"t", cfg.pde_t}, {"x", cfg.pde_x}, {"dt", cfg.pde_dt}};
    return j;
}

void write_manifest(const RunConfig& cfg, const std::filesystem::path& dir) {
    json j = config_json(cfg);
    j["version"] = version_string();
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    j["timestamp"] = buf;
    write_text(dir / "manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// shared setup
// ---------------------------------------------------------------------------

struct Lab {
    CoefficientSet cs;
    LevyModel lm;
    Eigen::VectorXd x0;
    EmpiricalMeasure mu0;  // point mass at x0
};

Lab make_lab(const RunConfig& cfg) {
    Lab lab;
    if (cfg.family == "linear_meanfield")
        lab.cs = builtin_linear_meanfield(cfg.beta, cfg.beta_bar, cfg.sigma, cfg.sigma_x,
                                          cfg.sigma_m, cfg.alpha);
    else if (cfg.family == "nonlinear_bench")
        lab.cs = builtin_nonlinear_bench(cfg.beta, cfg.beta_bar, cfg.sigma, cfg.kappa,
                                         cfg.alpha);
    else
        fail(ErrorCode::ConfigError, "unknown model.family '" + cfg.family +
                                         "' (known: linear_meanfield, nonlinear_bench)");
    if (cfg.psi != "u2")
        fail(ErrorCode::ConfigError, "levy.psi: only the built-in mark structure \"u2\" ships");
    lab.lm.alpha = cfg.alpha;
    lab.lm.k = cfg.k;
    lab.lm.eps = cfg.eps;
    lab.lm.R0 = cfg.R0;
    lab.lm.validate();
    lab.x0 = Eigen::VectorXd::Constant(1, cfg.x0);
    Eigen::MatrixXd pts(1, 1);
    pts(0, 0) = cfg.x0;
    lab.mu0 = EmpiricalMeasure(pts, Eigen::VectorXd::Ones(1));
    return lab;
}

ThetaSampler const_theta(Eigen::VectorXd x) {
    return [x = std::move(x)](std::mt19937_64&) { return x; };
}

ThetaSampler gaussian_theta(Eigen::VectorXd center, double sd) {
    return [center = std::move(center), sd](std::mt19937_64& rng) {
        std::normal_distribution<double> n(0.0, sd);
        Eigen::VectorXd x = center;
        x(0) += n(rng);
        return x;
    };
}

LawFlow delta_law(const Lab& lab, const RunConfig& cfg, double T, std::uint64_t tag,
                  double center_shift = 0.0) {
    Eigen::VectorXd c = lab.x0;
    c(0) += center_shift;
    return simulate_particle_system(lab.cs, lab.lm, const_theta(c), cfg.n_particles, T, cfg.h,
                                    child_root(cfg.seed, tag))
        .law;
}

// CRN central difference of E[f(X_T)] across two (start, law) scenarios:
// path p uses the same jump stream in both, so the difference is paired.
struct FdResult {
    double value = 0.0;
    double se = 0.0;
};

FdResult fd_paired(const Lab& lab, const Eigen::VectorXd& xp, const Eigen::VectorXd& xm,
                   const LawFlow& lawp, const LawFlow& lawm, const TerminalMap& f, long n_paths,
                   std::uint64_t root, double denom) {
    const std::size_t n = static_cast<std::size_t>(n_paths);
    std::vector<RunningStats> acc(n_chunks(n, 512));
    parallel_chunks(n, 512, [&](std::size_t ci, std::size_t pb, std::size_t pe) {
        for (std::size_t p = pb; p < pe; ++p) {
            PathBundle bp = simulate_decoupled(lab.cs, lab.lm, xp, lawp, root, p);
            PathBundle bm = simulate_decoupled(lab.cs, lab.lm, xm, lawm, root, p);
            acc[ci].add((f(bp.states.back()) - f(bm.states.back())) / denom);
        }
    });
    RunningStats tot;
    for (const auto& a : acc) tot.merge(a);
    return {tot.mean(), tot.std_error()};
}

// ---------------------------------------------------------------------------
// experiments
// ---------------------------------------------------------------------------

bool exp_ibp_x(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    LawFlow law = delta_law(lab, cfg, cfg.T, 11);
    IbpParams ip;
    ip.n_paths = cfg.n_paths;
    ip.seed = child_root(cfg.seed, 21);
    ip.gamma_floor = cfg.gamma_floor;
    TerminalMap f = [](const Eigen::VectorXd& y) { return y(0); };
    GradientEstimate est = estimate_gradient_x(lab.cs, lab.lm, lab.x0, law, f, ip);

    const double d = 1e-3 * (1.0 + std::abs(cfg.x0));
    Eigen::VectorXd xp = lab.x0, xm = lab.x0;
    xp(0) += d;
    xm(0) -= d;
    FdResult fd = fd_paired(lab, xp, xm, law, law, f, cfg.n_paths, child_root(cfg.seed, 22),
                            2.0 * d);

    const double gap = std::abs(est.value(0) - fd.value);
    const double comb = std::hypot(est.std_error(0), fd.se);
    const double rel = gap / std::max(std::abs(fd.value), 1e-12);
    const double rej = static_cast<double>(est.n_rejected) / static_cast<double>(est.n_paths);
    const bool pass_gap = gap <= 3.0 * comb;
    const bool pass_rej = rej < 0.01;

    std::ostringstream csv;
    csv << "component,value,se,interior,flux,fd,fd_se\n";
    csv << "0," << fmt(est.value(0)) << ',' << fmt(est.std_error(0)) << ','
        << fmt(est.interior(0)) << ',' << fmt(est.flux(0)) << ',' << fmt(fd.value) << ','
        << fmt(fd.se) << '\n';
    write_text(dir / "gradient.csv", csv.str());

    summary["ibp_value"] = est.value(0);
    summary["ibp_se"] = est.std_error(0);
    summary["fd_value"] = fd.value;
    summary["fd_se"] = fd.se;
    summary["ibp_rel_gap"] = rel;
    summary["gap_over_se"] = comb > 0.0 ? gap / comb : 0.0;
    summary["rejected_fraction"] = rej;
    summary["pass_gap"] = pass_gap;
    summary["pass_rejection"] = pass_rej;
    return pass_gap && pass_rej;
}

bool exp_ibp_mu(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    LawFlow law = delta_law(lab, cfg, cfg.T, 11);
    std::vector<double> vs = cfg.v_points.empty() ? std::vector<double>{cfg.x0} : cfg.v_points;
    std::vector<Eigen::VectorXd> v_vecs;
    for (double v : vs) v_vecs.push_back(Eigen::VectorXd::Constant(1, v));
    DmuBankConfig bc;
    bc.bank_size = cfg.bank_size;
    bc.fp_sweeps = cfg.fp_sweeps;
    DmuBank bank = build_dmu_bank(lab.cs, lab.lm, law, v_vecs, bc, child_root(cfg.seed, 31));

    IbpParams ip;
    ip.n_paths = cfg.n_paths;
    ip.seed = child_root(cfg.seed, 32);
    ip.gamma_floor = cfg.gamma_floor;
    TerminalMap f = [](const Eigen::VectorXd& y) { return y(0); };

    // measure-shift FD reference, valid where v coincides with the initial atom
    const double d = 1e-3 * (1.0 + std::abs(cfg.x0));
    LawFlow lawp = delta_law(lab, cfg, cfg.T, 11, +d);
    LawFlow lawm = delta_law(lab, cfg, cfg.T, 11, -d);

    std::ostringstream csv;
    csv << "v,value,se,interior,flux,fd,fd_se\n";
    bool pass = true;
    bool first = true;
    for (std::size_t vi = 0; vi < v_vecs.size(); ++vi) {
        GradientEstimate est =
            estimate_gradient_mu(lab.cs, lab.lm, lab.x0, law, bank, vi, f, ip);
        double fdv = std::numeric_limits<double>::quiet_NaN(), fdse = fdv;
        if (std::abs(vs[vi] - cfg.x0) <= 1e-12) {
            FdResult fd = fd_paired(lab, lab.x0, lab.x0, lawp, lawm, f, cfg.n_paths,
                                    child_root(cfg.seed, 33), 2.0 * d);
            fdv = fd.value;
            fdse = fd.se;
            const double gap = std::abs(est.value(0) - fdv);
            const double comb = std::hypot(est.std_error(0), fdse);
            pass = pass && gap <= 3.0 * comb + 1e-3;
            if (first) {
                summary["value"] = est.value(0);
                summary["se"] = est.std_error(0);
                summary["fd_value"] = fdv;
                summary["fd_se"] = fdse;
                summary["gap_over_se"] = comb > 0.0 ? gap / comb : 0.0;
                first = false;
            }
        }
        csv << fmt(vs[vi]) << ',' << fmt(est.value(0)) << ',' << fmt(est.std_error(0)) << ','
            << fmt(est.interior(0)) << ',' << fmt(est.flux(0)) << ',' << fmt(fdv) << ','
            << fmt(fdse) << '\n';
    }
    write_text(dir / "mu_gradient.csv", csv.str());
    return pass;
}

bool exp_ibp_deltax(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    LawFlow law = delta_law(lab, cfg, cfg.T, 11);
    DmuBankConfig bc;
    bc.bank_size = cfg.bank_size;
    bc.fp_sweeps = cfg.fp_sweeps;
    DmuBank bank = build_dmu_bank(lab.cs, lab.lm, law, {lab.x0}, bc, child_root(cfg.seed, 31));
    IbpParams ip;
    ip.n_paths = cfg.n_paths;
    ip.seed = child_root(cfg.seed, 32);
    ip.gamma_floor = cfg.gamma_floor;
    TerminalMap f = [](const Eigen::VectorXd& y) { return y(0); };
    GradientEstimate est =
        estimate_gradient_deltax(lab.cs, lab.lm, lab.x0, law, bank, 0, f, ip);

    const double d = 1e-3 * (1.0 + std::abs(cfg.x0));
    Eigen::VectorXd xp = lab.x0, xm = lab.x0;
    xp(0) += d;
    xm(0) -= d;
    LawFlow lawp = delta_law(lab, cfg, cfg.T, 11, +d);
    LawFlow lawm = delta_law(lab, cfg, cfg.T, 11, -d);
    FdResult fd =
        fd_paired(lab, xp, xm, lawp, lawm, f, cfg.n_paths, child_root(cfg.seed, 33), 2.0 * d);

    const double gap = std::abs(est.value(0) - fd.value);
    const double comb = std::hypot(est.std_error(0), fd.se);

    std::ostringstream csv;
    csv << "component,value,se,interior,flux,fd,fd_se\n";
    csv << "0," << fmt(est.value(0)) << ',' << fmt(est.std_error(0)) << ','
        << fmt(est.interior(0)) << ',' << fmt(est.flux(0)) << ',' << fmt(fd.value) << ','
        << fmt(fd.se) << '\n';
    write_text(dir / "deltax_gradient.csv", csv.str());

    summary["value"] = est.value(0);
    summary["se"] = est.std_error(0);
    summary["fd_value"] = fd.value;
    summary["fd_se"] = fd.se;
    summary["gap_over_se"] = comb > 0.0 ? gap / comb : 0.0;
    return gap <= 3.0 * comb + 1e-3;
}

bool exp_density(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    LawFlow law = delta_law(lab, cfg, cfg.T, 11);

    std::vector<double> grid = cfg.density_grid;
    if (grid.empty()) {
        // pilot run to place the grid
        std::vector<double> xs;
        const std::uint64_t root = child_root(cfg.seed, 41);
        for (std::size_t p = 0; p < 4000; ++p)
            xs.push_back(
                simulate_decoupled(lab.cs, lab.lm, lab.x0, law, root, p).states.back()(0));
        std::sort(xs.begin(), xs.end());
        const double lo = xs[static_cast<std::size_t>(0.005 * xs.size())];
        const double hi = xs[static_cast<std::size_t>(0.995 * xs.size()) - 1];
        const double pad = 0.05 * (hi - lo);
        for (int i = 0; i < 81; ++i)
            grid.push_back(lo - pad + (hi - lo + 2 * pad) * i / 80.0);
    }

    IbpParams ip;
    ip.n_paths = cfg.n_paths;
    ip.seed = child_root(cfg.seed, 42);
    ip.gamma_floor = cfg.gamma_floor;
    DensityEstimate de = estimate_density_ibp(lab.cs, lab.lm, lab.x0, law, grid, ip);

    // independent histogram reference
    std::vector<double> samples(static_cast<std::size_t>(cfg.n_paths));
    const std::uint64_t root = child_root(cfg.seed, 43);
    parallel_chunks(samples.size(), 512, [&](std::size_t, std::size_t pb, std::size_t pe) {
        for (std::size_t p = pb; p < pe; ++p)
            samples[p] =
                simulate_decoupled(lab.cs, lab.lm, lab.x0, law, root, p).states.back()(0);
    });
    Histogram hist = histogram_fd(samples, grid.front(), grid.back());

    double sup_over = 0.0, min_norm = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double hd = hist.density_at(grid[i]);
        const double hse = hist.density_se_at(grid[i]);
        // half-bin discretization allowance on the histogram side
        const double slope =
            i + 1 < grid.size()
                ? std::abs(de.p_hat[i + 1] - de.p_hat[i]) / (grid[i + 1] - grid[i])
                : 0.0;
        const double bin_bias = 0.5 * hist.bin_width() * slope;
        const double comb = std::hypot(de.se[i], hse) + 1e-12;
        sup_over = std::max(sup_over, (std::abs(de.p_hat[i] - hd) - bin_bias) / comb);
        min_norm = std::min(min_norm, de.p_hat[i] / std::max(de.se[i], 1e-12));
    }
    const bool pass_int = std::abs(de.integral - 1.0) <= 0.03;
    const bool pass_hist = sup_over <= 3.0;
    const bool pass_nonneg = min_norm >= -3.0;

    std::ostringstream csv;
    csv << "y,p_hat,se,n_rejected\n";
    for (std::size_t i = 0; i < grid.size(); ++i)
        csv << fmt(grid[i]) << ',' << fmt(de.p_hat[i]) << ',' << fmt(de.se[i]) << ','
            << de.n_rejected << '\n';
    write_text(dir / "density.csv", csv.str());

    std::ostringstream hcsv;
    hcsv << "y,hist_density,hist_se\n";
    for (double y : grid)
        hcsv << fmt(y) << ',' << fmt(hist.density_at(y)) << ',' << fmt(hist.density_se_at(y))
             << '\n';
    write_text(dir / "histogram.csv", hcsv.str());

    summary["integral"] = de.integral;
    summary["sup_gap_over_se"] = sup_over;
    summary["min_over_se"] = min_norm;
    summary["n_rejected"] = de.n_rejected;
    summary["pass_integral"] = pass_int;
    summary["pass_histogram"] = pass_hist;
    summary["pass_nonnegative"] = pass_nonneg;
    return pass_int && pass_hist && pass_nonneg;
}

bool exp_gamma_scaling(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    std::vector<double> t_grid;
    for (double t = 0.02; t <= std::min(0.64, cfg.T) + 1e-12; t *= 2.0) t_grid.push_back(t);
    LawFlow law = delta_law(lab, cfg, t_grid.back(), 11);
    GammaScalingReport rep = gamma_inverse_moment_scaling(lab.cs, lab.lm, lab.x0, law, 1.0,
                                                          t_grid, cfg.n_paths,
                                                          child_root(cfg.seed, 51));
    const double band = std::max(0.3, 0.125 * std::abs(rep.theoretical_exponent));
    const bool pass = std::abs(rep.fitted_exponent - rep.theoretical_exponent) <= band;

    std::ostringstream csv;
    csv << "t,moment,se,p_zero\n";
    for (std::size_t i = 0; i < rep.t_grid.size(); ++i)
        csv << fmt(rep.t_grid[i]) << ',' << fmt(rep.moment[i]) << ',' << fmt(rep.moment_se[i])
            << ',' << fmt(rep.p_zero[i]) << '\n';
    write_text(dir / "scaling.csv", csv.str());

    summary["fitted_exponent"] = rep.fitted_exponent;
    summary["theoretical_exponent"] = rep.theoretical_exponent;
    summary["band"] = band;
    return pass;
}

bool exp_pde_residual(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    TerminalFunction g = terminal_function(cfg.pde_g);
    PdeQuery q;
    q.t = cfg.pde_t;
    q.x = Eigen::VectorXd::Constant(1, cfg.pde_x);
    q.mu = lab.mu0;
    q.n_particles = cfg.n_particles;
    q.n_paths = cfg.n_paths;
    q.h = cfg.h;
    q.seed = child_root(cfg.seed, 61);
    ResidualReport rep = pde_residual(lab.cs, lab.lm, g, q, cfg.pde_dt);

    std::ostringstream csv;
    csv << "dt_U,L_U,residual,se,dt2_term,quad_interval,tolerance,pass\n";
    csv << fmt(rep.dt_U) << ',' << fmt(rep.L_U) << ',' << fmt(rep.residual) << ','
        << fmt(rep.se) << ',' << fmt(rep.dt2_term) << ',' << fmt(rep.quad_interval) << ','
        << fmt(rep.tolerance) << ',' << (rep.pass ? 1 : 0) << '\n';
    write_text(dir / "residual.csv", csv.str());

    summary["dt_U"] = rep.dt_U;
    summary["L_U"] = rep.L_U;
    summary["residual"] = rep.residual;
    summary["se"] = rep.se;
    summary["tolerance"] = rep.tolerance;
    return rep.pass;
}

bool exp_chain_rule(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    ThetaSampler theta = gaussian_theta(lab.x0, 0.5);
    std::vector<MeasureFunctional> fs = {
        MeasureFunctional::first_moment(),
        MeasureFunctional::scalar_of_moment([](double m) { return m * m; },
                                            [](double m) { return 2.0 * m; }, "m2",
                                            [](double) { return 2.0; }),
    };
    std::ostringstream csv;
    csv << "F,t,lhs,rhs,gap_se\n";
    bool pass = true;
    for (std::size_t i = 0; i < fs.size(); ++i) {
        ChainRuleReport rep =
            verify_chain_rule(lab.cs, lab.lm, fs[i], theta, cfg.n_particles, cfg.T, cfg.h, 8,
                              child_root(cfg.seed, 71 + i));
        for (std::size_t j = 0; j < rep.times.size(); ++j)
            csv << fs[i].name << ',' << fmt(rep.times[j]) << ',' << fmt(rep.lhs[j]) << ','
                << fmt(rep.rhs[j]) << ',' << fmt(rep.gap_se[j]) << '\n';
        summary["max_gap_over_se_" + fs[i].name] = rep.max_gap_over_se;
        pass = pass && rep.max_gap_over_se <= 3.0;
    }
    write_text(dir / "chain_rule.csv", csv.str());
    return pass;
}

bool exp_flow_property(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    const double t_mid = cfg.T / 2.0 + cfg.h / 3.0;
    const int n_rep = static_cast<int>(std::min<long>(200, cfg.n_paths));
    std::vector<double> hs = {cfg.h, cfg.h / 2.0, cfg.h / 4.0};
    std::vector<double> means, maxes;
    for (std::size_t k = 0; k < hs.size(); ++k) {
        FlowPropertyReport rep =
            check_flow_property(lab.cs, lab.lm, lab.x0, const_theta(lab.x0), cfg.n_particles,
                                t_mid, cfg.T, hs[k], n_rep, child_root(cfg.seed, 81 + k));
        means.push_back(rep.mean_discrepancy);
        maxes.push_back(rep.max_discrepancy);
    }

    std::ostringstream csv;
    csv << "h,mean_discrepancy,max_discrepancy\n";
    for (std::size_t k = 0; k < hs.size(); ++k)
        csv << fmt(hs[k]) << ',' << fmt(means[k]) << ',' << fmt(maxes[k]) << '\n';
    write_text(dir / "flow_property.csv", csv.str());

    const double tiny = 1e-12 * (1.0 + std::abs(cfg.x0));
    bool pass;
    double slope = 0.0;
    if (lab.cs.measure_independent ||
        *std::max_element(maxes.begin(), maxes.end()) <= tiny) {
        pass = *std::max_element(maxes.begin(), maxes.end()) <= 1e-9;
    } else {
        std::vector<double> lx, ly;
        for (std::size_t k = 0; k < hs.size(); ++k)
            if (means[k] > 0.0) {
                lx.push_back(std::log(hs[k]));
                ly.push_back(std::log(means[k]));
            }
        slope = lx.size() >= 2 ? linear_fit(lx, ly).slope : 0.0;
        pass = slope >= 0.6 && slope <= 1.4;
    }
    summary["slope"] = slope;
    summary["max_discrepancy"] = *std::max_element(maxes.begin(), maxes.end());
    return pass;
}

bool exp_picard(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    ThetaSampler theta = gaussian_theta(lab.x0, 0.5);
    const int n_iter = 6;
    PicardResult res = picard_law_iteration(lab.cs, lab.lm, theta, cfg.n_particles, cfg.T,
                                            cfg.h, n_iter, child_root(cfg.seed, 91));

    LawFlow direct1 = simulate_particle_system(lab.cs, lab.lm, theta, cfg.n_particles, cfg.T,
                                               cfg.h, child_root(cfg.seed, 92))
                          .law;
    LawFlow direct2 = simulate_particle_system(lab.cs, lab.lm, theta, cfg.n_particles, cfg.T,
                                               cfg.h, child_root(cfg.seed, 93))
                          .law;
    auto sup_w2 = [](const LawFlow& a, const LawFlow& b) {
        double m = 0.0;
        for (std::size_t k = 0; k < a.nodes(); ++k)
            m = std::max(m, wasserstein2_1d(a.at_node(k), b.at_node(k)));
        return m;
    };
    const double floor_w2 = sup_w2(direct1, direct2);
    const double limit_gap = sup_w2(res.stages.back(), direct1);

    bool decreasing = true;
    for (std::size_t j = 2; j < res.stage_gaps.size(); ++j)
        decreasing = decreasing && res.stage_gaps[j] <= res.stage_gaps[j - 1];
    const bool limit_ok = limit_gap <= 3.0 * floor_w2;

    std::ostringstream csv;
    csv << "stage,gap\n";
    for (std::size_t j = 0; j < res.stage_gaps.size(); ++j)
        csv << (j + 1) << ',' << fmt(res.stage_gaps[j]) << '\n';
    write_text(dir / "picard.csv", csv.str());

    summary["stage_gaps"] = res.stage_gaps;
    summary["limit_gap"] = limit_gap;
    summary["noise_floor"] = floor_w2;
    summary["pass_decreasing"] = decreasing;
    summary["pass_limit"] = limit_ok;
    summary["non_contraction"] = res.non_contraction;
    return decreasing && limit_ok && !res.non_contraction;
}

bool exp_moments(const RunConfig& cfg, const std::filesystem::path& dir, json& summary) {
    Lab lab = make_lab(cfg);
    std::vector<double> lambdas;
    for (double l = 1e2; l <= 1e6 + 1.0; l *= std::sqrt(10.0)) lambdas.push_back(l);
    AssumptionALimit al = assumption_a_limit(lab.lm, lambdas);
    const bool pass_a = std::abs(al.a_fit - lab.lm.exponent_a()) <= 0.02 && al.r1_fit < 0.0;

    const int np = static_cast<int>(std::min(512L, static_cast<long>(cfg.n_particles)));
    ParticleSystemResult ps =
        simulate_particle_system(lab.cs, lab.lm, const_theta(lab.x0), np, cfg.T, cfg.h,
                                 child_root(cfg.seed, 95), /*keep_bundles=*/true);
    std::vector<double> h_grid;
    for (double hh = 2.0 * cfg.h; hh <= cfg.T / 4.0 + 1e-12; hh *= 4.0) h_grid.push_back(hh);
    MomentReport mr = moment_report(ps.bundles, 2.0, h_grid);

    std::ostringstream acsv;
    acsv << "lambda,value\n";
    for (std::size_t i = 0; i < al.lambdas.size(); ++i)
        acsv << fmt(al.lambdas[i]) << ',' << fmt(al.values[i]) << '\n';
    write_text(dir / "assumption_a.csv", acsv.str());

    std::ostringstream mcsv;
    mcsv << "h,increment_norm\n";
    for (std::size_t i = 0; i < mr.h_grid.size(); ++i)
        mcsv << fmt(mr.h_grid[i]) << ',' << fmt(mr.increment_norm[i]) << '\n';
    write_text(dir / "moments.csv", mcsv.str());

    summary["a_fit"] = al.a_fit;
    summary["r1_fit"] = al.r1_fit;
    summary["alpha_over_2"] = lab.lm.exponent_a();
    summary["sup_norm_p2"] = mr.sup_norm_p;
    summary["increment_loglog_slope"] = mr.loglog_slope;
    summary["pass_a_fit"] = pass_a;
    return pass_a && std::isfinite(mr.sup_norm_p);
}

} // namespace

int run_experiment(const RunConfig& cfg) {
    try {
        const auto registry = list_experiments();
        bool known = false;
        for (const auto& [name, desc] : registry) known = known || name == cfg.experiment;
        if (!known) {
            std::string names;
            for (const auto& [name, desc] : registry) names += (names.empty() ? "" : ", ") + name;
            fail(ErrorCode::ConfigError,
                 "unknown experiment '" + cfg.experiment + "' (valid: " + names + ")");
        }
        if (!cfg.seed_set)
            fail(ErrorCode::ConfigError,
                 "required config key 'sim.seed' is missing (no wall-clock default)");
        set_thread_count(cfg.threads < 0 ? 1 : static_cast<unsigned>(cfg.threads));

        std::filesystem::path dir(cfg.out_dir);
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec && !std::filesystem::is_directory(dir))
            fail(ErrorCode::ConfigError, "cannot create out_dir '" + cfg.out_dir + "'");
        write_manifest(cfg, dir);

        json summary;
        summary["experiment"] = cfg.experiment;
        bool pass = false;
        if (cfg.experiment == "ibp_x") pass = exp_ibp_x(cfg, dir, summary);
        else if (cfg.experiment == "ibp_mu") pass = exp_ibp_mu(cfg, dir, summary);
        else if (cfg.experiment == "ibp_deltax") pass = exp_ibp_deltax(cfg, dir, summary);
        else if (cfg.experiment == "density_1d") pass = exp_density(cfg, dir, summary);
        else if (cfg.experiment == "gamma_scaling") pass = exp_gamma_scaling(cfg, dir, summary);
        else if (cfg.experiment == "pde_residual") pass = exp_pde_residual(cfg, dir, summary);
        else if (cfg.experiment == "chain_rule") pass = exp_chain_rule(cfg, dir, summary);
        else if (cfg.experiment == "flow_property") pass = exp_flow_property(cfg, dir, summary);
        else if (cfg.experiment == "picard") pass = exp_picard(cfg, dir, summary);
        else if (cfg.experiment == "moments") pass = exp_moments(cfg, dir, summary);

        summary["pass"] = pass;
        write_text(dir / "summary.json", summary.dump(2) + "\n");
        return pass ? 0 : 1;
    } catch (const MvjError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code() == ErrorCode::ConfigError ? 2 : 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}

} // namespace mvj
