#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mvjump/coefficients.hpp"
#include "mvjump/errors.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/simulator.hpp"
#include "mvjump/stats.hpp"
#include "mvjump/tangent.hpp"
#include "mvjump/threading.hpp"

using namespace mvj;

namespace {

LevyModel test_levy(double alpha = 0.5, double eps = 0.05) {
    LevyModel lm;
    lm.alpha = alpha;
    lm.k = 1.0;
    lm.eps = eps;
    lm.R0 = 1.0;
    lm.validate();
    return lm;
}

CoefficientSet lm1() { return builtin_linear_meanfield(0.5, 0.25, 1.0, 0.0, 0.0, 0.5); }

Eigen::VectorXd x_at(double v) { return Eigen::VectorXd::Constant(1, v); }

ThetaSampler const_theta(double v) {
    return [v](std::mt19937_64&) { return x_at(v); };
}

Eigen::MatrixXd m1(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

struct Setup {
    CoefficientSet cs;
    LevyModel lm;
    LawFlow law;
    PathBundle bundle;
};

Setup make_setup(double T = 1.0, double h = 1e-3) {
    Setup s;
    s.cs = lm1();
    s.lm = test_levy();
    s.law = simulate_particle_system(s.cs, s.lm, const_theta(1.0), 400, T, h, 17).law;
    s.bundle = simulate_decoupled(s.cs, s.lm, x_at(1.0), s.law, 23, 0);
    return s;
}

} // namespace

TEST_CASE("linear driven equation: pure time integration gives Y_T = T") {
    Setup s = make_setup(0.5, 2e-3);
    LinearJumpSpec spec;
    spec.rows = 1;
    spec.cols = 1;
    spec.beta = [](double, const Eigen::VectorXd&, const EmpiricalMeasure&) { return m1(1.0); };
    auto Y = run_linear_jump_sde(s.cs, s.lm, spec, s.bundle, s.law, m1(0.0));
    CHECK(Y.back()(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("linear driven equation: exponential growth to scheme order") {
    Setup s = make_setup(1.0, 1e-3);
    LinearJumpSpec spec;
    spec.rows = 1;
    spec.cols = 1;
    spec.B1 = [](double, const Eigen::VectorXd&, const EmpiricalMeasure&) { return m1(0.5); };
    auto Y = run_linear_jump_sde(s.cs, s.lm, spec, s.bundle, s.law, m1(1.0));
    CHECK(Y.back()(0, 0) == doctest::Approx(std::exp(0.5)).epsilon(1e-3));
}

TEST_CASE("linear driven equation: time-dependent source reproduces the coupled ODE") {
    // phi' = (beta+beta_bar) phi + beta_bar e^{beta t}, phi(0)=0
    //   ==> phi(1) = e^{0.75} - e^{0.5}
    Setup s = make_setup(1.0, 1e-3);
    LinearJumpSpec spec;
    spec.rows = 1;
    spec.cols = 1;
    spec.B1 = [](double, const Eigen::VectorXd&, const EmpiricalMeasure&) { return m1(0.75); };
    spec.beta = [](double t, const Eigen::VectorXd&, const EmpiricalMeasure&) {
        return m1(0.25 * std::exp(0.5 * t));
    };
    auto Y = run_linear_jump_sde(s.cs, s.lm, spec, s.bundle, s.law, m1(0.0));
    CHECK(Y.back()(0, 0) ==
          doctest::Approx(std::exp(0.75) - std::exp(0.5)).epsilon(2e-3));
}

TEST_CASE("x-tangent of the linear model is the deterministic exponential") {
    Setup s = make_setup(1.0, 1e-3);
    auto dx = simulate_dx_flow(s.cs, s.lm, s.bundle, s.law);
    CHECK(dx.front()(0, 0) == doctest::Approx(1.0));  // identity at t=0
    CHECK(std::abs(dx.back()(0, 0) - std::exp(0.5)) <= 1e-3);
}

TEST_CASE("x-tangent of a multiplicative-jump model matches the product oracle") {
    // b = 0, c = x u: dX/dx = prod over jumps of (1 + u_i), exactly
    CoefficientSet cs = builtin_linear_meanfield(0.0, 0.0, 0.0, 1.0, 0.0, 0.5);
    LevyModel lm = test_levy(1.0, 0.05);
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 100, 0.5, 2e-3, 3).law;
    PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 29, 1);
    REQUIRE(!b.jumps.empty());
    auto dx = simulate_dx_flow(cs, lm, b, law);
    double prod = 1.0;
    for (const JumpRecord& j : b.jumps) prod *= 1.0 + j.mark;
    CHECK(dx.back()(0, 0) == doctest::Approx(prod).epsilon(1e-12));
}

TEST_CASE("x-tangent agrees with a shared-noise central difference") {
    Setup s = make_setup(0.5, 1e-3);
    auto dx = simulate_dx_flow(s.cs, s.lm, s.bundle, s.law);
    const double d = 1e-4;
    std::vector<JumpEvent> events;
    for (const JumpRecord& j : s.bundle.jumps) events.push_back({j.time, j.mark});
    PathBundle up = simulate_decoupled_with_events(s.cs, s.lm, x_at(1.0 + d), s.law, events);
    PathBundle dn = simulate_decoupled_with_events(s.cs, s.lm, x_at(1.0 - d), s.law, events);
    const double fd = (up.states.back()(0) - dn.states.back()(0)) / (2.0 * d);
    CHECK(std::abs(fd - dx.back()(0, 0)) / std::abs(fd) <= 1e-4);
}

TEST_CASE("forward differences converge to the tangent at first order") {
    // nonlinear model so the second derivative is nonzero
    CoefficientSet cs = builtin_nonlinear_bench(0.5, 0.25, 1.0, 0.3, 0.5);
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 200, 0.5, 1e-3, 41).law;

    std::vector<double> deltas = {1e-3, 1e-4};
    std::vector<double> errs(deltas.size(), 0.0);
    const int n_paths = 64;
    for (int p = 0; p < n_paths; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 51, p);
        auto dx = simulate_dx_flow(cs, lm, b, law);
        std::vector<JumpEvent> events;
        for (const JumpRecord& j : b.jumps) events.push_back({j.time, j.mark});
        for (std::size_t k = 0; k < deltas.size(); ++k) {
            PathBundle up =
                simulate_decoupled_with_events(cs, lm, x_at(1.0 + deltas[k]), law, events);
            const double fd = (up.states.back()(0) - b.states.back()(0)) / deltas[k];
            errs[k] += std::abs(fd - dx.back()(0, 0)) / n_paths;
        }
    }
    const double slope =
        std::log(errs[0] / errs[1]) / std::log(deltas[0] / deltas[1]);
    CHECK(slope == doctest::Approx(1.0).epsilon(0.3));
}

TEST_CASE("measure tangent of the linear model matches the coupled ODE oracle") {
    Setup s = make_setup(1.0, 1e-3);
    DmuBankConfig bc;
    bc.bank_size = 64;
    bc.fp_sweeps = 4;
    DmuBank bank = build_dmu_bank(s.cs, s.lm, s.law, {x_at(1.0)}, bc, 61);
    auto dmu = simulate_dmu_flow(s.cs, s.lm, s.bundle, s.law, bank);
    REQUIRE(dmu.size() == 1);
    CHECK(dmu[0].front()(0, 0) == doctest::Approx(0.0));  // zero at t=0
    CHECK(std::abs(dmu[0].back()(0, 0) - (std::exp(0.75) - std::exp(0.5))) <= 1.5e-2);
}

TEST_CASE("measure tangent is zero for measure-independent models") {
    CoefficientSet cs = builtin_linear_meanfield(0.5, 0.0, 1.0, 0.0, 0.0, 0.5);
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 100, 0.5, 2e-3, 5).law;
    PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 13, 0);
    DmuBankConfig bc;
    bc.bank_size = 32;
    DmuBank bank = build_dmu_bank(cs, lm, law, {x_at(1.0)}, bc, 71);
    auto dmu = simulate_dmu_flow(cs, lm, b, law, bank);
    for (const auto& node : dmu[0]) CHECK(std::abs(node(0, 0)) <= 1e-14);
}

TEST_CASE("measure tangent agrees with a shared-noise measure-shift difference") {
    // d/dv E[X_T^{x, delta_v}] at v = x0 equals the Lions derivative at the
    // single atom; both sides are deterministic for the linear model.
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    const double h = 1e-3, T = 1.0, d = 1e-3;
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 400, T, h, 17).law;
    LawFlow lawp = simulate_particle_system(cs, lm, const_theta(1.0 + d), 400, T, h, 17).law;
    LawFlow lawm = simulate_particle_system(cs, lm, const_theta(1.0 - d), 400, T, h, 17).law;

    PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 23, 0);
    std::vector<JumpEvent> events;
    for (const JumpRecord& j : b.jumps) events.push_back({j.time, j.mark});
    PathBundle up = simulate_decoupled_with_events(cs, lm, x_at(1.0), lawp, events);
    PathBundle dn = simulate_decoupled_with_events(cs, lm, x_at(1.0), lawm, events);
    const double fd = (up.states.back()(0) - dn.states.back()(0)) / (2.0 * d);

    DmuBankConfig bc;
    bc.bank_size = 64;
    bc.fp_sweeps = 4;
    DmuBank bank = build_dmu_bank(cs, lm, law, {x_at(1.0)}, bc, 61);
    auto dmu = simulate_dmu_flow(cs, lm, b, law, bank);
    CHECK(std::abs(fd - dmu[0].back()(0, 0)) <= 1.5e-2);
}

TEST_CASE("bank enforces its minimum size") {
    Setup s = make_setup(0.25, 5e-3);
    DmuBankConfig bc;
    bc.bank_size = 8;  // below the documented minimum of 32
    CHECK_THROWS_AS(build_dmu_bank(s.cs, s.lm, s.law, {x_at(1.0)}, bc, 61), MvjError);
}

TEST_CASE("tangent norms are stable under doubling paths and bank size") {
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 200, 0.5, 2e-3, 17).law;

    auto sup_tangent = [&](int n_paths, int bank_size) {
        DmuBankConfig bc;
        bc.bank_size = bank_size;
        DmuBank bank = build_dmu_bank(cs, lm, law, {x_at(1.0)}, bc, 61);
        double sup = 0.0;
        for (int p = 0; p < n_paths; ++p) {
            PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 37, p);
            auto dx = simulate_dx_flow(cs, lm, b, law);
            auto dmu = simulate_dmu_flow(cs, lm, b, law, bank);
            sup = std::max(sup, std::abs(dx.back()(0, 0)) + std::abs(dmu[0].back()(0, 0)));
        }
        return sup;
    };
    const double s1 = sup_tangent(32, 32);
    const double s2 = sup_tangent(64, 64);
    CHECK(s2 / s1 >= 0.9);
    CHECK(s2 / s1 <= 1.1);
}
