#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mvjump/coefficients.hpp"
#include "mvjump/errors.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/malliavin.hpp"
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

// Mark-space finite differences along one recorded path: perturb the mark of
// each logged event, replay, and assemble Gamma = sum (u dX/du)(u dX/du)^T
// and A = sum (u^2 X'' + (1-alpha) u X') / 2 from stencils. Exact for models
// linear in u and x; O(delta^2) otherwise.
struct MarkFd {
    double gamma = 0.0;
    double A = 0.0;
};

MarkFd mark_fd_oracle(const CoefficientSet& cs, const LevyModel& lm, const PathBundle& b,
                      const LawFlow& law, double delta) {
    std::vector<JumpEvent> events;
    for (const JumpRecord& j : b.jumps) events.push_back({j.time, j.mark});
    const double base = b.states.back()(0);
    MarkFd out;
    for (std::size_t i = 0; i < events.size(); ++i) {
        std::vector<JumpEvent> up = events, dn = events;
        up[i].mark += delta;
        dn[i].mark -= delta;
        const double xu =
            simulate_decoupled_with_events(cs, lm, b.x0, law, up).states.back()(0);
        const double xd =
            simulate_decoupled_with_events(cs, lm, b.x0, law, dn).states.back()(0);
        const double u = events[i].mark;
        const double d1 = (xu - xd) / (2.0 * delta);
        const double d2 = (xu - 2.0 * base + xd) / (delta * delta);
        out.gamma += u * u * d1 * d1;
        out.A += 0.5 * (u * u * d2 + (1.0 - lm.alpha) * u * d1);
    }
    return out;
}

} // namespace

TEST_CASE("carre du champ and generator match mark-space differences (linear model)") {
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;

    MalliavinOptions opt;
    opt.need_weight_brackets = false;
    int tested = 0;
    for (int p = 0; p < 8; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 23, p);
        if (b.jumps.empty()) continue;
        ++tested;
        MalliavinPath mp = run_malliavin_recursion(cs, lm, b, law, opt);
        // wide stencil: the model is linear in the marks, so the only stencil
        // error is round-off, and delta^2 in the denominator amplifies it
        MarkFd fd = mark_fd_oracle(cs, lm, b, law, 1e-4);
        CHECK(mp.nodes.back().gamma(0, 0) == doctest::Approx(fd.gamma).epsilon(1e-6));
        CHECK(mp.nodes.back().A(0) == doctest::Approx(fd.A).epsilon(1e-5));
    }
    CHECK(tested >= 4);
}

TEST_CASE("carre du champ and generator match mark-space differences (nonlinear model)") {
    CoefficientSet cs = builtin_nonlinear_bench(0.5, 0.25, 1.0, 0.3, 0.5);
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 19).law;

    MalliavinOptions opt;
    opt.need_weight_brackets = false;
    int tested = 0;
    for (int p = 0; p < 8; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 31, p);
        if (b.jumps.empty()) continue;
        ++tested;
        MalliavinPath mp = run_malliavin_recursion(cs, lm, b, law, opt);
        MarkFd fd = mark_fd_oracle(cs, lm, b, law, 1e-5);
        CHECK(mp.nodes.back().gamma(0, 0) == doctest::Approx(fd.gamma).epsilon(5e-5));
        CHECK(mp.nodes.back().A(0) == doctest::Approx(fd.A).epsilon(5e-3));
    }
    CHECK(tested >= 4);
}

TEST_CASE("linear-model generator has the closed per-jump form") {
    // a_c = (1-alpha)/2 u sigma and transport is jump-free (dc_dx = 0), so
    // A_T = (1-alpha)/2 sigma sum_i u_i P_i with P_i the drift transport
    // after s_i. P_i is read off the x-tangent ratio since both use the same
    // substep products.
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;
    PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 23, 2);
    REQUIRE(!b.jumps.empty());

    MalliavinOptions opt;
    opt.need_weight_brackets = false;
    MalliavinPath mp = run_malliavin_recursion(cs, lm, b, law, opt);

    // replay the mark at +0: P_i equals dX_T/du_i / sigma, from a tiny stencil
    std::vector<JumpEvent> events;
    for (const JumpRecord& j : b.jumps) events.push_back({j.time, j.mark});
    double expect_gamma = 0.0, expect_A = 0.0;
    for (std::size_t i = 0; i < events.size(); ++i) {
        std::vector<JumpEvent> up = events;
        const double d = 1e-7;
        up[i].mark += d;
        const double xu =
            simulate_decoupled_with_events(cs, lm, b.x0, law, up).states.back()(0);
        const double P = (xu - b.states.back()(0)) / d;  // sigma * transport
        expect_gamma += events[i].mark * events[i].mark * P * P;
        expect_A += 0.25 * events[i].mark * P;  // (1-alpha)/2 = 1/4
    }
    CHECK(mp.nodes.back().gamma(0, 0) == doctest::Approx(expect_gamma).epsilon(1e-5));
    CHECK(mp.nodes.back().A(0) == doctest::Approx(expect_A).epsilon(1e-5));
}

TEST_CASE("gamma acceptance: zero, healthy and near-singular matrices") {
    CHECK_FALSE(gamma_acceptable(Eigen::MatrixXd::Zero(1, 1), 1e-10));
    CHECK(gamma_acceptable(Eigen::MatrixXd::Identity(2, 2), 1e-10));
    Eigen::MatrixXd g(2, 2);
    g << 1.0, 0.0, 0.0, 1e-14;
    CHECK_FALSE(gamma_acceptable(g, 1e-10));
    CHECK(gamma_acceptable(g, 1e-16));
}

TEST_CASE("a path with no jumps is rejected, not crashed") {
    CoefficientSet cs = lm1();
    // rate ~ 2k(eps^-a - R0^-a)/a with eps ~ R0: nearly jump-free
    LevyModel lm = test_levy(0.5, 0.95);
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.25, 5e-3, 3).law;
    MalliavinOptions opt;
    opt.need_weight_brackets = false;
    for (int p = 0; p < 20; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 7, p);
        if (!b.jumps.empty()) continue;
        MalliavinPath mp = run_malliavin_recursion(cs, lm, b, law, opt);
        CHECK(mp.nodes.back().gamma(0, 0) == 0.0);
        CHECK_FALSE(gamma_acceptable(mp.nodes.back().gamma, 1e-10));
        return;
    }
    WARN_MESSAGE(false, "no jump-free path found; rejection path untested here");
}

TEST_CASE("divergence weights have zero mean") {
    set_thread_count(1);
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;
    DmuBankConfig bc;
    bc.bank_size = 64;
    DmuBank bank = build_dmu_bank(cs, lm, law, {x_at(1.0)}, bc, 61);

    MalliavinOptions opt;
    opt.bank = &bank;
    opt.record_nodes = false;
    RunningStats z1, z2, zmu;
    for (int p = 0; p < 4000; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 101, p);
        MalliavinPath mp = run_malliavin_recursion(cs, lm, b, law, opt);
        const MalliavinState& ms = mp.nodes.back();
        if (!gamma_acceptable(ms.gamma, 1e-10)) {
            z1.add(0.0);
            z2.add(0.0);
            zmu.add(0.0);
            continue;
        }
        z1.add(weight_Z1(ms, mp.dx_flow.back())(0));
        z2.add(weight_Z2(ms)(0));
        zmu.add(weight_Zmu1(ms, mp.dmu_flow[0].back(), 0)(0));
    }
    CHECK(std::abs(z1.mean()) <= 4.0 * z1.std_error() + 1e-3);
    CHECK(std::abs(z2.mean()) <= 4.0 * z2.std_error() + 1e-3);
    CHECK(std::abs(zmu.mean()) <= 4.0 * zmu.std_error() + 1e-3);
}

TEST_CASE("IBP gradient agrees with the pathwise tangent pairing for smooth f") {
    set_thread_count(1);
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;

    IbpParams ip;
    ip.n_paths = 4000;
    ip.seed = 301;
    TerminalMap f = [](const Eigen::VectorXd& y) { return std::sin(y(0)); };
    GradientEstimate est = estimate_gradient_x(cs, lm, x_at(1.0), law, f, ip);

    // pathwise: d/dx E[sin X_T] = E[cos(X_T) dX_T/dx]
    RunningStats pw;
    for (int p = 0; p < 4000; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 302, p);
        auto dx = simulate_dx_flow(cs, lm, b, law);
        pw.add(std::cos(b.states.back()(0)) * dx.back()(0, 0));
    }
    const double comb = std::hypot(est.std_error(0), pw.std_error());
    CHECK(std::abs(est.value(0) - pw.mean()) <= 4.0 * comb);
    CHECK(static_cast<double>(est.n_rejected) / est.n_paths < 0.05);
    // the boundary flux is part of the estimate, not a negligible add-on
    CHECK(std::abs(est.flux(0)) > 0.0);
}

TEST_CASE("flipping the sign of the mark-space generator breaks the pairing") {
    set_thread_count(1);
    CoefficientSet cs = lm1();
    CoefficientSet bad = cs;
    auto a_good = cs.a_c;
    bad.a_c = [a_good](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        return Eigen::VectorXd(-a_good(x, u, mu));
    };
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;

    // paired comparison on identical paths: the flip negates the generator
    // process A, so the weights differ by -4 A Gamma^{-1} dX per path; with
    // all other weight pieces shared, the paired difference must be loudly
    // nonzero if (and only if) the a_c source actually feeds the recursion
    MalliavinOptions opt;
    opt.record_nodes = false;
    RunningStats diff;
    for (int p = 0; p < 20000; ++p) {
        PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 301, p);
        MalliavinPath mg = run_malliavin_recursion(cs, lm, b, law, opt);
        MalliavinPath mb = run_malliavin_recursion(bad, lm, b, law, opt);
        const MalliavinState& g = mg.nodes.back();
        if (!gamma_acceptable(g.gamma, 1e-10)) {
            diff.add(0.0);
            continue;
        }
        const double zg = weight_Z1(g, mg.dx_flow.back())(0);
        const double zb = weight_Z1(mb.nodes.back(), mb.dx_flow.back())(0);
        diff.add(std::sin(b.states.back()(0)) * (zg - zb));
    }
    CHECK(std::abs(diff.mean()) > 5.0 * diff.std_error());
}

TEST_CASE("weight estimators demand mark derivatives") {
    CoefficientSet cs = lm1();
    cs.du_c = nullptr;  // strip the mark derivatives
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.25, 5e-3, 3).law;
    IbpParams ip;
    ip.n_paths = 10;
    ip.seed = 1;
    TerminalMap f = [](const Eigen::VectorXd& y) { return y(0); };
    CHECK_THROWS_AS(estimate_gradient_x(cs, lm, x_at(1.0), law, f, ip), MvjError);
}

TEST_CASE("a law flow that stops short of the bundle horizon is rejected") {
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.5, 5e-3, 3).law;
    LawFlow shorter = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.25, 5e-3, 3).law;
    PathBundle b = simulate_decoupled(cs, lm, x_at(1.0), law, 5, 0);
    MalliavinOptions opt;
    CHECK_THROWS_AS(run_malliavin_recursion(cs, lm, b, shorter, opt), MvjError);
}

TEST_CASE("density estimate integrates to one and tracks the histogram") {
    set_thread_count(1);
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 300, 0.5, 2e-3, 17).law;

    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) grid.push_back(-2.0 + 6.0 * i / 20.0);
    IbpParams ip;
    ip.n_paths = 6000;
    ip.seed = 401;
    DensityEstimate de = estimate_density_ibp(cs, lm, x_at(1.0), law, grid, ip);
    CHECK(std::abs(de.integral - 1.0) < 0.12);

    std::vector<double> xs;
    for (int p = 0; p < 6000; ++p)
        xs.push_back(simulate_decoupled(cs, lm, x_at(1.0), law, 402, p).states.back()(0));
    Histogram hist = histogram_fd(xs, grid.front(), grid.back());
    for (std::size_t i = 2; i + 2 < grid.size(); ++i) {
        const double comb = std::hypot(de.se[i], hist.density_se_at(grid[i]));
        const double slope = std::abs(de.p_hat[i + 1] - de.p_hat[i]) / (grid[i + 1] - grid[i]);
        const double bias = 0.5 * hist.bin_width() * slope;
        CHECK(std::abs(de.p_hat[i] - hist.density_at(grid[i])) <= 4.0 * comb + bias + 0.01);
        CHECK(de.p_hat[i] >= -4.0 * de.se[i] - 1e-6);
    }
}

TEST_CASE("density estimator rejects degenerate grids") {
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.25, 5e-3, 3).law;
    IbpParams ip;
    ip.n_paths = 10;
    ip.seed = 1;
    CHECK_THROWS_AS(estimate_density_ibp(cs, lm, x_at(1.0), law, {0.5}, ip), MvjError);
}

TEST_CASE("inverse-moment scaling: fit near the theoretical exponent, coarse run") {
    set_thread_count(1);
    CoefficientSet cs = builtin_linear_meanfield(0.5, 0.25, 1.0, 0.0, 0.0, 1.0);
    LevyModel lm = test_levy(1.0, 1e-3);
    std::vector<double> t_grid = {0.02, 0.04, 0.08, 0.16, 0.32, 0.64};
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 100, 0.64, 1e-3, 17).law;
    GammaScalingReport rep =
        gamma_inverse_moment_scaling(cs, lm, x_at(1.0), law, 1.0, t_grid, 1500, 501);
    CHECK(rep.theoretical_exponent == doctest::Approx(-2.0));
    CHECK(std::abs(rep.fitted_exponent - rep.theoretical_exponent) < 0.7);
    for (double pz : rep.p_zero) CHECK(pz < 0.5);
}

TEST_CASE("inverse-moment scaling rejects thin or misaligned grids") {
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 60, 0.5, 5e-3, 3).law;
    // two points: not enough decades
    CHECK_THROWS_AS(
        gamma_inverse_moment_scaling(cs, lm, x_at(1.0), law, 1.0, {0.1, 0.2}, 50, 1),
        MvjError);
    // a t between grid nodes
    CHECK_THROWS_AS(gamma_inverse_moment_scaling(cs, lm, x_at(1.0), law, 1.0,
                                                 {0.0213, 0.1, 0.5}, 50, 1),
                    MvjError);
}

TEST_CASE("Lions-gradient estimate matches the linear-model constant") {
    set_thread_count(1);
    CoefficientSet cs = lm1();
    LevyModel lm = test_levy();
    LawFlow law = simulate_particle_system(cs, lm, const_theta(1.0), 400, 1.0, 1e-3, 17).law;
    DmuBankConfig bc;
    bc.bank_size = 64;
    bc.fp_sweeps = 4;
    DmuBank bank = build_dmu_bank(cs, lm, law, {x_at(1.0)}, bc, 61);
    IbpParams ip;
    ip.n_paths = 4000;
    ip.seed = 601;
    TerminalMap f = [](const Eigen::VectorXd& y) { return y(0); };
    GradientEstimate est = estimate_gradient_mu(cs, lm, x_at(1.0), law, bank, 0, f, ip);
    const double oracle = std::exp(0.75) - std::exp(0.5);
    CHECK(std::abs(est.value(0) - oracle) <= 4.0 * est.std_error(0) + 2e-2);
}
