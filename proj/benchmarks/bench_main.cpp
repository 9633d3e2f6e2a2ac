// Microbenchmarks for the hot paths: plain path simulation, the joint
// tangent/bracket recursion, one full weight evaluation, and a boundary
// replay. Run with --benchmark_min_time=0.5s for quick local numbers.

#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "mvjump/coefficients.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/malliavin.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/simulator.hpp"

namespace {

struct Fixture {
    mvj::CoefficientSet cs;
    mvj::LevyModel lm;
    Eigen::VectorXd x0;
    mvj::LawFlow law;

    Fixture() {
        cs = mvj::builtin_linear_meanfield(0.5, 0.25, 1.0, 0.0, 0.0, 0.5);
        lm.alpha = 0.5;
        lm.k = 1.0;
        lm.eps = 0.05;
        lm.R0 = 1.0;
        lm.validate();
        x0 = Eigen::VectorXd::Constant(1, 1.0);
        auto theta = [this](std::mt19937_64&) { return x0; };
        law = mvj::simulate_particle_system(cs, lm, theta, 500, 1.0, 1e-3, 12345).law;
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

void bm_decoupled_path(benchmark::State& state) {
    Fixture& f = fixture();
    std::uint64_t p = 0;
    for (auto _ : state) {
        mvj::PathBundle b = mvj::simulate_decoupled(f.cs, f.lm, f.x0, f.law, 99, p++);
        benchmark::DoNotOptimize(b.states.back()(0));
    }
}
BENCHMARK(bm_decoupled_path);

void bm_malliavin_recursion(benchmark::State& state) {
    Fixture& f = fixture();
    mvj::PathBundle b = mvj::simulate_decoupled(f.cs, f.lm, f.x0, f.law, 99, 1);
    mvj::MalliavinOptions opt;
    opt.record_nodes = false;
    for (auto _ : state) {
        mvj::MalliavinPath mp = mvj::run_malliavin_recursion(f.cs, f.lm, b, f.law, opt);
        benchmark::DoNotOptimize(mp.nodes.back().gamma(0, 0));
    }
}
BENCHMARK(bm_malliavin_recursion);

void bm_weight_Z1(benchmark::State& state) {
    Fixture& f = fixture();
    mvj::PathBundle b = mvj::simulate_decoupled(f.cs, f.lm, f.x0, f.law, 99, 1);
    mvj::MalliavinOptions opt;
    opt.record_nodes = false;
    mvj::MalliavinPath mp = mvj::run_malliavin_recursion(f.cs, f.lm, b, f.law, opt);
    for (auto _ : state) {
        Eigen::VectorXd z = mvj::weight_Z1(mp.nodes.back(), mp.dx_flow.back());
        benchmark::DoNotOptimize(z(0));
    }
}
BENCHMARK(bm_weight_Z1);

void bm_gradient_x_small(benchmark::State& state) {
    Fixture& f = fixture();
    mvj::IbpParams ip;
    ip.n_paths = 256;
    ip.seed = 4242;
    for (auto _ : state) {
        mvj::GradientEstimate est = mvj::estimate_gradient_x(
            f.cs, f.lm, f.x0, f.law, [](const Eigen::VectorXd& y) { return y(0); }, ip);
        benchmark::DoNotOptimize(est.value(0));
    }
}
BENCHMARK(bm_gradient_x_small)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
