#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "mvjump/errors.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/measure.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/stats.hpp"
#include "mvjump/threading.hpp"

using namespace mvj;

TEST_CASE("running stats: chunked merge equals serial accumulation") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.3, 2.0);
    std::vector<double> xs(1000);
    for (double& x : xs) x = n(rng);

    RunningStats serial;
    for (double x : xs) serial.add(x);

    RunningStats merged;
    for (std::size_t c = 0; c < xs.size(); c += 128) {
        RunningStats chunk;
        for (std::size_t i = c; i < std::min(xs.size(), c + 128); ++i) chunk.add(xs[i]);
        merged.merge(chunk);
    }
    CHECK(merged.count() == serial.count());
    CHECK(merged.mean() == doctest::Approx(serial.mean()).epsilon(1e-13));
    CHECK(merged.variance() == doctest::Approx(serial.variance()).epsilon(1e-12));
    CHECK(serial.std_error() ==
          doctest::Approx(std::sqrt(serial.variance() / 1000.0)).epsilon(1e-12));
}

TEST_CASE("linear fit recovers slope and intercept") {
    std::vector<double> xs, ys;
    for (int i = 0; i < 20; ++i) {
        xs.push_back(0.1 * i);
        ys.push_back(3.0 - 2.5 * 0.1 * i);
    }
    LinFit f = linear_fit(xs, ys);
    CHECK(f.slope == doctest::Approx(-2.5).epsilon(1e-12));
    CHECK(f.intercept == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(f.slope_first_half == doctest::Approx(-2.5).epsilon(1e-10));
    CHECK(f.slope_second_half == doctest::Approx(-2.5).epsilon(1e-10));
}

TEST_CASE("trapezoid integrates a linear function exactly") {
    std::vector<double> xs = {0.0, 0.5, 1.25, 2.0};
    std::vector<double> ys;
    for (double x : xs) ys.push_back(2.0 * x + 1.0);
    CHECK(trapezoid(xs, ys) == doctest::Approx(2.0 * 2.0 + 2.0).epsilon(1e-13));
}

TEST_CASE("histogram: densities integrate to one") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> xs(20000);
    for (double& x : xs) x = n(rng);
    Histogram h = histogram_fd(xs, -4.0, 4.0);
    double mass = 0.0;
    for (std::size_t b = 0; b < h.counts.size(); ++b)
        mass += static_cast<double>(h.counts[b]) / static_cast<double>(h.total);
    CHECK(mass <= 1.0 + 1e-12);
    CHECK(mass > 0.98);  // nearly all draws inside [-4, 4]
    const double inside = h.density_at(0.1);
    CHECK(inside > 0.3);
    CHECK(inside < 0.5);
    CHECK(h.density_se_at(0.1) > 0.0);
}

TEST_CASE("substreams and child roots are deterministic and distinct") {
    auto g1 = substream(42, 7);
    auto g2 = substream(42, 7);
    auto g3 = substream(42, 8);
    CHECK(g1() == g2());
    CHECK(g1() == g2());
    bool differ = false;
    for (int i = 0; i < 4; ++i) differ = differ || (g1() != g3());
    CHECK(differ);
    CHECK(child_root(42, 1) != child_root(42, 2));
    CHECK(child_root(42, 1) == child_root(42, 1));
}

TEST_CASE("parallel_chunks covers the range once, any thread count") {
    for (unsigned tc : {1u, 3u}) {
        set_thread_count(tc);
        const std::size_t n = 1003;
        std::vector<int> hits(n, 0);
        parallel_chunks(n, 64, [&](std::size_t, std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) hits[i]++;
        });
        for (std::size_t i = 0; i < n; ++i) CHECK(hits[i] == 1);
        CHECK(n_chunks(n, 64) == (n + 63) / 64);
    }
    set_thread_count(1);
}

TEST_CASE("parallel_chunks rethrows worker exceptions") {
    set_thread_count(2);
    CHECK_THROWS_AS(
        parallel_chunks(100, 10,
                        [&](std::size_t ci, std::size_t, std::size_t) {
                            if (ci == 3) fail(ErrorCode::NonFiniteEntry, "injected");
                        }),
        MvjError);
    set_thread_count(1);
}

TEST_CASE("empirical measure: moments, mean, wasserstein") {
    Eigen::MatrixXd pts(1, 4);
    pts << 0.0, 1.0, 2.0, 3.0;
    EmpiricalMeasure mu(pts, Eigen::VectorXd::Constant(4, 0.25));
    CHECK(mean_1d(mu) == doctest::Approx(1.5));
    CHECK(moment(mu, 2)(0) == doctest::Approx((0.0 + 1.0 + 4.0 + 9.0) / 4.0));

    Eigen::MatrixXd pts2 = pts.array() + 0.5;
    EmpiricalMeasure nu(pts2, Eigen::VectorXd::Constant(4, 0.25));
    CHECK(wasserstein2_1d(mu, nu) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(wasserstein2_1d(mu, mu) == doctest::Approx(0.0));
}

TEST_CASE("empirical_from_samples_1d matches hand-built atoms") {
    std::vector<double> xs = {2.0, -1.0, 0.5};
    EmpiricalMeasure mu = empirical_from_samples_1d(xs);
    CHECK(mu.size() == 3);
    double m = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) m += mu.weight(i) * mu.atom(i)(0);
    CHECK(m == doctest::Approx(0.5));
}

TEST_CASE("levy model: rates and closed forms") {
    LevyModel lm;
    lm.alpha = 0.5;
    lm.k = 1.0;
    lm.eps = 0.05;
    lm.R0 = 1.0;
    lm.validate();
    const double expected =
        2.0 * lm.k * (std::pow(lm.eps, -lm.alpha) - std::pow(lm.R0, -lm.alpha)) / lm.alpha;
    CHECK(lm.lambda_eps() == doctest::Approx(expected).epsilon(1e-12));
    const double m2 = 2.0 * lm.k * (std::pow(lm.R0, 2.0 - lm.alpha) -
                                    std::pow(lm.eps, 2.0 - lm.alpha)) / (2.0 - lm.alpha);
    CHECK(lm.second_moment_rate() == doctest::Approx(m2).epsilon(1e-12));
    CHECK(lm.exponent_a() == doctest::Approx(0.25));

    // nu_integral of u^2 over the full truncated support equals the closed form
    const double viaq = nu_integral(lm, [](double u) { return u * u; }, lm.eps, lm.R0);
    CHECK(viaq == doctest::Approx(m2).epsilon(1e-8));
}

TEST_CASE("levy model: invalid parameters are rejected") {
    LevyModel lm;
    lm.alpha = 2.5;  // stable index must be in (0, 2)
    lm.k = 1.0;
    lm.eps = 0.05;
    lm.R0 = 1.0;
    CHECK_THROWS_AS(lm.validate(), MvjError);
    lm.alpha = 0.5;
    lm.eps = 2.0;  // eps >= R0
    CHECK_THROWS_AS(lm.validate(), MvjError);
}

TEST_CASE("mark sampling respects the truncation band and symmetry") {
    LevyModel lm;
    lm.alpha = 1.0;
    lm.k = 1.0;
    lm.eps = 0.1;
    lm.R0 = 1.0;
    lm.validate();
    auto rng = substream(99, 0);
    RunningStats sgn;
    for (int i = 0; i < 5000; ++i) {
        const double u = sample_mark(lm, rng);
        CHECK(std::abs(u) >= lm.eps - 1e-15);
        CHECK(std::abs(u) <= lm.R0 + 1e-15);
        sgn.add(u > 0 ? 1.0 : -1.0);
    }
    CHECK(std::abs(sgn.mean()) < 4.0 * sgn.std_error() + 0.05);
}

TEST_CASE("assumption-a scaling fit recovers alpha/2") {
    for (double alpha : {0.5, 1.0}) {
        LevyModel lm;
        lm.alpha = alpha;
        lm.k = 1.0;
        lm.eps = 0.05;
        lm.R0 = 1.0;
        lm.validate();
        std::vector<double> lambdas;
        for (double l = 1e2; l <= 1e6 + 1.0; l *= std::sqrt(10.0)) lambdas.push_back(l);
        AssumptionALimit al = assumption_a_limit(lm, lambdas);
        CHECK(al.a_fit == doctest::Approx(alpha / 2.0).epsilon(0.04));
        CHECK(al.r1_fit < 0.0);
    }
}

TEST_CASE("error codes carry their names") {
    try {
        fail(ErrorCode::LawFlowGap, "probe");
        CHECK(false);
    } catch (const MvjError& e) {
        CHECK(e.code() == ErrorCode::LawFlowGap);
        CHECK(std::string(e.what()).find("probe") != std::string::npos);
        CHECK(std::string(e.what()).find("LawFlowGap") != std::string::npos);
    }
}
