#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <vector>

#include "mvjump/coefficients.hpp"
#include "mvjump/measure.hpp"

namespace mvj {

// Jump-intensity description: stable-like density nu(du) = k |u|^{-1-alpha}
// on 0 < |u| <= R0, plus an optional finite part (atoms with rates). Path
// simulation discards jumps with |u| < eps; lambda_eps is the total rate of
// what remains.
struct FiniteAtom {
    double location = 0.0;
    double rate = 0.0;
};

struct LevyModel {
    double alpha = 1.0;   // stable index in (0, 2)
    double k = 1.0;       // scale of the stable part
    double R0 = 1.0;      // support radius
    double eps = 0.1;     // truncation level in (0, R0)
    std::vector<FiniteAtom> finite_part;

    // ellipticity metadata
    // psi fixed to u^2 (the only shipped choice; key `levy.psi = "u2"`).
    double exponent_a() const { return alpha / 2.0; }
    bool symmetric() const;   // stable part always is; finite part checked

    // Total rate of the eps-truncated measure (closed form for the stable
    // part: 2k (eps^-alpha - R0^-alpha)/alpha) plus finite-part rates.
    double lambda_eps() const;

    // integral of u^2 over the truncated stable part:
    // 2k (R0^{2-alpha} - eps^{2-alpha}) / (2-alpha) — the jump contribution
    // to the second-moment ODE oracles.
    double second_moment_rate() const;

    void validate() const;  // throws ConfigError on malformed parameters
};

struct JumpEvent {
    double time = 0.0;
    double mark = 0.0;
};

// Poisson sampling on [t0, t1): count ~ Poisson(lambda_eps (t1-t0)), times
// i.i.d. uniform then sorted, marks by inverse CDF of the normalized
// truncated nu:  |u| = (eps^-a - V (eps^-a - R0^-a))^{-1/a}, sign Bernoulli.
// Event times are strictly increasing in the returned list.
std::vector<JumpEvent> sample_jumps(const LevyModel& lm, double t0, double t1,
                                    std::mt19937_64& rng);

// Draw a single mark from the normalized truncated measure.
double sample_mark(const LevyModel& lm, std::mt19937_64& rng);

// integral of c(x, u, mu) nu(du) over |u| >= eps — the compensator drift the
// Euler scheme subtracts. Exactly zero (no quadrature) when nu is symmetric
// and the coefficient set declares c odd in u; otherwise adaptive quadrature
// to relative tolerance 1e-8. Throws QuadratureFailure.
Eigen::VectorXd compensator_drift(const LevyModel& lm, const CoefficientSet& cs,
                                  const Eigen::VectorXd& x, const EmpiricalMeasure& mu);

// Same integral for a scalar integrand (used by tests and the generator
// quadratures): integral of phi(u) nu(du) over eps <= |u| <= R0.
double nu_integral(const LevyModel& lm, const std::function<double(double)>& phi,
                   double lo_abs, double hi_abs);

struct AssumptionALimit {
    double a_fit = 0.0;
    double r1_fit = 0.0;
    std::vector<double> lambdas;
    std::vector<double> values;  // integral (e^{-lambda psi(u)} - 1) nu(du), untruncated
};

// Numerically evaluates I(lambda) = integral (e^{-lambda u^2} - 1) nu(du) on
// the untruncated stable part and fits |I| ~ lambda^a by log-log regression.
// r1_fit = I(lambda_max)/lambda_max^a_fit must be negative. Throws
// NonConvergentLimit when the slope drifts by more than 0.05 between the two
// halves of the grid.
AssumptionALimit assumption_a_limit(const LevyModel& lm, const std::vector<double>& lambda_grid);

} // namespace mvj
