#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mvjump/measure.hpp"

namespace mvj {

// Model contract for the SDE
//
//   dX = b(X, mu) dt + integral c(X-, u, mu-) Ntilde(dt, du)
//
// plus the objects the Malliavin layer needs. The mark space is scalar
// (m = 1). Derivative conventions: db_dx(i,j) = d b_i / d x_j; dmu_b(x,mu,v)
// is the Lions derivative, a d x d matrix field over the atom location v.
//
// gamma_c is the carre du champ of the jump amplitude in its mark,
// gamma_c = u^2 (d_u c)(d_u c)^T for the stable-like mark structure used
// throughout (gradient f -> u f'(u) xi(r) on the mark space, xi zero-mean,
// unit-variance on [0,1]); a_c is the associated generator image
// a[f](u) = (u^2 f''(u) + (1-alpha) u f'(u)) / 2, applied per component of c.
// Both are supplied in closed form by the model, never differentiated
// numerically at runtime.
struct GrowthMeta {
    double lip_x = 0.0;      // declared Lipschitz constant in x
    double lip_mu = 0.0;     // declared Lipschitz constant in the measure (W2)
    double sigma_x_abs = 0.0; // |sigma_x|-type ellipticity-degradation scale
    std::string jump_profile; // human-readable dominating profile H(u)
    std::string name;
};

struct CoefficientSet {
    int dim = 1;

    std::function<Eigen::VectorXd(const Eigen::VectorXd&, const EmpiricalMeasure&)> b;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> c;

    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&)> db_dx;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> dc_dx;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const EmpiricalMeasure&,
                                  const Eigen::VectorXd&)> dmu_b;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&,
                                  const Eigen::VectorXd&)> dmu_c;

    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> gamma_c;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> a_c;

    // Bottom gradient c-flat(x, u, mu, r); consumed only by consistency tests
    // (must satisfy: integral over r of c-flat = 0 and of c-flat c-flat^T
    // = gamma_c). Optional.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&,
                                  double)> c_flat;

    // --- second derivatives in x (one Hessian per component) --------------
    // Needed by the A[X] recursion; the linear built-ins return zeros.
    std::function<std::vector<Eigen::MatrixXd>(const Eigen::VectorXd&,
                                               const EmpiricalMeasure&)> d2b_dx2;
    std::function<std::vector<Eigen::MatrixXd>(const Eigen::VectorXd&, double,
                                               const EmpiricalMeasure&)> d2c_dx2;

    // --- mark derivatives ---------------------------------------------------
    // d/du of c, dc_dx and gamma_c, plus d gamma_c / dx. These feed the
    // bracket recursions behind the IBP weights (and the boundary-correction
    // replays). Models that cannot supply them can still run everything
    // except the weight estimators.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> du_c;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> du_dc_dx;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&, double, const EmpiricalMeasure&)> du_gamma_c;
    std::function<std::vector<Eigen::MatrixXd>(const Eigen::VectorXd&, double,
                                               const EmpiricalMeasure&)> dgamma_c_dx;

    // Structure flags consumed by the compensator logic and the estimators.
    bool odd_in_u = false;           // c (and dc_dx, dmu_c, a_c) odd in u
    bool measure_independent = false;
    bool dmu_c_zero = false;         // no measure dependence in the jump part
    // dmu_b(x,mu,v) does not depend on x: the Lions-flow source series can be
    // precomputed once per v and shared by every path.
    bool dmu_b_state_independent = false;
    double alpha_binding = 0.0;      // the alpha a_c was built against

    GrowthMeta growth_meta;

    bool has_mark_derivatives() const {
        return static_cast<bool>(du_c) && static_cast<bool>(du_dc_dx)
            && static_cast<bool>(du_gamma_c) && static_cast<bool>(dgamma_c_dx);
    }
    bool has_second_derivatives() const {
        return static_cast<bool>(d2b_dx2) && static_cast<bool>(d2c_dx2);
    }
};

// Scalar functionals of a measure with their Lions derivatives, used by the
// chain-rule checks and built-in drift families.
struct MeasureFunctional {
    enum class Kind { FirstMoment, ScalarOfMoment };
    Kind kind = Kind::FirstMoment;
    std::string name = "m";
    std::function<double(const EmpiricalMeasure&)> evaluate;
    // lions_derivative(mu, v): for first_moment this is identically 1; for
    // F(m(mu)) it is F'(m(mu)) independently of v.
    std::function<double(const EmpiricalMeasure&, const Eigen::VectorXd&)> lions_derivative;
    // Second derivative of the scalar map m -> F(m) the functional factors
    // through (identically 0 for the first moment). Optional: when present,
    // second-order remainders F(m+s) - F(m) - s F'(m) are evaluated through
    // the exact Taylor form s^2 * int_0^1 (1-t) F''(m + t s) dt, which avoids
    // the catastrophic cancellation of the direct difference for small s.
    std::function<double(double)> map_curvature;

    static MeasureFunctional first_moment();
    static MeasureFunctional scalar_of_moment(std::function<double(double)> F,
                                              std::function<double(double)> Fprime,
                                              std::string name,
                                              std::function<double(double)> Fsecond = {});
};

// Built-in linear mean-field family ("LM"):
//   b(x, mu) = beta x + beta_bar m(mu)
//   c(x, u, mu) = (sigma + sigma_x x + sigma_m m(mu)) u        (d = 1)
// gamma_c = u^2 (sigma + sigma_x x + sigma_m m)^2,
// a_c = (1 - alpha)/2 * u * (sigma + sigma_x x + sigma_m m).
// alpha is the stable index of the mark structure the model will be run
// against (binding recorded in alpha_binding).
CoefficientSet builtin_linear_meanfield(double beta, double beta_bar, double sigma,
                                        double sigma_x, double sigma_m, double alpha);

// Nonlinear benchmark family (d = 1), used where a linear model is too easy
// (finite-difference convergence-order tests):
//   b(x, mu) = beta sin(x) + beta_bar m(mu)
//   c(x, u, mu) = sigma (1 + kappa cos(x)) u
// All derivatives closed-form; Lipschitz and C^2 in x with bounded seconds.
CoefficientSet builtin_nonlinear_bench(double beta, double beta_bar, double sigma,
                                       double kappa, double alpha);

struct ValidationReport {
    struct Entry {
        std::string field;
        double max_rel_error = 0.0;
        Eigen::VectorXd worst_point;
    };
    std::vector<Entry> entries;
    bool pass = false;
    double tolerance = 1e-4;
};

// Central finite differences (step 1e-5) of b and c against the supplied
// db_dx / dc_dx / dmu_b / dmu_c at randomized probe points. The measure
// direction is probed by shifting one atom of a 64-atom cloud and dividing by
// the atom weight — the empirical-measure realization of the Lions
// derivative. Throws DerivativeMismatch when any field exceeds 1e-4.
ValidationReport validate_coefficients(const CoefficientSet& cs, int probes, std::uint64_t seed);

} // namespace mvj
