#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "mvjump/coefficients.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/simulator.hpp"

namespace mvj {

// Generic linear-with-source jump equation driven by a recorded path:
//   dY = (B1(t,X_t,mu_t) Y + beta(t,X_t,mu_t)) dt,
//   Y+ = (I + C1(t,X-,u,mu)) Y- + kappa(t,X-,u,mu) at each logged event.
// The runner replays the bundle's base path with the same stepping as the
// simulator, so Y is the exact derivative of the discrete scheme when the
// callbacks are the scheme's linearization. Null callbacks mean zero.
struct LinearJumpSpec {
    int rows = 1;
    int cols = 1;
    std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, const EmpiricalMeasure&)> B1;
    std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, const EmpiricalMeasure&)> beta;
    std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, double, const EmpiricalMeasure&)> C1;
    std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, double, const EmpiricalMeasure&)> kappa;
};

// Returns Y at every grid node (Y0 at node 0). Verifies along the way that
// the replayed base path reproduces the bundle's stored node states.
std::vector<Eigen::MatrixXd> run_linear_jump_sde(const CoefficientSet& cs, const LevyModel& lm,
                                                 const LinearJumpSpec& spec,
                                                 const PathBundle& bundle, const LawFlow& law,
                                                 const Eigen::MatrixXd& Y0);

// First variation dX_t/dx of the decoupled path (d x d, identity at t=0):
// B1 = db_dx minus the compensator's own derivative, C1 = dc_dx.
std::vector<Eigen::MatrixXd> simulate_dx_flow(const CoefficientSet& cs, const LevyModel& lm,
                                              const PathBundle& bundle, const LawFlow& law);

// ---------------------------------------------------------------------------
// Lions derivative d/dmu X_t(v). Requires dmu_c == 0 (jump coefficient
// measure-free); the measure enters through the drift only. The derivative
// solves the same linearized equation as dX/dx plus a mean-field source
//   S(t,v) = E~[dmu_b(x, mu_t, Xv_t) dxXv_t] + E'[dmu_b(x, mu_t, X'_t) U'_t(v)]
// where Xv is an independent copy pinned to start at v and the primed system
// is an auxiliary bank of copies carrying their own derivative U', obtained
// by fixed-point sweeps (U' = 0 initially). With dmu_b independent of the
// observing state x, the source series is precomputed once per v and shared
// by every main path.
// ---------------------------------------------------------------------------
struct DmuBankConfig {
    int bank_size = 64;
    int fp_sweeps = 2;
};

struct DmuBank {
    std::vector<Eigen::VectorXd> v_points;
    // [v][node]: averaged source series (only when dmu_b is state-independent)
    std::vector<std::vector<Eigen::MatrixXd>> source_series;
    bool source_is_shared = false;
    // kept for the state-dependent slow path and for diagnostics
    std::vector<PathBundle> bank_bundles;
    std::vector<std::vector<std::vector<Eigen::MatrixXd>>> bank_U;  // [v][j][node]
    std::vector<PathBundle> pinned_bundles;                          // [v]
    std::vector<std::vector<Eigen::MatrixXd>> pinned_dx;             // [v][node]
    int sweeps_used = 0;
    double last_sweep_delta = 0.0;
};

DmuBank build_dmu_bank(const CoefficientSet& cs, const LevyModel& lm, const LawFlow& law,
                       const std::vector<Eigen::VectorXd>& v_points, const DmuBankConfig& cfg,
                       std::uint64_t root_seed);

// d/dmu X_t(v) along one main path, one node-series per v point.
std::vector<std::vector<Eigen::MatrixXd>> simulate_dmu_flow(const CoefficientSet& cs,
                                                            const LevyModel& lm,
                                                            const PathBundle& bundle,
                                                            const LawFlow& law,
                                                            const DmuBank& bank);

} // namespace mvj
