#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mvjump/coefficients.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/simulator.hpp"
#include "mvjump/tangent.hpp"

namespace mvj {

// Lent-particle carre-du-champ state along one path. With the mark-space
// structure (gamma[f](u) = u^2 f'(u)^2, a[f](u) = (u^2 f'' + (1-alpha) u f')/2
// on |u| in [eps, R0]) every object below closes under jump/drift updates:
//   gamma   = Gamma[X]            (d x d, PSD)
//   A       = A[X]                (d)
//   Q[j]    = Gamma[X_j, Gamma[X]]   (d x d per component j)
//   R[j]    = Gamma[X_j, dX/dx]      (d x d per component j)
//   Rmu[v][j] = Gamma[X_j, dX/dmu(v)]
// Q and R feed the divergence weights: Gamma[X_j, Gamma^{-1}] and
// Gamma[X_j, Gamma^{-1} dxX] are assembled from them by the product rule.
struct MalliavinState {
    Eigen::MatrixXd gamma;
    Eigen::VectorXd A;
    std::vector<Eigen::MatrixXd> Q;
    std::vector<Eigen::MatrixXd> R;
    std::vector<std::vector<Eigen::MatrixXd>> Rmu;
};

struct MalliavinOptions {
    bool need_A = true;
    bool need_weight_brackets = true;   // propagate Q and R
    const DmuBank* bank = nullptr;      // non-null: propagate dmu flow and Rmu
    // false: keep only the terminal state (nodes/dx_flow/dmu_flow have one
    // entry) — the estimators' hot path.
    bool record_nodes = true;
};

struct MalliavinPath {
    std::vector<MalliavinState> nodes;          // one per grid node
    std::vector<Eigen::MatrixXd> dx_flow;        // d x d per node
    std::vector<std::vector<Eigen::MatrixXd>> dmu_flow;  // [v][node], if bank
};

// Joint forward pass: replays the bundle and propagates X, dX/dx, dX/dmu,
// Gamma, A and the weight brackets in lockstep, so all pieces share the
// exact same discrete timeline. Requires the coefficient set's mark
// derivatives (du_c, du_dc_dx, du_gamma_c, dgamma_c_dx) for the brackets and
// second x-derivatives for A.
MalliavinPath run_malliavin_recursion(const CoefficientSet& cs, const LevyModel& lm,
                                      const PathBundle& bundle, const LawFlow& law,
                                      const MalliavinOptions& opt);

// Relative smallest-eigenvalue test used to reject near-singular paths:
// lambda_min(gamma) > gamma_floor * trace(gamma). A path with no jumps has
// gamma == 0 and is always rejected (and counted).
bool gamma_acceptable(const Eigen::MatrixXd& gamma, double gamma_floor);

// Interior divergence weights at the terminal node (boundary corrections are
// the estimators' responsibility). Component i of Z1 differentiates along
// the i-th initial coordinate:
//   Z1_i = sum_j [ -2 A_j (G^{-1} dxX)_{ji} + (G^{-1} Q_j G^{-1} dxX)_{ji}
//                  - (G^{-1} R_j)_{ji} ],   G = Gamma[X].
// Z2 drops the transport factor (for densities); Zmu1 replaces dxX by the
// Lions derivative dX/dmu(v) and R by Rmu.
Eigen::VectorXd weight_Z1(const MalliavinState& ms, const Eigen::MatrixXd& dxT);
Eigen::VectorXd weight_Z2(const MalliavinState& ms);
Eigen::VectorXd weight_Zmu1(const MalliavinState& ms, const Eigen::MatrixXd& dmuT,
                            std::size_t v_index);

using TerminalMap = std::function<double(const Eigen::VectorXd&)>;

struct IbpParams {
    long n_paths = 10000;
    std::uint64_t seed = 1;
    double gamma_floor = 1e-10;        // relative to trace(Gamma)
    bool boundary_correction = true;   // Mecke flux at |u| = R0 and |u| = eps
    int chunk = 256;                   // deterministic accumulation chunk
};

struct GradientEstimate {
    Eigen::VectorXd value;
    Eigen::VectorXd std_error;
    long n_paths = 0;
    long n_rejected = 0;
    Eigen::VectorXd interior;   // weight part alone (diagnostics)
    Eigen::VectorXd flux;       // boundary part alone
};

// d/dx_i E[f(X_T^x)] by integration by parts: E[f(X_T) Z1_i] plus the
// boundary fluxes, which re-simulate each path with one jump inserted at a
// uniform time and a mark pinned to the bottom-space boundary.
GradientEstimate estimate_gradient_x(const CoefficientSet& cs, const LevyModel& lm,
                                     const Eigen::VectorXd& x, const LawFlow& law,
                                     const TerminalMap& f, const IbpParams& params);

// Lions derivative d/dmu E[f(X_T^x)](v) for the bank's v_points[v_index].
GradientEstimate estimate_gradient_mu(const CoefficientSet& cs, const LevyModel& lm,
                                      const Eigen::VectorXd& x, const LawFlow& law,
                                      const DmuBank& bank, std::size_t v_index,
                                      const TerminalMap& f, const IbpParams& params);

// Total derivative d/dx E[f(X_T^{x, delta_x})] when the initial law is the
// point mass at x (so moving x also moves the law): pairs f with
// Z1 + Zmu1(v = x). The law flow must have been generated from delta_x and
// the bank's v_points[v_index] must equal x.
GradientEstimate estimate_gradient_deltax(const CoefficientSet& cs, const LevyModel& lm,
                                          const Eigen::VectorXd& x, const LawFlow& law,
                                          const DmuBank& bank, std::size_t v_index,
                                          const TerminalMap& f, const IbpParams& params);

struct DensityEstimate {
    std::vector<double> grid;
    std::vector<double> p_hat;
    std::vector<double> se;
    double integral = 0.0;   // trapezoid integral of p_hat over the grid
    long n_rejected = 0;
    long n_paths = 0;
};

// One-dimensional terminal density p_T(y) = E[delta_y(X_T)] estimated as
// E[1_{X_T > y} Z2] (the IBP pairing with f = 1_{. > y}) plus boundary
// corrections (d = 1 only).
DensityEstimate estimate_density_ibp(const CoefficientSet& cs, const LevyModel& lm,
                                     const Eigen::VectorXd& x, const LawFlow& law,
                                     const std::vector<double>& grid, const IbpParams& params);

struct GammaScalingReport {
    std::vector<double> t_grid;
    std::vector<double> moment;        // E[Gamma_t^{-p} 1_{N_t >= 1}]
    std::vector<double> moment_se;
    std::vector<double> p_zero;        // fraction of paths with no jump by t
    double fitted_exponent = 0.0;      // slope of log moment vs log t
    double theoretical_exponent = 0.0; // -p / a, a = alpha/2
};

// Small-time inverse-moment scaling of Gamma[X]_t. Paths with no jump have
// Gamma exactly 0 (the truncated measure keeps an atom at N_t = 0), so the
// bare inverse moment does not exist; the estimator weights by 1_{N_t >= 1}
// and reports the zero-jump fraction per t. The t-grid must span at least
// 1.5 decades.
GammaScalingReport gamma_inverse_moment_scaling(const CoefficientSet& cs, const LevyModel& lm,
                                                const Eigen::VectorXd& x, const LawFlow& law,
                                                double p, const std::vector<double>& t_grid,
                                                long n_paths, std::uint64_t seed);

} // namespace mvj
