#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvjump/coefficients.hpp"
#include "mvjump/levy.hpp"
#include "mvjump/measure.hpp"

namespace mvj {

using ThetaSampler = std::function<Eigen::VectorXd(std::mt19937_64&)>;

// Time-indexed family of empirical measures on a uniform grid, interpolated
// left-continuously (the law is frozen within a step, matching the scheme).
class LawFlow {
public:
    LawFlow() = default;
    LawFlow(std::shared_ptr<const std::vector<double>> grid,
            std::vector<EmpiricalMeasure> measures);

    const std::vector<double>& grid() const { return *grid_; }
    std::shared_ptr<const std::vector<double>> grid_ptr() const { return grid_; }
    const EmpiricalMeasure& at_node(std::size_t k) const { return measures_.at(k); }
    std::size_t nodes() const { return measures_.size(); }

    // Measure in force at time t (largest node <= t). Throws LawFlowGap if t
    // is outside the covered range (small tolerance for round-off).
    const EmpiricalMeasure& at_time(double t) const;
    std::size_t node_index(double t) const;

private:
    std::shared_ptr<const std::vector<double>> grid_;
    std::vector<EmpiricalMeasure> measures_;
};

struct JumpRecord {
    double time = 0.0;
    double mark = 0.0;
    Eigen::VectorXd state_after;  // X immediately after the jump
};

// One simulated trajectory: states at grid nodes plus the consumed jump
// events. Everything between nodes is deterministic given the log, so the
// bundle supports exact replay (tangent flows, Malliavin recursions, and the
// boundary-correction replays all re-walk this structure).
struct PathBundle {
    std::shared_ptr<const std::vector<double>> grid;
    std::vector<Eigen::VectorXd> states;   // one per grid node
    std::vector<JumpRecord> jumps;
    Eigen::VectorXd x0;
    std::uint64_t root_seed = 0;
    std::uint64_t stream_index = 0;

    double T() const { return grid->back(); }
};

struct ParticleSystemResult {
    LawFlow law;
    std::vector<PathBundle> bundles;  // populated only when keep_bundles
};

std::shared_ptr<const std::vector<double>> make_grid(double T, double h);

// Interacting particle system for the coupled equation: Euler between nodes
// (drift with the compensator subtracted, law frozen at the step's left
// node), jumps applied at their exact sampled times. Particle i uses
// substream(root_seed, i).
ParticleSystemResult simulate_particle_system(const CoefficientSet& cs, const LevyModel& lm,
                                              const ThetaSampler& theta, int n_particles,
                                              double T, double h, std::uint64_t root_seed,
                                              bool keep_bundles = false);

// Decoupled path from x against a frozen law flow; jump stream independent
// of whatever produced the law.
PathBundle simulate_decoupled(const CoefficientSet& cs, const LevyModel& lm,
                              const Eigen::VectorXd& x, const LawFlow& law,
                              std::uint64_t root_seed, std::uint64_t stream_index);

// Same, but with the jump events supplied by the caller (replay / coupling
// tests). The law flow's own grid is walked from its first node.
PathBundle simulate_decoupled_with_events(const CoefficientSet& cs, const LevyModel& lm,
                                          const Eigen::VectorXd& x, const LawFlow& law,
                                          const std::vector<JumpEvent>& events);

struct PicardResult {
    std::vector<LawFlow> stages;
    // sup over grid nodes of W2(stage_n, stage_{n-1}), n = 1..n_iter
    std::vector<double> stage_gaps;
    bool non_contraction = false;   // gaps increased on 2 consecutive stages
    std::string diagnostics;
};

// Picard-in-law: stage 0 freezes the law at the initial empirical measure;
// stage n evolves the particles against stage n-1's flow. Common random
// numbers across stages (same theta draws, same jump streams), so the gaps
// measure the contraction itself, not Monte Carlo noise.
PicardResult picard_law_iteration(const CoefficientSet& cs, const LevyModel& lm,
                                  const ThetaSampler& theta, int n_particles,
                                  double T, double h, int n_iter, std::uint64_t root_seed);

struct FlowPropertyReport {
    double max_discrepancy = 0.0;
    double mean_discrepancy = 0.0;
    int n_paths = 0;
};

// Flow property: simulate the decoupled path directly on [0,T], then restart
// at t_mid from the achieved state against the same simulated law, re-frozen
// on the shifted grid {t_mid, t_mid+h, ...} (identical jump events on
// (t_mid, T]), and compare terminal states. A node-aligned t_mid makes the
// two constructions coincide exactly; an off-lattice t_mid exposes the O(h)
// law-freeze lag of the scheme (discrepancy ~ C h at fixed lattice phase).
FlowPropertyReport check_flow_property(const CoefficientSet& cs, const LevyModel& lm,
                                       const Eigen::VectorXd& x, const ThetaSampler& theta,
                                       int n_particles, double t_mid, double T, double h,
                                       int n_paths, std::uint64_t root_seed);

// Record-per-jump binary log of a bundle: little-endian f64 time, f64 mark,
// f64[d] state-after, repeated per event.
void write_jump_log(const PathBundle& bundle, const std::string& path);
std::vector<JumpRecord> read_jump_log(const std::string& path, int dim);

struct MomentReport {
    double sup_norm_p = 0.0;                  // E[sup_{t<=T} |X|^p]^{1/p}
    std::vector<double> h_grid;
    std::vector<double> increment_norm;       // E[sup_{s<=h} |X_s - x0|^p]^{1/p}
    double loglog_slope = 0.0;
};

// Small-time increment norms from stored bundles (nodes + post-jump states).
MomentReport moment_report(const std::vector<PathBundle>& bundles, double p,
                           const std::vector<double>& h_grid);

// ---------------------------------------------------------------------------
// Timeline walker shared by every module that re-traverses a path: calls
// visitor.drift(t0, t1, mu) for each maximal jump-free sub-interval (left
// state convention; mu frozen at the step's left node) and
// visitor.jump(t, mark, mu) at each event. Grid nodes bound the drift
// sub-intervals, so node states can be recorded by the visitor.
// ---------------------------------------------------------------------------
template <class Visitor>
void walk_timeline(const std::vector<double>& grid, const std::vector<JumpEvent>& events,
                   const LawFlow& law, std::size_t start_node, Visitor&& vis) {
    std::size_t e = 0;
    while (e < events.size() && events[e].time < grid[start_node]) ++e;
    for (std::size_t k = start_node; k + 1 < grid.size(); ++k) {
        const double t0 = grid[k], t1 = grid[k + 1];
        const EmpiricalMeasure& mu = law.at_node(law.node_index(t0));
        vis.begin_step(k, t0, mu);
        double tcur = t0;
        while (e < events.size() && events[e].time < t1) {
            if (events[e].time > tcur) vis.drift(tcur, events[e].time, mu);
            vis.jump(events[e].time, events[e].mark, mu);
            tcur = events[e].time;
            ++e;
        }
        if (t1 > tcur) vis.drift(tcur, t1, mu);
        vis.end_step(k, t1);
    }
}

} // namespace mvj
