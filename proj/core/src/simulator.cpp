#include "mvjump/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mvjump/errors.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/stats.hpp"
#include "mvjump/threading.hpp"

namespace mvj {

// ---------------------------------------------------------------------------
// LawFlow
// ---------------------------------------------------------------------------

LawFlow::LawFlow(std::shared_ptr<const std::vector<double>> grid,
                 std::vector<EmpiricalMeasure> measures)
    : grid_(std::move(grid)), measures_(std::move(measures)) {
    if (!grid_ || grid_->size() != measures_.size())
        fail(ErrorCode::DimensionMismatch, "law flow: one measure per grid node required");
    if (grid_->size() < 2) fail(ErrorCode::InvalidWindow, "law flow needs >= 2 nodes");
}

std::size_t LawFlow::node_index(double t) const {
    const auto& g = *grid_;
    if (t < g.front() - 1e-9 || t > g.back() + 1e-9)
        fail(ErrorCode::LawFlowGap,
             "time " + std::to_string(t) + " outside law flow range [" +
                 std::to_string(g.front()) + ", " + std::to_string(g.back()) + "]");
    auto it = std::upper_bound(g.begin(), g.end(), t + 1e-12);
    std::size_t idx = static_cast<std::size_t>(std::distance(g.begin(), it));
    if (idx == 0) return 0;
    --idx;
    return std::min(idx, g.size() - 1);
}

const EmpiricalMeasure& LawFlow::at_time(double t) const { return measures_[node_index(t)]; }

std::shared_ptr<const std::vector<double>> make_grid(double T, double h) {
    if (!(T > 0.0) || !(h > 0.0)) fail(ErrorCode::InvalidWindow, "grid needs T > 0, h > 0");
    auto g = std::make_shared<std::vector<double>>();
    std::size_t K = static_cast<std::size_t>(std::ceil(T / h - 1e-9));
    if (K == 0) K = 1;
    g->reserve(K + 1);
    for (std::size_t k = 0; k < K; ++k) g->push_back(static_cast<double>(k) * h);
    g->push_back(T);
    return g;
}

namespace {

std::shared_ptr<const std::vector<double>> shifted_grid(double t0, double T, double h) {
    auto g = std::make_shared<std::vector<double>>();
    g->push_back(t0);
    std::size_t K = static_cast<std::size_t>(std::ceil((T - t0) / h - 1e-9));
    if (K == 0) K = 1;
    for (std::size_t k = 1; k < K; ++k) g->push_back(t0 + static_cast<double>(k) * h);
    g->push_back(T);
    return g;
}

void check_state(const Eigen::VectorXd& x, double t) {
    if (!x.allFinite())
        fail(ErrorCode::SchemeInstability, "non-finite state at t = " + std::to_string(t));
    if (x.lpNorm<Eigen::Infinity>() > 1e12)
        fail(ErrorCode::BlowUp, "|X| > 1e12 at t = " + std::to_string(t));
}

// Advance one state across [t0, t1) against a frozen measure, applying the
// events in [ev_begin, ev_end) (their times must lie in [t0, t1)). The
// compensator drift is frozen at the segment's entry state.
struct SegmentAdvance {
    const CoefficientSet& cs;
    const LevyModel& lm;
    bool comp_zero;

    void run(Eigen::VectorXd& X, double t0, double t1, const EmpiricalMeasure& mu,
             const JumpEvent* ev_begin, const JumpEvent* ev_end,
             std::vector<JumpRecord>* jump_sink) const {
        Eigen::VectorXd comp =
            comp_zero ? Eigen::VectorXd::Zero(cs.dim) : compensator_drift(lm, cs, X, mu);
        double tcur = t0;
        for (const JumpEvent* e = ev_begin; e != ev_end; ++e) {
            if (e->time > tcur)
                X += (e->time - tcur) * (cs.b(X, mu) - comp);
            X += cs.c(X, e->mark, mu);
            check_state(X, e->time);
            if (jump_sink) jump_sink->push_back({e->time, e->mark, X});
            tcur = e->time;
        }
        if (t1 > tcur) X += (t1 - tcur) * (cs.b(X, mu) - comp);
        check_state(X, t1);
    }
};

} // namespace

// ---------------------------------------------------------------------------
// Particle system
// ---------------------------------------------------------------------------

namespace {

// Shared implementation: evolve given initial states with given per-particle
// event lists over `grid`, refreshing the empirical law at every node.
// Optionally records bundles.
ParticleSystemResult evolve_particle_system(const CoefficientSet& cs, const LevyModel& lm,
                                            std::vector<Eigen::VectorXd> states,
                                            const std::vector<std::vector<JumpEvent>>& events,
                                            std::shared_ptr<const std::vector<double>> grid,
                                            bool keep_bundles, std::uint64_t root_seed) {
    const std::size_t M = states.size();
    const auto& g = *grid;
    const int d = cs.dim;
    const bool comp_zero = lm.symmetric() && cs.odd_in_u;
    SegmentAdvance adv{cs, lm, comp_zero};

    std::vector<std::size_t> cursor(M, 0);
    std::vector<EmpiricalMeasure> measures;
    measures.reserve(g.size());

    ParticleSystemResult out;
    if (keep_bundles) {
        out.bundles.resize(M);
        for (std::size_t i = 0; i < M; ++i) {
            out.bundles[i].grid = grid;
            out.bundles[i].states.assign(g.size(), Eigen::VectorXd());
            out.bundles[i].states[0] = states[i];
            out.bundles[i].x0 = states[i];
            out.bundles[i].root_seed = root_seed;
            out.bundles[i].stream_index = i;
        }
    }

    auto snapshot = [&]() {
        Eigen::MatrixXd pts(d, static_cast<Eigen::Index>(M));
        for (std::size_t i = 0; i < M; ++i) pts.col(static_cast<Eigen::Index>(i)) = states[i];
        Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(M),
                                                      1.0 / static_cast<double>(M));
        measures.emplace_back(std::move(pts), std::move(w));
    };

    snapshot();  // node 0
    for (std::size_t k = 0; k + 1 < g.size(); ++k) {
        const double t0 = g[k], t1 = g[k + 1];
        const EmpiricalMeasure& mu = measures.back();
        parallel_chunks(M, 64, [&](std::size_t, std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                const auto& evs = events[i];
                std::size_t c0 = cursor[i];
                std::size_t c1 = c0;
                while (c1 < evs.size() && evs[c1].time < t1) ++c1;
                adv.run(states[i], t0, t1, mu, evs.data() + c0, evs.data() + c1,
                        keep_bundles ? &out.bundles[i].jumps : nullptr);
                cursor[i] = c1;
                if (keep_bundles) out.bundles[i].states[k + 1] = states[i];
            }
        });
        snapshot();
    }
    out.law = LawFlow(grid, std::move(measures));
    return out;
}

} // namespace

ParticleSystemResult simulate_particle_system(const CoefficientSet& cs, const LevyModel& lm,
                                              const ThetaSampler& theta, int n_particles,
                                              double T, double h, std::uint64_t root_seed,
                                              bool keep_bundles) {
    if (n_particles < 1) fail(ErrorCode::EmptySampleSet, "n_particles must be >= 1");
    lm.validate();
    auto grid = make_grid(T, h);
    const std::size_t M = static_cast<std::size_t>(n_particles);

    std::vector<Eigen::VectorXd> states(M);
    std::vector<std::vector<JumpEvent>> events(M);
    parallel_chunks(M, 256, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            auto rng = substream(root_seed, i);
            states[i] = theta(rng);
            if (states[i].size() != cs.dim)
                fail(ErrorCode::DimensionMismatch, "theta sample dimension != model dim");
            events[i] = sample_jumps(lm, 0.0, T, rng);
        }
    });
    return evolve_particle_system(cs, lm, std::move(states), events, grid, keep_bundles,
                                  root_seed);
}

// ---------------------------------------------------------------------------
// Decoupled paths
// ---------------------------------------------------------------------------

namespace {

PathBundle walk_decoupled(const CoefficientSet& cs, const LevyModel& lm,
                          const Eigen::VectorXd& x, const LawFlow& law,
                          const std::vector<JumpEvent>& events, std::uint64_t root,
                          std::uint64_t index) {
    const auto grid = law.grid_ptr();
    const auto& g = *grid;
    const bool comp_zero = lm.symmetric() && cs.odd_in_u;
    SegmentAdvance adv{cs, lm, comp_zero};

    PathBundle b;
    b.grid = grid;
    b.states.assign(g.size(), Eigen::VectorXd());
    b.states[0] = x;
    b.x0 = x;
    b.root_seed = root;
    b.stream_index = index;

    Eigen::VectorXd X = x;
    std::size_t c = 0;
    for (std::size_t k = 0; k + 1 < g.size(); ++k) {
        const double t0 = g[k], t1 = g[k + 1];
        const EmpiricalMeasure& mu = law.at_node(k);
        std::size_t c1 = c;
        while (c1 < events.size() && events[c1].time < t1) ++c1;
        adv.run(X, t0, t1, mu, events.data() + c, events.data() + c1, &b.jumps);
        c = c1;
        b.states[k + 1] = X;
    }
    return b;
}

} // namespace

PathBundle simulate_decoupled(const CoefficientSet& cs, const LevyModel& lm,
                              const Eigen::VectorXd& x, const LawFlow& law,
                              std::uint64_t root_seed, std::uint64_t stream_index) {
    auto rng = substream(root_seed, stream_index);
    auto events = sample_jumps(lm, law.grid().front(), law.grid().back(), rng);
    return walk_decoupled(cs, lm, x, law, events, root_seed, stream_index);
}

PathBundle simulate_decoupled_with_events(const CoefficientSet& cs, const LevyModel& lm,
                                          const Eigen::VectorXd& x, const LawFlow& law,
                                          const std::vector<JumpEvent>& events) {
    return walk_decoupled(cs, lm, x, law, events, 0, 0);
}

// ---------------------------------------------------------------------------
// Picard-in-law
// ---------------------------------------------------------------------------

PicardResult picard_law_iteration(const CoefficientSet& cs, const LevyModel& lm,
                                  const ThetaSampler& theta, int n_particles, double T, double h,
                                  int n_iter, std::uint64_t root_seed) {
    if (n_iter < 1) fail(ErrorCode::InvalidWindow, "picard needs n_iter >= 1");
    auto grid = make_grid(T, h);
    const auto& g = *grid;
    const std::size_t M = static_cast<std::size_t>(n_particles);
    const bool comp_zero = lm.symmetric() && cs.odd_in_u;
    SegmentAdvance adv{cs, lm, comp_zero};

    // common random numbers: theta draws and event lists fixed across stages
    std::vector<Eigen::VectorXd> theta0(M);
    std::vector<std::vector<JumpEvent>> events(M);
    parallel_chunks(M, 256, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            auto rng = substream(root_seed, i);
            theta0[i] = theta(rng);
            events[i] = sample_jumps(lm, 0.0, T, rng);
        }
    });

    PicardResult out;

    // stage 0: law frozen at the initial empirical measure for all nodes
    {
        Eigen::MatrixXd pts(cs.dim, static_cast<Eigen::Index>(M));
        for (std::size_t i = 0; i < M; ++i) pts.col(static_cast<Eigen::Index>(i)) = theta0[i];
        Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(M),
                                                      1.0 / static_cast<double>(M));
        EmpiricalMeasure mu0(std::move(pts), std::move(w));
        out.stages.emplace_back(grid, std::vector<EmpiricalMeasure>(g.size(), mu0));
    }

    for (int stage = 1; stage <= n_iter; ++stage) {
        const LawFlow& prev = out.stages.back();
        std::vector<Eigen::VectorXd> states = theta0;
        std::vector<std::size_t> cursor(M, 0);
        std::vector<EmpiricalMeasure> measures;
        measures.reserve(g.size());
        auto snapshot = [&]() {
            Eigen::MatrixXd pts(cs.dim, static_cast<Eigen::Index>(M));
            for (std::size_t i = 0; i < M; ++i) pts.col(static_cast<Eigen::Index>(i)) = states[i];
            Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(M),
                                                          1.0 / static_cast<double>(M));
            measures.emplace_back(std::move(pts), std::move(w));
        };
        snapshot();
        for (std::size_t k = 0; k + 1 < g.size(); ++k) {
            const double t0 = g[k], t1 = g[k + 1];
            const EmpiricalMeasure& mu = prev.at_node(k);  // exogenous previous-stage law
            parallel_chunks(M, 64, [&](std::size_t, std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i) {
                    const auto& evs = events[i];
                    std::size_t c0 = cursor[i], c1 = c0;
                    while (c1 < evs.size() && evs[c1].time < t1) ++c1;
                    adv.run(states[i], t0, t1, mu, evs.data() + c0, evs.data() + c1, nullptr);
                    cursor[i] = c1;
                }
            });
            snapshot();
        }
        out.stages.emplace_back(grid, std::move(measures));

        double gap = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k)
            gap = std::max(gap,
                           wasserstein2_1d(out.stages[out.stages.size() - 2].at_node(k),
                                           out.stages.back().at_node(k)));
        out.stage_gaps.push_back(gap);
    }

    for (std::size_t i = 2; i < out.stage_gaps.size(); ++i) {
        if (out.stage_gaps[i] > out.stage_gaps[i - 1] &&
            out.stage_gaps[i - 1] > out.stage_gaps[i - 2]) {
            out.non_contraction = true;
            out.diagnostics = "W2 stage gaps increased at stages " + std::to_string(i - 1) +
                              " and " + std::to_string(i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flow property
// ---------------------------------------------------------------------------

namespace {

// state of one bundle at an off-node time t (replay within the step)
Eigen::VectorXd state_at(const CoefficientSet& cs, const LevyModel& lm, const PathBundle& b,
                         const LawFlow& law, double t) {
    const auto& g = *b.grid;
    std::size_t k = law.node_index(t);
    if (k >= g.size() - 1) k = g.size() - 2;
    Eigen::VectorXd X = b.states[k];
    if (t <= g[k] + 1e-15) return X;
    const bool comp_zero = lm.symmetric() && cs.odd_in_u;
    SegmentAdvance adv{cs, lm, comp_zero};
    std::vector<JumpEvent> evs;
    for (const auto& j : b.jumps)
        if (j.time >= g[k] && j.time < t) evs.push_back({j.time, j.mark});
    adv.run(X, g[k], t, law.at_node(k), evs.data(), evs.data() + evs.size(), nullptr);
    return X;
}

} // namespace

FlowPropertyReport check_flow_property(const CoefficientSet& cs, const LevyModel& lm,
                                       const Eigen::VectorXd& x, const ThetaSampler& theta,
                                       int n_particles, double t_mid, double T, double h,
                                       int n_paths, std::uint64_t root_seed) {
    if (!(t_mid > 0.0 && t_mid < T)) fail(ErrorCode::InvalidWindow, "t_mid must be in (0, T)");

    // original system
    ParticleSystemResult sys =
        simulate_particle_system(cs, lm, theta, n_particles, T, h, root_seed, false);
    const LawFlow& law0 = sys.law;

    // the same law, re-frozen on the shifted grid {t_mid, t_mid + h, ...}:
    // the restart's freeze nodes lag the original ones by the lattice phase,
    // which is exactly the O(h) effect the flow-property check measures
    auto sg = shifted_grid(t_mid, T, h);
    std::vector<EmpiricalMeasure> shifted_measures;
    shifted_measures.reserve(sg->size());
    for (double s : *sg) shifted_measures.push_back(law0.at_time(s));
    LawFlow law1(sg, std::move(shifted_measures));

    // decoupled paths: direct vs restarted composition with identical events
    const std::uint64_t droot = child_root(root_seed, 0xDECu);
    FlowPropertyReport rep;
    rep.n_paths = n_paths;
    RunningStats disc;
    double dmax = 0.0;
    for (int p = 0; p < n_paths; ++p) {
        PathBundle direct = simulate_decoupled(cs, lm, x, law0, droot, static_cast<std::uint64_t>(p));
        Eigen::VectorXd mid = state_at(cs, lm, direct, law0, t_mid);
        std::vector<JumpEvent> tail;
        for (const auto& j : direct.jumps)
            if (j.time >= t_mid) tail.push_back({j.time, j.mark});
        PathBundle re = simulate_decoupled_with_events(cs, lm, mid, law1, tail);
        double d = (re.states.back() - direct.states.back()).lpNorm<Eigen::Infinity>();
        disc.add(d);
        dmax = std::max(dmax, d);
    }
    rep.max_discrepancy = dmax;
    rep.mean_discrepancy = disc.mean();
    return rep;
}

// ---------------------------------------------------------------------------
// Moment report & jump log
// ---------------------------------------------------------------------------

MomentReport moment_report(const std::vector<PathBundle>& bundles, double p,
                           const std::vector<double>& h_grid) {
    if (bundles.empty()) fail(ErrorCode::EmptySampleSet, "moment_report: no bundles");
    if (h_grid.size() < 2) fail(ErrorCode::InvalidWindow, "moment_report: h_grid too short");
    MomentReport rep;
    rep.h_grid = h_grid;

    RunningStats supnorm;
    std::vector<RunningStats> inc(h_grid.size());
    for (const auto& b : bundles) {
        const auto& g = *b.grid;
        double m = 0.0;
        for (const auto& s : b.states) m = std::max(m, s.lpNorm<Eigen::Infinity>());
        for (const auto& j : b.jumps) m = std::max(m, j.state_after.lpNorm<Eigen::Infinity>());
        supnorm.add(std::pow(m, p));

        for (std::size_t hi = 0; hi < h_grid.size(); ++hi) {
            double hcap = h_grid[hi];
            double m2 = 0.0;
            for (std::size_t k = 0; k < g.size(); ++k) {
                if (g[k] > hcap + 1e-15) break;
                m2 = std::max(m2, (b.states[k] - b.x0).lpNorm<Eigen::Infinity>());
            }
            for (const auto& j : b.jumps) {
                if (j.time > hcap) break;
                m2 = std::max(m2, (j.state_after - b.x0).lpNorm<Eigen::Infinity>());
            }
            inc[hi].add(std::pow(m2, p));
        }
    }
    rep.sup_norm_p = std::pow(supnorm.mean(), 1.0 / p);
    std::vector<double> lx, ly;
    for (std::size_t hi = 0; hi < h_grid.size(); ++hi) {
        rep.increment_norm.push_back(std::pow(inc[hi].mean(), 1.0 / p));
        if (rep.increment_norm.back() > 0.0) {
            lx.push_back(std::log(h_grid[hi]));
            ly.push_back(std::log(rep.increment_norm.back()));
        }
    }
    if (lx.size() >= 2) rep.loglog_slope = linear_fit(lx, ly).slope;
    return rep;
}

void write_jump_log(const PathBundle& bundle, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::NonFiniteEntry, "cannot open " + path + " for writing");
    auto put = [&](double v) {
        // serialize little-endian explicitly for a documented layout
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
        out.write(reinterpret_cast<const char*>(buf), 8);
    };
    for (const auto& j : bundle.jumps) {
        put(j.time);
        put(j.mark);
        for (Eigen::Index i = 0; i < j.state_after.size(); ++i) put(j.state_after(i));
    }
}

std::vector<JumpRecord> read_jump_log(const std::string& path, int dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::EmptySampleSet, "cannot open " + path);
    auto get = [&](double& v) -> bool {
        unsigned char buf[8];
        if (!in.read(reinterpret_cast<char*>(buf), 8)) return false;
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
        return true;
    };
    std::vector<JumpRecord> out;
    for (;;) {
        JumpRecord r;
        if (!get(r.time)) break;
        if (!get(r.mark)) fail(ErrorCode::NonFiniteEntry, "truncated record in " + path);
        r.state_after.resize(dim);
        for (int i = 0; i < dim; ++i)
            if (!get(r.state_after(i))) fail(ErrorCode::NonFiniteEntry, "truncated record in " + path);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace mvj
