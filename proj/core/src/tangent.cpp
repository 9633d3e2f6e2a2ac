#include "mvjump/tangent.hpp"

#include <algorithm>
#include <cmath>

#include "mvjump/errors.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/threading.hpp"

namespace mvj {

namespace {

std::vector<JumpEvent> events_of(const PathBundle& b) {
    std::vector<JumpEvent> evs;
    evs.reserve(b.jumps.size());
    for (const auto& j : b.jumps) evs.push_back({j.time, j.mark});
    return evs;
}

// d/dx of the compensator drift: integral of dc_dx(x, u, mu) nu(du). Zero by
// symmetry for odd models (the only case on the hot paths); quadrature
// otherwise.
Eigen::MatrixXd compensator_jacobian(const LevyModel& lm, const CoefficientSet& cs,
                                     const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
    const int d = cs.dim;
    if (lm.symmetric() && cs.odd_in_u) return Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd out(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            out(i, j) = nu_integral(
                lm, [&](double u) { return cs.dc_dx(x, u, mu)(i, j); }, lm.eps, lm.R0);
    return out;
}

// Replays the base path and carries Y through the linearized dynamics. The
// compensator in the base replay is frozen at the step's entry state, exactly
// as the simulator froze it, so the replayed states match the stored ones.
struct LinearWalker {
    const CoefficientSet& cs;
    const LevyModel& lm;
    const LinearJumpSpec& spec;
    const PathBundle& bundle;

    Eigen::VectorXd X;
    Eigen::MatrixXd Y;
    Eigen::VectorXd comp;
    bool comp_zero = false;
    std::vector<Eigen::MatrixXd> out;

    void verify(std::size_t node) const {
        const Eigen::VectorXd& ref = bundle.states[node];
        if ((X - ref).lpNorm<Eigen::Infinity>() >
            1e-9 * (1.0 + ref.lpNorm<Eigen::Infinity>()))
            fail(ErrorCode::SchemeInstability,
                 "tangent replay diverged from the stored path at node " + std::to_string(node));
    }

    void begin_step(std::size_t k, double, const EmpiricalMeasure& mu) {
        verify(k);
        comp = comp_zero ? Eigen::VectorXd::Zero(cs.dim) : compensator_drift(lm, cs, X, mu);
    }

    void drift(double t0, double t1, const EmpiricalMeasure& mu) {
        const double dt = t1 - t0;
        Eigen::MatrixXd upd = Eigen::MatrixXd::Zero(Y.rows(), Y.cols());
        if (spec.B1) upd += spec.B1(t0, X, mu) * Y;
        if (spec.beta) upd += spec.beta(t0, X, mu);
        X += dt * (cs.b(X, mu) - comp);
        Y += dt * upd;
    }

    void jump(double t, double u, const EmpiricalMeasure& mu) {
        Eigen::MatrixXd upd = Eigen::MatrixXd::Zero(Y.rows(), Y.cols());
        if (spec.C1) upd += spec.C1(t, X, u, mu) * Y;
        if (spec.kappa) upd += spec.kappa(t, X, u, mu);
        X += cs.c(X, u, mu);
        Y += upd;
        if (!Y.allFinite())
            fail(ErrorCode::BlowUp, "tangent blow-up at t = " + std::to_string(t));
    }

    void end_step(std::size_t k, double) { out[k + 1] = Y; }
};

} // namespace

std::vector<Eigen::MatrixXd> run_linear_jump_sde(const CoefficientSet& cs, const LevyModel& lm,
                                                 const LinearJumpSpec& spec,
                                                 const PathBundle& bundle, const LawFlow& law,
                                                 const Eigen::MatrixXd& Y0) {
    if (bundle.grid->size() != law.nodes())
        fail(ErrorCode::LawFlowGap, "bundle grid and law flow have different node counts");
    if (Y0.rows() != spec.rows || Y0.cols() != spec.cols)
        fail(ErrorCode::DimensionMismatch, "Y0 does not match the declared spec shape");

    LinearWalker w{cs, lm, spec, bundle,
                   bundle.states.front(), Y0, Eigen::VectorXd(),
                   lm.symmetric() && cs.odd_in_u,
                   std::vector<Eigen::MatrixXd>(bundle.grid->size())};
    w.out[0] = Y0;
    walk_timeline(*bundle.grid, events_of(bundle), law, 0, w);
    w.verify(bundle.grid->size() - 1);
    return std::move(w.out);
}

std::vector<Eigen::MatrixXd> simulate_dx_flow(const CoefficientSet& cs, const LevyModel& lm,
                                              const PathBundle& bundle, const LawFlow& law) {
    const int d = cs.dim;
    LinearJumpSpec spec;
    spec.rows = spec.cols = d;
    spec.B1 = [&cs, &lm](double, const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        Eigen::MatrixXd m = cs.db_dx(x, mu);
        if (!(lm.symmetric() && cs.odd_in_u)) m -= compensator_jacobian(lm, cs, x, mu);
        return m;
    };
    spec.C1 = [&cs](double, const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        return cs.dc_dx(x, u, mu);
    };
    return run_linear_jump_sde(cs, lm, spec, bundle, law, Eigen::MatrixXd::Identity(d, d));
}

// ---------------------------------------------------------------------------
// Lions-derivative bank
// ---------------------------------------------------------------------------

namespace {

// Draw one atom location from an empirical measure by inverse CDF on the
// weights (theta' ~ mu_0 for the primed bank).
Eigen::VectorXd draw_atom(const EmpiricalMeasure& mu, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double v = unif(rng), acc = 0.0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        acc += mu.weight(i);
        if (v <= acc) return mu.atom(i);
    }
    return mu.atom(mu.size() - 1);
}

// Source of the dmu equation at a given node, as seen from observing state x:
//   dmu_b(x, mu_n, pinned_state) * pinned_dx  +  avg_j dmu_b(x, mu_n, X'_j) * U'_j.
Eigen::MatrixXd dmu_source_at(const CoefficientSet& cs, const DmuBank& bank,
                              const LawFlow& law, std::size_t v, std::size_t node,
                              const Eigen::VectorXd& x,
                              const std::vector<std::vector<std::vector<Eigen::MatrixXd>>>& U) {
    const EmpiricalMeasure& mu = law.at_node(node);
    Eigen::MatrixXd s = cs.dmu_b(x, mu, bank.pinned_bundles[v].states[node]) *
                        bank.pinned_dx[v][node];
    const std::size_t M = bank.bank_bundles.size();
    if (M > 0 && !U.empty()) {
        Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(s.rows(), s.cols());
        for (std::size_t j = 0; j < M; ++j)
            acc += cs.dmu_b(x, mu, bank.bank_bundles[j].states[node]) * U[v][j][node];
        s += acc / static_cast<double>(M);
    }
    return s;
}

LinearJumpSpec dmu_spec(const CoefficientSet& cs, const LevyModel& lm, int d,
                        const std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&,
                                                            const EmpiricalMeasure&)>& source) {
    LinearJumpSpec spec;
    spec.rows = spec.cols = d;
    spec.B1 = [&cs, &lm](double, const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        Eigen::MatrixXd m = cs.db_dx(x, mu);
        if (!(lm.symmetric() && cs.odd_in_u)) m -= compensator_jacobian(lm, cs, x, mu);
        return m;
    };
    spec.C1 = [&cs](double, const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        return cs.dc_dx(x, u, mu);
    };
    spec.beta = source;
    return spec;
}

bool dmu_is_trivial(const CoefficientSet& cs) {
    return cs.measure_independent || !static_cast<bool>(cs.dmu_b);
}

void require_measure_free_jumps(const CoefficientSet& cs) {
    if (static_cast<bool>(cs.dmu_c) && !cs.dmu_c_zero)
        fail(ErrorCode::MissingDerivativeData,
             "dmu flows require a measure-free jump coefficient (dmu_c == 0); "
             "measure-dependent jumps are not supported");
}

} // namespace

DmuBank build_dmu_bank(const CoefficientSet& cs, const LevyModel& lm, const LawFlow& law,
                       const std::vector<Eigen::VectorXd>& v_points, const DmuBankConfig& cfg,
                       std::uint64_t root_seed) {
    if (v_points.empty()) fail(ErrorCode::EmptySampleSet, "dmu bank needs at least one v point");
    require_measure_free_jumps(cs);

    DmuBank bank;
    bank.v_points = v_points;
    const int d = cs.dim;
    const std::size_t n_nodes = law.nodes();
    const std::size_t V = v_points.size();

    if (dmu_is_trivial(cs)) {
        // no measure sensitivity: the flow is identically zero, keep a stub
        bank.source_is_shared = true;
        bank.source_series.assign(
            V, std::vector<Eigen::MatrixXd>(n_nodes, Eigen::MatrixXd::Zero(d, d)));
        return bank;
    }
    if (cfg.bank_size < 32)
        fail(ErrorCode::BankTooSmall,
             "bank_size must be >= 32, got " + std::to_string(cfg.bank_size));
    if (cfg.fp_sweeps < 1)
        fail(ErrorCode::FixedPointDivergence, "fp_sweeps must be >= 1");

    const std::size_t M = static_cast<std::size_t>(cfg.bank_size);
    const std::uint64_t theta_root = child_root(root_seed, 0xB001);
    const std::uint64_t bank_root = child_root(root_seed, 0xB002);
    const std::uint64_t pin_root = child_root(root_seed, 0xB003);

    // primed bank: decoupled copies started at theta' ~ mu_0
    bank.bank_bundles.resize(M);
    parallel_chunks(M, 16, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) {
            auto rng = substream(theta_root, j);
            Eigen::VectorXd theta = draw_atom(law.at_node(0), rng);
            bank.bank_bundles[j] = simulate_decoupled(cs, lm, theta, law, bank_root, j);
        }
    });

    // pinned copies, one per v, carrying their first-variation flow
    bank.pinned_bundles.resize(V);
    bank.pinned_dx.resize(V);
    for (std::size_t v = 0; v < V; ++v) {
        if (v_points[v].size() != d)
            fail(ErrorCode::DimensionMismatch, "v point dimension != model dim");
        bank.pinned_bundles[v] = simulate_decoupled(cs, lm, v_points[v], law, pin_root, v);
        bank.pinned_dx[v] = simulate_dx_flow(cs, lm, bank.pinned_bundles[v], law);
    }

    // Jacobi fixed-point sweeps for the bank's own dmu flows, from U = 0.
    bank.bank_U.assign(
        V, std::vector<std::vector<Eigen::MatrixXd>>(
               M, std::vector<Eigen::MatrixXd>(n_nodes, Eigen::MatrixXd::Zero(d, d))));
    double prev_delta = 0.0;
    for (int sweep = 1; sweep <= cfg.fp_sweeps; ++sweep) {
        auto next = bank.bank_U;
        std::vector<double> chunk_delta(n_chunks(M, 4), 0.0);
        parallel_chunks(M, 4, [&](std::size_t ci, std::size_t b, std::size_t e) {
            for (std::size_t j = b; j < e; ++j) {
                for (std::size_t v = 0; v < V; ++v) {
                    auto source = [&, v](double t, const Eigen::VectorXd& x,
                                         const EmpiricalMeasure&) {
                        return dmu_source_at(cs, bank, law, v, law.node_index(t), x,
                                             bank.bank_U);
                    };
                    auto spec = dmu_spec(cs, lm, d, source);
                    next[v][j] = run_linear_jump_sde(cs, lm, spec, bank.bank_bundles[j], law,
                                                     Eigen::MatrixXd::Zero(d, d));
                    for (std::size_t n = 0; n < n_nodes; ++n)
                        chunk_delta[ci] = std::max(
                            chunk_delta[ci],
                            (next[v][j][n] - bank.bank_U[v][j][n]).lpNorm<Eigen::Infinity>());
                }
            }
        });
        double delta = 0.0;
        for (double cd : chunk_delta) delta = std::max(delta, cd);
        bank.bank_U.swap(next);
        if (sweep >= 2 && delta > prev_delta)
            fail(ErrorCode::FixedPointDivergence,
                 "dmu fixed point: sweep delta grew from " + std::to_string(prev_delta) +
                     " to " + std::to_string(delta));
        prev_delta = delta;
        bank.sweeps_used = sweep;
        bank.last_sweep_delta = delta;
    }

    // With state-independent dmu_b the source seen by a main path does not
    // depend on the path, so precompute it once per (v, node) and share.
    if (cs.dmu_b_state_independent) {
        bank.source_is_shared = true;
        bank.source_series.assign(V, std::vector<Eigen::MatrixXd>(n_nodes));
        const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(d);
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t n = 0; n < n_nodes; ++n)
                bank.source_series[v][n] = dmu_source_at(cs, bank, law, v, n, x0, bank.bank_U);
    }
    return bank;
}

std::vector<std::vector<Eigen::MatrixXd>> simulate_dmu_flow(const CoefficientSet& cs,
                                                            const LevyModel& lm,
                                                            const PathBundle& bundle,
                                                            const LawFlow& law,
                                                            const DmuBank& bank) {
    require_measure_free_jumps(cs);
    const int d = cs.dim;
    const std::size_t V = bank.v_points.size();
    std::vector<std::vector<Eigen::MatrixXd>> out(V);

    if (dmu_is_trivial(cs)) {
        for (std::size_t v = 0; v < V; ++v)
            out[v].assign(bundle.grid->size(), Eigen::MatrixXd::Zero(d, d));
        return out;
    }

    for (std::size_t v = 0; v < V; ++v) {
        std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, const EmpiricalMeasure&)>
            source;
        if (bank.source_is_shared) {
            source = [&bank, &law, v](double t, const Eigen::VectorXd&,
                                      const EmpiricalMeasure&) {
                return bank.source_series[v][law.node_index(t)];
            };
        } else {
            source = [&, v](double t, const Eigen::VectorXd& x, const EmpiricalMeasure&) {
                return dmu_source_at(cs, bank, law, v, law.node_index(t), x, bank.bank_U);
            };
        }
        auto spec = dmu_spec(cs, lm, d, source);
        out[v] = run_linear_jump_sde(cs, lm, spec, bundle, law, Eigen::MatrixXd::Zero(d, d));
    }
    return out;
}

} // namespace mvj
