#include "mvjump/malliavin.hpp"

#include <algorithm>
#include <cmath>

#include "mvjump/errors.hpp"
#include "mvjump/rng.hpp"
#include "mvjump/stats.hpp"
#include "mvjump/threading.hpp"

namespace mvj {

namespace {

// ---------------------------------------------------------------------------
// Joint forward recursion.
//
// Everything here is the exact functional calculus of the DISCRETE scheme:
// write the terminal state as a function of the path's jump marks
// X_T = Phi(u_1..u_N), give mark u_i the carre-du-champ weight u_i^2
// (bottom gradient f -> u f'(u) xi), and define for functionals F, G
//   Gamma[F,G] = sum_i u_i^2 (d F/d u_i)(d G/d u_i)^T.
// With J_i = u_i dX/du_i, every object below closes under the scheme's two
// elementary maps.
//
// Jump at mark u (M = I + dc_dx, all coefficients at the pre-jump state):
//   J_i      <- M J_i                      (old marks),   J_new = u du_c
//   Gamma    <- M Gamma M^T + gamma_c
//   A        <- A + dc_dx A + 1/2 d2c:Gamma + a_c          (bottom generator
//               image; the nu-compensator of this increment is subtracted
//               continuously in the drift and vanishes identically for
//               symmetric nu with c odd in u)
//   Q_j = Gamma[X_j, Gamma] and R_j = Gamma[X_j, dxX] close through the
//   product rule; the cross terms contract the second x-derivatives with
//   Gamma:  W_j' := sum_k (d2c(:, :, k)) Gamma_{j'k}, and the new mark
//   contributes through the u-derivatives of dc_dx and gamma_c:
//     Gu = du_dc_dx Gamma M^T + M Gamma du_dc_dx^T + du_gamma_c
//     Ku = du_dc_dx dxX
//     Q_j <- sum_j' M_{jj'} [M Q_j' M^T + W_j' Gamma M^T + M Gamma W_j'^T
//                            + sum_k dgamma_c_dx[k] Gamma_{j'k}]
//            + u^2 (du_c)_j Gu
//     R_j <- sum_j' M_{jj'} [M R_j' + W_j' dxX] + u^2 (du_c)_j Ku
//   Rmu mirrors R with dxX replaced by the Lions flow U(v) (valid only when
//   the jump coefficient is measure-free and dmu_b does not depend on the
//   observing state, so the mean-field source has no mark derivative).
//
// Drift over dt (Md = I + dt B1, B1 = db_dx minus the compensator Jacobian):
// identical shapes with M -> Md, W from d2b scaled by dt, and no new-mark
// terms. Using the product form (I + dt B1)(.)(I + dt B1)^T keeps each
// object the exact derivative of the discrete Euler map, which is what makes
// shared-noise finite differences agree to O(delta) rather than O(h).
// ---------------------------------------------------------------------------

struct InsertionSpec {
    std::size_t event_index = 0;  // position in the augmented event list
    double mark = 0.0;
};

struct JointWalker {
    const CoefficientSet& cs;
    const LevyModel& lm;
    const LawFlow& law;
    const PathBundle& bundle;
    const MalliavinOptions& opt;
    const InsertionSpec* insertion = nullptr;

    int d = 1;
    std::size_t V = 0;       // dmu v-points
    bool odd = false;        // symmetric nu + odd coefficients: compensators vanish
    bool track_A = false;
    bool track_W = false;    // weight brackets Q, R (and Rmu with a bank)

    // running state
    Eigen::VectorXd X;
    Eigen::MatrixXd dx;
    std::vector<Eigen::MatrixXd> U;
    Eigen::MatrixXd gamma;
    Eigen::VectorXd A;
    std::vector<Eigen::MatrixXd> Q, R;
    std::vector<std::vector<Eigen::MatrixXd>> Rmu;
    Eigen::VectorXd iota;
    bool iota_live = false;
    std::size_t jump_counter = 0;
    Eigen::VectorXd comp;

    MalliavinPath out;

    JointWalker(const CoefficientSet& cs_, const LevyModel& lm_, const LawFlow& law_,
                const PathBundle& bundle_, const MalliavinOptions& opt_,
                const InsertionSpec* ins)
        : cs(cs_), lm(lm_), law(law_), bundle(bundle_), opt(opt_), insertion(ins) {
        d = cs.dim;
        V = opt.bank ? opt.bank->v_points.size() : 0;
        odd = lm.symmetric() && cs.odd_in_u;
        track_A = opt.need_A;
        track_W = opt.need_weight_brackets;

        X = bundle.states.front();
        dx = Eigen::MatrixXd::Identity(d, d);
        U.assign(V, Eigen::MatrixXd::Zero(d, d));
        gamma = Eigen::MatrixXd::Zero(d, d);
        A = Eigen::VectorXd::Zero(d);
        if (track_W) {
            Q.assign(d, Eigen::MatrixXd::Zero(d, d));
            R.assign(d, Eigen::MatrixXd::Zero(d, d));
            Rmu.assign(V, std::vector<Eigen::MatrixXd>(d, Eigen::MatrixXd::Zero(d, d)));
        }
        iota = Eigen::VectorXd::Zero(d);

        const std::size_t n_rec = opt.record_nodes ? bundle.grid->size() : 1;
        out.nodes.resize(n_rec);
        out.dx_flow.resize(n_rec);
        out.dmu_flow.assign(V, std::vector<Eigen::MatrixXd>(n_rec));
        record(0);
    }

    void record(std::size_t node) {
        const std::size_t slot = opt.record_nodes ? node : 0;
        MalliavinState& ms = out.nodes[slot];
        ms.gamma = gamma;
        ms.A = A;
        ms.Q = Q;
        ms.R = R;
        ms.Rmu = Rmu;
        out.dx_flow[slot] = dx;
        for (std::size_t v = 0; v < V; ++v) out.dmu_flow[v][slot] = U[v];
    }

    void verify(std::size_t node) const {
        const Eigen::VectorXd& ref = bundle.states[node];
        if ((X - ref).lpNorm<Eigen::Infinity>() >
            1e-9 * (1.0 + ref.lpNorm<Eigen::Infinity>()))
            fail(ErrorCode::SchemeInstability,
                 "malliavin replay diverged from the stored path at node " +
                     std::to_string(node));
    }

    // W_j'(s) = sum_k hess[a](b,k) S_{j'k}, one d x d matrix per j'.
    static void build_W(const std::vector<Eigen::MatrixXd>& hess, const Eigen::MatrixXd& S,
                        std::vector<Eigen::MatrixXd>& W) {
        const int d = static_cast<int>(S.rows());
        for (int jp = 0; jp < d; ++jp) {
            W[jp].resize(d, d);
            for (int a = 0; a < d; ++a) W[jp].row(a) = (hess[a] * S.col(jp)).transpose();
        }
    }

    static Eigen::VectorXd half_contract(const std::vector<Eigen::MatrixXd>& hess,
                                         const Eigen::MatrixXd& g) {
        Eigen::VectorXd r(static_cast<Eigen::Index>(hess.size()));
        for (std::size_t a = 0; a < hess.size(); ++a)
            r(static_cast<Eigen::Index>(a)) = 0.5 * hess[a].cwiseProduct(g).sum();
        return r;
    }

    Eigen::MatrixXd compensator_jac(const Eigen::VectorXd& x, const EmpiricalMeasure& mu) const {
        Eigen::MatrixXd m(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                m(i, j) = nu_integral(
                    lm, [&](double u) { return cs.dc_dx(x, u, mu)(i, j); }, lm.eps, lm.R0);
        return m;
    }

    // compensator of A's jump increment (zero for odd models)
    Eigen::VectorXd a_compensator(const Eigen::VectorXd& x, const EmpiricalMeasure& mu) const {
        Eigen::VectorXd r(d);
        for (int a = 0; a < d; ++a)
            r(a) = nu_integral(
                lm,
                [&](double u) {
                    double val = cs.dc_dx(x, u, mu).row(a).dot(A) + cs.a_c(x, u, mu)(a);
                    if (cs.has_second_derivatives())
                        val += 0.5 * cs.d2c_dx2(x, u, mu)[static_cast<std::size_t>(a)]
                                         .cwiseProduct(gamma)
                                         .sum();
                    return val;
                },
                lm.eps, lm.R0);
        return r;
    }

    void begin_step(std::size_t k, double, const EmpiricalMeasure& mu) {
        verify(k);
        comp = odd ? Eigen::VectorXd::Zero(d) : compensator_drift(lm, cs, X, mu);
    }

    void drift(double t0, double t1, const EmpiricalMeasure& mu) {
        const double dt = t1 - t0;
        Eigen::MatrixXd B1 = cs.db_dx(X, mu);
        if (!odd) B1 -= compensator_jac(X, mu);
        Eigen::MatrixXd Md = Eigen::MatrixXd::Identity(d, d) + dt * B1;

        std::vector<Eigen::MatrixXd> hess_b;
        const bool second = track_A || track_W;
        if (second) hess_b = cs.d2b_dx2(X, mu);

        if (track_A) {
            Eigen::VectorXd An = Md * A + dt * half_contract(hess_b, gamma);
            if (!odd) An -= dt * a_compensator(X, mu);
            A = std::move(An);
        }

        if (track_W) {
            std::vector<Eigen::MatrixXd> W(d);
            build_W(hess_b, gamma, W);
            std::vector<Eigen::MatrixXd> inner(d);
            for (int jp = 0; jp < d; ++jp)
                inner[jp] = Md * Q[jp] * Md.transpose() +
                            dt * (W[jp] * gamma * Md.transpose() +
                                  Md * gamma * W[jp].transpose());
            std::vector<Eigen::MatrixXd> Qn(d);
            for (int j = 0; j < d; ++j) {
                Qn[j] = Md(j, 0) * inner[0];
                for (int jp = 1; jp < d; ++jp) Qn[j] += Md(j, jp) * inner[jp];
            }
            for (int jp = 0; jp < d; ++jp) inner[jp] = Md * R[jp] + dt * W[jp] * dx;
            std::vector<Eigen::MatrixXd> Rn(d);
            for (int j = 0; j < d; ++j) {
                Rn[j] = Md(j, 0) * inner[0];
                for (int jp = 1; jp < d; ++jp) Rn[j] += Md(j, jp) * inner[jp];
            }
            for (std::size_t v = 0; v < V; ++v) {
                for (int jp = 0; jp < d; ++jp) inner[jp] = Md * Rmu[v][jp] + dt * W[jp] * U[v];
                for (int j = 0; j < d; ++j) {
                    Eigen::MatrixXd acc = Md(j, 0) * inner[0];
                    for (int jp = 1; jp < d; ++jp) acc += Md(j, jp) * inner[jp];
                    Rmu[v][j] = std::move(acc);
                }
            }
            Q.swap(Qn);
            R.swap(Rn);
        }

        gamma = Md * gamma * Md.transpose();
        for (std::size_t v = 0; v < V; ++v) {
            Eigen::MatrixXd Un = Md * U[v];
            Un += dt * opt.bank->source_series[v][law.node_index(t0)];
            U[v] = std::move(Un);
        }
        if (iota_live) iota = Md * iota;
        dx = Md * dx;
        X += dt * (cs.b(X, mu) - comp);
    }

    void jump(double t, double u, const EmpiricalMeasure& mu) {
        const bool inserted = insertion && jump_counter == insertion->event_index;
        ++jump_counter;

        Eigen::MatrixXd dc = cs.dc_dx(X, u, mu);
        Eigen::MatrixXd M = Eigen::MatrixXd::Identity(d, d) + dc;

        if (track_A) {
            Eigen::VectorXd An = A + dc * A + cs.a_c(X, u, mu);
            if (cs.has_second_derivatives())
                An += half_contract(cs.d2c_dx2(X, u, mu), gamma);
            A = std::move(An);
        }

        if (track_W) {
            std::vector<Eigen::MatrixXd> hess_c = cs.d2c_dx2(X, u, mu);
            std::vector<Eigen::MatrixXd> dgc = cs.dgamma_c_dx(X, u, mu);
            Eigen::MatrixXd dudc = cs.du_dc_dx(X, u, mu);
            Eigen::VectorXd cu = cs.du_c(X, u, mu);
            const double u2 = u * u;

            std::vector<Eigen::MatrixXd> W(d);
            build_W(hess_c, gamma, W);
            Eigen::MatrixXd Gu = dudc * gamma * M.transpose() +
                                 M * gamma * dudc.transpose() + cs.du_gamma_c(X, u, mu);
            Eigen::MatrixXd Ku = dudc * dx;

            std::vector<Eigen::MatrixXd> inner(d);
            for (int jp = 0; jp < d; ++jp) {
                inner[jp] = M * Q[jp] * M.transpose() + W[jp] * gamma * M.transpose() +
                            M * gamma * W[jp].transpose();
                for (int k = 0; k < d; ++k) inner[jp] += gamma(jp, k) * dgc[k];
            }
            std::vector<Eigen::MatrixXd> Qn(d);
            for (int j = 0; j < d; ++j) {
                Qn[j] = M(j, 0) * inner[0];
                for (int jp = 1; jp < d; ++jp) Qn[j] += M(j, jp) * inner[jp];
                Qn[j] += (u2 * cu(j)) * Gu;
            }
            for (int jp = 0; jp < d; ++jp) inner[jp] = M * R[jp] + W[jp] * dx;
            std::vector<Eigen::MatrixXd> Rn(d);
            for (int j = 0; j < d; ++j) {
                Rn[j] = M(j, 0) * inner[0];
                for (int jp = 1; jp < d; ++jp) Rn[j] += M(j, jp) * inner[jp];
                Rn[j] += (u2 * cu(j)) * Ku;
            }
            for (std::size_t v = 0; v < V; ++v) {
                Eigen::MatrixXd Kmu = dudc * U[v];
                for (int jp = 0; jp < d; ++jp) inner[jp] = M * Rmu[v][jp] + W[jp] * U[v];
                for (int j = 0; j < d; ++j) {
                    Eigen::MatrixXd acc = M(j, 0) * inner[0];
                    for (int jp = 1; jp < d; ++jp) acc += M(j, jp) * inner[jp];
                    acc += (u2 * cu(j)) * Kmu;
                    Rmu[v][j] = std::move(acc);
                }
            }
            Q.swap(Qn);
            R.swap(Rn);
        }

        gamma = M * gamma * M.transpose() + cs.gamma_c(X, u, mu);
        gamma = (0.5 * (gamma + gamma.transpose())).eval();
        for (std::size_t v = 0; v < V; ++v) U[v] = (M * U[v]).eval();
        if (iota_live) iota = (M * iota).eval();
        if (inserted) {
            iota = cs.du_c(X, u, mu);
            iota_live = true;
        }
        dx = (M * dx).eval();
        X += cs.c(X, u, mu);
        if (!gamma.allFinite() || !dx.allFinite())
            fail(ErrorCode::BlowUp, "malliavin blow-up at t = " + std::to_string(t));
    }

    void end_step(std::size_t k, double) {
        if (opt.record_nodes) record(k + 1);
    }

    void finish() {
        verify(bundle.grid->size() - 1);
        if (!opt.record_nodes) record(bundle.grid->size() - 1);
        // PSD audit at terminal time (symmetrized along the way)
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gamma);
        const double floor = -1e-8 * std::max(gamma.trace(), 0.0) - 1e-300;
        if (es.eigenvalues().minCoeff() < floor)
            fail(ErrorCode::NonPSD, "terminal Gamma has eigenvalue " +
                                        std::to_string(es.eigenvalues().minCoeff()));
    }
};

MalliavinPath run_joint(const CoefficientSet& cs, const LevyModel& lm, const PathBundle& bundle,
                        const LawFlow& law, const MalliavinOptions& opt,
                        const InsertionSpec* ins, Eigen::VectorXd* iota_out) {
    if (bundle.grid->size() != law.nodes())
        fail(ErrorCode::LawFlowGap, "bundle grid and law flow have different node counts");
    if (opt.need_weight_brackets && !cs.has_mark_derivatives())
        fail(ErrorCode::MissingDerivativeData,
             "weight brackets need du_c, du_dc_dx, du_gamma_c and dgamma_c_dx");
    if ((opt.need_A || opt.need_weight_brackets) && !cs.has_second_derivatives())
        fail(ErrorCode::MissingSecondDerivative,
             "A[X] and the weight brackets need d2b_dx2 and d2c_dx2");
    if (opt.bank) {
        if (static_cast<bool>(cs.dmu_c) && !cs.dmu_c_zero)
            fail(ErrorCode::MissingDerivativeData,
                 "dmu propagation requires a measure-free jump coefficient");
        if (!opt.bank->source_is_shared)
            fail(ErrorCode::MissingDerivativeData,
                 "dmu weight brackets need a shared source series "
                 "(state-independent dmu_b)");
    }

    std::vector<JumpEvent> events;
    events.reserve(bundle.jumps.size());
    for (const auto& j : bundle.jumps) events.push_back({j.time, j.mark});

    JointWalker w(cs, lm, law, bundle, opt, ins);
    walk_timeline(*bundle.grid, events, law, 0, w);
    w.finish();
    if (iota_out) *iota_out = w.iota_live ? w.iota : Eigen::VectorXd::Zero(cs.dim);
    return std::move(w.out);
}

} // namespace

MalliavinPath run_malliavin_recursion(const CoefficientSet& cs, const LevyModel& lm,
                                      const PathBundle& bundle, const LawFlow& law,
                                      const MalliavinOptions& opt) {
    return run_joint(cs, lm, bundle, law, opt, nullptr, nullptr);
}

bool gamma_acceptable(const Eigen::MatrixXd& gamma, double gamma_floor) {
    if (gamma.rows() == 1) return gamma(0, 0) > gamma_floor * gamma(0, 0) && gamma(0, 0) > 0.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gamma,
                                                      Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff() > gamma_floor * gamma.trace();
}

// ---------------------------------------------------------------------------
// Divergence weights
// ---------------------------------------------------------------------------

namespace {

// Z with a generic transport factor G (dxX, dmuX, their sum, or identity):
//   Z_i = sum_j [ -2 A_j (Ginv T)_{ji} + (Ginv Q_j Ginv T)_{ji}
//                 - (Ginv Rlike_j)_{ji} ]
Eigen::VectorXd weight_generic(const MalliavinState& ms, const Eigen::MatrixXd& T,
                               const std::vector<Eigen::MatrixXd>* Rlike) {
    const int d = static_cast<int>(ms.gamma.rows());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ms.gamma);
    Eigen::MatrixXd GiT = ldlt.solve(T);
    Eigen::VectorXd Z = Eigen::VectorXd::Zero(d);
    for (int j = 0; j < d; ++j) {
        Eigen::MatrixXd term = ldlt.solve(ms.Q[static_cast<std::size_t>(j)] * GiT);
        if (Rlike) term -= ldlt.solve((*Rlike)[static_cast<std::size_t>(j)]);
        for (int i = 0; i < d; ++i) Z(i) += -2.0 * ms.A(j) * GiT(j, i) + term(j, i);
    }
    return Z;
}

} // namespace

Eigen::VectorXd weight_Z1(const MalliavinState& ms, const Eigen::MatrixXd& dxT) {
    return weight_generic(ms, dxT, &ms.R);
}

Eigen::VectorXd weight_Z2(const MalliavinState& ms) {
    return weight_generic(ms, Eigen::MatrixXd::Identity(ms.gamma.rows(), ms.gamma.cols()),
                          nullptr);
}

Eigen::VectorXd weight_Zmu1(const MalliavinState& ms, const Eigen::MatrixXd& dmuT,
                            std::size_t v_index) {
    return weight_generic(ms, dmuT, &ms.Rmu.at(v_index));
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

namespace {

enum class GradMode { X, Mu, DeltaX };

// One boundary replay: rerun the path with an extra jump (s, w) inserted and
// return the flux integrand pieces. The inserted jump is a full member of
// the augmented configuration (its gamma_c enters Gamma-tilde, its M factor
// enters the transports); iota is its mark derivative du_c transported to T.
struct FluxReplay {
    bool ok = false;
    Eigen::VectorXd x_T;         // terminal state of the augmented path
    Eigen::RowVectorXd row;      // w^2 * (Gamma~^{-1} iota~)^T, 1 x d
    Eigen::MatrixXd dxT;         // augmented terminal transports
    std::vector<Eigen::MatrixXd> dmuT;
};

FluxReplay replay_flux(const CoefficientSet& cs, const LevyModel& lm,
                       const Eigen::VectorXd& x, const LawFlow& law,
                       const PathBundle& base, double s, double w,
                       const MalliavinOptions& opt, double gamma_floor) {
    std::vector<JumpEvent> evs;
    evs.reserve(base.jumps.size() + 1);
    std::size_t idx = 0;
    bool placed = false;
    for (const auto& j : base.jumps) {
        if (!placed && s < j.time) {
            idx = evs.size();
            evs.push_back({s, w});
            placed = true;
        }
        evs.push_back({j.time, j.mark});
    }
    if (!placed) {
        idx = evs.size();
        evs.push_back({s, w});
    }

    PathBundle aug = simulate_decoupled_with_events(cs, lm, x, law, evs);
    InsertionSpec ins{idx, w};
    Eigen::VectorXd iota;
    MalliavinPath mp = run_joint(cs, lm, aug, law, opt, &ins, &iota);
    const MalliavinState& ms = mp.nodes.back();

    FluxReplay r;
    if (!gamma_acceptable(ms.gamma, gamma_floor)) return r;
    r.ok = true;
    r.x_T = aug.states.back();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ms.gamma);
    r.row = (w * w) * ldlt.solve(iota).transpose();
    r.dxT = mp.dx_flow.back();
    if (!mp.dmu_flow.empty()) {
        r.dmuT.reserve(mp.dmu_flow.size());
        for (const auto& series : mp.dmu_flow) r.dmuT.push_back(series.back());
    }
    return r;
}

struct BoundarySpec {
    double mark;
    double prefactor;  // signed: +T k R0^{-1-a} at the outer pair, -T k eps^{-1-a} inner
};

std::vector<BoundarySpec> boundary_specs(const LevyModel& lm, double T) {
    const double outer = T * lm.k * std::pow(lm.R0, -1.0 - lm.alpha);
    const double inner = T * lm.k * std::pow(lm.eps, -1.0 - lm.alpha);
    return {{lm.R0, outer}, {-lm.R0, -outer}, {lm.eps, -inner}, {-lm.eps, inner}};
}

GradientEstimate estimate_gradient_core(const CoefficientSet& cs, const LevyModel& lm,
                                        const Eigen::VectorXd& x, const LawFlow& law,
                                        const DmuBank* bank, std::size_t v_index,
                                        const TerminalMap& f, const IbpParams& params,
                                        GradMode mode) {
    const int d = cs.dim;
    const double T = law.grid().back();
    const std::size_t n = static_cast<std::size_t>(params.n_paths);
    const std::size_t chunk = static_cast<std::size_t>(std::max(1, params.chunk));

    if (mode != GradMode::X) {
        if (!bank) fail(ErrorCode::EmptySampleSet, "mu-gradient needs a dmu bank");
        if (v_index >= bank->v_points.size())
            fail(ErrorCode::DimensionMismatch, "v_index out of range");
        if (mode == GradMode::DeltaX &&
            (bank->v_points[v_index] - x).lpNorm<Eigen::Infinity>() > 1e-9)
            fail(ErrorCode::ConfigError,
                 "delta_x mode requires the bank's v point to equal the start point x");
    }

    MalliavinOptions opt;
    opt.need_A = true;
    opt.need_weight_brackets = true;
    opt.bank = (mode == GradMode::X) ? nullptr : bank;
    opt.record_nodes = false;

    const std::uint64_t path_root = child_root(params.seed, 0xA110);
    const std::uint64_t time_root = child_root(params.seed, 0xA111);
    const auto bounds = boundary_specs(lm, T);

    struct Accum {
        std::vector<RunningStats> value, interior, flux;
        long rejected = 0;
    };
    std::vector<Accum> acc(n_chunks(n, chunk));
    for (auto& a : acc) {
        a.value.resize(static_cast<std::size_t>(d));
        a.interior.resize(static_cast<std::size_t>(d));
        a.flux.resize(static_cast<std::size_t>(d));
    }

    parallel_chunks(n, chunk, [&](std::size_t ci, std::size_t pb, std::size_t pe) {
        for (std::size_t p = pb; p < pe; ++p) {
            PathBundle bu = simulate_decoupled(cs, lm, x, law, path_root, p);
            MalliavinPath mp = run_joint(cs, lm, bu, law, opt, nullptr, nullptr);
            const MalliavinState& ms = mp.nodes.back();

            Eigen::VectorXd interior = Eigen::VectorXd::Zero(d);
            const bool ok = gamma_acceptable(ms.gamma, params.gamma_floor);
            if (ok) {
                Eigen::VectorXd Z;
                switch (mode) {
                    case GradMode::X: Z = weight_Z1(ms, mp.dx_flow.back()); break;
                    case GradMode::Mu:
                        Z = weight_Zmu1(ms, mp.dmu_flow[v_index].back(), v_index);
                        break;
                    case GradMode::DeltaX:
                        Z = weight_Z1(ms, mp.dx_flow.back()) +
                            weight_Zmu1(ms, mp.dmu_flow[v_index].back(), v_index);
                        break;
                }
                interior = f(bu.states.back()) * Z;
            } else {
                ++acc[ci].rejected;
            }

            Eigen::VectorXd flux = Eigen::VectorXd::Zero(d);
            if (params.boundary_correction) {
                auto rng = substream(time_root, p);
                std::uniform_real_distribution<double> unif(0.0, T);
                const double s = unif(rng);
                for (const auto& bs : bounds) {
                    FluxReplay fr =
                        replay_flux(cs, lm, x, law, bu, s, bs.mark, opt, params.gamma_floor);
                    if (!fr.ok) continue;
                    Eigen::RowVectorXd g;
                    switch (mode) {
                        case GradMode::X: g = fr.row * fr.dxT; break;
                        case GradMode::Mu: g = fr.row * fr.dmuT[v_index]; break;
                        case GradMode::DeltaX:
                            g = fr.row * (fr.dxT + fr.dmuT[v_index]);
                            break;
                    }
                    flux += bs.prefactor * f(fr.x_T) * g.transpose();
                }
            }

            for (int i = 0; i < d; ++i) {
                acc[ci].value[static_cast<std::size_t>(i)].add(interior(i) + flux(i));
                acc[ci].interior[static_cast<std::size_t>(i)].add(interior(i));
                acc[ci].flux[static_cast<std::size_t>(i)].add(flux(i));
            }
        }
    });

    GradientEstimate est;
    est.n_paths = params.n_paths;
    std::vector<RunningStats> value(static_cast<std::size_t>(d)),
        interior(static_cast<std::size_t>(d)), flux(static_cast<std::size_t>(d));
    for (const auto& a : acc) {
        est.n_rejected += a.rejected;
        for (int i = 0; i < d; ++i) {
            value[static_cast<std::size_t>(i)].merge(a.value[static_cast<std::size_t>(i)]);
            interior[static_cast<std::size_t>(i)].merge(a.interior[static_cast<std::size_t>(i)]);
            flux[static_cast<std::size_t>(i)].merge(a.flux[static_cast<std::size_t>(i)]);
        }
    }
    est.value.resize(d);
    est.std_error.resize(d);
    est.interior.resize(d);
    est.flux.resize(d);
    for (int i = 0; i < d; ++i) {
        est.value(i) = value[static_cast<std::size_t>(i)].mean();
        est.std_error(i) = value[static_cast<std::size_t>(i)].std_error();
        est.interior(i) = interior[static_cast<std::size_t>(i)].mean();
        est.flux(i) = flux[static_cast<std::size_t>(i)].mean();
    }
    return est;
}

} // namespace

GradientEstimate estimate_gradient_x(const CoefficientSet& cs, const LevyModel& lm,
                                     const Eigen::VectorXd& x, const LawFlow& law,
                                     const TerminalMap& f, const IbpParams& params) {
    return estimate_gradient_core(cs, lm, x, law, nullptr, 0, f, params, GradMode::X);
}

GradientEstimate estimate_gradient_mu(const CoefficientSet& cs, const LevyModel& lm,
                                      const Eigen::VectorXd& x, const LawFlow& law,
                                      const DmuBank& bank, std::size_t v_index,
                                      const TerminalMap& f, const IbpParams& params) {
    return estimate_gradient_core(cs, lm, x, law, &bank, v_index, f, params, GradMode::Mu);
}

GradientEstimate estimate_gradient_deltax(const CoefficientSet& cs, const LevyModel& lm,
                                          const Eigen::VectorXd& x, const LawFlow& law,
                                          const DmuBank& bank, std::size_t v_index,
                                          const TerminalMap& f, const IbpParams& params) {
    return estimate_gradient_core(cs, lm, x, law, &bank, v_index, f, params, GradMode::DeltaX);
}

DensityEstimate estimate_density_ibp(const CoefficientSet& cs, const LevyModel& lm,
                                     const Eigen::VectorXd& x, const LawFlow& law,
                                     const std::vector<double>& grid, const IbpParams& params) {
    if (cs.dim != 1)
        fail(ErrorCode::UnsupportedDimension, "density estimation is implemented for d = 1");
    if (grid.size() < 2) fail(ErrorCode::InvalidWindow, "density grid needs >= 2 points");
    const double T = law.grid().back();
    const std::size_t n = static_cast<std::size_t>(params.n_paths);
    const std::size_t chunk = static_cast<std::size_t>(std::max(1, params.chunk));
    const std::size_t ny = grid.size();

    MalliavinOptions opt;
    opt.need_A = true;
    opt.need_weight_brackets = true;
    opt.record_nodes = false;

    const std::uint64_t path_root = child_root(params.seed, 0xD301);
    const std::uint64_t time_root = child_root(params.seed, 0xD302);
    const auto bounds = boundary_specs(lm, T);

    struct Accum {
        std::vector<RunningStats> y;
        long rejected = 0;
    };
    std::vector<Accum> acc(n_chunks(n, chunk));
    for (auto& a : acc) a.y.resize(ny);

    parallel_chunks(n, chunk, [&](std::size_t ci, std::size_t pb, std::size_t pe) {
        std::vector<double> vals(ny);
        for (std::size_t p = pb; p < pe; ++p) {
            PathBundle bu = simulate_decoupled(cs, lm, x, law, path_root, p);
            MalliavinPath mp = run_joint(cs, lm, bu, law, opt, nullptr, nullptr);
            const MalliavinState& ms = mp.nodes.back();

            const bool ok = gamma_acceptable(ms.gamma, params.gamma_floor);
            double z2 = 0.0;
            if (ok)
                z2 = weight_Z2(ms)(0);
            else
                ++acc[ci].rejected;
            const double xT = bu.states.back()(0);
            for (std::size_t yi = 0; yi < ny; ++yi)
                vals[yi] = (ok && xT > grid[yi]) ? z2 : 0.0;

            if (params.boundary_correction) {
                auto rng = substream(time_root, p);
                std::uniform_real_distribution<double> unif(0.0, T);
                const double s = unif(rng);
                for (const auto& bs : bounds) {
                    FluxReplay fr =
                        replay_flux(cs, lm, x, law, bu, s, bs.mark, opt, params.gamma_floor);
                    if (!fr.ok) continue;
                    const double c = fr.row(0);  // w^2 * iota~ / Gamma~ (d = 1)
                    const double xa = fr.x_T(0);
                    for (std::size_t yi = 0; yi < ny; ++yi)
                        if (xa > grid[yi]) vals[yi] += bs.prefactor * c;
                }
            }
            for (std::size_t yi = 0; yi < ny; ++yi) acc[ci].y[yi].add(vals[yi]);
        }
    });

    DensityEstimate de;
    de.grid = grid;
    de.n_paths = params.n_paths;
    std::vector<RunningStats> tot(ny);
    for (const auto& a : acc) {
        de.n_rejected += a.rejected;
        for (std::size_t yi = 0; yi < ny; ++yi) tot[yi].merge(a.y[yi]);
    }
    de.p_hat.resize(ny);
    de.se.resize(ny);
    for (std::size_t yi = 0; yi < ny; ++yi) {
        de.p_hat[yi] = tot[yi].mean();
        de.se[yi] = tot[yi].std_error();
    }
    de.integral = trapezoid(de.grid, de.p_hat);
    return de;
}

GammaScalingReport gamma_inverse_moment_scaling(const CoefficientSet& cs, const LevyModel& lm,
                                                const Eigen::VectorXd& x, const LawFlow& law,
                                                double p, const std::vector<double>& t_grid,
                                                long n_paths, std::uint64_t seed) {
    if (t_grid.size() < 3)
        fail(ErrorCode::InsufficientDecades, "gamma scaling needs >= 3 time points");
    const double tmin = *std::min_element(t_grid.begin(), t_grid.end());
    const double tmax = *std::max_element(t_grid.begin(), t_grid.end());
    if (std::log10(tmax / tmin) < 1.5 - 1e-12)
        fail(ErrorCode::InsufficientDecades,
             "gamma scaling t-grid must span at least 1.5 decades");

    GammaScalingReport rep;
    rep.t_grid = t_grid;
    rep.theoretical_exponent = -p / lm.exponent_a();

    MalliavinOptions opt;
    opt.need_A = false;
    opt.need_weight_brackets = false;
    opt.record_nodes = false;

    const auto& g = law.grid();
    const std::size_t n = static_cast<std::size_t>(n_paths);

    for (std::size_t ti = 0; ti < t_grid.size(); ++ti) {
        const double t = t_grid[ti];
        auto it = std::find_if(g.begin(), g.end(),
                               [&](double gt) { return std::abs(gt - t) <= 1e-9; });
        if (it == g.end())
            fail(ErrorCode::InvalidWindow,
                 "gamma scaling time " + std::to_string(t) + " is not a law-flow node");
        const std::size_t cut = static_cast<std::size_t>(std::distance(g.begin(), it));

        auto sub_grid = std::make_shared<std::vector<double>>(g.begin(), g.begin() + cut + 1);
        std::vector<EmpiricalMeasure> sub_measures;
        sub_measures.reserve(cut + 1);
        for (std::size_t k = 0; k <= cut; ++k) sub_measures.push_back(law.at_node(k));
        LawFlow sub_law(sub_grid, std::move(sub_measures));

        const std::uint64_t root = child_root(seed, 0x6A00 + ti);
        struct Accum {
            RunningStats m;
            long zero = 0;
        };
        std::vector<Accum> acc(n_chunks(n, 256));
        parallel_chunks(n, 256, [&](std::size_t ci, std::size_t pb, std::size_t pe) {
            for (std::size_t pp = pb; pp < pe; ++pp) {
                PathBundle bu = simulate_decoupled(cs, lm, x, sub_law, root, pp);
                if (bu.jumps.empty()) {
                    ++acc[ci].zero;
                    acc[ci].m.add(0.0);
                    continue;
                }
                MalliavinPath mp = run_joint(cs, lm, bu, sub_law, opt, nullptr, nullptr);
                const double det = mp.nodes.back().gamma.determinant();
                // det == 0 with jumps present can only happen for d > 1 with
                // fewer than d jumps; fold it into the indicator
                acc[ci].m.add(det > 0.0 ? std::pow(det, -p) : 0.0);
            }
        });
        RunningStats tot;
        long zero = 0;
        for (const auto& a : acc) {
            tot.merge(a.m);
            zero += a.zero;
        }
        rep.moment.push_back(tot.mean());
        rep.moment_se.push_back(tot.std_error());
        rep.p_zero.push_back(static_cast<double>(zero) / static_cast<double>(n));
    }

    std::vector<double> lx, ly;
    for (std::size_t ti = 0; ti < t_grid.size(); ++ti)
        if (rep.moment[ti] > 0.0) {
            lx.push_back(std::log(t_grid[ti]));
            ly.push_back(std::log(rep.moment[ti]));
        }
    if (lx.size() >= 2) rep.fitted_exponent = linear_fit(lx, ly).slope;
    return rep;
}

} // namespace mvj
