#include "mvjump/levy.hpp"

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>

#include "mvjump/errors.hpp"
#include "mvjump/stats.hpp"

namespace mvj {

bool LevyModel::symmetric() const {
    // stable part is symmetric by construction; the finite part must pair up
    std::vector<FiniteAtom> pos, neg;
    for (const auto& a : finite_part) {
        if (a.rate == 0.0) continue;
        (a.location > 0 ? pos : neg).push_back(a);
    }
    if (pos.size() != neg.size()) return false;
    auto by_abs = [](const FiniteAtom& l, const FiniteAtom& r) {
        return std::abs(l.location) < std::abs(r.location);
    };
    std::sort(pos.begin(), pos.end(), by_abs);
    std::sort(neg.begin(), neg.end(), by_abs);
    for (std::size_t i = 0; i < pos.size(); ++i) {
        if (std::abs(pos[i].location + neg[i].location) > 1e-12 * std::abs(pos[i].location))
            return false;
        if (std::abs(pos[i].rate - neg[i].rate) > 1e-12 * pos[i].rate) return false;
    }
    return true;
}

double LevyModel::lambda_eps() const {
    double lam = 2.0 * k * (std::pow(eps, -alpha) - std::pow(R0, -alpha)) / alpha;
    for (const auto& a : finite_part)
        if (std::abs(a.location) >= eps) lam += a.rate;
    return lam;
}

double LevyModel::second_moment_rate() const {
    double s = 2.0 * k * (std::pow(R0, 2.0 - alpha) - std::pow(eps, 2.0 - alpha)) / (2.0 - alpha);
    for (const auto& a : finite_part)
        if (std::abs(a.location) >= eps) s += a.rate * a.location * a.location;
    return s;
}

void LevyModel::validate() const {
    if (!(alpha > 0.0 && alpha < 2.0))
        fail(ErrorCode::ConfigError, "levy.alpha must be in (0,2), got " + std::to_string(alpha));
    if (!(k > 0.0)) fail(ErrorCode::ConfigError, "levy.k must be > 0");
    if (!(R0 > 0.0)) fail(ErrorCode::ConfigError, "levy.R0 must be > 0");
    if (!(eps > 0.0 && eps < R0))
        fail(ErrorCode::ConfigError, "levy.eps must be in (0, R0)");
    for (const auto& a : finite_part) {
        if (a.rate < 0.0) fail(ErrorCode::ConfigError, "finite-part atom with negative rate");
        if (a.location == 0.0) fail(ErrorCode::ConfigError, "finite-part atom at 0");
        if (std::abs(a.location) > R0)
            fail(ErrorCode::ConfigError, "finite-part atom outside [-R0, R0]");
    }
}

double sample_mark(const LevyModel& lm, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double stable_rate = 2.0 * lm.k * (std::pow(lm.eps, -lm.alpha) - std::pow(lm.R0, -lm.alpha)) / lm.alpha;
    double total = lm.lambda_eps();
    double pick = unif(rng) * total;
    if (pick >= stable_rate) {
        // walk the finite atoms
        double acc = stable_rate;
        for (const auto& a : lm.finite_part) {
            if (std::abs(a.location) < lm.eps) continue;
            acc += a.rate;
            if (pick < acc) return a.location;
        }
        // fall through on round-off: last eligible atom
        for (auto it = lm.finite_part.rbegin(); it != lm.finite_part.rend(); ++it)
            if (std::abs(it->location) >= lm.eps) return it->location;
    }
    // inverse CDF of the truncated stable modulus
    double V = unif(rng);
    double ea = std::pow(lm.eps, -lm.alpha), ra = std::pow(lm.R0, -lm.alpha);
    double mod = std::pow(ea - V * (ea - ra), -1.0 / lm.alpha);
    return (unif(rng) < 0.5) ? mod : -mod;
}

std::vector<JumpEvent> sample_jumps(const LevyModel& lm, double t0, double t1,
                                    std::mt19937_64& rng) {
    if (!(t1 > t0)) fail(ErrorCode::InvalidWindow, "sample_jumps needs t1 > t0");
    double lam = lm.lambda_eps();
    std::poisson_distribution<long> pois(lam * (t1 - t0));
    long n = pois(rng);
    std::vector<JumpEvent> ev(static_cast<std::size_t>(n));
    std::uniform_real_distribution<double> unif(t0, t1);
    for (auto& e : ev) e.time = unif(rng);
    std::sort(ev.begin(), ev.end(),
              [](const JumpEvent& a, const JumpEvent& b) { return a.time < b.time; });
    for (auto& e : ev) e.mark = sample_mark(lm, rng);
    return ev;
}

double nu_integral(const LevyModel& lm, const std::function<double(double)>& phi, double lo_abs,
                   double hi_art) {
    double lo = std::max(lo_abs, 0.0), hi = std::min(hi_art, lm.R0);
    double out = 0.0;
    if (hi > lo && lo > 0.0) {
        boost::math::quadrature::gauss_kronrod<double, 61> quad;
        auto density = [&](double u) { return phi(u) * lm.k * std::pow(std::abs(u), -1.0 - lm.alpha); };
        double err1 = 0, err2 = 0;
        double pos = quad.integrate(density, lo, hi, 12, 1e-10, &err1);
        double neg = quad.integrate(density, -hi, -lo, 12, 1e-10, &err2);
        double scale = std::max(1.0, std::abs(pos) + std::abs(neg));
        if (err1 + err2 > 1e-6 * scale)
            fail(ErrorCode::QuadratureFailure,
                 "nu_integral error estimate " + std::to_string(err1 + err2));
        out = pos + neg;
    }
    for (const auto& a : lm.finite_part)
        if (std::abs(a.location) >= lo && std::abs(a.location) <= hi) out += a.rate * phi(a.location);
    return out;
}

Eigen::VectorXd compensator_drift(const LevyModel& lm, const CoefficientSet& cs,
                                  const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
    if (lm.symmetric() && cs.odd_in_u) return Eigen::VectorXd::Zero(cs.dim);
    Eigen::VectorXd out(cs.dim);
    for (int i = 0; i < cs.dim; ++i) {
        out(i) = nu_integral(
            lm, [&](double u) { return cs.c(x, u, mu)(i); }, lm.eps, lm.R0);
    }
    return out;
}

AssumptionALimit assumption_a_limit(const LevyModel& lm, const std::vector<double>& lambda_grid) {
    if (lambda_grid.size() < 4)
        fail(ErrorCode::InvalidWindow, "assumption_a_limit needs >= 4 lambda values");
    AssumptionALimit out;
    out.lambdas = lambda_grid;
    boost::math::quadrature::tanh_sinh<double> quad;
    for (double lam : lambda_grid) {
        // stable part without the eps cut; substitute w = u sqrt(lam) so the
        // integrand shape is lambda-independent (singularity at 0 is
        // integrable since e^{-w^2} - 1 ~ -w^2)
        // near 0 use expm1(-w^2) ~ -w^2 to avoid 0 * inf in floating point
        auto g = [&](double w) {
            if (w < 1e-8) return -std::pow(w, 1.0 - lm.alpha);
            return std::expm1(-w * w) * std::pow(w, -1.0 - lm.alpha);
        };
        double cap = lm.R0 * std::sqrt(lam);
        double v = 2.0 * lm.k * std::pow(lam, lm.alpha / 2.0) * quad.integrate(g, 0.0, cap, 1e-10);
        for (const auto& a : lm.finite_part)
            v += a.rate * std::expm1(-lam * a.location * a.location);
        out.values.push_back(v);
    }
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
        if (out.values[i] >= 0.0)
            fail(ErrorCode::NonConvergentLimit, "I(lambda) must be negative");
        lx.push_back(std::log(lambda_grid[i]));
        ly.push_back(std::log(-out.values[i]));
    }
    LinFit fit = linear_fit(lx, ly);
    if (std::abs(fit.slope_first_half - fit.slope_second_half) > 0.05)
        fail(ErrorCode::NonConvergentLimit,
             "slope drift " + std::to_string(fit.slope_first_half) + " -> " +
                 std::to_string(fit.slope_second_half));
    out.a_fit = fit.slope_second_half;  // asymptotic regime
    out.r1_fit = out.values.back() / std::pow(lambda_grid.back(), out.a_fit);
    return out;
}

} // namespace mvj
