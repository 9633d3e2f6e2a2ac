#include "mvjump/coefficients.hpp"

#include <cmath>
#include <random>

#include "mvjump/errors.hpp"
#include "mvjump/rng.hpp"

namespace mvj {

namespace {

// zero-mean, unit-variance bottom direction on r in [0,1]
inline double xi_bottom(double r) { return std::sqrt(3.0) * (2.0 * r - 1.0); }

Eigen::MatrixXd m1x1(double v) {
    Eigen::MatrixXd m(1, 1);
    m(0, 0) = v;
    return m;
}

Eigen::VectorXd v1(double v) {
    Eigen::VectorXd x(1);
    x(0) = v;
    return x;
}

} // namespace

MeasureFunctional MeasureFunctional::first_moment() {
    MeasureFunctional f;
    f.kind = Kind::FirstMoment;
    f.name = "m";
    f.evaluate = [](const EmpiricalMeasure& mu) { return mean_1d(mu); };
    f.lions_derivative = [](const EmpiricalMeasure&, const Eigen::VectorXd&) { return 1.0; };
    f.map_curvature = [](double) { return 0.0; };
    return f;
}

MeasureFunctional MeasureFunctional::scalar_of_moment(std::function<double(double)> F,
                                                      std::function<double(double)> Fprime,
                                                      std::string name,
                                                      std::function<double(double)> Fsecond) {
    MeasureFunctional f;
    f.kind = Kind::ScalarOfMoment;
    f.name = std::move(name);
    f.evaluate = [F](const EmpiricalMeasure& mu) { return F(mean_1d(mu)); };
    f.lions_derivative = [Fprime](const EmpiricalMeasure& mu, const Eigen::VectorXd&) {
        return Fprime(mean_1d(mu));
    };
    f.map_curvature = std::move(Fsecond);
    return f;
}

CoefficientSet builtin_linear_meanfield(double beta, double beta_bar, double sigma,
                                        double sigma_x, double sigma_m, double alpha) {
    CoefficientSet cs;
    cs.dim = 1;

    // local copies for capture
    const double be = beta, bb = beta_bar, sg = sigma, sx = sigma_x, sm = sigma_m, al = alpha;
    auto amp = [sg, sx, sm](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        return sg + sx * x(0) + sm * mean_1d(mu);
    };

    cs.b = [be, bb](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        return v1(be * x(0) + bb * mean_1d(mu));
    };
    cs.c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        return v1(amp(x, mu) * u);
    };
    cs.db_dx = [be](const Eigen::VectorXd&, const EmpiricalMeasure&) { return m1x1(be); };
    cs.dc_dx = [sx](const Eigen::VectorXd&, double u, const EmpiricalMeasure&) {
        return m1x1(sx * u);
    };
    cs.dmu_b = [bb](const Eigen::VectorXd&, const EmpiricalMeasure&, const Eigen::VectorXd&) {
        return m1x1(bb);
    };
    cs.dmu_c = [sm](const Eigen::VectorXd&, double u, const EmpiricalMeasure&,
                    const Eigen::VectorXd&) { return m1x1(sm * u); };
    cs.gamma_c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        double a = amp(x, mu);
        return m1x1(u * u * a * a);
    };
    cs.a_c = [amp, al](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        return v1(0.5 * (1.0 - al) * u * amp(x, mu));
    };
    cs.c_flat = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu, double r) {
        return v1(u * amp(x, mu) * xi_bottom(r));
    };
    cs.d2b_dx2 = [](const Eigen::VectorXd&, const EmpiricalMeasure&) {
        return std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Zero(1, 1)};
    };
    cs.d2c_dx2 = [](const Eigen::VectorXd&, double, const EmpiricalMeasure&) {
        return std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Zero(1, 1)};
    };
    cs.du_c = [amp](const Eigen::VectorXd& x, double, const EmpiricalMeasure& mu) {
        return v1(amp(x, mu));
    };
    cs.du_dc_dx = [sx](const Eigen::VectorXd&, double, const EmpiricalMeasure&) {
        return m1x1(sx);
    };
    cs.du_gamma_c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        double a = amp(x, mu);
        return m1x1(2.0 * u * a * a);
    };
    cs.dgamma_c_dx = [amp, sx](const Eigen::VectorXd& x, double u, const EmpiricalMeasure& mu) {
        double a = amp(x, mu);
        return std::vector<Eigen::MatrixXd>{m1x1(2.0 * u * u * a * sx)};
    };

    cs.odd_in_u = true;
    cs.measure_independent = (beta_bar == 0.0 && sigma_m == 0.0);
    cs.dmu_c_zero = (sigma_m == 0.0);
    cs.dmu_b_state_independent = true;
    cs.alpha_binding = alpha;

    cs.growth_meta.lip_x = std::abs(beta) + std::abs(sigma_x);
    cs.growth_meta.lip_mu = std::abs(beta_bar) + std::abs(sigma_m);
    cs.growth_meta.sigma_x_abs = std::abs(sigma_x);
    cs.growth_meta.jump_profile = "(|sigma| + |sigma_x||x| + |sigma_m||m|) |u|";
    cs.growth_meta.name = "linear_meanfield";
    return cs;
}

CoefficientSet builtin_nonlinear_bench(double beta, double beta_bar, double sigma, double kappa,
                                       double alpha) {
    CoefficientSet cs;
    cs.dim = 1;
    const double be = beta, bb = beta_bar, sg = sigma, ka = kappa, al = alpha;
    auto amp = [sg, ka](double x) { return sg * (1.0 + ka * std::cos(x)); };

    cs.b = [be, bb](const Eigen::VectorXd& x, const EmpiricalMeasure& mu) {
        return v1(be * std::sin(x(0)) + bb * mean_1d(mu));
    };
    cs.c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        return v1(amp(x(0)) * u);
    };
    cs.db_dx = [be](const Eigen::VectorXd& x, const EmpiricalMeasure&) {
        return m1x1(be * std::cos(x(0)));
    };
    cs.dc_dx = [sg, ka](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        return m1x1(-sg * ka * std::sin(x(0)) * u);
    };
    cs.dmu_b = [bb](const Eigen::VectorXd&, const EmpiricalMeasure&, const Eigen::VectorXd&) {
        return m1x1(bb);
    };
    cs.dmu_c = [](const Eigen::VectorXd&, double, const EmpiricalMeasure&,
                  const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(1, 1).eval(); };
    cs.gamma_c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        double a = amp(x(0));
        return m1x1(u * u * a * a);
    };
    cs.a_c = [amp, al](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        return v1(0.5 * (1.0 - al) * u * amp(x(0)));
    };
    cs.c_flat = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&, double r) {
        return v1(u * amp(x(0)) * xi_bottom(r));
    };
    cs.d2b_dx2 = [be](const Eigen::VectorXd& x, const EmpiricalMeasure&) {
        return std::vector<Eigen::MatrixXd>{m1x1(-be * std::sin(x(0)))};
    };
    cs.d2c_dx2 = [sg, ka](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        return std::vector<Eigen::MatrixXd>{m1x1(-sg * ka * std::cos(x(0)) * u)};
    };
    cs.du_c = [amp](const Eigen::VectorXd& x, double, const EmpiricalMeasure&) {
        return v1(amp(x(0)));
    };
    cs.du_dc_dx = [sg, ka](const Eigen::VectorXd& x, double, const EmpiricalMeasure&) {
        return m1x1(-sg * ka * std::sin(x(0)));
    };
    cs.du_gamma_c = [amp](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        double a = amp(x(0));
        return m1x1(2.0 * u * a * a);
    };
    cs.dgamma_c_dx = [amp, sg, ka](const Eigen::VectorXd& x, double u, const EmpiricalMeasure&) {
        double a = amp(x(0));
        return std::vector<Eigen::MatrixXd>{m1x1(2.0 * u * u * a * (-sg * ka * std::sin(x(0))))};
    };

    cs.odd_in_u = true;
    cs.measure_independent = (beta_bar == 0.0);
    cs.dmu_c_zero = true;
    cs.dmu_b_state_independent = true;
    cs.alpha_binding = alpha;

    cs.growth_meta.lip_x = std::abs(beta) + std::abs(sigma * kappa);
    cs.growth_meta.lip_mu = std::abs(beta_bar);
    cs.growth_meta.sigma_x_abs = std::abs(sigma * kappa);
    cs.growth_meta.jump_profile = "|sigma| (1 + |kappa|) |u|";
    cs.growth_meta.name = "nonlinear_bench";
    return cs;
}

// ---------------------------------------------------------------------------
// Finite-difference validation
// ---------------------------------------------------------------------------

namespace {

struct Worst {
    double rel = 0.0;
    Eigen::VectorXd point;

    void update(double fd, double closed, const Eigen::VectorXd& x) {
        double denom = std::max({1e-8, std::abs(fd), std::abs(closed)});
        double r = std::abs(fd - closed) / denom;
        if (r > rel) {
            rel = r;
            point = x;
        }
    }
};

} // namespace

ValidationReport validate_coefficients(const CoefficientSet& cs, int probes, std::uint64_t seed) {
    ValidationReport rep;
    const double fd_h = 1e-5;
    const int d = cs.dim;
    auto rng = substream(seed, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> umark(0.05, 1.0);
    std::bernoulli_distribution coin(0.5);

    // fixed probe cloud for the measure argument
    const int M = 64;
    std::vector<Eigen::VectorXd> cloud;
    cloud.reserve(M);
    for (int i = 0; i < M; ++i) {
        Eigen::VectorXd y(d);
        for (int j = 0; j < d; ++j) y(j) = gauss(rng);
        cloud.push_back(y);
    }
    EmpiricalMeasure mu = empirical_from_samples(cloud);

    Worst w_db, w_dc, w_dmub, w_dmuc, w_duc, w_dudc, w_dugc, w_dgcdx, w_d2b, w_d2c, w_gc, w_ac,
        w_cflat;

    for (int p = 0; p < probes; ++p) {
        Eigen::VectorXd x(d);
        for (int j = 0; j < d; ++j) x(j) = 1.5 * gauss(rng);
        double u = umark(rng) * (coin(rng) ? 1.0 : -1.0);

        // db_dx
        for (int j = 0; j < d; ++j) {
            Eigen::VectorXd xp = x, xm = x;
            xp(j) += fd_h;
            xm(j) -= fd_h;
            Eigen::VectorXd fd = (cs.b(xp, mu) - cs.b(xm, mu)) / (2 * fd_h);
            Eigen::MatrixXd cl = cs.db_dx(x, mu);
            for (int i = 0; i < d; ++i) w_db.update(fd(i), cl(i, j), x);
        }
        // dc_dx
        for (int j = 0; j < d; ++j) {
            Eigen::VectorXd xp = x, xm = x;
            xp(j) += fd_h;
            xm(j) -= fd_h;
            Eigen::VectorXd fd = (cs.c(xp, u, mu) - cs.c(xm, u, mu)) / (2 * fd_h);
            Eigen::MatrixXd cl = cs.dc_dx(x, u, mu);
            for (int i = 0; i < d; ++i) w_dc.update(fd(i), cl(i, j), x);
        }
        // dmu_b / dmu_c at a few atoms: bump atom in place, rescale by weight
        for (int a = 0; a < 4; ++a) {
            Eigen::Index atom = static_cast<Eigen::Index>(
                std::uniform_int_distribution<int>(0, M - 1)(rng));
            double wgt = mu.weight(atom);
            for (int l = 0; l < d; ++l) {
                Eigen::MatrixXd ptsp = mu.points(), ptsm = mu.points();
                ptsp(l, atom) += fd_h;
                ptsm(l, atom) -= fd_h;
                EmpiricalMeasure mup(ptsp, mu.weights()), mum(ptsm, mu.weights());
                Eigen::VectorXd fdb = (cs.b(x, mup) - cs.b(x, mum)) / (2 * fd_h * wgt);
                Eigen::MatrixXd clb = cs.dmu_b(x, mu, mu.atom(atom));
                for (int i = 0; i < d; ++i) w_dmub.update(fdb(i), clb(i, l), x);
                if (cs.dmu_c) {
                    Eigen::VectorXd fdc = (cs.c(x, u, mup) - cs.c(x, u, mum)) / (2 * fd_h * wgt);
                    Eigen::MatrixXd clc = cs.dmu_c(x, u, mu, mu.atom(atom));
                    for (int i = 0; i < d; ++i) w_dmuc.update(fdc(i), clc(i, l), x);
                }
            }
        }
        // mark derivatives
        if (cs.has_mark_derivatives()) {
            Eigen::VectorXd fdu = (cs.c(x, u + fd_h, mu) - cs.c(x, u - fd_h, mu)) / (2 * fd_h);
            Eigen::VectorXd clu = cs.du_c(x, u, mu);
            for (int i = 0; i < d; ++i) w_duc.update(fdu(i), clu(i), x);

            Eigen::MatrixXd fdudc =
                (cs.dc_dx(x, u + fd_h, mu) - cs.dc_dx(x, u - fd_h, mu)) / (2 * fd_h);
            Eigen::MatrixXd cludc = cs.du_dc_dx(x, u, mu);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) w_dudc.update(fdudc(i, j), cludc(i, j), x);

            Eigen::MatrixXd fdugc =
                (cs.gamma_c(x, u + fd_h, mu) - cs.gamma_c(x, u - fd_h, mu)) / (2 * fd_h);
            Eigen::MatrixXd clugc = cs.du_gamma_c(x, u, mu);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) w_dugc.update(fdugc(i, j), clugc(i, j), x);

            auto clgcdx = cs.dgamma_c_dx(x, u, mu);
            for (int k = 0; k < d; ++k) {
                Eigen::VectorXd xp = x, xm = x;
                xp(k) += fd_h;
                xm(k) -= fd_h;
                Eigen::MatrixXd fdg =
                    (cs.gamma_c(xp, u, mu) - cs.gamma_c(xm, u, mu)) / (2 * fd_h);
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j) w_dgcdx.update(fdg(i, j), clgcdx[static_cast<std::size_t>(k)](i, j), x);
            }
        }
        // second derivatives in x
        if (cs.has_second_derivatives()) {
            auto d2b = cs.d2b_dx2(x, mu);
            auto d2c = cs.d2c_dx2(x, u, mu);
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k) {
                    Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
                    xpp(j) += fd_h; xpp(k) += fd_h;
                    xpm(j) += fd_h; xpm(k) -= fd_h;
                    xmp(j) -= fd_h; xmp(k) += fd_h;
                    xmm(j) -= fd_h; xmm(k) -= fd_h;
                    Eigen::VectorXd fdb = (cs.b(xpp, mu) - cs.b(xpm, mu) - cs.b(xmp, mu) + cs.b(xmm, mu)) / (4 * fd_h * fd_h);
                    Eigen::VectorXd fdc = (cs.c(xpp, u, mu) - cs.c(xpm, u, mu) - cs.c(xmp, u, mu) + cs.c(xmm, u, mu)) / (4 * fd_h * fd_h);
                    for (int i = 0; i < d; ++i) {
                        // second-difference: absolute comparison (scale ~1)
                        double db_cl = d2b[static_cast<std::size_t>(i)](j, k);
                        double dc_cl = d2c[static_cast<std::size_t>(i)](j, k);
                        if (std::abs(fdb(i) - db_cl) > 5e-3) w_d2b.update(fdb(i), db_cl, x);
                        if (std::abs(fdc(i) - dc_cl) > 5e-3) w_d2c.update(fdc(i), dc_cl, x);
                    }
                }
        }
        // gamma_c consistency with du_c: gamma = u^2 du_c du_c^T
        if (cs.du_c) {
            Eigen::VectorXd cu = cs.du_c(x, u, mu);
            Eigen::MatrixXd expect = u * u * cu * cu.transpose();
            Eigen::MatrixXd got = cs.gamma_c(x, u, mu);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) w_gc.update(expect(i, j), got(i, j), x);
        }
        // a_c consistency: a = (u^2 c_uu + (1-alpha) u c_u)/2 (FD in u)
        {
            Eigen::VectorXd cuu = (cs.c(x, u + fd_h, mu) - 2 * cs.c(x, u, mu) + cs.c(x, u - fd_h, mu)) / (fd_h * fd_h);
            Eigen::VectorXd cu = (cs.c(x, u + fd_h, mu) - cs.c(x, u - fd_h, mu)) / (2 * fd_h);
            Eigen::VectorXd expect =
                0.5 * (u * u * cuu + (1.0 - cs.alpha_binding) * u * cu);
            Eigen::VectorXd got = cs.a_c(x, u, mu);
            for (int i = 0; i < d; ++i) w_ac.update(expect(i), got(i), x);
        }
        // c_flat consistency: mean zero, second moment = gamma_c
        if (cs.c_flat) {
            const int nq = 256;
            Eigen::VectorXd m1 = Eigen::VectorXd::Zero(d);
            Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
            for (int q = 0; q < nq; ++q) {
                double r = (q + 0.5) / nq;
                Eigen::VectorXd cf = cs.c_flat(x, u, mu, r);
                m1 += cf / nq;
                m2 += cf * cf.transpose() / nq;
            }
            Eigen::MatrixXd gc = cs.gamma_c(x, u, mu);
            for (int i = 0; i < d; ++i) {
                w_cflat.update(m1(i), 0.0, x);
                for (int j = 0; j < d; ++j) w_cflat.update(m2(i, j), gc(i, j), x);
            }
        }
    }

    auto push = [&](const char* field, const Worst& w) {
        ValidationReport::Entry e;
        e.field = field;
        e.max_rel_error = w.rel;
        e.worst_point = w.point;
        rep.entries.push_back(std::move(e));
    };
    push("db_dx", w_db);
    push("dc_dx", w_dc);
    push("dmu_b", w_dmub);
    push("dmu_c", w_dmuc);
    push("du_c", w_duc);
    push("du_dc_dx", w_dudc);
    push("du_gamma_c", w_dugc);
    push("dgamma_c_dx", w_dgcdx);
    push("d2b_dx2", w_d2b);
    push("d2c_dx2", w_d2c);
    push("gamma_c", w_gc);
    push("a_c", w_ac);
    push("c_flat", w_cflat);

    rep.pass = true;
    for (const auto& e : rep.entries)
        if (e.max_rel_error > rep.tolerance) rep.pass = false;
    if (!rep.pass) {
        std::string msg = "coefficient derivatives disagree with finite differences:";
        for (const auto& e : rep.entries)
            if (e.max_rel_error > rep.tolerance)
                msg += " " + e.field + " (rel " + std::to_string(e.max_rel_error) + ")";
        fail(ErrorCode::DerivativeMismatch, msg);
    }
    return rep;
}

} // namespace mvj
