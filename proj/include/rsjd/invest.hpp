#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/fbsdep.hpp"
#include "rsjd/grid.hpp"
#include "rsjd/model.hpp"
#include "rsjd/noise.hpp"
#include "rsjd/regression.hpp"

// Risk-sensitive investment on a stock/factor market with jumps. The module
// simulates the market under the physical measure, rebuilds the control
// system under the reference measure (where the log stock price is driftless),
// solves the quadratic-exponential value recursion on the (factor, log-wealth)
// pair, constructs the multiplier family r / p / alpha / eta, and verifies the
// identities that tie the two adjoint routes together.

namespace rsjd {

// Two Brownian drivers shared by stock and factor, one jump measure whose
// marks only carry intensity: the jump sizes sjump (multiplicative, stock and
// wealth) and ljump (additive, factor) are constants.
struct MarketParams {
    double a1 = 0.05, A1 = 0.1;   // stock drift a1 + A1 x
    double a2 = 0.02, A2 = -0.3;  // factor drift a2 + A2 x
    double sig1 = 0.2, sig2 = 0.05;
    double lam1 = 0.05, lam2 = 0.15;
    double sjump = -0.15; // stock jump: dS/S- picks up sjump per event
    double ljump = 0.05;  // factor jump: X picks up ljump per event
    MarkSpace marks{{1.0}, {1.0}};
    double s0 = 1.0, x0 = 0.5, v0 = 1.0;
    double theta = 0.5;

    // filled by finalize()
    double ss = 0.0;      // sigma sigma^T
    double lam_sig = 0.0; // Lambda sigma^T / (sigma sigma^T)
    double a3 = 0.0;      // driftless-log-price intercept
    double a4 = 0.0, A4 = 0.0; // factor drift under the reference measure

    void finalize() {
        ss = sig1 * sig1 + sig2 * sig2;
        require(ss > 0.0, "MarketParams: sigma sigma^T must be positive");
        require(1.0 + sjump > 0.0, "MarketParams: stock jump factor must stay positive");
        require(marks.size() >= 1, "MarketParams: at least one jump atom");
        require(theta > 0.0, "MarketParams: theta must be positive");
        require(v0 > 0.0 && s0 > 0.0, "MarketParams: initial stock and wealth must be positive");
        double nu = marks.total_mass();
        a3 = a1 - 0.5 * ss + (std::log1p(sjump) - sjump) * nu;
        lam_sig = (lam1 * sig1 + lam2 * sig2) / ss;
        a4 = a2 - lam_sig * a3;
        A4 = A2 - lam_sig * A1;
    }

    // Loadings that absorb the observable drift into the Brownian drivers.
    double c1(double x) const { return sig1 * (a3 + A1 * x) / ss; }
    double c2(double x) const { return sig2 * (a3 + A1 * x) / ss; }
    double nu_total() const { return marks.total_mass(); }
};

inline MarketParams default_market() {
    MarketParams mp;
    mp.finalize();
    return mp;
}

// One jump measure feeds the market; the second driver slot is an inert
// placeholder so the shared noise streams can be reused unchanged.
inline PathEnsemble market_ensemble(const MarketParams& mp, double T, std::size_t steps,
                                    std::size_t paths, std::uint64_t seed) {
    return PathEnsemble(TimeGrid(T, steps), mp.marks, MarkSpace({0.0}, {1e-300}), paths, seed);
}

namespace iv {

inline double strategy_at(const ControlPolicy& pol, const MarketParams& mp, double t, double Yv,
                          bool jump) {
    ObsFeatures f;
    f.t = t;
    f.Y = Yv;
    f.jump_in_step = jump;
    double u = pol.eval(f);
    if (!(u >= 0.0))
        throw ConfigError("investment strategy must be nonnegative (got u=" + std::to_string(u) +
                          " at t=" + std::to_string(t) + ")");
    if (1.0 + u * mp.sjump <= 0.0)
        throw ConfigError("inadmissible strategy: wealth jump factor 1+u*sjump <= 0 at u=" +
                          std::to_string(u));
    return u;
}

} // namespace iv

struct MarketPaths {
    PathMatrix lnS; // log of the multiplicatively simulated stock
    PathMatrix X;   // factor
    PathMatrix lnV; // log wealth
    PathMatrix Y;   // log price integrated from its own dynamics
    // per-path sup-node |lnS - Y|, averaged over paths: the discretization
    // gap between the two log-price routes
    double log_gap = 0.0;
};

// Physical-measure simulation: stock and wealth advance multiplicatively with
// exact jump factors, the factor by Euler steps, the log price additionally by
// its own equation as a cross-check.
inline MarketPaths simulate_market(const MarketParams& mp, const PathEnsemble& ens,
                                   const ControlPolicy& pol) {
    const TimeGrid& g = ens.grid;
    std::size_t N = g.n_steps, n = ens.n_paths, na = mp.marks.size();
    MarketPaths out;
    out.lnS.init(N + 1, n);
    out.X.init(N + 1, n);
    out.lnV.init(N + 1, n);
    out.Y.init(N + 1, n);
    double nu = mp.nu_total(), dt = g.dt;
    double lj = std::log1p(mp.sjump);
    std::vector<double> gap(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double lnS = std::log(mp.s0), x = mp.x0, lnV = std::log(mp.v0), y = std::log(mp.s0);
        out.lnS.at(0, p) = lnS;
        out.X.at(0, p) = x;
        out.lnV.at(0, p) = lnV;
        out.Y.at(0, p) = y;
        for (std::size_t k = 0; k < N; ++k) {
            double t = g.node(k);
            double dw1 = pn.dW1(k), dw2 = pn.dW2(k);
            int dn = 0;
            for (std::size_t j = 0; j < na; ++j) dn += pn.dN1(k, j);
            double u = iv::strategy_at(pol, mp, t, y, dn > 0);
            double z = (mp.a1 + mp.A1 * x) * dt + mp.sig1 * dw1 + mp.sig2 * dw2 -
                       mp.sjump * nu * dt;
            if (1.0 + z <= 0.0)
                throw SolverError("stock positivity violated at t=" + std::to_string(t));
            if (1.0 + u * z <= 0.0)
                throw SolverError("wealth positivity violated by strategy u=" +
                                  std::to_string(u) + " at t=" + std::to_string(t));
            lnS += std::log1p(z) + lj * dn;
            lnV += std::log1p(u * z) + std::log1p(u * mp.sjump) * dn;
            y += (mp.a3 + mp.A1 * x) * dt + mp.sig1 * dw1 + mp.sig2 * dw2 + lj * (dn - nu * dt);
            x += (mp.a2 + mp.A2 * x) * dt + mp.lam1 * dw1 + mp.lam2 * dw2 +
                 mp.ljump * (dn - nu * dt);
            out.lnS.at(k + 1, p) = lnS;
            out.X.at(k + 1, p) = x;
            out.lnV.at(k + 1, p) = lnV;
            out.Y.at(k + 1, p) = y;
            gap[p] = std::max(gap[p], std::abs(lnS - y));
        }
    }
    out.log_gap = mean(gap);
    return out;
}

struct InvestForward {
    PathMatrix X;   // factor under the reference measure
    PathMatrix lnV; // log wealth under the reference measure
    PathMatrix Y;   // driftless log price (the observation)
};

// Reference-measure forward system: the log price loses its drift, the factor
// drift becomes a4 + A4 x, and wealth carries the premium a1 - a3.
inline InvestForward transformed_forward(const MarketParams& mp, const PathEnsemble& ens,
                                         const ControlPolicy& pol) {
    const TimeGrid& g = ens.grid;
    std::size_t N = g.n_steps, n = ens.n_paths, na = mp.marks.size();
    InvestForward out;
    out.X.init(N + 1, n);
    out.lnV.init(N + 1, n);
    out.Y.init(N + 1, n);
    double nu = mp.nu_total(), dt = g.dt;
    double lj = std::log1p(mp.sjump);
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double x = mp.x0, lnV = std::log(mp.v0), y = std::log(mp.s0);
        out.X.at(0, p) = x;
        out.lnV.at(0, p) = lnV;
        out.Y.at(0, p) = y;
        for (std::size_t k = 0; k < N; ++k) {
            double t = g.node(k);
            double dw1 = pn.dW1(k), dw2 = pn.dW2(k);
            int dn = 0;
            for (std::size_t j = 0; j < na; ++j) dn += pn.dN1(k, j);
            double u = iv::strategy_at(pol, mp, t, y, dn > 0);
            double z = (mp.a1 - mp.a3) * dt + mp.sig1 * dw1 + mp.sig2 * dw2 - mp.sjump * nu * dt;
            if (1.0 + u * z <= 0.0)
                throw SolverError("wealth positivity violated by strategy u=" +
                                  std::to_string(u) + " at t=" + std::to_string(t));
            lnV += std::log1p(u * z) + std::log1p(u * mp.sjump) * dn;
            y += mp.sig1 * dw1 + mp.sig2 * dw2 + lj * (dn - nu * dt);
            x += (mp.a4 + mp.A4 * x) * dt + mp.lam1 * dw1 + mp.lam2 * dw2 +
                 mp.ljump * (dn - nu * dt);
            out.X.at(k + 1, p) = x;
            out.lnV.at(k + 1, p) = lnV;
            out.Y.at(k + 1, p) = y;
        }
    }
    return out;
}

struct InvestConfig {
    int degree = 2;        // total degree of the (X, lnV) basis
    double ridge = 1e-8;
    double kappa_cap = 10.0; // clamp on theta*kappa-tilde inside exponentials
    std::size_t scan_lag = 5; // lag for the observation-feature pair
};

struct ZetaNode {
    RegressionTable val, k1, k2;
    std::vector<RegressionTable> kt; // one per jump atom
};

struct InvestValue {
    std::vector<ZetaNode> nodes; // size N+1; node N carries no tables
    PathMatrix zeta;
    double zeta0 = 0.0;
    double dispersion0 = 0.0;
    std::size_t clamp_events = 0, clamp_evals = 0;
    double clamp_fraction() const {
        return clamp_evals ? double(clamp_events) / double(clamp_evals) : 0.0;
    }
};

// Backward quadratic-exponential recursion for the certainty-equivalent value
// on the state pair (X, lnV): terminal -lnV_T, generator
//   theta/2 |kappa|^2 + sum_j (e^{theta kt_j} - theta kt_j - 1)/theta nu_j
//   + c(X) . kappa.
inline InvestValue solve_invest_value(const MarketParams& mp, const PathEnsemble& ens,
                                      const InvestForward& fwd, const InvestConfig& cfg = {}) {
    const TimeGrid& g = ens.grid;
    std::size_t N = g.n_steps, n = ens.n_paths, na = mp.marks.size();
    double dt = g.dt, th = mp.theta;
    InvestValue out;
    out.nodes.resize(N + 1);
    out.zeta.init(N + 1, n);
    std::vector<double> v(n), dw1(n), dw2(n);
    std::vector<std::vector<double>> dtn(na, std::vector<double>(n));
    for (std::size_t p = 0; p < n; ++p) v[p] = -fwd.lnV.at(N, p);
    for (std::size_t p = 0; p < n; ++p) out.zeta.at(N, p) = v[p];
    double cap = cfg.kappa_cap;
    for (std::size_t k = N; k-- > 0;) {
        for (std::size_t p = 0; p < n; ++p) {
            PathNoise pn(ens, p);
            dw1[p] = pn.dW1(k);
            dw2[p] = pn.dW2(k);
            for (std::size_t j = 0; j < na; ++j) dtn[j][p] = pn.dTilde1(k, j);
        }
        StepFit fit(fwd.X.row(k), fwd.lnV.row(k), n, cfg.degree, cfg.ridge);
        ZetaNode& nd = out.nodes[k];
        nd.val = fit.fit(v.data());
        nd.k1 = fit.fit_increment(v.data(), nd.val, dw1.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        nd.k2 = fit.fit_increment(v.data(), nd.val, dw2.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        nd.kt.resize(na);
        for (std::size_t j = 0; j < na; ++j)
            nd.kt[j] = fit.fit_increment(v.data(), nd.val, dtn[j].data(), mp.marks.weights[j] * dt,
                                         fwd.X.row(k), fwd.lnV.row(k));
        for (std::size_t p = 0; p < n; ++p) {
            double x = fwd.X.at(k, p), w = fwd.lnV.at(k, p);
            double ka = nd.k1.eval(x, w), kb = nd.k2.eval(x, w);
            double gen = 0.5 * th * (ka * ka + kb * kb) + mp.c1(x) * ka + mp.c2(x) * kb;
            for (std::size_t j = 0; j < na; ++j) {
                double kt = nd.kt[j].eval(x, w);
                ++out.clamp_evals;
                double a = th * kt;
                if (a > cap || a < -cap) {
                    a = std::clamp(a, -cap, cap);
                    ++out.clamp_events;
                }
                gen += (std::expm1(a) - a) / th * mp.marks.weights[j];
            }
            v[p] = nd.val.eval(x, w) + dt * gen;
            out.zeta.at(k, p) = v[p];
        }
    }
    MeanVar z0 = mean_var(std::vector<double>(out.zeta.row(0), out.zeta.row(0) + n));
    out.zeta0 = z0.mean;
    out.dispersion0 = std::sqrt(z0.var);
    require(finite(out.zeta0), "solve_invest_value: value recursion diverged");
    return out;
}

struct InvestAdjoints {
    PathMatrix r;                    // Doleans density of the candidate tilt
    PathMatrix p, q1, q2;            // first multiplier and its Brownian loads
    std::vector<PathMatrix> qt;      // jump loads of p, one per atom
    PathMatrix alpha, beta1, beta2;  // normalized multiplier (backward route)
    std::vector<PathMatrix> bt;      // jump loads of alpha
    PathMatrix eta;                  // explicit-form state multiplier
    PathMatrix alpha_exp;            // alpha from the closed form, full-state features
    PathMatrix alpha_obs;            // same target conditioned on observation features
    double eta_min = 0.0;
    double r_mean_T = 0.0, r_se_T = 0.0;
};

namespace iv {

// Per-step candidate data shared by every multiplier solve: the tilt vector
// b = theta*kappa + c(X), the per-atom theta*kappa-tilde (clamped like the
// value solve), and the strategy value.
struct StepLocal {
    std::vector<double> b1, b2, u;
    std::vector<std::vector<double>> tkt; // [atom][path]
    void resize(std::size_t na, std::size_t n) {
        b1.assign(n, 0.0);
        b2.assign(n, 0.0);
        u.assign(n, 0.0);
        tkt.assign(na, std::vector<double>(n, 0.0));
    }
};

inline void fill_step_local(const MarketParams& mp, const InvestForward& fwd,
                            const InvestValue& val, const ControlPolicy& pol,
                            const PathEnsemble& ens, std::size_t k, double cap, StepLocal& sl) {
    std::size_t n = ens.n_paths, na = mp.marks.size();
    const ZetaNode& nd = val.nodes[k];
    double t = ens.grid.node(k), th = mp.theta;
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double x = fwd.X.at(k, p), w = fwd.lnV.at(k, p);
        sl.b1[p] = th * nd.k1.eval(x, w) + mp.c1(x);
        sl.b2[p] = th * nd.k2.eval(x, w) + mp.c2(x);
        sl.u[p] = strategy_at(pol, mp, t, fwd.Y.at(k, p), pn.any_jump(k));
        for (std::size_t j = 0; j < na; ++j)
            sl.tkt[j][p] = std::clamp(th * nd.kt[j].eval(x, w), -cap, cap);
    }
}

} // namespace iv

// Multiplier family at a candidate strategy: the forward density r, the
// backward pair (p, q) solved on r-normalized targets, the normalized
// multiplier (alpha, beta) solved directly, the explicit eta, and the closed
// form for alpha evaluated under both the full-state and the observation
// conditionings.
inline InvestAdjoints solve_invest_adjoints(const MarketParams& mp, const PathEnsemble& ens,
                                            const InvestForward& fwd, const InvestValue& val,
                                            const ControlPolicy& pol,
                                            const InvestConfig& cfg = {}) {
    const TimeGrid& g = ens.grid;
    std::size_t N = g.n_steps, n = ens.n_paths, na = mp.marks.size();
    double dt = g.dt, th = mp.theta, nu = mp.nu_total();
    (void)nu;
    InvestAdjoints out;
    out.r.init(N + 1, n, 1.0);
    out.eta.init(N + 1, n, 1.0);
    out.p.init(N + 1, n);
    out.q1.init(N + 1, n);
    out.q2.init(N + 1, n);
    out.qt.assign(na, {});
    for (auto& m : out.qt) m.init(N + 1, n);
    out.alpha.init(N + 1, n);
    out.beta1.init(N + 1, n);
    out.beta2.init(N + 1, n);
    out.bt.assign(na, {});
    for (auto& m : out.bt) m.init(N + 1, n);
    out.alpha_exp.init(N + 1, n);
    out.alpha_obs.init(N + 1, n);

    double cap = cfg.kappa_cap;
    iv::StepLocal sl;
    sl.resize(na, n);
    out.eta_min = 1.0;

    // forward sweep: r and eta share the per-step candidate data
    for (std::size_t k = 0; k < N; ++k) {
        iv::fill_step_local(mp, fwd, val, pol, ens, k, cap, sl);
        for (std::size_t p = 0; p < n; ++p) {
            PathNoise pn(ens, p);
            double dw1 = pn.dW1(k), dw2 = pn.dW2(k);
            double b1 = sl.b1[p], b2 = sl.b2[p], u = sl.u[p];
            double le = b1 * dw1 + b2 * dw2 - 0.5 * (b1 * b1 + b2 * b2) * dt;
            double B2a = u * mp.sig1 + b1, B2b = u * mp.sig2 + b2;
            // the strategy-tilt cross term u sigma.(theta kappa + c) is what
            // makes alpha eta a martingale against the alpha driver
            double B1 = u * (mp.a1 - mp.a3) + u * (mp.sig1 * b1 + mp.sig2 * b2);
            double lb = B2a * dw1 + B2b * dw2 - 0.5 * (B2a * B2a + B2b * B2b) * dt;
            for (std::size_t j = 0; j < na; ++j) {
                double nuj = mp.marks.weights[j];
                double ex = std::expm1(sl.tkt[j][p]); // e^{theta kt} - 1
                int dn = pn.dN1(k, j);
                le += sl.tkt[j][p] * dn - ex * nuj * dt;
                double B3 = mp.sjump * u + ex * (mp.sjump * u + 1.0);
                if (1.0 + B3 <= 0.0)
                    throw SolverError("explicit multiplier form breaks down: 1+B3 <= 0 at t=" +
                                      std::to_string(g.node(k)));
                B1 += ex * mp.sjump * u * nuj;
                lb += std::log1p(B3) * dn - B3 * nuj * dt;
            }
            lb += B1 * dt;
            out.r.at(k + 1, p) = out.r.at(k, p) * std::exp(le);
            double e = out.eta.at(k, p) * std::exp(lb);
            out.eta.at(k + 1, p) = e;
            if (e < out.eta_min) out.eta_min = e;
        }
    }
    {
        MeanVar mv = mean_var(std::vector<double>(out.r.row(N), out.r.row(N) + n));
        out.r_mean_T = mv.mean;
        out.r_se_T = mv.stderr_;
    }

    // terminal conditions
    std::vector<double> pv(n), av(n), U(n);
    for (std::size_t p = 0; p < n; ++p) {
        double ivT = std::exp(-fwd.lnV.at(N, p));
        pv[p] = -out.r.at(N, p) * ivT;
        av[p] = -ivT;
        out.p.at(N, p) = pv[p];
        out.alpha.at(N, p) = av[p];
        out.alpha_exp.at(N, p) = av[p];
        out.alpha_obs.at(N, p) = av[p];
    }

    std::vector<double> dw1(n), dw2(n), tgt(n), feat2(n);
    std::vector<std::vector<double>> dtn(na, std::vector<double>(n));
    std::size_t lag = std::max<std::size_t>(1, cfg.scan_lag);

    // backward sweep: p on r-normalized targets, alpha directly; the explicit
    // closed form for alpha is fit per node from the terminal sample
    for (std::size_t k = N; k-- > 0;) {
        iv::fill_step_local(mp, fwd, val, pol, ens, k, cap, sl);
        for (std::size_t p = 0; p < n; ++p) {
            PathNoise pn(ens, p);
            dw1[p] = pn.dW1(k);
            dw2[p] = pn.dW2(k);
            for (std::size_t j = 0; j < na; ++j) dtn[j][p] = pn.dTilde1(k, j);
        }
        StepFit fit(fwd.X.row(k), fwd.lnV.row(k), n, cfg.degree, cfg.ridge);

        // p: regress p_{k+1}/r_k so the conditional means stay functions of
        // the state pair even though p itself scales with the density
        for (std::size_t p = 0; p < n; ++p) U[p] = pv[p] / out.r.at(k, p);
        RegressionTable Uhat = fit.fit(U.data());
        RegressionTable Q1 =
            fit.fit_increment(U.data(), Uhat, dw1.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        RegressionTable Q2 =
            fit.fit_increment(U.data(), Uhat, dw2.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        std::vector<RegressionTable> Qt(na);
        for (std::size_t j = 0; j < na; ++j)
            Qt[j] = fit.fit_increment(U.data(), Uhat, dtn[j].data(), mp.marks.weights[j] * dt,
                                      fwd.X.row(k), fwd.lnV.row(k));

        // alpha: plain state-pair regression
        RegressionTable Ahat = fit.fit(av.data());
        RegressionTable Bt1 =
            fit.fit_increment(av.data(), Ahat, dw1.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        RegressionTable Bt2 =
            fit.fit_increment(av.data(), Ahat, dw2.data(), dt, fwd.X.row(k), fwd.lnV.row(k));
        std::vector<RegressionTable> Btj(na);
        for (std::size_t j = 0; j < na; ++j)
            Btj[j] = fit.fit_increment(av.data(), Ahat, dtn[j].data(), mp.marks.weights[j] * dt,
                                       fwd.X.row(k), fwd.lnV.row(k));

        for (std::size_t p = 0; p < n; ++p) {
            double x = fwd.X.at(k, p), w = fwd.lnV.at(k, p);
            double rk = out.r.at(k, p), u = sl.u[p];
            double b1 = sl.b1[p], b2 = sl.b2[p];
            double q1 = rk * Q1.eval(x, w), q2 = rk * Q2.eval(x, w);
            double iqt = 0.0;
            for (std::size_t j = 0; j < na; ++j) {
                double qt = rk * Qt[j].eval(x, w);
                out.qt[j].at(k, p) = qt;
                iqt += qt * mp.marks.weights[j];
            }
            double ph = rk * Uhat.eval(x, w);
            double pk = (ph + dt * u * (mp.sig1 * q1 + mp.sig2 * q2 + mp.sjump * iqt)) /
                        (1.0 - dt * u * (mp.a1 - mp.a3));
            out.p.at(k, p) = pk;
            out.q1.at(k, p) = q1;
            out.q2.at(k, p) = q2;
            pv[p] = pk;

            double be1 = Bt1.eval(x, w), be2 = Bt2.eval(x, w);
            double lin = u * (mp.a1 - mp.a3) + u * (mp.sig1 * b1 + mp.sig2 * b2);
            double cst = u * (mp.sig1 * be1 + mp.sig2 * be2) + be1 * b1 + be2 * b2;
            for (std::size_t j = 0; j < na; ++j) {
                double nuj = mp.marks.weights[j];
                double ex = std::expm1(sl.tkt[j][p]);
                double btj = Btj[j].eval(x, w);
                out.bt[j].at(k, p) = btj;
                lin += ex * mp.sjump * u * nuj;
                cst += (u * mp.sjump * btj + ex * (mp.sjump * u * btj + btj)) * nuj;
            }
            double ak = (Ahat.eval(x, w) + dt * cst) / (1.0 - dt * lin);
            out.alpha.at(k, p) = ak;
            out.beta1.at(k, p) = be1;
            out.beta2.at(k, p) = be2;
            av[p] = ak;
        }

        // closed form: alpha_t = eta_t^{-1} E[-eta_T / V_T | .], regressed on
        // the state pair and, separately, on observation features
        for (std::size_t p = 0; p < n; ++p)
            tgt[p] = -(out.eta.at(N, p) / out.eta.at(k, p)) * std::exp(-fwd.lnV.at(N, p));
        RegressionTable Ex = fit.fit(tgt.data());
        std::size_t kl = k >= lag ? k - lag : 0;
        for (std::size_t p = 0; p < n; ++p) feat2[p] = fwd.Y.at(k, p) - fwd.Y.at(kl, p);
        StepFit ofit(fwd.Y.row(k), feat2.data(), n, cfg.degree, cfg.ridge);
        RegressionTable Eo = ofit.fit(tgt.data());
        for (std::size_t p = 0; p < n; ++p) {
            out.alpha_exp.at(k, p) = Ex.eval(fwd.X.at(k, p), fwd.lnV.at(k, p));
            out.alpha_obs.at(k, p) = Eo.eval(fwd.Y.at(k, p), feat2[p]);
        }
    }
    return out;
}

struct InvestReport {
    double u = 0.0; // constant strategy value when the policy is constant
    double zeta0 = 0.0, dispersion0 = 0.0;
    double r_mean_T = 0.0, r_se_T = 0.0;
    double eta_min = 0.0;
    double rel_p_alpha_r = 0.0;  // sup-node mean |p - alpha r|, normalized
    double rel_q = 0.0;          // same for the Brownian-load identity
    double alpha_two_way = 0.0;  // backward route vs closed form, normalized
    double alpha_cond_gap = 0.0; // full-state vs observation conditioning
    double resid_mean = 0.0;     // signed time-average of the optimality residual
    double resid_sup = 0.0;      // sup-node |mean| of the same residual
    double resid_raw_mean = 0.0; // residual assembled from (p, q) instead of (alpha, beta)
    double resid_fs_sup = 0.0;   // sup-node max |fitted| under observation conditioning
    std::size_t clamp_events = 0;
};

// Identity checks at a candidate strategy: p = alpha r, the Brownian-load
// relation q = (theta kappa + c) alpha r + beta r, agreement of the two alpha
// routes, and the optimality residual E[(alpha (a1-a3) + sigma . beta) r V].
inline InvestReport verify_relations(const MarketParams& mp, const PathEnsemble& ens,
                                     const InvestForward& fwd, const InvestValue& val,
                                     const InvestAdjoints& adj, const ControlPolicy& pol,
                                     const InvestConfig& cfg = {}) {
    const TimeGrid& g = ens.grid;
    std::size_t N = g.n_steps, n = ens.n_paths;
    InvestReport rep;
    rep.u = pol.kind == ControlPolicy::Kind::Constant
                ? pol.constant
                : std::numeric_limits<double>::quiet_NaN();
    rep.zeta0 = val.zeta0;
    rep.dispersion0 = val.dispersion0;
    rep.r_mean_T = adj.r_mean_T;
    rep.r_se_T = adj.r_se_T;
    rep.eta_min = adj.eta_min;
    rep.clamp_events = val.clamp_events;

    double cap = cfg.kappa_cap;
    iv::StepLocal sl;
    sl.resize(mp.marks.size(), n);
    double scale_p = 0.0, gap_p = 0.0, scale_q = 0.0, gap_q = 0.0;
    double scale_a = 0.0, gap_a = 0.0, gap_c = 0.0;
    double resid_sum = 0.0, raw_sum = 0.0;
    std::vector<double> res(n), feat2(n);
    std::size_t lag = std::max<std::size_t>(1, cfg.scan_lag);

    for (std::size_t k = 0; k <= N; ++k) {
        double mp_abs = 0.0, d_ar = 0.0, a_abs = 0.0, d2 = 0.0, dc = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            double pr = adj.p.at(k, p), ar = adj.alpha.at(k, p) * adj.r.at(k, p);
            mp_abs += std::abs(pr);
            d_ar += std::abs(pr - ar);
            a_abs += std::abs(adj.alpha.at(k, p));
            d2 += std::abs(adj.alpha.at(k, p) - adj.alpha_exp.at(k, p));
            dc += std::abs(adj.alpha_exp.at(k, p) - adj.alpha_obs.at(k, p));
        }
        scale_p = std::max(scale_p, mp_abs / double(n));
        gap_p = std::max(gap_p, d_ar / double(n));
        scale_a = std::max(scale_a, a_abs / double(n));
        gap_a = std::max(gap_a, d2 / double(n));
        gap_c = std::max(gap_c, dc / double(n));
        if (k == N) break;

        iv::fill_step_local(mp, fwd, val, pol, ens, k, cap, sl);
        double q_abs = 0.0, dq = 0.0, rmean = 0.0, raw = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            double rk = adj.r.at(k, p), ak = adj.alpha.at(k, p);
            double be1 = adj.beta1.at(k, p), be2 = adj.beta2.at(k, p);
            double rel1 = sl.b1[p] * ak * rk + be1 * rk;
            double rel2 = sl.b2[p] * ak * rk + be2 * rk;
            q_abs += std::max(std::abs(adj.q1.at(k, p)), std::abs(adj.q2.at(k, p)));
            dq += std::max(std::abs(adj.q1.at(k, p) - rel1), std::abs(adj.q2.at(k, p) - rel2));
            double Vb = std::exp(fwd.lnV.at(k, p));
            res[p] = (ak * (mp.a1 - mp.a3) + mp.sig1 * be1 + mp.sig2 * be2) * rk * Vb;
            rmean += res[p];
            raw += adj.p.at(k, p) * (mp.a1 - mp.a3) * Vb +
                   ((adj.q1.at(k, p) - rk * ak * sl.b1[p]) * mp.sig1 +
                    (adj.q2.at(k, p) - rk * ak * sl.b2[p]) * mp.sig2) *
                       Vb;
        }
        scale_q = std::max(scale_q, q_abs / double(n));
        gap_q = std::max(gap_q, dq / double(n));
        rmean /= double(n);
        raw /= double(n);
        resid_sum += rmean;
        raw_sum += raw;
        rep.resid_sup = std::max(rep.resid_sup, std::abs(rmean));

        std::size_t kl = k >= lag ? k - lag : 0;
        for (std::size_t p = 0; p < n; ++p) feat2[p] = fwd.Y.at(k, p) - fwd.Y.at(kl, p);
        StepFit ofit(fwd.Y.row(k), feat2.data(), n, cfg.degree, cfg.ridge);
        RegressionTable ft = ofit.fit(res.data());
        for (std::size_t p = 0; p < n; ++p)
            rep.resid_fs_sup =
                std::max(rep.resid_fs_sup, std::abs(ft.eval(fwd.Y.at(k, p), feat2[p])));
    }
    rep.rel_p_alpha_r = gap_p / std::max(scale_p, 1e-12);
    rep.rel_q = gap_q / std::max(scale_q, 1e-12);
    rep.alpha_two_way = gap_a / std::max(scale_a, 1e-12);
    rep.alpha_cond_gap = gap_c / std::max(scale_a, 1e-12);
    rep.resid_mean = resid_sum / double(N);
    rep.resid_raw_mean = raw_sum / double(N);
    return rep;
}

// Full pipeline at one strategy.
inline InvestReport invest_pipeline(const MarketParams& mp, const PathEnsemble& ens,
                                    const ControlPolicy& pol, const InvestConfig& cfg = {},
                                    InvestForward* keep_fwd = nullptr,
                                    InvestValue* keep_val = nullptr,
                                    InvestAdjoints* keep_adj = nullptr) {
    InvestForward fwd = transformed_forward(mp, ens, pol);
    InvestValue val = solve_invest_value(mp, ens, fwd, cfg);
    InvestAdjoints adj = solve_invest_adjoints(mp, ens, fwd, val, pol, cfg);
    InvestReport rep = verify_relations(mp, ens, fwd, val, adj, pol, cfg);
    if (keep_fwd) *keep_fwd = std::move(fwd);
    if (keep_val) *keep_val = std::move(val);
    if (keep_adj) *keep_adj = std::move(adj);
    return rep;
}

struct InvestScan {
    std::vector<InvestReport> rows;
    bool crossed = false;
    double crossing = 0.0; // linear-interpolated zero of the optimality residual
    double argmin_u = 0.0; // grid strategy with the smallest certainty equivalent
};

// Residual scan over constant strategies on a shared ensemble. The sign change
// of the mean optimality residual brackets the candidate optimum; the value
// minimum should land in the same neighborhood.
inline InvestScan strategy_scan(const MarketParams& mp, const PathEnsemble& ens,
                                const std::vector<double>& u_grid,
                                const InvestConfig& cfg = {}) {
    require(!u_grid.empty(), "strategy_scan: empty strategy grid");
    InvestScan sc;
    double best = std::numeric_limits<double>::infinity();
    for (double u : u_grid) {
        InvestReport rep = invest_pipeline(mp, ens, ControlPolicy::make_constant(u), cfg);
        if (rep.zeta0 < best) {
            best = rep.zeta0;
            sc.argmin_u = u;
        }
        sc.rows.push_back(rep);
    }
    for (std::size_t i = 0; i + 1 < sc.rows.size(); ++i) {
        double r0 = sc.rows[i].resid_mean, r1 = sc.rows[i + 1].resid_mean;
        if (r0 == 0.0) {
            sc.crossed = true;
            sc.crossing = sc.rows[i].u;
            break;
        }
        if (r0 * r1 < 0.0) {
            sc.crossed = true;
            sc.crossing = sc.rows[i].u - r0 * (sc.rows[i + 1].u - sc.rows[i].u) / (r1 - r0);
            break;
        }
    }
    return sc;
}

} // namespace rsjd
