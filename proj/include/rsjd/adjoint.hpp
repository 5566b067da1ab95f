#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/derived.hpp"
#include "rsjd/fbsdep.hpp"
#include "rsjd/model.hpp"
#include "rsjd/noise.hpp"
#include "rsjd/qexp.hpp"
#include "rsjd/regression.hpp"

// Adjoint system along a frozen candidate control, the completed Hamiltonian
// built from it, the optimality-condition scan, and the spike-variation
// experiment that ties the pointwise condition back to actual cost changes.
//
// Five equations are solved against the same candidate data:
//   first-order pair   (m, n)        backward, terminal phi_x(x_T)
//   generator pair     (alpha, beta) backward, terminal phi_term_x(x_T, y_0)
//   density adjoint    r             forward stochastic exponential, r_0 = 1
//   scalar pair        (s, p, q)     s forward from an F_T-measurable start,
//                                    p backward; alternated to a fixed point
//   second-order       (P, Q)        backward, sourced by exact quadratic
//                                    forms of all coefficient functions
// Every backward step is: regress the next-node value on the state basis,
// split out the martingale integrands against the driver increments, then
// close the implicit left-node value with a within-step fixed point.

namespace rsjd {

struct AdjointConfig {
    int degree = 2;      // polynomial degree of the adjoint regressions
    double ridge = 1e-8; // relative ridge, escalated on factorization failure
    int fixed_point_max = 20;
    double fixed_point_tol = 1e-10;
    int sp_max = 50; // alternating sweeps of the scalar forward/backward pair
    double sp_tol = 1e-8;
    double blowup = 1e12;
    // conditional-expectation features of the optimality scan
    bool scan_use_obs = true; // regress on observation features; false = plain mean
    int scan_degree = 2;
    std::size_t scan_lag = 5; // increment feature Y_k - Y_(k-lag)
};

// Read-only view of a solved candidate: state paths, first backward
// component (six-vector reconstruction), value component (kappa slots) and
// the control that generated them. Holds pointers only; the owning solves
// must outlive every use.
struct FrozenTrajectory {
    const ModelSpec* model = nullptr;
    const PathEnsemble* ens = nullptr;
    const ForwardResult* fwd = nullptr;
    const BackwardSolution* ysol = nullptr; // first backward component
    const BackwardSolution* zsol = nullptr; // risk-adjusted value component
    ControlPolicy policy;

    std::size_t n_paths() const { return ens->n_paths; }
    const TimeGrid& grid() const { return ens->grid; }
    double x(std::size_t k, std::size_t p) const { return fwd->x.at(k, p); }
    double y0() const { return ysol->value0; }

    State6 theta(std::size_t k, std::size_t p) const {
        return ysol->theta(k, fwd->x.at(k, p), p);
    }

    double control(std::size_t k, std::size_t p) const {
        PathNoise pn(*ens, p);
        ObsFeatures f;
        if (policy.kind == ControlPolicy::Kind::Feedback) {
            f = obs_features(*model, *ens, fwd->Y.empty() ? nullptr : &fwd->Y, pn, k, p);
        } else {
            f.t = ens->grid.node(k);
            if (policy.kind == ControlPolicy::Kind::Spike) f.jump_in_step = pn.any_jump(k);
        }
        return policy.eval(f);
    }

    // Brownian and per-atom jump slots of the value component. Arrays must
    // hold 64 entries; skipped measures read back zero.
    void kappas(std::size_t k, std::size_t p, double& k1, double& k2, double* kt1,
                double* kt2) const {
        double xv = fwd->x.at(k, p);
        k1 = zsol->z1(k, xv);
        k2 = zsol->z2(k, xv);
        for (std::size_t j = 0; j < model->marks1.size(); ++j) kt1[j] = zsol->zt1(k, j, xv);
        for (std::size_t j = 0; j < model->marks2.size(); ++j) kt2[j] = zsol->zt2(k, j, xv);
    }
};

// Pathwise adjoint solution. Value components live on every node; martingale
// integrands live on the left nodes with the last row kept at zero. Jump
// integrand stores are empty when the model declares the measure inactive.
struct AdjointBundle {
    TimeGrid grid;
    std::size_t n_paths = 0;

    PathMatrix m, n1, n2;
    std::vector<PathMatrix> nt1, nt2;
    PathMatrix alpha, beta1, beta2;
    std::vector<PathMatrix> bt1, bt2;
    PathMatrix r;
    PathMatrix s, p, q1, q2;
    std::vector<PathMatrix> qt1, qt2;
    PathMatrix P, Q1, Q2;
    std::vector<PathMatrix> Qt1, Qt2;

    int r_positivity_losses = 0; // jump factors at or below zero, counted per event
    int fp_sweeps_worst = 0;     // largest within-step fixed-point sweep count
    int sp_iterations = 0;       // alternating sweeps used by the scalar pair
    int ridge_escalations = 0;

    static double at0(const std::vector<PathMatrix>& v, std::size_t j, std::size_t k,
                      std::size_t p) {
        return j < v.size() && !v[j].empty() ? v[j].at(k, p) : 0.0;
    }
};

inline MeanVar node_stats(const PathMatrix& mat, std::size_t k) {
    std::vector<double> v(mat.n_paths);
    for (std::size_t p = 0; p < mat.n_paths; ++p) v[p] = mat.at(k, p);
    return mean_var(v);
}

namespace adj {

// First-order coefficient data at one grid node, evaluated along the frozen
// candidate for every path. Per-atom blocks are laid out [j * n_paths + p].
struct StepCoeffs {
    std::size_t n = 0, na1 = 0, na2 = 0;
    std::vector<double> gb[6], gg[6], gl[6]; // assembled drift, g, assembled generator
    std::vector<double> lk1, lk2;            // generator partials, Brownian slots
    std::vector<double> s1x, s1y, s2x, s2y;
    std::vector<double> f1x, f1y, f2x, f2y; // per-atom state-jump gradients
    std::vector<double> lkt1, lkt2;         // per-atom generator partials, density form

    void resize(std::size_t paths, std::size_t a1, std::size_t a2) {
        n = paths;
        na1 = a1;
        na2 = a2;
        for (int i = 0; i < 6; ++i) {
            gb[i].resize(n);
            gg[i].resize(n);
            gl[i].resize(n);
        }
        lk1.resize(n);
        lk2.resize(n);
        s1x.resize(n);
        s1y.resize(n);
        s2x.resize(n);
        s2y.resize(n);
        f1x.resize(na1 * n);
        f1y.resize(na1 * n);
        lkt1.resize(na1 * n);
        f2x.resize(na2 * n);
        f2y.resize(na2 * n);
        lkt2.resize(na2 * n);
    }
};

inline void fill_step_coeffs(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                             std::size_t k, StepCoeffs& c) {
    const std::size_t n = tr.n_paths();
    const std::size_t na1 = mo.marks1.size(), na2 = mo.marks2.size();
    c.resize(n, na1, na2);
    const double t = tr.grid().node(k);
    double kt1[64], kt2[64];
    for (std::size_t p = 0; p < n; ++p) {
        State6 S = tr.theta(k, p);
        double u = tr.control(k, p);
        double kap1, kap2;
        tr.kappas(k, p, kap1, kap2, kt1, kt2);

        Grad6 b = d.grad_drift_b(t, S, u);
        Grad6 gg = mo.grad_g(t, S, u);
        Grad6 gl = d.grad_l6(t, S, kap2, kt2, u);
        for (int i = 0; i < 6; ++i) {
            c.gb[i][p] = b[i];
            c.gg[i][p] = gg[i];
            c.gl[i][p] = gl[i];
        }
        c.lk1[p] = d.l_k1(kap1);
        c.lk2[p] = d.l_k2(t, S, kap2, u);

        Grad2 s1 = mo.grad_sigma1(t, S[0], S[1], u);
        Grad2 s2 = mo.grad_sigma2(t, S[0], S[1], u);
        c.s1x[p] = s1[0];
        c.s1y[p] = s1[1];
        c.s2x[p] = s2[0];
        c.s2y[p] = s2[1];
        for (std::size_t j = 0; j < na1; ++j) {
            Grad2 f = mo.grad_f1(t, S[0], S[1], u, mo.marks1.atoms[j]);
            c.f1x[j * n + p] = f[0];
            c.f1y[j * n + p] = f[1];
            c.lkt1[j * n + p] = d.l_kt1(kt1[j]);
        }
        for (std::size_t j = 0; j < na2; ++j) {
            Grad2 f = mo.grad_f2(t, S[0], S[1], u, mo.marks2.atoms[j]);
            c.f2x[j * n + p] = f[0];
            c.f2y[j * n + p] = f[1];
            c.lkt2[j * n + p] = d.l_kt2(t, S[0], kt2[j], u, mo.marks2.atoms[j]);
        }
    }
}

// Composite directions built from the first-order pair at one point: the
// Brownian and jump compositions K, K-tilde and the state-linearized drift
// coefficient. Everything downstream (generator pair, second-order source
// directions, scalar-pair coefficients) reads these.
struct MKData {
    double Sig1 = 0, Sig2 = 0;
    double K1 = 0, K2 = 0;
    double IKt1 = 0, IKt2 = 0;
    double Bx = 0;
    double Kt1[64], Kt2[64];
    double F1[64], F2[64]; // per-atom f_x + f_y m
};

inline void mk_fill(const StepCoeffs& c, const MarkSpace& mk1, const MarkSpace& mk2,
                    std::size_t p, double mv, double n1v, double n2v, const double* ntl1,
                    const double* ntl2, MKData& o) {
    const std::size_t n = c.n;
    o.Sig1 = c.s1x[p] + c.s1y[p] * mv;
    o.Sig2 = c.s2x[p] + c.s2y[p] * mv;
    o.K1 = mv * o.Sig1 + n1v;
    o.K2 = mv * o.Sig2 + n2v;
    o.IKt1 = 0.0;
    o.IKt2 = 0.0;
    for (std::size_t j = 0; j < c.na1; ++j) {
        double F = c.f1x[j * n + p] + c.f1y[j * n + p] * mv;
        double nt = ntl1 ? ntl1[j] : 0.0;
        o.F1[j] = F;
        o.Kt1[j] = mv * F + nt * (1.0 + F);
        o.IKt1 += o.Kt1[j] * mk1.weights[j];
    }
    for (std::size_t j = 0; j < c.na2; ++j) {
        double F = c.f2x[j * n + p] + c.f2y[j * n + p] * mv;
        double nt = ntl2 ? ntl2[j] : 0.0;
        o.F2[j] = F;
        o.Kt2[j] = mv * F + nt * (1.0 + F);
        o.IKt2 += o.Kt2[j] * mk2.weights[j];
    }
    o.Bx = c.gb[Coord::X][p] + c.gb[Coord::Y][p] * mv + c.gb[Coord::Z1][p] * o.K1 +
           c.gb[Coord::Z2][p] * o.K2 + c.gb[Coord::IZ1][p] * o.IKt1 +
           c.gb[Coord::IZ2][p] * o.IKt2;
}

// Shared step plumbing: regress the next-node values, split the martingale
// integrands against the step increments, evaluate both pathwise.
struct StepSplit {
    RegressionTable vhat;
    std::vector<double> proj;           // vhat at the node states
    std::vector<double> w1, w2;         // Brownian integrands at the node states
    std::vector<std::vector<double>> j1, j2; // per-atom jump integrands
};

inline void split_step(StepFit& fit, const double* xk, std::size_t n, double dt,
                       const MarkSpace& mk1, const MarkSpace& mk2, const double* vnext,
                       const std::vector<double>& dw1, const std::vector<double>& dw2,
                       const std::vector<std::vector<double>>& dn1,
                       const std::vector<std::vector<double>>& dn2, StepSplit& out) {
    out.vhat = fit.fit(vnext);
    out.proj.resize(n);
    out.w1.resize(n);
    out.w2.resize(n);
    for (std::size_t p = 0; p < n; ++p) out.proj[p] = out.vhat.eval(xk[p]);
    RegressionTable t1 = fit.fit_increment(vnext, out.vhat, dw1.data(), dt, xk);
    RegressionTable t2 = fit.fit_increment(vnext, out.vhat, dw2.data(), dt, xk);
    for (std::size_t p = 0; p < n; ++p) {
        out.w1[p] = t1.eval(xk[p]);
        out.w2[p] = t2.eval(xk[p]);
    }
    out.j1.assign(dn1.size(), std::vector<double>(n));
    for (std::size_t j = 0; j < dn1.size(); ++j) {
        RegressionTable tj =
            fit.fit_increment(vnext, out.vhat, dn1[j].data(), mk1.weights[j] * dt, xk);
        for (std::size_t p = 0; p < n; ++p) out.j1[j][p] = tj.eval(xk[p]);
    }
    out.j2.assign(dn2.size(), std::vector<double>(n));
    for (std::size_t j = 0; j < dn2.size(); ++j) {
        RegressionTable tj =
            fit.fit_increment(vnext, out.vhat, dn2[j].data(), mk2.weights[j] * dt, xk);
        for (std::size_t p = 0; p < n; ++p) out.j2[j][p] = tj.eval(xk[p]);
    }
}

// Close the implicit left-node value v = proj + dt * driver(p, v).
template <class DriverFn>
inline void fixed_point(const std::vector<double>& proj, double dt, DriverFn&& driver,
                        const AdjointConfig& acfg, std::vector<double>& v, int& worst,
                        const char* label) {
    const std::size_t n = proj.size();
    v = proj;
    for (int sweep = 1; sweep <= acfg.fixed_point_max; ++sweep) {
        double delta = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            double vn = proj[p] + dt * driver(p, v[p]);
            delta = std::max(delta, std::abs(vn - v[p]));
            v[p] = vn;
            if (!std::isfinite(vn) || std::abs(vn) > acfg.blowup)
                throw SolverError(std::string(label) + ": value blew up in the step closure");
        }
        if (delta < acfg.fixed_point_tol) {
            worst = std::max(worst, sweep);
            return;
        }
    }
    throw SolverError(std::string(label) + ": within-step fixed point did not converge");
}

inline void gather_noise(const PathEnsemble& ens, std::size_t k, bool want1, bool want2,
                         std::vector<double>& dw1, std::vector<double>& dw2,
                         std::vector<std::vector<double>>& dn1,
                         std::vector<std::vector<double>>& dn2) {
    const std::size_t n = ens.n_paths;
    dn1.assign(want1 ? ens.marks1.size() : 0, std::vector<double>(n));
    dn2.assign(want2 ? ens.marks2.size() : 0, std::vector<double>(n));
    dw1.resize(n);
    dw2.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        dw1[p] = pn.dW1(k);
        dw2[p] = pn.dW2(k);
        for (std::size_t j = 0; j < dn1.size(); ++j) dn1[j][p] = pn.dTilde1(k, j);
        for (std::size_t j = 0; j < dn2.size(); ++j) dn2[j][p] = pn.dTilde2(k, j);
    }
}

// Backward pass for the first-order pair and the generator pair. The two are
// solved in one sweep so the coefficient evaluations and the basis
// factorization are shared; the generator-pair closure reads the already
// converged first-order values of the same node.
inline void solve_first_order(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                              const AdjointConfig& acfg, AdjointBundle& B) {
    const TimeGrid& g = tr.grid();
    const std::size_t n = tr.n_paths();
    const std::size_t N = g.n_steps;
    const bool sk1 = !mo.jumps_affect_state1, sk2 = !mo.jumps_affect_state2;
    const std::size_t na1 = sk1 ? 0 : mo.marks1.size();
    const std::size_t na2 = sk2 ? 0 : mo.marks2.size();

    B.m.init(N + 1, n);
    B.n1.init(N + 1, n);
    B.n2.init(N + 1, n);
    B.nt1.assign(na1, PathMatrix{});
    B.nt2.assign(na2, PathMatrix{});
    for (auto& t : B.nt1) t.init(N + 1, n);
    for (auto& t : B.nt2) t.init(N + 1, n);
    B.alpha.init(N + 1, n);
    B.beta1.init(N + 1, n);
    B.beta2.init(N + 1, n);
    B.bt1.assign(na1, PathMatrix{});
    B.bt2.assign(na2, PathMatrix{});
    for (auto& t : B.bt1) t.init(N + 1, n);
    for (auto& t : B.bt2) t.init(N + 1, n);

    const double ybar0 = tr.y0();
    for (std::size_t p = 0; p < n; ++p) {
        double xT = tr.x(N, p);
        B.m.at(N, p) = mo.dphi_x(xT);
        B.alpha.at(N, p) = mo.dphi_term_x(xT, ybar0);
    }

    StepCoeffs c;
    StepSplit sm, sa;
    std::vector<double> mnext(n), anext(n), mv(n), av(n);
    std::vector<double> dw1, dw2;
    std::vector<std::vector<double>> dn1, dn2;
    double ntl1[64] = {0}, ntl2[64] = {0}; // skipped measures keep zero integrands

    for (std::size_t k = N; k-- > 0;) {
        const double* xk = tr.fwd->x.row(k);
        fill_step_coeffs(mo, d, tr, k, c);
        gather_noise(*tr.ens, k, !sk1, !sk2, dw1, dw2, dn1, dn2);
        StepFit fit(xk, nullptr, n, acfg.degree, acfg.ridge);

        for (std::size_t p = 0; p < n; ++p) {
            mnext[p] = B.m.at(k + 1, p);
            anext[p] = B.alpha.at(k + 1, p);
        }
        split_step(fit, xk, n, g.dt, mo.marks1, mo.marks2, mnext.data(), dw1, dw2, dn1, dn2, sm);

        auto driver_m = [&](std::size_t p, double v) {
            MKData o;
            for (std::size_t j = 0; j < na1; ++j) ntl1[j] = sm.j1[j][p];
            for (std::size_t j = 0; j < na2; ++j) ntl2[j] = sm.j2[j][p];
            mk_fill(c, mo.marks1, mo.marks2, p, v, sm.w1[p], sm.w2[p], ntl1, ntl2, o);
            double G = c.gg[Coord::X][p] + c.gg[Coord::Y][p] * v + c.gg[Coord::Z1][p] * o.K1 +
                       c.gg[Coord::Z2][p] * o.K2 + c.gg[Coord::IZ1][p] * o.IKt1 +
                       c.gg[Coord::IZ2][p] * o.IKt2;
            double F = v * o.Bx + sm.w1[p] * o.Sig1 + sm.w2[p] * o.Sig2 + G;
            for (std::size_t j = 0; j < na1; ++j)
                F += sm.j1[j][p] * o.F1[j] * mo.marks1.weights[j];
            for (std::size_t j = 0; j < na2; ++j)
                F += sm.j2[j][p] * o.F2[j] * mo.marks2.weights[j];
            return F;
        };
        fixed_point(sm.proj, g.dt, driver_m, acfg, mv, B.fp_sweeps_worst, "first-order adjoint");

        split_step(fit, xk, n, g.dt, mo.marks1, mo.marks2, anext.data(), dw1, dw2, dn1, dn2, sa);
        auto driver_a = [&](std::size_t p, double v) {
            MKData o;
            for (std::size_t j = 0; j < na1; ++j) ntl1[j] = sm.j1[j][p];
            for (std::size_t j = 0; j < na2; ++j) ntl2[j] = sm.j2[j][p];
            mk_fill(c, mo.marks1, mo.marks2, p, mv[p], sm.w1[p], sm.w2[p], ntl1, ntl2, o);
            double Kp1 = v * o.Sig1 + sa.w1[p];
            double Kp2 = v * o.Sig2 + sa.w2[p];
            double F = v * o.Bx + sa.w1[p] * o.Sig1 + sa.w2[p] * o.Sig2 + c.gl[Coord::X][p] +
                       c.gl[Coord::Y][p] * mv[p] + c.gl[Coord::Z1][p] * o.K1 +
                       c.gl[Coord::Z2][p] * o.K2 + c.gl[Coord::IZ1][p] * o.IKt1 +
                       c.gl[Coord::IZ2][p] * o.IKt2 + c.lk1[p] * Kp1 + c.lk2[p] * Kp2;
            for (std::size_t j = 0; j < na1; ++j) {
                double bt = sa.j1[j][p];
                double Ktp = v * o.F1[j] + bt * (1.0 + o.F1[j]);
                F += (bt * o.F1[j] + c.lkt1[j * n + p] * Ktp) * mo.marks1.weights[j];
            }
            for (std::size_t j = 0; j < na2; ++j) {
                double bt = sa.j2[j][p];
                double Ktp = v * o.F2[j] + bt * (1.0 + o.F2[j]);
                F += (bt * o.F2[j] + c.lkt2[j * n + p] * Ktp) * mo.marks2.weights[j];
            }
            return F;
        };
        fixed_point(sa.proj, g.dt, driver_a, acfg, av, B.fp_sweeps_worst, "generator adjoint");

        for (std::size_t p = 0; p < n; ++p) {
            B.m.at(k, p) = mv[p];
            B.n1.at(k, p) = sm.w1[p];
            B.n2.at(k, p) = sm.w2[p];
            B.alpha.at(k, p) = av[p];
            B.beta1.at(k, p) = sa.w1[p];
            B.beta2.at(k, p) = sa.w2[p];
            for (std::size_t j = 0; j < na1; ++j) {
                B.nt1[j].at(k, p) = sm.j1[j][p];
                B.bt1[j].at(k, p) = sa.j1[j][p];
            }
            for (std::size_t j = 0; j < na2; ++j) {
                B.nt2[j].at(k, p) = sm.j2[j][p];
                B.bt2[j].at(k, p) = sa.j2[j][p];
            }
        }
        B.ridge_escalations += fit.escalations();
    }
}

// Forward stochastic exponential driven by the generator's kappa partials
// along the candidate. Left-node coefficients keep the discrete conditional
// mean at exactly one; a jump factor at or below zero is counted, not fatal.
inline void solve_r(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                    const AdjointConfig& acfg, AdjointBundle& B) {
    const TimeGrid& g = tr.grid();
    const std::size_t n = tr.n_paths();
    const std::size_t N = g.n_steps;
    B.r.init(N + 1, n);
    double kt1[64], kt2[64];
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(*tr.ens, p);
        double rv = 1.0;
        B.r.at(0, p) = rv;
        for (std::size_t k = 0; k < N; ++k) {
            double t = g.node(k);
            State6 S = tr.theta(k, p);
            double u = tr.control(k, p);
            double kap1, kap2;
            tr.kappas(k, p, kap1, kap2, kt1, kt2);
            double lk1 = d.l_k1(kap1);
            double lk2 = d.l_k2(t, S, kap2, u);
            double lw = lk1 * pn.dW1(k) + lk2 * pn.dW2(k) - 0.5 * (lk1 * lk1 + lk2 * lk2) * g.dt;
            double fac = std::exp(lw);
            for (std::size_t j = 0; j < mo.marks1.size(); ++j) {
                double lkt = d.l_kt1(kt1[j]);
                int dN = pn.dN1(k, j);
                for (int cjump = 0; cjump < dN; ++cjump) {
                    double base = 1.0 + lkt;
                    if (base <= 0.0) ++B.r_positivity_losses;
                    fac *= base;
                }
                fac *= std::exp(-lkt * mo.marks1.weights[j] * g.dt);
            }
            for (std::size_t j = 0; j < mo.marks2.size(); ++j) {
                double lkt = d.l_kt2(t, S[0], kt2[j], u, mo.marks2.atoms[j]);
                int dN = pn.dN2(k, j);
                for (int cjump = 0; cjump < dN; ++cjump) {
                    double base = 1.0 + lkt;
                    if (base <= 0.0) ++B.r_positivity_losses;
                    fac *= base;
                }
                fac *= std::exp(-lkt * mo.marks2.weights[j] * g.dt);
            }
            rv *= fac;
            if (!std::isfinite(rv) || std::abs(rv) > acfg.blowup)
                throw SolverError("density adjoint blew up");
            B.r.at(k + 1, p) = rv;
        }
    }
}

// Scalar pair: s runs forward from the F_T-measurable start r_T phi_term_y,
// p runs backward from r_T phi_term_x + s_T phi_x. The two are alternated;
// models whose coefficients never read the backward value converge on the
// second sweep with no extra regression pass.
inline void solve_sp(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                     const AdjointConfig& acfg, AdjointBundle& B) {
    const TimeGrid& g = tr.grid();
    const std::size_t n = tr.n_paths();
    const std::size_t N = g.n_steps;
    const bool sk1 = !mo.jumps_affect_state1, sk2 = !mo.jumps_affect_state2;
    const std::size_t na1 = sk1 ? 0 : mo.marks1.size();
    const std::size_t na2 = sk2 ? 0 : mo.marks2.size();

    B.s.init(N + 1, n);
    B.p.init(N + 1, n);
    B.q1.init(N + 1, n);
    B.q2.init(N + 1, n);
    B.qt1.assign(na1, PathMatrix{});
    B.qt2.assign(na2, PathMatrix{});
    for (auto& t : B.qt1) t.init(N + 1, n);
    for (auto& t : B.qt2) t.init(N + 1, n);

    const double ybar0 = tr.y0();
    StepCoeffs c;
    StepSplit sp;
    std::vector<double> pnext(n), pv(n), sold, pold;
    std::vector<double> dw1, dw2;
    std::vector<std::vector<double>> dn1, dn2;

    double err_prev = -1.0;
    int bad_streak = 0;
    for (int it = 1; it <= acfg.sp_max; ++it) {
        sold = B.s.v;
        pold = B.p.v;

        // s forward with the current backward data
        for (std::size_t p = 0; p < n; ++p)
            B.s.at(0, p) = B.r.at(N, p) * mo.dphi_term_y(tr.x(N, p), ybar0);
        for (std::size_t k = 0; k < N; ++k) {
            fill_step_coeffs(mo, d, tr, k, c);
            for (std::size_t p = 0; p < n; ++p) {
                PathNoise pn(*tr.ens, p);
                double rv = B.r.at(k, p);
                double sv = B.s.at(k, p);
                double pvk = B.p.at(k, p);
                double drift = rv * c.gl[Coord::Y][p] + sv * c.gg[Coord::Y][p] +
                               pvk * c.gb[Coord::Y][p] + B.q1.at(k, p) * c.s1y[p] +
                               B.q2.at(k, p) * c.s2y[p];
                for (std::size_t j = 0; j < na1; ++j)
                    drift += AdjointBundle::at0(B.qt1, j, k, p) * c.f1y[j * n + p] *
                             mo.marks1.weights[j];
                for (std::size_t j = 0; j < na2; ++j)
                    drift += AdjointBundle::at0(B.qt2, j, k, p) * c.f2y[j * n + p] *
                             mo.marks2.weights[j];
                double c1 = rv * c.gl[Coord::Z1][p] + sv * c.gg[Coord::Z1][p] +
                            pvk * c.gb[Coord::Z1][p];
                double c2 = rv * c.gl[Coord::Z2][p] + sv * c.gg[Coord::Z2][p] +
                            pvk * c.gb[Coord::Z2][p];
                double jc1 = rv * c.gl[Coord::IZ1][p] + sv * c.gg[Coord::IZ1][p] +
                             pvk * c.gb[Coord::IZ1][p];
                double jc2 = rv * c.gl[Coord::IZ2][p] + sv * c.gg[Coord::IZ2][p] +
                             pvk * c.gb[Coord::IZ2][p];
                double snew = sv + drift * g.dt + c1 * pn.dW1(k) + c2 * pn.dW2(k);
                for (std::size_t j = 0; j < mo.marks1.size(); ++j)
                    snew += jc1 * pn.dTilde1(k, j);
                for (std::size_t j = 0; j < mo.marks2.size(); ++j)
                    snew += jc2 * pn.dTilde2(k, j);
                if (!std::isfinite(snew) || std::abs(snew) > acfg.blowup)
                    throw SolverError("scalar pair: forward component blew up");
                B.s.at(k + 1, p) = snew;
            }
        }

        double err_s = 0.0;
        for (std::size_t k = 0; k <= N; ++k) {
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p)
                acc += std::abs(B.s.at(k, p) - sold[k * n + p]);
            err_s = std::max(err_s, acc / double(n));
        }
        if (it > 1 && err_s < acfg.sp_tol) {
            // backward data unchanged by the refreshed forward component
            B.sp_iterations = it;
            return;
        }

        // p backward with the refreshed s
        for (std::size_t p = 0; p < n; ++p)
            B.p.at(N, p) = B.r.at(N, p) * mo.dphi_term_x(tr.x(N, p), ybar0) +
                           B.s.at(N, p) * mo.dphi_x(tr.x(N, p));
        for (std::size_t k = N; k-- > 0;) {
            const double* xk = tr.fwd->x.row(k);
            fill_step_coeffs(mo, d, tr, k, c);
            gather_noise(*tr.ens, k, !sk1, !sk2, dw1, dw2, dn1, dn2);
            StepFit fit(xk, nullptr, n, acfg.degree, acfg.ridge);
            for (std::size_t p = 0; p < n; ++p) pnext[p] = B.p.at(k + 1, p);
            split_step(fit, xk, n, g.dt, mo.marks1, mo.marks2, pnext.data(), dw1, dw2, dn1, dn2,
                       sp);
            auto driver_p = [&](std::size_t p, double v) {
                double F = B.r.at(k, p) * c.gl[Coord::X][p] + B.s.at(k, p) * c.gg[Coord::X][p] +
                           v * c.gb[Coord::X][p] + sp.w1[p] * c.s1x[p] + sp.w2[p] * c.s2x[p];
                for (std::size_t j = 0; j < na1; ++j)
                    F += sp.j1[j][p] * c.f1x[j * n + p] * mo.marks1.weights[j];
                for (std::size_t j = 0; j < na2; ++j)
                    F += sp.j2[j][p] * c.f2x[j * n + p] * mo.marks2.weights[j];
                return F;
            };
            fixed_point(sp.proj, g.dt, driver_p, acfg, pv, B.fp_sweeps_worst, "scalar pair");
            for (std::size_t p = 0; p < n; ++p) {
                B.p.at(k, p) = pv[p];
                B.q1.at(k, p) = sp.w1[p];
                B.q2.at(k, p) = sp.w2[p];
                for (std::size_t j = 0; j < na1; ++j) B.qt1[j].at(k, p) = sp.j1[j][p];
                for (std::size_t j = 0; j < na2; ++j) B.qt2[j].at(k, p) = sp.j2[j][p];
            }
            B.ridge_escalations += fit.escalations();
        }

        double err_p = 0.0;
        for (std::size_t k = 0; k <= N; ++k) {
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p)
                acc += std::abs(B.p.at(k, p) - pold[k * n + p]);
            err_p = std::max(err_p, acc / double(n));
        }
        double err = err_s + err_p;
        B.sp_iterations = it;
        if (it > 1 && err < acfg.sp_tol) return;
        if (err_prev >= 0.0 && err >= err_prev) {
            if (++bad_streak >= 3)
                throw SolverError("scalar pair: alternating sweeps diverged");
        } else {
            bad_streak = 0;
        }
        err_prev = err;
    }
    throw SolverError("scalar pair: alternating sweeps did not converge");
}

// Second-order equation. The source is assembled from exact quadratic forms
// of every coefficient function contracted with the composite directions of
// the first-order and generator pairs; the value enters affinely, so the
// within-step closure only resolves the shared fixed-point convention.
inline void solve_second_order(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                               const AdjointConfig& acfg, AdjointBundle& B) {
    const TimeGrid& g = tr.grid();
    const std::size_t n = tr.n_paths();
    const std::size_t N = g.n_steps;
    const bool sk1 = !mo.jumps_affect_state1, sk2 = !mo.jumps_affect_state2;
    const std::size_t na1 = sk1 ? 0 : mo.marks1.size();
    const std::size_t na2 = sk2 ? 0 : mo.marks2.size();

    B.P.init(N + 1, n);
    B.Q1.init(N + 1, n);
    B.Q2.init(N + 1, n);
    B.Qt1.assign(na1, PathMatrix{});
    B.Qt2.assign(na2, PathMatrix{});
    for (auto& t : B.Qt1) t.init(N + 1, n);
    for (auto& t : B.Qt2) t.init(N + 1, n);

    const double ybar0 = tr.y0();
    for (std::size_t p = 0; p < n; ++p) {
        double xT = tr.x(N, p);
        B.P.at(N, p) = B.r.at(N, p) * mo.dphi_term_xx(xT, ybar0) +
                       B.s.at(N, p) * mo.dphi_xx(xT);
    }

    StepCoeffs c;
    StepSplit sq;
    std::vector<double> Pnext(n), Pv(n), src(n), lin(n), qconst(n);
    std::vector<double> dw1, dw2;
    std::vector<std::vector<double>> dn1, dn2;
    double kt1[64], kt2[64];
    double ntl1[64] = {0}, ntl2[64] = {0}; // skipped measures keep zero integrands

    for (std::size_t k = N; k-- > 0;) {
        const double t = g.node(k);
        const double* xk = tr.fwd->x.row(k);
        fill_step_coeffs(mo, d, tr, k, c);
        gather_noise(*tr.ens, k, !sk1, !sk2, dw1, dw2, dn1, dn2);
        StepFit fit(xk, nullptr, n, acfg.degree, acfg.ridge);
        for (std::size_t p = 0; p < n; ++p) Pnext[p] = B.P.at(k + 1, p);
        split_step(fit, xk, n, g.dt, mo.marks1, mo.marks2, Pnext.data(), dw1, dw2, dn1, dn2, sq);

        for (std::size_t p = 0; p < n; ++p) {
            State6 S = tr.theta(k, p);
            double u = tr.control(k, p);
            double kap1, kap2;
            tr.kappas(k, p, kap1, kap2, kt1, kt2);
            double mv = B.m.at(k, p);
            double avv = B.alpha.at(k, p);
            MKData o;
            for (std::size_t j = 0; j < na1; ++j) ntl1[j] = B.nt1[j].at(k, p);
            for (std::size_t j = 0; j < na2; ++j) ntl2[j] = B.nt2[j].at(k, p);
            mk_fill(c, mo.marks1, mo.marks2, p, mv, B.n1.at(k, p), B.n2.at(k, p), ntl1, ntl2, o);

            double Kp1 = avv * o.Sig1 + B.beta1.at(k, p);
            double Kp2 = avv * o.Sig2 + B.beta2.at(k, p);
            double Ktp1[64], Ktp2[64];
            for (std::size_t j = 0; j < na1; ++j) {
                double bt = B.bt1[j].at(k, p);
                Ktp1[j] = avv * o.F1[j] + bt * (1.0 + o.F1[j]);
            }
            for (std::size_t j = 0; j < na2; ++j) {
                double bt = B.bt2[j].at(k, p);
                Ktp2[j] = avv * o.F2[j] + bt * (1.0 + o.F2[j]);
            }
            Direction V;
            V.x = 1.0;
            V.y = mv;
            V.z1 = o.K1;
            V.z2 = o.K2;
            V.zt1 = na1 ? o.Kt1 : nullptr;
            V.zt2 = na2 ? o.Kt2 : nullptr;
            V.k1 = Kp1;
            V.k2 = Kp2;
            V.kt1 = na1 ? Ktp1 : nullptr;
            V.kt2 = na2 ? Ktp2 : nullptr;

            double sv = B.s.at(k, p), pvk = B.p.at(k, p), rv = B.r.at(k, p);
            double acc = rv * d.quad_l(t, S, kap2, kt1, kt2, u, V) + sv * d.quad_g(t, S, u, V) +
                         pvk * d.quad_b(t, S, u, V);
            Hess2 h1 = mo.hess_sigma1(t, S[0], S[1], u);
            Hess2 h2 = mo.hess_sigma2(t, S[0], S[1], u);
            acc += B.q1.at(k, p) * Derived::quad2(h1, 1.0, mv);
            acc += B.q2.at(k, p) * Derived::quad2(h2, 1.0, mv);
            for (std::size_t j = 0; j < na1; ++j) {
                Hess2 hf = mo.hess_f1(t, S[0], S[1], u, mo.marks1.atoms[j]);
                acc += AdjointBundle::at0(B.qt1, j, k, p) * Derived::quad2(hf, 1.0, mv) *
                       mo.marks1.weights[j];
            }
            for (std::size_t j = 0; j < na2; ++j) {
                Hess2 hf = mo.hess_f2(t, S[0], S[1], u, mo.marks2.atoms[j]);
                acc += AdjointBundle::at0(B.qt2, j, k, p) * Derived::quad2(hf, 1.0, mv) *
                       mo.marks2.weights[j];
            }
            src[p] = acc;

            double lcoef = 2.0 * o.Bx + o.Sig1 * o.Sig1 + o.Sig2 * o.Sig2;
            double qc = 2.0 * sq.w1[p] * o.Sig1 + 2.0 * sq.w2[p] * o.Sig2;
            for (std::size_t j = 0; j < na1; ++j) {
                lcoef += o.F1[j] * o.F1[j] * mo.marks1.weights[j];
                qc += sq.j1[j][p] * (2.0 * o.F1[j] + o.F1[j] * o.F1[j]) * mo.marks1.weights[j];
            }
            for (std::size_t j = 0; j < na2; ++j) {
                lcoef += o.F2[j] * o.F2[j] * mo.marks2.weights[j];
                qc += sq.j2[j][p] * (2.0 * o.F2[j] + o.F2[j] * o.F2[j]) * mo.marks2.weights[j];
            }
            lin[p] = lcoef;
            qconst[p] = qc;
        }

        auto driver_P = [&](std::size_t p, double v) { return src[p] + lin[p] * v + qconst[p]; };
        fixed_point(sq.proj, g.dt, driver_P, acfg, Pv, B.fp_sweeps_worst, "second-order adjoint");
        for (std::size_t p = 0; p < n; ++p) {
            B.P.at(k, p) = Pv[p];
            B.Q1.at(k, p) = sq.w1[p];
            B.Q2.at(k, p) = sq.w2[p];
            for (std::size_t j = 0; j < na1; ++j) B.Qt1[j].at(k, p) = sq.j1[j][p];
            for (std::size_t j = 0; j < na2; ++j) B.Qt2[j].at(k, p) = sq.j2[j][p];
        }
        B.ridge_escalations += fit.escalations();
    }
}

} // namespace adj

inline AdjointBundle solve_adjoints(const ModelSpec& mo, const FrozenTrajectory& tr,
                                    const AdjointConfig& acfg = {}) {
    require(tr.model && tr.ens && tr.fwd && tr.ysol && tr.zsol,
            "solve_adjoints: incomplete frozen trajectory");
    Derived d(mo);
    AdjointBundle B;
    B.grid = tr.grid();
    B.n_paths = tr.n_paths();
    adj::solve_first_order(mo, d, tr, acfg, B);
    adj::solve_r(mo, d, tr, acfg, B);
    adj::solve_sp(mo, d, tr, acfg, B);
    adj::solve_second_order(mo, d, tr, acfg, B);
    return B;
}

// Completed Hamiltonian at one frozen point, prepared once per point so a
// control scan only pays for the alternative-control evaluations. The
// Brownian compositions shift the diffusion-slot arguments and the kappa
// arguments; jump-slot arguments stay at the candidate, matching a
// perturbation set that avoids jump times.
struct HamiltonianPoint {
    const ModelSpec* mo = nullptr;
    const Derived* d = nullptr;
    double t = 0.0;
    State6 S{};
    double ubar = 0.0;
    double kap1 = 0.0, kap2 = 0.0;
    double kt1[64], kt2[64];
    double sig1b = 0.0, sig2b = 0.0;
    double mv = 0, av = 0, rv = 0, sv = 0, pv = 0, Pv = 0;
    double br1 = 0, br2 = 0; // diffusion-slot brackets at the candidate
    double Hbar = 0.0;

    double eval(double u) const {
        double s1 = mo->sigma1(t, S[0], S[1], u);
        double s2 = mo->sigma2(t, S[0], S[1], u);
        double ds1 = s1 - sig1b, ds2 = s2 - sig2b;
        State6 Sh = S;
        Sh[Coord::Z1] += mv * ds1;
        Sh[Coord::Z2] += mv * ds2;
        double H = 0.5 * Pv * (ds1 * ds1 + ds2 * ds2) + pv * d->drift_b(t, Sh, u) + br1 * s1 +
                   br2 * s2 + sv * mo->g(t, Sh, u) +
                   rv * d->run_l(t, Sh, kap1 + av * ds1, kap2 + av * ds2, kt1, kt2, u);
        return H;
    }
    double delta(double u) const { return eval(u) - Hbar; }
};

inline HamiltonianPoint hamiltonian_point(const ModelSpec& mo, const Derived& d,
                                          const FrozenTrajectory& tr, const AdjointBundle& B,
                                          std::size_t k, std::size_t p) {
    HamiltonianPoint h;
    h.mo = &mo;
    h.d = &d;
    h.t = tr.grid().node(k);
    h.S = tr.theta(k, p);
    h.ubar = tr.control(k, p);
    tr.kappas(k, p, h.kap1, h.kap2, h.kt1, h.kt2);
    h.sig1b = mo.sigma1(h.t, h.S[0], h.S[1], h.ubar);
    h.sig2b = mo.sigma2(h.t, h.S[0], h.S[1], h.ubar);
    h.mv = B.m.at(k, p);
    h.av = B.alpha.at(k, p);
    h.rv = B.r.at(k, p);
    h.sv = B.s.at(k, p);
    h.pv = B.p.at(k, p);
    h.Pv = B.P.at(k, p);
    Grad6 gb = d.grad_drift_b(h.t, h.S, h.ubar);
    Grad6 gg = mo.grad_g(h.t, h.S, h.ubar);
    Grad6 gl = d.grad_l6(h.t, h.S, h.kap2, h.kt2, h.ubar);
    double lk1 = d.l_k1(h.kap1);
    double lk2 = d.l_k2(h.t, h.S, h.kap2, h.ubar);
    h.br1 = B.q1.at(k, p) -
            (h.pv * gb[Coord::Z1] + h.sv * gg[Coord::Z1] + h.rv * gl[Coord::Z1]) * h.mv -
            h.rv * lk1 * h.av;
    h.br2 = B.q2.at(k, p) -
            (h.pv * gb[Coord::Z2] + h.sv * gg[Coord::Z2] + h.rv * gl[Coord::Z2]) * h.mv -
            h.rv * lk2 * h.av;
    h.Hbar = h.eval(h.ubar);
    return h;
}

inline double hamiltonian(const ModelSpec& mo, const Derived& d, const FrozenTrajectory& tr,
                          const AdjointBundle& B, std::size_t k, std::size_t p, double u) {
    return hamiltonian_point(mo, d, tr, B, k, p).eval(u);
}

// Optimality-condition scan: the Hamiltonian difference against every
// alternative control, projected on observation features, minimized over the
// grid. A candidate passes when no conditional mean dips below -tol.
struct ScanPoint {
    double t = 0.0;
    double u = 0.0;
    double residual = 0.0;
    double se = 0.0;
};

struct ScanReport {
    std::vector<ScanPoint> points;
    double min_residual = 0.0;
    double min_t = 0.0;
    double min_u = 0.0;
    double min_se = 0.0;
    double tol = 5e-3;
    bool pass = true;
};

inline ScanReport optimal_condition_scan(const ModelSpec& mo, const FrozenTrajectory& tr,
                                         const AdjointBundle& B, const AdjointConfig& acfg = {},
                                         double tol = 5e-3, std::size_t node_stride = 1) {
    require(!mo.control_set.empty(), "optimality scan: the model declares no control set");
    Derived d(mo);
    const TimeGrid& g = tr.grid();
    const std::size_t n = tr.n_paths();
    const bool use_obs = acfg.scan_use_obs && !tr.fwd->Y.empty();

    ScanReport rep;
    rep.tol = tol;
    rep.min_residual = std::numeric_limits<double>::infinity();
    std::vector<double> f1(n), f2(n), dh(n);
    std::vector<HamiltonianPoint> pts(n);

    for (std::size_t k = 0; k < g.n_steps; k += node_stride) {
        for (std::size_t p = 0; p < n; ++p) pts[p] = hamiltonian_point(mo, d, tr, B, k, p);
        if (use_obs) {
            std::size_t back = std::min(k, acfg.scan_lag);
            for (std::size_t p = 0; p < n; ++p) {
                f1[p] = tr.fwd->Y.at(k, p);
                f2[p] = tr.fwd->Y.at(k, p) - tr.fwd->Y.at(k - back, p);
            }
        }
        for (double u : mo.control_set) {
            for (std::size_t p = 0; p < n; ++p) dh[p] = pts[p].delta(u);
            double resid, se;
            if (use_obs) {
                StepFit fit(f1.data(), f2.data(), n, acfg.scan_degree, acfg.ridge);
                RegressionTable tab = fit.fit(dh.data());
                resid = std::numeric_limits<double>::infinity();
                for (std::size_t p = 0; p < n; ++p)
                    resid = std::min(resid, tab.eval(f1[p], f2[p]));
                se = fit.residual_sd(dh.data(), tab, f1.data(), f2.data()) / std::sqrt(double(n));
            } else {
                MeanVar mvr = mean_var(dh);
                resid = mvr.mean;
                se = std::sqrt(mvr.var / double(n));
            }
            rep.points.push_back({g.node(k), u, resid, se});
            if (resid < rep.min_residual) {
                rep.min_residual = resid;
                rep.min_t = g.node(k);
                rep.min_u = u;
                rep.min_se = se;
            }
        }
    }
    rep.pass = rep.min_residual >= -tol;
    return rep;
}

// One candidate policy solved end to end on one ensemble: state paths, first
// backward component, risk-adjusted value. Filled in place so the internal
// cross-references stay valid; do not copy or move the result while a
// FrozenTrajectory points into it.
struct CandidateSolution {
    ForwardResult fwd;
    BackwardSolution ysol;
    QexpResult zres;
    double zeta0 = 0.0;

    FrozenTrajectory frozen(const ModelSpec& mo, const PathEnsemble& ens,
                            const ControlPolicy& policy) const {
        FrozenTrajectory tr;
        tr.model = &mo;
        tr.ens = &ens;
        tr.fwd = &fwd;
        tr.ysol = &ysol;
        tr.zsol = &zres.sol;
        tr.policy = policy;
        return tr;
    }
};

inline void solve_candidate(const ModelSpec& mo, const PathEnsemble& ens,
                            const ControlPolicy& policy, SolveConfig cfg,
                            CandidateSolution& out) {
    cfg.store_obs = true;      // scan features and spike bookkeeping read the observation
    cfg.store_pathwise = true; // six-vector assembly stays on the solved paths
    PicardResult pr = picard_coupled(mo, ens, policy, cfg);
    out.fwd = std::move(pr.fwd);
    out.ysol = std::move(pr.bwd);
    out.zres = solve_qexp(mo, ens, out.fwd.x, policy, out.ysol, cfg,
                          out.fwd.Y.empty() ? nullptr : &out.fwd.Y);
    out.zeta0 = out.zres.zeta0;
}

// Spike-variation experiment: perturb the candidate on a shrinking window,
// re-solve the full value pipeline under shared driver noise, and compare
// the cost change against the Hamiltonian predictor and the expected
// first-order decay. A replicate ensemble supplies the noise estimate.
struct SpikeRung {
    double eps = 0.0;
    double dJ = 0.0;
    double noise = 0.0;     // replicate-based scale of dJ
    double predictor = 0.0; // integrated conditional Hamiltonian difference
    double state_gap_sq = 0.0;
    double flagged_fraction = 0.0; // paths with a first-driver jump inside the window
    bool excluded = false;         // dropped from the slope fit
};

struct SpikeReport {
    double t0 = 0.0;
    double u = 0.0;
    std::vector<SpikeRung> rungs;
    double slope_dj = 0.0;
    double slope_state_gap = 0.0;
    std::size_t n_included = 0;
    bool inconclusive = false; // cost changes non-monotone beyond the noise scale
};

namespace adj {

inline double fit_slope(const std::vector<double>& lx, const std::vector<double>& ly) {
    double mx = mean(lx), my = mean(ly), num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    return den > 0.0 ? num / den : 0.0;
}

} // namespace adj

inline SpikeReport spike_experiment(const ModelSpec& mo, const PathEnsemble& ens,
                                    const PathEnsemble& ens_rep, const ControlPolicy& base,
                                    double u, double t0, const std::vector<double>& eps_list,
                                    const SolveConfig& cfg, const AdjointConfig& acfg = {}) {
    require(ens.grid.n_steps == ens_rep.grid.n_steps && ens.n_paths == ens_rep.n_paths,
            "spike experiment: replicate ensemble must match the main ensemble");
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;

    CandidateSolution cand, cand_rep;
    solve_candidate(mo, ens, base, cfg, cand);
    solve_candidate(mo, ens_rep, base, cfg, cand_rep);
    FrozenTrajectory tr = cand.frozen(mo, ens, base);
    AdjointBundle B = solve_adjoints(mo, tr, acfg);
    Derived d(mo);

    SpikeReport rep;
    rep.t0 = t0;
    rep.u = u;

    for (double eps : eps_list) {
        ControlPolicy spike = ControlPolicy::make_spike(base, u, t0, eps);
        CandidateSolution se, se_rep;
        solve_candidate(mo, ens, spike, cfg, se);
        solve_candidate(mo, ens_rep, spike, cfg, se_rep);

        SpikeRung rung;
        rung.eps = eps;
        rung.dJ = se.zeta0 - cand.zeta0;
        rung.noise = std::abs((se_rep.zeta0 - cand_rep.zeta0) - rung.dJ) / std::sqrt(2.0);

        double gap = 0.0;
        std::size_t flagged = 0;
        for (std::size_t p = 0; p < n; ++p) {
            double sup2 = 0.0;
            for (std::size_t k = 0; k <= g.n_steps; ++k) {
                double dx = se.fwd.x.at(k, p) - cand.fwd.x.at(k, p);
                sup2 = std::max(sup2, dx * dx);
            }
            gap += sup2;
            PathNoise pn(ens, p);
            bool hit = false;
            for (std::size_t k = 0; k < g.n_steps && !hit; ++k) {
                double tk = g.node(k);
                if (tk < t0 - 1e-12 || tk >= t0 + eps - 1e-12) continue;
                for (std::size_t j = 0; j < mo.marks1.size() && !hit; ++j)
                    if (pn.dN1(k, j) > 0) hit = true;
            }
            if (hit) ++flagged;
        }
        rung.state_gap_sq = gap / double(n);
        rung.flagged_fraction = double(flagged) / double(n);

        double pred = 0.0;
        for (std::size_t k = 0; k < g.n_steps; ++k) {
            double tk = g.node(k);
            if (tk < t0 - 1e-12 || tk >= t0 + eps - 1e-12) continue;
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
                PathNoise pn(ens, p);
                if (pn.any_jump(k)) continue; // the perturbation set skips jump steps
                acc += hamiltonian_point(mo, d, tr, B, k, p).delta(u);
            }
            pred += (acc / double(n)) * g.dt;
        }
        rung.predictor = pred;
        rung.excluded = !(std::abs(rung.dJ) > 0.0 && rung.noise <= 0.3 * std::abs(rung.dJ));
        rep.rungs.push_back(rung);
    }

    std::vector<double> lx, ly, gx, gy;
    for (const auto& rg : rep.rungs) {
        if (!rg.excluded) {
            lx.push_back(std::log(rg.eps));
            ly.push_back(std::log(std::abs(rg.dJ)));
        }
        if (rg.state_gap_sq > 0.0) {
            gx.push_back(std::log(rg.eps));
            gy.push_back(std::log(rg.state_gap_sq));
        }
    }
    rep.n_included = lx.size();
    if (lx.size() >= 2) rep.slope_dj = adj::fit_slope(lx, ly);
    if (gx.size() >= 2) rep.slope_state_gap = adj::fit_slope(gx, gy);

    // monotonicity of the cost change across the ladder, judged on the
    // included rungs against the combined noise scale
    std::vector<const SpikeRung*> inc;
    for (const auto& rg : rep.rungs)
        if (!rg.excluded) inc.push_back(&rg);
    std::sort(inc.begin(), inc.end(),
              [](const SpikeRung* a, const SpikeRung* b) { return a->eps < b->eps; });
    for (std::size_t i = 1; i < inc.size(); ++i) {
        double lo = std::abs(inc[i - 1]->dJ), hi = std::abs(inc[i]->dJ);
        if (hi < lo - 3.0 * (inc[i - 1]->noise + inc[i]->noise)) rep.inconclusive = true;
    }
    return rep;
}

} // namespace rsjd
