#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/grid.hpp"

namespace rsjd {

// Coordinate convention for coefficient callbacks. Drift, generator and
// running-cost callbacks see the six-vector
//   S = (x, y, z1, z2, iz1, iz2)
// where iz1, iz2 are the mark integrals of the jump integrands against their
// intensity measures. Jump integrands enter coefficients only through these
// integrals; per-atom values appear separately where the algebra needs them
// (risk terms, jump-risk sensitivities).
struct Coord {
    enum : int { X = 0, Y = 1, Z1 = 2, Z2 = 3, IZ1 = 4, IZ2 = 5 };
};

using State6 = std::array<double, 6>;
using Grad6 = std::array<double, 6>;
using Hess6 = std::array<double, 36>; // row-major, symmetric
using Grad2 = std::array<double, 2>;  // (x, y) sensitivities
using Hess2 = std::array<double, 4>;  // row-major 2x2

using Fn6 = std::function<double(double t, const State6&, double u)>;
using FnXY = std::function<double(double t, double x, double y, double u)>;
using FnT = std::function<double(double t)>;
using FnE = std::function<double(double t, double x, double y, double u, double e)>;
using FnLam = std::function<double(double t, double x, double u, double e)>;
using FnX = std::function<double(double x)>;
using FnXY0 = std::function<double(double x, double y0)>;

using GradFn6 = std::function<Grad6(double t, const State6&, double u)>;
using HessFn6 = std::function<Hess6(double t, const State6&, double u)>;
using GradFnXY = std::function<Grad2(double t, double x, double y, double u)>;
using HessFnXY = std::function<Hess2(double t, double x, double y, double u)>;
using GradFnE = std::function<Grad2(double t, double x, double y, double u, double e)>;
using HessFnE = std::function<Hess2(double t, double x, double y, double u, double e)>;

// Scalar-state jump-diffusion pair with one unobservable and one observable
// Brownian driver and two finite-mark Poisson measures (the second one
// observed). All callbacks are deterministic functions; missing derivative
// callbacks fall back to central finite differences of the value callback.
struct ModelSpec {
    std::string name;

    double x0 = 0.0;
    double theta = 0.5; // risk-sensitivity, > 0
    MarkSpace marks1;   // unobservable jump measure
    MarkSpace marks2;   // observable jump measure

    // Physical-measure coefficients.
    Fn6 b1;          // state drift
    FnXY sigma1;     // loading on the unobservable Brownian
    FnXY sigma2;     // loading on the observation Brownian
    FnT sigma3;      // observation diffusion, deterministic, nonzero
    Fn6 b2;          // observation drift
    FnE f1, f2;      // jump coefficients (per mark)
    FnLam lambda;    // observed-jump intensity ratio, positive
    Fn6 g;           // generator of the first backward component
    Fn6 l_run;       // running cost before risk adjustment
    FnX phi;         // terminal condition of the first backward component
    FnXY0 phi_term;  // cost terminal, takes (x_T, y_0)

    // Optional analytic derivatives.
    GradFn6 b1_d, b2_d, g_d, l_run_d;
    HessFn6 b1_dd, b2_dd, g_dd, l_run_dd;
    GradFnXY sigma1_d, sigma2_d;
    HessFnXY sigma1_dd, sigma2_dd;
    GradFnE f1_d, f2_d;
    HessFnE f1_dd, f2_dd;
    FnLam lambda_x, lambda_xx;
    FnX phi_x, phi_xx;
    std::function<double(double, double)> phi_term_x, phi_term_y, phi_term_xx;

    // Structural hints, verified at registration: exactly-zero jump effects
    // let solvers skip per-atom work that is identically zero.
    bool jumps_affect_state1 = true; // f1 not identically zero
    bool jumps_affect_state2 = true; // f2 not identically zero
    bool lambda_is_one = false;      // intensity ratio identically 1
    bool obs_coupled = true;         // b2 not identically zero
    bool forward_needs_backward = false; // b1/sigma/f read (y, z, ...) slots

    // Generator-sandwich parameters for the structure diagnostic; negative
    // means not supplied. qexp_theta is the quadratic coefficient of the
    // bounding envelope and may exceed theta (it absorbs linear cross terms).
    double qexp_alpha = -1.0, qexp_beta = -1.0, qexp_theta = -1.0;

    std::vector<double> control_set; // finite admissible set U

    // ---- derivative accessors (analytic callback or finite difference) ----

    Grad6 grad_b1(double t, const State6& s, double u) const { return grad6(b1, b1_d, t, s, u); }
    Grad6 grad_b2(double t, const State6& s, double u) const { return grad6(b2, b2_d, t, s, u); }
    Grad6 grad_g(double t, const State6& s, double u) const { return grad6(g, g_d, t, s, u); }
    Grad6 grad_l(double t, const State6& s, double u) const { return grad6(l_run, l_run_d, t, s, u); }

    Hess6 hess_b1(double t, const State6& s, double u) const { return hess6(b1, b1_dd, t, s, u); }
    Hess6 hess_b2(double t, const State6& s, double u) const { return hess6(b2, b2_dd, t, s, u); }
    Hess6 hess_g(double t, const State6& s, double u) const { return hess6(g, g_dd, t, s, u); }
    Hess6 hess_l(double t, const State6& s, double u) const { return hess6(l_run, l_run_dd, t, s, u); }

    Grad2 grad_sigma1(double t, double x, double y, double u) const {
        return gradxy(sigma1, sigma1_d, t, x, y, u);
    }
    Grad2 grad_sigma2(double t, double x, double y, double u) const {
        return gradxy(sigma2, sigma2_d, t, x, y, u);
    }
    Hess2 hess_sigma1(double t, double x, double y, double u) const {
        return hessxy(sigma1, sigma1_dd, t, x, y, u);
    }
    Hess2 hess_sigma2(double t, double x, double y, double u) const {
        return hessxy(sigma2, sigma2_dd, t, x, y, u);
    }

    Grad2 grad_f1(double t, double x, double y, double u, double e) const {
        return gradE(f1, f1_d, t, x, y, u, e);
    }
    Grad2 grad_f2(double t, double x, double y, double u, double e) const {
        return gradE(f2, f2_d, t, x, y, u, e);
    }
    Hess2 hess_f1(double t, double x, double y, double u, double e) const {
        return hessE(f1, f1_dd, t, x, y, u, e);
    }
    Hess2 hess_f2(double t, double x, double y, double u, double e) const {
        return hessE(f2, f2_dd, t, x, y, u, e);
    }

    double dlambda_x(double t, double x, double u, double e) const {
        if (lambda_x) return lambda_x(t, x, u, e);
        double h = fd_step(x);
        return (lambda(t, x + h, u, e) - lambda(t, x - h, u, e)) / (2.0 * h);
    }
    double dlambda_xx(double t, double x, double u, double e) const {
        if (lambda_xx) return lambda_xx(t, x, u, e);
        double h = fd_step2(x);
        return (lambda(t, x + h, u, e) - 2.0 * lambda(t, x, u, e) + lambda(t, x - h, u, e)) /
               (h * h);
    }
    double dphi_x(double x) const {
        if (phi_x) return phi_x(x);
        double h = fd_step(x);
        return (phi(x + h) - phi(x - h)) / (2.0 * h);
    }
    double dphi_xx(double x) const {
        if (phi_xx) return phi_xx(x);
        double h = fd_step2(x);
        return (phi(x + h) - 2.0 * phi(x) + phi(x - h)) / (h * h);
    }
    double dphi_term_x(double x, double y0) const {
        if (phi_term_x) return phi_term_x(x, y0);
        double h = fd_step(x);
        return (phi_term(x + h, y0) - phi_term(x - h, y0)) / (2.0 * h);
    }
    double dphi_term_y(double x, double y0) const {
        if (phi_term_y) return phi_term_y(x, y0);
        double h = fd_step(y0);
        return (phi_term(x, y0 + h) - phi_term(x, y0 - h)) / (2.0 * h);
    }
    double dphi_term_xx(double x, double y0) const {
        if (phi_term_xx) return phi_term_xx(x, y0);
        double h = fd_step2(x);
        return (phi_term(x + h, y0) - 2.0 * phi_term(x, y0) + phi_term(x - h, y0)) / (h * h);
    }

    static double fd_step(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }
    static double fd_step2(double v) { return 5e-5 * std::max(1.0, std::abs(v)); }

  private:
    static Grad6 grad6(const Fn6& f, const GradFn6& fd, double t, const State6& s, double u) {
        if (fd) return fd(t, s, u);
        Grad6 g{};
        for (int c = 0; c < 6; ++c) {
            State6 sp = s, sm = s;
            double h = fd_step(s[c]);
            sp[c] += h;
            sm[c] -= h;
            g[c] = (f(t, sp, u) - f(t, sm, u)) / (2.0 * h);
        }
        return g;
    }
    static Hess6 hess6(const Fn6& f, const HessFn6& fd, double t, const State6& s, double u) {
        if (fd) return fd(t, s, u);
        Hess6 h{};
        double f0 = f(t, s, u);
        for (int a = 0; a < 6; ++a) {
            double ha = fd_step2(s[a]);
            for (int b = a; b < 6; ++b) {
                double val;
                if (a == b) {
                    State6 sp = s, sm = s;
                    sp[a] += ha;
                    sm[a] -= ha;
                    val = (f(t, sp, u) - 2.0 * f0 + f(t, sm, u)) / (ha * ha);
                } else {
                    double hb = fd_step2(s[b]);
                    State6 spp = s, spm = s, smp = s, smm = s;
                    spp[a] += ha; spp[b] += hb;
                    spm[a] += ha; spm[b] -= hb;
                    smp[a] -= ha; smp[b] += hb;
                    smm[a] -= ha; smm[b] -= hb;
                    val = (f(t, spp, u) - f(t, spm, u) - f(t, smp, u) + f(t, smm, u)) /
                          (4.0 * ha * hb);
                }
                h[a * 6 + b] = h[b * 6 + a] = val;
            }
        }
        return h;
    }
    static Grad2 gradxy(const FnXY& f, const GradFnXY& fd, double t, double x, double y, double u) {
        if (fd) return fd(t, x, y, u);
        double hx = fd_step(x), hy = fd_step(y);
        return {(f(t, x + hx, y, u) - f(t, x - hx, y, u)) / (2.0 * hx),
                (f(t, x, y + hy, u) - f(t, x, y - hy, u)) / (2.0 * hy)};
    }
    static Hess2 hessxy(const FnXY& f, const HessFnXY& fd, double t, double x, double y, double u) {
        if (fd) return fd(t, x, y, u);
        double hx = fd_step2(x), hy = fd_step2(y);
        double f0 = f(t, x, y, u);
        double dxx = (f(t, x + hx, y, u) - 2.0 * f0 + f(t, x - hx, y, u)) / (hx * hx);
        double dyy = (f(t, x, y + hy, u) - 2.0 * f0 + f(t, x, y - hy, u)) / (hy * hy);
        double dxy = (f(t, x + hx, y + hy, u) - f(t, x + hx, y - hy, u) -
                      f(t, x - hx, y + hy, u) + f(t, x - hx, y - hy, u)) /
                     (4.0 * hx * hy);
        return {dxx, dxy, dxy, dyy};
    }
    static Grad2 gradE(const FnE& f, const GradFnE& fd, double t, double x, double y, double u,
                       double e) {
        if (fd) return fd(t, x, y, u, e);
        double hx = fd_step(x), hy = fd_step(y);
        return {(f(t, x + hx, y, u, e) - f(t, x - hx, y, u, e)) / (2.0 * hx),
                (f(t, x, y + hy, u, e) - f(t, x, y - hy, u, e)) / (2.0 * hy)};
    }
    static Hess2 hessE(const FnE& f, const HessFnE& fd, double t, double x, double y, double u,
                       double e) {
        if (fd) return fd(t, x, y, u, e);
        double hx = fd_step2(x), hy = fd_step2(y);
        double f0 = f(t, x, y, u, e);
        double dxx = (f(t, x + hx, y, u, e) - 2.0 * f0 + f(t, x - hx, y, u, e)) / (hx * hx);
        double dyy = (f(t, x, y + hy, u, e) - 2.0 * f0 + f(t, x, y - hy, u, e)) / (hy * hy);
        double dxy = (f(t, x + hx, y + hy, u, e) - f(t, x + hx, y - hy, u, e) -
                      f(t, x - hx, y + hy, u, e) + f(t, x - hx, y - hy, u, e)) /
                     (4.0 * hx * hy);
        return {dxx, dxy, dxy, dyy};
    }
};

// Observation features a feedback control may read: current time, current
// observation value, and a short window of recent observation increments.
// jump_in_step is filled by the simulation loops so a spike policy can skip
// steps carrying a jump event; time-only policies ignore it.
struct ObsFeatures {
    double t = 0.0;
    double Y = 0.0;
    std::array<double, 4> dY{}; // most recent first; zero-padded near t = 0
    bool jump_in_step = false;
};

struct ControlPolicy {
    enum class Kind { Constant, PiecewiseTime, Feedback, Spike };
    Kind kind = Kind::Constant;
    double constant = 0.0;
    std::vector<double> knots;  // ascending interval starts for PiecewiseTime
    std::vector<double> values; // values[i] on [knots[i], knots[i+1])
    std::function<double(const ObsFeatures&)> feedback;
    // Spike: override a time-only base policy with spike_u on steps whose left
    // node lies in [spike_t0, spike_t0 + spike_eps), excluding steps that carry
    // a jump event of either driver.
    double spike_u = 0.0;
    double spike_t0 = 0.0;
    double spike_eps = 0.0;

    static ControlPolicy make_constant(double u) {
        ControlPolicy p;
        p.kind = Kind::Constant;
        p.constant = u;
        return p;
    }
    static ControlPolicy make_piecewise(std::vector<double> t, std::vector<double> v) {
        require(!t.empty() && t.size() == v.size(), "ControlPolicy: knots/values mismatch");
        ControlPolicy p;
        p.kind = Kind::PiecewiseTime;
        p.knots = std::move(t);
        p.values = std::move(v);
        return p;
    }
    static ControlPolicy make_feedback(std::function<double(const ObsFeatures&)> f) {
        ControlPolicy p;
        p.kind = Kind::Feedback;
        p.feedback = std::move(f);
        return p;
    }
    static ControlPolicy make_spike(const ControlPolicy& base, double u, double t0, double eps) {
        require(base.kind == Kind::Constant || base.kind == Kind::PiecewiseTime,
                "ControlPolicy: spike base must be a function of time alone");
        require(eps > 0.0, "ControlPolicy: spike window must have positive length");
        ControlPolicy p = base;
        p.kind = Kind::Spike;
        p.spike_u = u;
        p.spike_t0 = t0;
        p.spike_eps = eps;
        return p;
    }

    bool path_dependent() const { return kind == Kind::Feedback || kind == Kind::Spike; }

    double eval(const ObsFeatures& obs) const {
        switch (kind) {
            case Kind::Constant: return constant;
            case Kind::PiecewiseTime: return piecewise_at(obs.t);
            case Kind::Feedback: return feedback(obs);
            case Kind::Spike: {
                bool in_window = obs.t >= spike_t0 - 1e-12 && obs.t < spike_t0 + spike_eps - 1e-12;
                if (in_window && !obs.jump_in_step) return spike_u;
                return knots.empty() ? constant : piecewise_at(obs.t);
            }
        }
        return constant;
    }

  private:
    double piecewise_at(double t) const {
        std::size_t i = 0;
        while (i + 1 < knots.size() && t >= knots[i + 1]) ++i;
        return values[i];
    }
};

struct DerivativeCheck {
    double worst_rel = 0.0;
    std::string worst_label;
    bool ok = true;
};

// Compare supplied analytic derivatives against central differences at probe
// points, and verify the structural hint flags by direct evaluation. Hint
// violations are hard errors: solvers rely on them to skip work that must be
// exactly zero.
inline DerivativeCheck validate_derivatives(const ModelSpec& m, int n_probe = 24,
                                            double tol = 2e-4) {
    DerivativeCheck rep;
    auto rel = [](double a, double b) {
        double sc = std::max({std::abs(a), std::abs(b), 1.0});
        return std::abs(a - b) / sc;
    };
    auto track = [&](double a, double b, const std::string& label) {
        double r = rel(a, b);
        if (r > rep.worst_rel) {
            rep.worst_rel = r;
            rep.worst_label = label;
        }
    };
    // Probe lattice: deterministic spread, no RNG needed here.
    for (int i = 0; i < n_probe; ++i) {
        double t = 0.1 + 0.8 * double(i % 5) / 4.0;
        double sgn = (i % 2 == 0) ? 1.0 : -1.0;
        State6 s{m.x0 + sgn * 0.4 * double(i % 3), 0.3 * sgn, 0.2, -0.1, 0.05 * sgn, 0.02};
        double u = m.control_set.empty() ? 0.0 : m.control_set[i % m.control_set.size()];

        ModelSpec fd = m; // strip analytic callbacks to force the FD route
        fd.b1_d = fd.b2_d = fd.g_d = fd.l_run_d = nullptr;
        fd.b1_dd = fd.b2_dd = fd.g_dd = fd.l_run_dd = nullptr;
        fd.sigma1_d = fd.sigma2_d = nullptr;
        fd.sigma1_dd = fd.sigma2_dd = nullptr;
        fd.f1_d = fd.f2_d = nullptr;
        fd.f1_dd = fd.f2_dd = nullptr;
        fd.lambda_x = fd.lambda_xx = nullptr;
        fd.phi_x = fd.phi_xx = nullptr;
        fd.phi_term_x = fd.phi_term_y = fd.phi_term_xx = nullptr;

        if (m.b1_d) {
            Grad6 a = m.grad_b1(t, s, u), b = fd.grad_b1(t, s, u);
            for (int c = 0; c < 6; ++c) track(a[c], b[c], "b1 gradient");
        }
        if (m.b2_d) {
            Grad6 a = m.grad_b2(t, s, u), b = fd.grad_b2(t, s, u);
            for (int c = 0; c < 6; ++c) track(a[c], b[c], "b2 gradient");
        }
        if (m.g_d) {
            Grad6 a = m.grad_g(t, s, u), b = fd.grad_g(t, s, u);
            for (int c = 0; c < 6; ++c) track(a[c], b[c], "g gradient");
        }
        if (m.l_run_d) {
            Grad6 a = m.grad_l(t, s, u), b = fd.grad_l(t, s, u);
            for (int c = 0; c < 6; ++c) track(a[c], b[c], "running-cost gradient");
        }
        if (m.sigma1_d) {
            Grad2 a = m.grad_sigma1(t, s[0], s[1], u), b = fd.grad_sigma1(t, s[0], s[1], u);
            track(a[0], b[0], "sigma1 d/dx");
            track(a[1], b[1], "sigma1 d/dy");
        }
        if (m.sigma2_d) {
            Grad2 a = m.grad_sigma2(t, s[0], s[1], u), b = fd.grad_sigma2(t, s[0], s[1], u);
            track(a[0], b[0], "sigma2 d/dx");
            track(a[1], b[1], "sigma2 d/dy");
        }
        for (std::size_t j = 0; j < m.marks1.size() && m.f1_d; ++j) {
            Grad2 a = m.grad_f1(t, s[0], s[1], u, m.marks1.atoms[j]);
            Grad2 b = fd.grad_f1(t, s[0], s[1], u, m.marks1.atoms[j]);
            track(a[0], b[0], "f1 d/dx");
            track(a[1], b[1], "f1 d/dy");
        }
        for (std::size_t j = 0; j < m.marks2.size() && m.f2_d; ++j) {
            Grad2 a = m.grad_f2(t, s[0], s[1], u, m.marks2.atoms[j]);
            Grad2 b = fd.grad_f2(t, s[0], s[1], u, m.marks2.atoms[j]);
            track(a[0], b[0], "f2 d/dx");
            track(a[1], b[1], "f2 d/dy");
        }
        if (m.phi_x) track(m.dphi_x(s[0]), fd.dphi_x(s[0]), "phi d/dx");
        if (m.phi_term_x)
            track(m.dphi_term_x(s[0], s[1]), fd.dphi_term_x(s[0], s[1]), "phi_term d/dx");
        if (m.phi_term_y)
            track(m.dphi_term_y(s[0], s[1]), fd.dphi_term_y(s[0], s[1]), "phi_term d/dy");

        // Hint verification: claimed-zero structure must evaluate to zero.
        for (std::size_t j = 0; j < m.marks1.size(); ++j)
            if (!m.jumps_affect_state1 &&
                std::abs(m.f1(t, s[0], s[1], u, m.marks1.atoms[j])) > 1e-14)
                throw ModelError(m.name + ": jump hint violated, f1 is not identically zero");
        for (std::size_t j = 0; j < m.marks2.size(); ++j) {
            if (!m.jumps_affect_state2 &&
                std::abs(m.f2(t, s[0], s[1], u, m.marks2.atoms[j])) > 1e-14)
                throw ModelError(m.name + ": jump hint violated, f2 is not identically zero");
            if (m.lambda_is_one &&
                std::abs(m.lambda(t, s[0], u, m.marks2.atoms[j]) - 1.0) > 1e-14)
                throw ModelError(m.name + ": intensity hint violated, ratio is not 1");
        }
        if (!m.obs_coupled && std::abs(m.b2(t, s, u)) > 1e-14)
            throw ModelError(m.name + ": observation hint violated, b2 is not identically zero");
    }
    rep.ok = rep.worst_rel <= tol;
    return rep;
}

} // namespace rsjd
