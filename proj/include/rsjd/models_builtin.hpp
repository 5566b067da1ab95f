#pragma once

#include <map>
#include <string>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/model.hpp"

namespace rsjd {

using Params = std::map<std::string, double>;

namespace detail {
inline double take(Params& p, const std::string& key, double def) {
    auto it = p.find(key);
    if (it == p.end()) return def;
    double v = it->second;
    p.erase(it);
    return v;
}
// Envelope constants for the generator-sandwich diagnostic. Only derivable
// when the assembled generator has no unbounded state dependence (running
// cost and observation drift both constant in the state); the envelope uses
// twice the risk parameter so its quadratic term absorbs the linear shift
// cross term, and a scan bounds the gap the intensity reweighting leaves
// against the widened jump bracket.
inline void derive_sandwich_constants(ModelSpec& m, double lx, double hx, double hy, double qc,
                                      double lam, double c, double umax) {
    if (lx != 0.0 || hx != 0.0 || hy != 0.0) return; // no constant envelope exists
    const double th = m.theta;
    const double ths = 2.0 * th;
    double alpha = 0.5 * std::abs(qc) * umax * umax;
    if (m.obs_coupled) alpha += c * c / (2.0 * (ths - th));
    if (!m.lambda_is_one && m.jumps_affect_state2) {
        auto br = [](double t, double k) { return (std::expm1(t * k) - t * k) / t; };
        for (double nu : m.marks2.weights) {
            double gap = 0.0;
            bool open_end = false;
            for (double k = -40.0; k <= 40.0; k += 0.005) {
                double up = (lam - 1.0) * std::expm1(th * k) - (br(ths, k) - br(th, k));
                double lo = -(lam - 1.0) * std::expm1(th * k) - br(th, k) - br(ths, -k);
                double g = std::max(up, lo);
                if (g > gap) {
                    gap = g;
                    open_end = std::abs(k) > 39.9;
                }
            }
            if (open_end) return; // envelope diverges, leave constants unset
            alpha += nu * gap;
        }
    }
    m.qexp_alpha = alpha;
    m.qexp_beta = 0.0;
    m.qexp_theta = ths;
}

inline void reject_leftovers(const Params& p, const std::string& model) {
    if (!p.empty()) throw ConfigError("unknown parameter '" + p.begin()->first + "' for model " + model);
}
} // namespace detail

// Affine test family. Every coefficient is affine in its arguments, so all
// analytic derivatives are constants and every special case used by the test
// suite (pure diffusion, quadratic control cost, weak forward-backward
// coupling, control-dependent diffusion) is one parameter choice away.
//
//   dx  = (b0 + bx x + by y + bu u) dt
//         + (s10 + s1x x + s1u u) dW1 + (s20 + s2x x) dW2
//         + (j1 + j1x x) e dN1~ + (j2 + j2x x) e dN2~
//   obs drift   h0 + hx x + hy y, obs diffusion s3, intensity ratio lam
//   generator   g0 + gx x + gy y,  terminal px x + pxx x^2 / 2
//   running     lx x + qc u^2 / 2, cost terminal cx x + cxx x^2 / 2 + cy y0
inline ModelSpec make_linear_test(Params p) {
    ModelSpec m;
    m.name = "linear-test";
    m.theta = detail::take(p, "theta", 0.5);
    m.x0 = detail::take(p, "x0", 1.0);
    const double b0 = detail::take(p, "b0", 0.0), bx = detail::take(p, "bx", 0.0),
                 by = detail::take(p, "by", 0.0), bu = detail::take(p, "bu", 1.0);
    const double s10 = detail::take(p, "s10", 1.0), s1x = detail::take(p, "s1x", 0.0),
                 s1u = detail::take(p, "s1u", 0.0);
    const double s20 = detail::take(p, "s20", 0.0), s2x = detail::take(p, "s2x", 0.0);
    const double j1 = detail::take(p, "j1", 0.0), j1x = detail::take(p, "j1x", 0.0);
    const double j2 = detail::take(p, "j2", 0.0), j2x = detail::take(p, "j2x", 0.0);
    const double e1 = detail::take(p, "e1", 1.0), nu1 = detail::take(p, "nu1", 0.5);
    const double e2 = detail::take(p, "e2", 1.0), nu2 = detail::take(p, "nu2", 0.5);
    const double h0 = detail::take(p, "h0", 0.0), hx = detail::take(p, "hx", 0.0),
                 hy = detail::take(p, "hy", 0.0);
    const double s3 = detail::take(p, "s3", 1.0);
    const double lam = detail::take(p, "lam", 1.0);
    const double g0 = detail::take(p, "g0", 0.0), gx = detail::take(p, "gx", 0.0),
                 gy = detail::take(p, "gy", 0.0);
    const double px = detail::take(p, "px", 0.0), pxx = detail::take(p, "pxx", 0.0);
    const double lx = detail::take(p, "lx", 0.0), qc = detail::take(p, "qc", 0.0);
    const double cx = detail::take(p, "cx", 0.0), cxx = detail::take(p, "cxx", 0.0),
                 cy = detail::take(p, "cy", 0.0);
    detail::reject_leftovers(p, m.name);

    require(m.theta > 0.0, "linear-test: theta must be positive");
    require(s3 != 0.0, "linear-test: observation diffusion must be nonzero");
    require(lam > 0.0, "linear-test: intensity ratio must be positive");

    m.marks1 = MarkSpace({e1}, {nu1});
    m.marks2 = MarkSpace({e2}, {nu2});

    m.b1 = [=](double, const State6& s, double u) { return b0 + bx * s[0] + by * s[1] + bu * u; };
    m.b1_d = [=](double, const State6&, double) { return Grad6{bx, by, 0, 0, 0, 0}; };
    m.b1_dd = [](double, const State6&, double) { return Hess6{}; };

    m.sigma1 = [=](double, double x, double, double u) { return s10 + s1x * x + s1u * u; };
    m.sigma1_d = [=](double, double, double, double) { return Grad2{s1x, 0.0}; };
    m.sigma1_dd = [](double, double, double, double) { return Hess2{}; };
    m.sigma2 = [=](double, double x, double, double) { return s20 + s2x * x; };
    m.sigma2_d = [=](double, double, double, double) { return Grad2{s2x, 0.0}; };
    m.sigma2_dd = [](double, double, double, double) { return Hess2{}; };
    m.sigma3 = [=](double) { return s3; };

    m.b2 = [=](double, const State6& s, double) { return h0 + hx * s[0] + hy * s[1]; };
    m.b2_d = [=](double, const State6&, double) { return Grad6{hx, hy, 0, 0, 0, 0}; };
    m.b2_dd = [](double, const State6&, double) { return Hess6{}; };

    m.f1 = [=](double, double x, double, double, double e) { return (j1 + j1x * x) * e; };
    m.f1_d = [=](double, double, double, double, double e) { return Grad2{j1x * e, 0.0}; };
    m.f1_dd = [](double, double, double, double, double) { return Hess2{}; };
    m.f2 = [=](double, double x, double, double, double e) { return (j2 + j2x * x) * e; };
    m.f2_d = [=](double, double, double, double, double e) { return Grad2{j2x * e, 0.0}; };
    m.f2_dd = [](double, double, double, double, double) { return Hess2{}; };

    m.lambda = [=](double, double, double, double) { return lam; };
    m.lambda_x = [](double, double, double, double) { return 0.0; };
    m.lambda_xx = [](double, double, double, double) { return 0.0; };

    m.g = [=](double, const State6& s, double) { return g0 + gx * s[0] + gy * s[1]; };
    m.g_d = [=](double, const State6&, double) { return Grad6{gx, gy, 0, 0, 0, 0}; };
    m.g_dd = [](double, const State6&, double) { return Hess6{}; };

    m.l_run = [=](double, const State6& s, double u) { return lx * s[0] + 0.5 * qc * u * u; };
    m.l_run_d = [=](double, const State6&, double) { return Grad6{lx, 0, 0, 0, 0, 0}; };
    m.l_run_dd = [](double, const State6&, double) { return Hess6{}; };

    m.phi = [=](double x) { return px * x + 0.5 * pxx * x * x; };
    m.phi_x = [=](double x) { return px + pxx * x; };
    m.phi_xx = [=](double) { return pxx; };
    m.phi_term = [=](double x, double y0) { return cx * x + 0.5 * cxx * x * x + cy * y0; };
    m.phi_term_x = [=](double x, double) { return cx + cxx * x; };
    m.phi_term_y = [=](double, double) { return cy; };
    m.phi_term_xx = [=](double, double) { return cxx; };

    m.jumps_affect_state1 = (j1 != 0.0 || j1x != 0.0);
    m.jumps_affect_state2 = (j2 != 0.0 || j2x != 0.0);
    m.lambda_is_one = (lam == 1.0);
    m.obs_coupled = (h0 != 0.0 || hx != 0.0 || hy != 0.0);
    m.forward_needs_backward = (by != 0.0 || hy != 0.0);
    detail::derive_sandwich_constants(m, lx, hx, hy, qc, lam, h0 / s3, 0.8);
    m.control_set = {-0.8, -0.4, 0.0, 0.4};
    return m;
}

// Scalar signal observed through an affine channel; optional jumps on both
// driver measures. Defaults reduce to the classical linear-Gaussian filtering
// pair so the grid and particle filters can be checked against the
// closed-form conditional moments.
inline ModelSpec make_filter_linear(Params p) {
    ModelSpec m;
    m.name = "filter-linear";
    m.theta = detail::take(p, "theta", 0.5);
    m.x0 = detail::take(p, "x0", 0.3);
    const double a0 = detail::take(p, "a0", 0.0), ax = detail::take(p, "ax", -0.5),
                 bu = detail::take(p, "bu", 0.0);
    const double s1 = detail::take(p, "s1", 0.3), s2 = detail::take(p, "s2", 0.0);
    const double j1 = detail::take(p, "j1", 0.0), j2 = detail::take(p, "j2", 0.0);
    const double e1 = detail::take(p, "e1", 1.0), nu1 = detail::take(p, "nu1", 0.5);
    const double e2 = detail::take(p, "e2", 1.0), nu2 = detail::take(p, "nu2", 0.5);
    const double h0 = detail::take(p, "h0", 0.0), hx = detail::take(p, "hx", 1.0);
    const double s3 = detail::take(p, "s3", 0.4);
    const double lam = detail::take(p, "lam", 1.0);
    const double lr0 = detail::take(p, "lr0", 0.0), lrx = detail::take(p, "lrx", 0.0);
    const double cx = detail::take(p, "cx", 0.0), cxx = detail::take(p, "cxx", 0.0);
    detail::reject_leftovers(p, m.name);

    require(m.theta > 0.0, "filter-linear: theta must be positive");
    require(s3 != 0.0, "filter-linear: observation diffusion must be nonzero");
    require(lam > 0.0, "filter-linear: intensity ratio must be positive");

    m.marks1 = MarkSpace({e1}, {nu1});
    m.marks2 = MarkSpace({e2}, {nu2});

    m.b1 = [=](double, const State6& s, double u) { return a0 + ax * s[0] + bu * u; };
    m.b1_d = [=](double, const State6&, double) { return Grad6{ax, 0, 0, 0, 0, 0}; };
    m.b1_dd = [](double, const State6&, double) { return Hess6{}; };
    m.sigma1 = [=](double, double, double, double) { return s1; };
    m.sigma1_d = [](double, double, double, double) { return Grad2{0, 0}; };
    m.sigma1_dd = [](double, double, double, double) { return Hess2{}; };
    m.sigma2 = [=](double, double, double, double) { return s2; };
    m.sigma2_d = [](double, double, double, double) { return Grad2{0, 0}; };
    m.sigma2_dd = [](double, double, double, double) { return Hess2{}; };
    m.sigma3 = [=](double) { return s3; };
    m.b2 = [=](double, const State6& s, double) { return h0 + hx * s[0]; };
    m.b2_d = [=](double, const State6&, double) { return Grad6{hx, 0, 0, 0, 0, 0}; };
    m.b2_dd = [](double, const State6&, double) { return Hess6{}; };
    m.f1 = [=](double, double, double, double, double e) { return j1 * e; };
    m.f1_d = [](double, double, double, double, double) { return Grad2{0, 0}; };
    m.f1_dd = [](double, double, double, double, double) { return Hess2{}; };
    m.f2 = [=](double, double, double, double, double e) { return j2 * e; };
    m.f2_d = [](double, double, double, double, double) { return Grad2{0, 0}; };
    m.f2_dd = [](double, double, double, double, double) { return Hess2{}; };
    m.lambda = [=](double, double, double, double) { return lam; };
    m.lambda_x = [](double, double, double, double) { return 0.0; };
    m.lambda_xx = [](double, double, double, double) { return 0.0; };
    m.g = [](double, const State6&, double) { return 0.0; };
    m.g_d = [](double, const State6&, double) { return Grad6{}; };
    m.g_dd = [](double, const State6&, double) { return Hess6{}; };
    m.l_run = [=](double, const State6& s, double) { return lr0 + lrx * s[0]; };
    m.l_run_d = [=](double, const State6&, double) { return Grad6{lrx, 0, 0, 0, 0, 0}; };
    m.l_run_dd = [](double, const State6&, double) { return Hess6{}; };
    m.phi = [](double) { return 0.0; };
    m.phi_x = [](double) { return 0.0; };
    m.phi_xx = [](double) { return 0.0; };
    m.phi_term = [=](double x, double) { return cx * x + 0.5 * cxx * x * x; };
    m.phi_term_x = [=](double x, double) { return cx + cxx * x; };
    m.phi_term_y = [](double, double) { return 0.0; };
    m.phi_term_xx = [=](double, double) { return cxx; };

    m.jumps_affect_state1 = (j1 != 0.0);
    m.jumps_affect_state2 = (j2 != 0.0);
    m.lambda_is_one = (lam == 1.0);
    m.obs_coupled = (h0 != 0.0 || hx != 0.0);
    m.forward_needs_backward = false;
    m.control_set = {0.0};
    return m;
}

struct BuiltinInfo {
    std::string name;
    std::string summary;
};

inline std::vector<BuiltinInfo> list_builtins() {
    return {
        {"linear-test",
         "affine jump-diffusion pair with affine observation channel; parameters cover pure "
         "diffusion, quadratic control cost, weakly coupled forward-backward, and "
         "control-dependent diffusion variants"},
        {"invest",
         "risk-sensitive portfolio problem: wealth and factor dynamics with jumps, solved in its "
         "already-decoupled representation (its own pipeline; density checks are exact)"},
        {"filter-linear",
         "scalar signal with affine observation drift and optional jumps on both driver "
         "measures; defaults reduce to the linear-Gaussian filtering pair"},
    };
}

inline ModelSpec make_model(const std::string& name, Params p = {}) {
    if (name == "linear-test") return make_linear_test(std::move(p));
    if (name == "filter-linear") return make_filter_linear(std::move(p));
    throw ConfigError("unknown model '" + name + "'");
}

} // namespace rsjd
