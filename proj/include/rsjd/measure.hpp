#pragma once

#include <cmath>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/derived.hpp"
#include "rsjd/fbsdep.hpp"
#include "rsjd/model.hpp"
#include "rsjd/noise.hpp"

namespace rsjd {

struct GammaResult {
    std::vector<double> log_terminal; // ln of the density at the horizon, per path
    PathMatrix log_path;              // optional full log-density store
    MeanVar terminal_stats;           // of the density itself (not the log)
};

namespace detail {

// Per-step log increment of the physical/reference density along one path.
// Exponential Brownian increments and left-node intensity ratios: with the
// shift c and the ratios lam_j measurable at the step's left node, each
// factor exp(c dW - c^2 dt / 2) * prod_j lam_j^{dN_j} * exp(-sum_j (lam_j - 1) nu_j dt)
// has conditional mean one exactly, so the discrete density is a martingale
// by construction and its terminal mean is one up to sampling error only.
inline double log_density_step(const ModelSpec& m, Derived& d, double t, double dt, double xv,
                               const State6& S, double u, const PathNoise& pn, std::size_t k) {
    double lg = 0.0;
    if (m.obs_coupled) {
        double c = d.shift(t, S, u);
        lg += c * pn.dW2(k) - 0.5 * c * c * dt;
    }
    if (!m.lambda_is_one) {
        for (std::size_t j = 0; j < m.marks2.size(); ++j) {
            double lam = m.lambda(t, xv, u, m.marks2.atoms[j]);
            lg -= (lam - 1.0) * m.marks2.weights[j] * dt;
            int cnt = pn.dN2(k, j);
            if (cnt) lg += cnt * std::log(lam);
        }
    }
    return lg;
}

} // namespace detail

// Density process of the physical measure relative to the reference measure,
// accumulated along simulated reference paths.
inline GammaResult evolve_gamma_tilde(const ModelSpec& m, const PathEnsemble& ens,
                                      const ForwardResult& fwd, const BackwardSolution* bsol,
                                      const ControlPolicy& policy, bool store_path = false) {
    Derived d(m);
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    GammaResult out;
    out.log_terminal.assign(n, 0.0);
    if (store_path) out.log_path.init(g.n_nodes(), n);

    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double lg = 0.0;
        for (std::size_t k = 0; k < g.n_steps; ++k) {
            double t = g.node(k);
            double xv = fwd.x.at(k, p);
            State6 S = bsol ? bsol->theta(k, xv, p) : State6{xv, 0, 0, 0, 0, 0};
            ObsFeatures f;
            f.t = t;
            if (policy.kind == ControlPolicy::Kind::Feedback)
                f = obs_features(m, ens, fwd.Y.empty() ? nullptr : &fwd.Y, pn, k, p);
            else if (policy.kind == ControlPolicy::Kind::Spike)
                f.jump_in_step = pn.any_jump(k);
            double u = policy.eval(f);
            lg += detail::log_density_step(m, d, t, g.dt, xv, S, u, pn, k);
            if (store_path) out.log_path.at(k + 1, p) = lg;
        }
        out.log_terminal[p] = lg;
    }
    std::vector<double> gam(n);
    for (std::size_t p = 0; p < n; ++p) gam[p] = std::exp(out.log_terminal[p]);
    out.terminal_stats = mean_var(gam);
    return out;
}

// Shift and compensator summary of the measure change at one point.
struct GirsanovShift {
    double brownian = 0.0;                 // drift shift on the observation channel
    std::vector<double> jump_compensation; // per-atom (ratio - 1) * weight
};

inline GirsanovShift girsanov_shift(const ModelSpec& m, double t, const State6& S, double u) {
    Derived d(m);
    GirsanovShift out;
    out.brownian = m.obs_coupled ? d.shift(t, S, u) : 0.0;
    out.jump_compensation.resize(m.marks2.size());
    for (std::size_t j = 0; j < m.marks2.size(); ++j)
        out.jump_compensation[j] =
            (m.lambda(t, S[0], u, m.marks2.atoms[j]) - 1.0) * m.marks2.weights[j];
    return out;
}

// Log of the exponential cost reweighting along reference paths:
//   ln rho = ln density + theta * (running cost integral).
// Accumulated in a single per-step expression so the decomposition identity
// against evolve_gamma_tilde plus a separate cost integral is a real check
// of the shared step conventions, not a tautology.
inline std::vector<double> rho_log(const ModelSpec& m, const PathEnsemble& ens,
                                   const ForwardResult& fwd, const BackwardSolution* bsol,
                                   const ControlPolicy& policy) {
    Derived d(m);
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    const double th = m.theta;
    std::vector<double> out(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double acc = 0.0;
        for (std::size_t k = 0; k < g.n_steps; ++k) {
            double t = g.node(k);
            double xv = fwd.x.at(k, p);
            State6 S = bsol ? bsol->theta(k, xv, p) : State6{xv, 0, 0, 0, 0, 0};
            ObsFeatures f;
            f.t = t;
            if (policy.kind == ControlPolicy::Kind::Feedback)
                f = obs_features(m, ens, fwd.Y.empty() ? nullptr : &fwd.Y, pn, k, p);
            else if (policy.kind == ControlPolicy::Kind::Spike)
                f.jump_in_step = pn.any_jump(k);
            double u = policy.eval(f);

            double step = th * m.l_run(t, S, u) * g.dt;
            if (m.obs_coupled) {
                double c = d.shift(t, S, u);
                step += c * pn.dW2(k) - 0.5 * c * c * g.dt;
            }
            if (!m.lambda_is_one)
                for (std::size_t j = 0; j < m.marks2.size(); ++j) {
                    double lam = m.lambda(t, xv, u, m.marks2.atoms[j]);
                    step -= (lam - 1.0) * m.marks2.weights[j] * g.dt;
                    int cnt = pn.dN2(k, j);
                    if (cnt) step += cnt * std::log(lam);
                }
            acc += step;
        }
        out[p] = acc;
    }
    return out;
}

} // namespace rsjd
