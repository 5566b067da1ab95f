#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/fbsdep.hpp"
#include "rsjd/measure.hpp"
#include "rsjd/model.hpp"
#include "rsjd/qexp.hpp"

namespace rsjd {

// Exponential cost estimated directly: density weight times the exponential
// of the accumulated running cost and the cost terminal. Log weights above
// 700 cannot be exponentiated in double precision; those paths are dropped
// and accounted for, and crossing the configured fraction raises a warning.
struct DirectCost {
    double value = 0.0;
    double stderr_ = 0.0;
    std::size_t n_used = 0;
    std::size_t n_excluded = 0;
    double excluded_fraction = 0.0;
    bool overflow_warning = false;
};

inline DirectCost cost_direct(const ModelSpec& m, const PathEnsemble& ens,
                              const ForwardResult& fwd, const std::vector<double>& gamma_log,
                              const BackwardSolution* bsol, const ControlPolicy& policy,
                              double y0, double warn_fraction = 0.01) {
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    require(gamma_log.size() == n, "cost_direct: density weights must cover the ensemble");
    const double th = m.theta;

    std::vector<double> w;
    w.reserve(n);
    std::size_t excluded = 0;
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double cost = 0.0;
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
            cost += m.l_run(t, S, policy.eval(f)) * g.dt;
        }
        double lw = gamma_log[p] + th * (cost + m.phi_term(fwd.x.at(g.n_steps, p), y0));
        if (lw > 700.0) {
            ++excluded;
            continue;
        }
        w.push_back(std::exp(lw));
    }
    DirectCost out;
    out.n_used = w.size();
    out.n_excluded = excluded;
    out.excluded_fraction = double(excluded) / double(n);
    out.overflow_warning = out.excluded_fraction > warn_fraction;
    require(!w.empty(), "cost_direct: every path overflowed");
    auto mv = mean_var(w);
    out.value = mv.mean;
    out.stderr_ = mv.stderr_;
    return out;
}

// The recursive cost is the initial node of the risk-adjusted backward
// solution. At a deterministic starting state its cross-path dispersion is
// zero by construction; a dispersion that dwarfs the sampling scale means
// the fitted value still depends on information the initial node should not
// see (basis too weak, or a policy reading unavailable observations).
struct RecursiveCost {
    double zeta0 = 0.0;
    double dispersion = 0.0;
    double stderr_ = 0.0;
    bool measurability_warning = false;
};

inline RecursiveCost cost_recursive(const QexpResult& q, std::size_t n_paths) {
    RecursiveCost out;
    out.zeta0 = q.zeta0;
    out.dispersion = q.dispersion0;
    out.stderr_ = n_paths ? q.dispersion0 / std::sqrt(double(n_paths)) : 0.0;
    out.measurability_warning = out.dispersion > 10.0 * out.stderr_ && out.dispersion > 1e-10;
    return out;
}

// Both routes to the same number: the direct estimate against exp(theta *
// zeta0), compared relative to the direct value, with three standard errors
// plus a caller-supplied discretization band as the acceptance tolerance.
struct EquivalenceReport {
    double j_direct = 0.0;
    double j_recursive = 0.0;
    double gap_rel = 0.0;
    double tol = 0.0;
    bool pass = false;
};

inline EquivalenceReport equivalence_check(const DirectCost& direct, double zeta0, double theta,
                                           double bias_band = 0.0) {
    EquivalenceReport r;
    r.j_direct = direct.value;
    r.j_recursive = std::exp(theta * zeta0);
    double scale = std::max(std::abs(direct.value), 1e-300);
    r.gap_rel = std::abs(direct.value - r.j_recursive) / scale;
    r.tol = 3.0 * direct.stderr_ / scale + bias_band;
    r.pass = r.gap_rel <= r.tol;
    return r;
}

// Entropic functional of a sample set, log-sum-exp rescaled, with a blocked
// jackknife standard error.
struct NonlinearExpectation {
    double value = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

inline NonlinearExpectation nonlinear_expectation(const std::vector<double>& xi, double theta) {
    require(theta != 0.0, "nonlinear_expectation: theta must be nonzero");
    require(!xi.empty(), "nonlinear_expectation: empty sample");
    const std::size_t n = xi.size();
    double mx = theta * xi[0];
    for (double v : xi) {
        require(finite(v), "nonlinear_expectation: non-finite sample");
        mx = std::max(mx, theta * v);
    }
    const std::size_t B = std::min<std::size_t>(100, n);
    std::vector<double> bsum(B, 0.0);
    std::vector<std::size_t> bcnt(B, 0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double e = std::exp(theta * xi[i] - mx);
        std::size_t b = i * B / n;
        bsum[b] += e;
        bcnt[b] += 1;
        total += e;
    }
    NonlinearExpectation out;
    out.n = n;
    out.value = (mx + std::log(total / double(n))) / theta;
    if (B < 2) return out;
    std::vector<double> loo(B);
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        loo[b] = (mx + std::log((total - bsum[b]) / double(n - bcnt[b]))) / theta;
        acc += loo[b];
    }
    double lm = acc / double(B), ss = 0.0;
    for (double v : loo) ss += (v - lm) * (v - lm);
    out.stderr_ = std::sqrt(ss * double(B - 1) / double(B));
    return out;
}

} // namespace rsjd
