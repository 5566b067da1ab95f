#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/derived.hpp"
#include "rsjd/fbsdep.hpp"
#include "rsjd/model.hpp"
#include "rsjd/regression.hpp"

namespace rsjd {

// Exponential jump bracket against one mark space.
struct QexpBracketSpec {
    double theta = 0.5;
    const MarkSpace* marks = nullptr;

    QexpBracketSpec(double th, const MarkSpace& ms) : theta(th), marks(&ms) {
        require(th > 0.0, "QexpBracketSpec: theta must be positive");
    }
};

inline double qexp_bracket(const QexpBracketSpec& spec, const std::vector<double>& kt) {
    require(spec.marks && kt.size() == spec.marks->size(),
            "qexp_bracket: per-atom values must match the mark space");
    const double th = spec.theta;
    double v = 0.0;
    for (std::size_t j = 0; j < kt.size(); ++j)
        v += (std::expm1(th * kt[j]) - th * kt[j]) / th * spec.marks->weights[j];
    return v;
}

// The risk-adjusted value recursion: same backward engine as the first
// component, but driven by the assembled running generator and terminated at
// the cost terminal evaluated with the frozen initial backward value.
struct QexpResult {
    BackwardSolution sol;
    double y0 = 0.0;
    double zeta0 = 0.0;
    double dispersion0 = 0.0;
    std::size_t clamp_events = 0;
    std::size_t clamp_evals = 0;
    double clamp_fraction = 0.0;
    bool clamp_warning = false;
};

// The returned solution's generator closure keeps pointers to the model and
// to the first-pass solution, so both must outlive any use of the result's
// value reconstruction (they do in every pipeline here, which holds model,
// first pass and second pass in one scope).
inline QexpResult solve_qexp(const ModelSpec& m, const PathEnsemble& ens, const PathMatrix& x,
                             const ControlPolicy& policy, const BackwardSolution& ysol,
                             const SolveConfig& cfg, const PathMatrix* Yobs = nullptr) {
    auto tp = std::make_shared<TruncationPolicy>();
    tp->kappa_max = cfg.kappa_max;
    auto d = std::make_shared<Derived>(m, tp.get());
    const double y0 = ysol.value0;
    const BackwardSolution* yp = &ysol;

    GenFn gen = [tp, d, yp](std::size_t k, double t, double xv, double, double z1, double z2,
                            const double* kt1, const double* kt2, double u, std::size_t p) {
        State6 S = yp->theta(k, xv, p);
        return d->run_l(t, S, z1, z2, kt1, kt2, u);
    };
    const ModelSpec* mp = &m;
    auto terminal = [mp, y0](double xT) { return mp->phi_term(xT, y0); };

    QexpResult out;
    out.sol = lsmc_backward_generic(m, ens, x, policy, terminal, gen, !m.jumps_affect_state1,
                                    !m.jumps_affect_state2, cfg, Yobs);
    out.y0 = y0;
    out.zeta0 = out.sol.value0;
    out.dispersion0 = out.sol.dispersion0;
    out.clamp_events = tp->clamped;
    out.clamp_evals = tp->total;
    out.clamp_fraction = tp->fraction();
    out.clamp_warning = out.clamp_fraction > cfg.clamp_warn;
    if (out.clamp_fraction > 0.25)
        throw SolverError("solve_qexp: truncation active on more than a quarter of "
                          "the bracket evaluations; the cap is shaping the solution");
    return out;
}

// Empirical energy diagnostics of the martingale part. The remaining
// quadratic variation after each node is projected on the state basis and
// the largest fitted value over nodes and paths stands in for the BMO norm;
// the energy inequality E[(total QV)^n] <= n! * norm^n is then checked for
// n = 1, 2.
struct BmoDiagnostics {
    double bmo_brownian = 0.0;
    double bmo_jump = 0.0;
    double bmo_total = 0.0;
    double energy_lhs[2] = {0.0, 0.0};
    double energy_rhs[2] = {0.0, 0.0};
    bool energy_pass[2] = {false, false};
};

inline BmoDiagnostics bmo_energy_diagnostic(const ModelSpec& m, const PathEnsemble& ens,
                                            const PathMatrix& x, const BackwardSolution& bsol,
                                            int degree = 2) {
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    require(!x.empty(), "bmo_energy_diagnostic: forward paths required");

    // instantaneous energies per (node, path), then tail sums
    PathMatrix ebr, ejp;
    ebr.init(g.n_steps, n);
    ejp.init(g.n_steps, n);
    for (std::size_t k = 0; k < g.n_steps; ++k)
        for (std::size_t p = 0; p < n; ++p) {
            double xv = x.at(k, p);
            double z1 = bsol.z1(k, xv), z2 = bsol.z2(k, xv);
            ebr.at(k, p) = z1 * z1 + z2 * z2;
            double ej = 0.0;
            for (std::size_t j = 0; j < m.marks1.size(); ++j) {
                double v = bsol.zt1(k, j, xv);
                ej += v * v * m.marks1.weights[j];
            }
            for (std::size_t j = 0; j < m.marks2.size(); ++j) {
                double v = bsol.zt2(k, j, xv);
                ej += v * v * m.marks2.weights[j];
            }
            ejp.at(k, p) = ej;
        }

    BmoDiagnostics out;
    std::vector<double> tail_br(n, 0.0), tail_jp(n, 0.0), tail_tot(n);
    std::vector<double> fitted;
    for (std::size_t k = g.n_steps; k-- > 0;) {
        for (std::size_t p = 0; p < n; ++p) {
            tail_br[p] += ebr.at(k, p) * g.dt;
            tail_jp[p] += ejp.at(k, p) * g.dt;
            tail_tot[p] = tail_br[p] + tail_jp[p];
        }
        StepFit fit(x.row(k), nullptr, n, degree, 1e-8);
        auto eval_max = [&](const std::vector<double>& target) {
            RegressionTable tbl = fit.fit(target.data());
            double mx = 0.0;
            for (std::size_t p = 0; p < n; ++p)
                mx = std::max(mx, tbl.eval(x.at(k, p)));
            return mx;
        };
        out.bmo_brownian = std::max(out.bmo_brownian, eval_max(tail_br));
        out.bmo_jump = std::max(out.bmo_jump, eval_max(tail_jp));
        out.bmo_total = std::max(out.bmo_total, eval_max(tail_tot));
    }
    for (int i = 0; i < 2; ++i) {
        double nfac = (i == 0) ? 1.0 : 2.0;
        std::vector<double> pw(n);
        for (std::size_t p = 0; p < n; ++p)
            pw[p] = (i == 0) ? tail_tot[p] : tail_tot[p] * tail_tot[p];
        out.energy_lhs[i] = mean(pw);
        out.energy_rhs[i] = nfac * std::pow(out.bmo_total, double(i + 1));
        out.energy_pass[i] = out.energy_lhs[i] <= out.energy_rhs[i] * (1.0 + 1e-6) + 1e-12;
    }
    return out;
}

// Structure-condition probe: checks that the assembled generator sits inside
// the envelope +-(alpha + beta |y| + (theta_s / 2) |kappa|^2 + bracket) at
// one point, using the model-supplied envelope constants. Returns the signed
// worst-side margin (negative = violated).
struct SandwichProbe {
    double t = 0.0;
    State6 S{};
    double u = 0.0;
    double k1 = 0.0, k2 = 0.0;
    std::vector<double> kt1, kt2;
};

inline double qexp_sandwich_margin(const ModelSpec& m, const SandwichProbe& pr) {
    require(m.qexp_alpha >= 0.0 && m.qexp_beta >= 0.0 && m.qexp_theta > 0.0,
            "qexp_sandwich_margin: model does not supply envelope constants");
    Derived d(m);
    const double* p1 = pr.kt1.empty() ? nullptr : pr.kt1.data();
    const double* p2 = pr.kt2.empty() ? nullptr : pr.kt2.data();
    if (p1) require(pr.kt1.size() == m.marks1.size(), "sandwich probe: kt1 size");
    if (p2) require(pr.kt2.size() == m.marks2.size(), "sandwich probe: kt2 size");
    double l = d.run_l(pr.t, pr.S, pr.k1, pr.k2, p1, p2, pr.u);

    const double ths = m.qexp_theta;
    double base = m.qexp_alpha + m.qexp_beta * std::abs(pr.S[1]) +
                  0.5 * ths * (pr.k1 * pr.k1 + pr.k2 * pr.k2);
    auto bracket = [&](double sign) {
        double v = 0.0;
        for (std::size_t j = 0; p1 && j < m.marks1.size(); ++j)
            v += (std::expm1(ths * sign * pr.kt1[j]) - ths * sign * pr.kt1[j]) / ths *
                 m.marks1.weights[j];
        for (std::size_t j = 0; p2 && j < m.marks2.size(); ++j)
            v += (std::expm1(ths * sign * pr.kt2[j]) - ths * sign * pr.kt2[j]) / ths *
                 m.marks2.weights[j];
        return v;
    };
    double upper = base + bracket(+1.0);
    double lower = -base - bracket(-1.0);
    return std::min(upper - l, l - lower);
}

} // namespace rsjd
