#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/derived.hpp"
#include "rsjd/model.hpp"
#include "rsjd/noise.hpp"
#include "rsjd/regression.hpp"

namespace rsjd {

// Time-major value store: row k holds all paths at node k.
struct PathMatrix {
    std::size_t n_nodes = 0, n_paths = 0;
    std::vector<double> v;

    void init(std::size_t nodes, std::size_t paths, double fill = 0.0) {
        n_nodes = nodes;
        n_paths = paths;
        v.assign(nodes * paths, fill);
    }
    bool empty() const { return v.empty(); }
    double* row(std::size_t k) { return v.data() + k * n_paths; }
    const double* row(std::size_t k) const { return v.data() + k * n_paths; }
    double& at(std::size_t k, std::size_t p) { return v[k * n_paths + p]; }
    double at(std::size_t k, std::size_t p) const { return v[k * n_paths + p]; }
};

struct SolveConfig {
    int degree = 3;
    double ridge = 1e-8;
    bool store_pathwise = false; // keep backward values for all (node, path)
    bool store_obs = false;      // keep the observation path
    int picard_max = 25;
    double picard_tol = 1e-6;
    double blowup = 1e12;
    double kappa_max = 10.0;   // truncation cap inside exponential brackets
    double clamp_warn = 0.01;  // clamp-activation fraction that raises a warning
};

// Builds the observation features a policy may read at (k, p). The
// observation is driftless under the reference measure, so it is regenerated
// from the second Brownian stream on demand when no stored path is available.
inline ObsFeatures obs_features(const ModelSpec& m, const PathEnsemble& ens,
                                const PathMatrix* Y, const PathNoise& pn, std::size_t k,
                                std::size_t p) {
    ObsFeatures f;
    f.t = ens.grid.node(k);
    f.jump_in_step = pn.any_jump(k);
    if (Y && !Y->empty()) {
        f.Y = Y->at(k, p);
        for (int lag = 0; lag < 4; ++lag)
            f.dY[lag] = (k >= std::size_t(lag + 1))
                            ? Y->at(k - lag, p) - Y->at(k - lag - 1, p)
                            : 0.0;
        return f;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += m.sigma3(ens.grid.node(i)) * pn.dW2(i);
    f.Y = acc;
    for (int lag = 0; lag < 4; ++lag)
        f.dY[lag] = (k >= std::size_t(lag + 1))
                        ? m.sigma3(ens.grid.node(k - lag - 1)) * pn.dW2(k - lag - 1)
                        : 0.0;
    return f;
}

// One explicit step of the state equation under the reference measure:
// continuous part and compensators at the left state, then jump events one at
// a time so the integrand always sees the left limit of the running state.
// `visit(measure, atom, x_left)` fires once per event.
template <class Visit>
inline double forward_step(const ModelSpec& m, const Derived& d, double t, double dt, double x,
                           const State6& S, double u, const PathNoise& pn, std::size_t k,
                           Visit&& visit) {
    double b = d.drift_b(t, S, u);
    double s1 = m.sigma1(t, x, S[1], u);
    double s2 = m.sigma2(t, x, S[1], u);
    double comp = 0.0;
    if (m.jumps_affect_state1)
        for (std::size_t j = 0; j < m.marks1.size(); ++j)
            comp += m.f1(t, x, S[1], u, m.marks1.atoms[j]) * m.marks1.weights[j];
    if (m.jumps_affect_state2)
        for (std::size_t j = 0; j < m.marks2.size(); ++j)
            comp += m.f2(t, x, S[1], u, m.marks2.atoms[j]) * m.marks2.weights[j];
    double xr = x + (b - comp) * dt + s1 * pn.dW1(k) + s2 * pn.dW2(k);
    for (std::size_t j = 0; j < m.marks1.size(); ++j) {
        int c = pn.dN1(k, j);
        for (int i = 0; i < c; ++i) {
            visit(1, j, xr);
            if (m.jumps_affect_state1) xr += m.f1(t, xr, S[1], u, m.marks1.atoms[j]);
        }
    }
    for (std::size_t j = 0; j < m.marks2.size(); ++j) {
        int c = pn.dN2(k, j);
        for (int i = 0; i < c; ++i) {
            visit(2, j, xr);
            if (m.jumps_affect_state2) xr += m.f2(t, xr, S[1], u, m.marks2.atoms[j]);
        }
    }
    return xr;
}

class BackwardSolution; // below

struct ForwardResult {
    PathMatrix x;
    PathMatrix Y; // empty unless requested
};

// Generator signature shared by every scalar backward recursion. kt1/kt2 are
// per-atom jump integrands of the equation itself (null when skipped). The
// path index lets a second-pass generator look up companion pathwise values;
// it is npos when the recursion is evaluated off-path.
using GenFn = std::function<double(std::size_t k, double t, double x, double yhat, double z1,
                                   double z2, const double* kt1, const double* kt2, double u,
                                   std::size_t p)>;

// Conditional-expectation tables of one backward equation plus everything
// needed to reconstruct its value process as a function of the state. For
// feedback policies the reconstruction is path-dependent, so the pathwise
// store is required instead.
class BackwardSolution {
  public:
    struct NodeTables {
        RegressionTable y, z1, z2;
        std::vector<RegressionTable> zt1, zt2;
    };

    const ModelSpec* model = nullptr;
    TimeGrid grid;
    ControlPolicy policy;
    std::function<double(double)> terminal;
    GenFn gen;
    std::vector<NodeTables> nodes; // index k in [0, n_steps)
    PathMatrix pathwise;           // optional value store
    double value0 = 0.0;           // value at the initial node
    double dispersion0 = 0.0;      // residual sd of the last regression
    int ridge_escalations = 0;

    bool feedback_policy() const { return policy.path_dependent(); }

    double yhat(std::size_t k, double x) const { return nodes[k].y.eval(x); }
    double z1(std::size_t k, double x) const {
        return k < nodes.size() ? nodes[k].z1.eval(x) : 0.0;
    }
    double z2(std::size_t k, double x) const {
        return k < nodes.size() ? nodes[k].z2.eval(x) : 0.0;
    }
    double zt1(std::size_t k, std::size_t j, double x) const {
        return k < nodes.size() && j < nodes[k].zt1.size() ? nodes[k].zt1[j].eval(x) : 0.0;
    }
    double zt2(std::size_t k, std::size_t j, double x) const {
        return k < nodes.size() && j < nodes[k].zt2.size() ? nodes[k].zt2[j].eval(x) : 0.0;
    }

    // Value process reconstructed at (node, state). Valid for policies whose
    // control is a function of time alone; feedback runs keep pathwise values.
    double y(std::size_t k, double x) const {
        if (k >= grid.n_steps) return terminal(x);
        if (feedback_policy())
            throw SolverError("value reconstruction needs the pathwise store under feedback");
        double t = grid.node(k);
        double yh = yhat(k, x);
        double kt1[64], kt2[64];
        const double* p1 = fill_zt(k, x, 1, kt1);
        const double* p2 = fill_zt(k, x, 2, kt2);
        ObsFeatures f;
        f.t = t;
        double u = policy.eval(f);
        return yh + grid.dt * gen(k, t, x, yh, z1(k, x), z2(k, x), p1, p2, u, std::size_t(-1));
    }

    // Six-vector the coefficient callbacks expect. When a path index is given
    // and pathwise values exist they win (required under feedback policies).
    State6 theta(std::size_t k, double x, std::size_t p = std::size_t(-1)) const {
        double yv = (p != std::size_t(-1) && !pathwise.empty()) ? pathwise.at(k, p) : y(k, x);
        State6 s{x, yv, z1(k, x), z2(k, x), 0.0, 0.0};
        if (!model) return s;
        for (std::size_t j = 0; j < model->marks1.size(); ++j)
            s[4] += zt1(k, j, x) * model->marks1.weights[j];
        for (std::size_t j = 0; j < model->marks2.size(); ++j)
            s[5] += zt2(k, j, x) * model->marks2.weights[j];
        return s;
    }

    const double* fill_zt(std::size_t k, double x, int measure, double* buf) const {
        if (!model || k >= nodes.size()) return nullptr;
        const auto& tabs = measure == 1 ? nodes[k].zt1 : nodes[k].zt2;
        if (tabs.empty()) return nullptr;
        for (std::size_t j = 0; j < tabs.size(); ++j) buf[j] = tabs[j].eval(x);
        return buf;
    }
};

// Explicit Euler simulation of the state (and optionally the observation)
// under the reference measure. `fb` supplies the backward components the
// coefficients may read; null means zeros (first Picard sweep, or decoupled
// models).
inline ForwardResult forward_euler(const ModelSpec& m, const PathEnsemble& ens,
                                   const ControlPolicy& policy, const BackwardSolution* fb,
                                   const SolveConfig& cfg) {
    Derived d(m);
    const TimeGrid& g = ens.grid;
    ForwardResult out;
    out.x.init(g.n_nodes(), ens.n_paths);
    bool need_obs = cfg.store_obs || policy.kind == ControlPolicy::Kind::Feedback;
    if (need_obs) out.Y.init(g.n_nodes(), ens.n_paths);
    for (std::size_t p = 0; p < ens.n_paths; ++p) out.x.at(0, p) = m.x0;

    for (std::size_t p = 0; p < ens.n_paths; ++p) {
        PathNoise pn(ens, p);
        double x = m.x0;
        double Y = 0.0;
        for (std::size_t k = 0; k < g.n_steps; ++k) {
            double t = g.node(k);
            State6 S = fb ? fb->theta(k, x) : State6{x, 0, 0, 0, 0, 0};
            S[0] = x;
            ObsFeatures f;
            if (policy.kind == ControlPolicy::Kind::Feedback) {
                f = obs_features(m, ens, need_obs ? &out.Y : nullptr, pn, k, p);
            } else {
                f.t = t;
                if (policy.kind == ControlPolicy::Kind::Spike) f.jump_in_step = pn.any_jump(k);
            }
            double u = policy.eval(f);
            x = forward_step(m, d, t, g.dt, x, S, u, pn, k, [](int, std::size_t, double) {});
            if (!std::isfinite(x) || std::abs(x) > cfg.blowup)
                throw SolverError("forward simulation blew up");
            out.x.at(k + 1, p) = x;
            if (need_obs) {
                Y += m.sigma3(t) * pn.dW2(k);
                out.Y.at(k + 1, p) = Y;
            }
        }
    }
    return out;
}

// Least-squares Monte Carlo backward recursion:
//   value at k   = Reg[value at k+1 | basis(x_k)] + dt * generator
//   z at k       = (1/dt)   Reg[(value - proj) dW   | basis(x_k)]
//   jump integrand per atom
//                = (1/nu dt) Reg[(value - proj) dN~ | basis(x_k)]
// The projection subtraction is the control variate described in
// regression.hpp. skip flags suppress per-atom fits that are exactly zero by
// model structure.
inline BackwardSolution lsmc_backward_generic(const ModelSpec& m, const PathEnsemble& ens,
                                              const PathMatrix& x, const ControlPolicy& policy,
                                              std::function<double(double)> terminal, GenFn gen,
                                              bool skip1, bool skip2, const SolveConfig& cfg,
                                              const PathMatrix* Yobs = nullptr) {
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    require(x.n_nodes == g.n_nodes() && x.n_paths == n, "backward: state matrix shape mismatch");
    if (policy.kind == ControlPolicy::Kind::Feedback)
        require(Yobs && !Yobs->empty(), "backward: feedback policy needs the observation path");

    BackwardSolution sol;
    sol.model = &m;
    sol.grid = g;
    sol.policy = policy;
    sol.terminal = terminal;
    sol.gen = gen;
    sol.nodes.resize(g.n_steps);
    if (cfg.store_pathwise || policy.path_dependent()) sol.pathwise.init(g.n_nodes(), n);

    const std::size_t K1 = m.marks1.size(), K2 = m.marks2.size();
    std::vector<double> ycur(n), ynext(n);
    std::vector<double> dw1(n), dw2(n);
    std::vector<std::vector<double>> dn1(skip1 ? 0 : K1), dn2(skip2 ? 0 : K2);
    for (auto& v : dn1) v.resize(n);
    for (auto& v : dn2) v.resize(n);
    for (std::size_t p = 0; p < n; ++p) ycur[p] = terminal(x.at(g.n_steps, p));
    if (!sol.pathwise.empty())
        for (std::size_t p = 0; p < n; ++p) sol.pathwise.at(g.n_steps, p) = ycur[p];

    for (std::size_t k = g.n_steps; k-- > 0;) {
        const double t = g.node(k);
        const double* xk = x.row(k);
        StepFit fit(xk, nullptr, n, cfg.degree, cfg.ridge);
        auto& nt = sol.nodes[k];
        nt.y = fit.fit(ycur.data());

        for (std::size_t p = 0; p < n; ++p) {
            PathNoise pn(ens, p);
            dw1[p] = pn.dW1(k);
            dw2[p] = pn.dW2(k);
            for (std::size_t j = 0; j < dn1.size(); ++j) dn1[j][p] = pn.dTilde1(k, j);
            for (std::size_t j = 0; j < dn2.size(); ++j) dn2[j][p] = pn.dTilde2(k, j);
        }
        nt.z1 = fit.fit_increment(ycur.data(), nt.y, dw1.data(), g.dt, xk);
        nt.z2 = fit.fit_increment(ycur.data(), nt.y, dw2.data(), g.dt, xk);
        if (!skip1) {
            nt.zt1.resize(K1);
            for (std::size_t j = 0; j < K1; ++j)
                nt.zt1[j] = fit.fit_increment(ycur.data(), nt.y, dn1[j].data(),
                                              m.marks1.weights[j] * g.dt, xk);
        }
        if (!skip2) {
            nt.zt2.resize(K2);
            for (std::size_t j = 0; j < K2; ++j)
                nt.zt2[j] = fit.fit_increment(ycur.data(), nt.y, dn2[j].data(),
                                              m.marks2.weights[j] * g.dt, xk);
        }
        sol.ridge_escalations += fit.escalations();

        double kt1[64], kt2[64];
        for (std::size_t p = 0; p < n; ++p) {
            double xv = xk[p];
            double yh = nt.y.eval(xv);
            double z1 = nt.z1.eval(xv), z2 = nt.z2.eval(xv);
            const double* p1 = nullptr;
            const double* p2 = nullptr;
            if (!skip1) {
                for (std::size_t j = 0; j < K1; ++j) kt1[j] = nt.zt1[j].eval(xv);
                p1 = kt1;
            }
            if (!skip2) {
                for (std::size_t j = 0; j < K2; ++j) kt2[j] = nt.zt2[j].eval(xv);
                p2 = kt2;
            }
            double u;
            if (policy.kind == ControlPolicy::Kind::Feedback) {
                PathNoise pn(ens, p);
                u = policy.eval(obs_features(m, ens, Yobs, pn, k, p));
            } else {
                ObsFeatures f;
                f.t = t;
                if (policy.kind == ControlPolicy::Kind::Spike)
                    f.jump_in_step = PathNoise(ens, p).any_jump(k);
                u = policy.eval(f);
            }
            double v = yh + g.dt * gen(k, t, xv, yh, z1, z2, p1, p2, u, p);
            if (!std::isfinite(v) || std::abs(v) > cfg.blowup)
                throw SolverError("backward recursion blew up");
            ynext[p] = v;
        }
        ycur.swap(ynext);
        if (!sol.pathwise.empty())
            for (std::size_t p = 0; p < n; ++p) sol.pathwise.at(k, p) = ycur[p];
        if (k == 0) {
            sol.dispersion0 = std::sqrt(mean_var(ycur).var);
            sol.value0 = mean(ycur);
        }
    }
    return sol;
}

// First backward component: generator g read on the six-vector.
inline BackwardSolution lsmc_backward(const ModelSpec& m, const PathEnsemble& ens,
                                      const PathMatrix& x, const ControlPolicy& policy,
                                      const SolveConfig& cfg, const PathMatrix* Yobs = nullptr) {
    GenFn gen = [&m](std::size_t, double t, double xv, double yh, double z1, double z2,
                     const double* kt1, const double* kt2, double u, std::size_t) {
        State6 S{xv, yh, z1, z2, 0.0, 0.0};
        if (kt1)
            for (std::size_t j = 0; j < m.marks1.size(); ++j) S[4] += kt1[j] * m.marks1.weights[j];
        if (kt2)
            for (std::size_t j = 0; j < m.marks2.size(); ++j) S[5] += kt2[j] * m.marks2.weights[j];
        return m.g(t, S, u);
    };
    return lsmc_backward_generic(m, ens, x, policy, m.phi, gen, !m.jumps_affect_state1,
                                 !m.jumps_affect_state2, cfg, Yobs);
}

struct PicardResult {
    ForwardResult fwd;
    BackwardSolution bwd;
    int iterations = 0;
    bool converged = false;
    std::vector<double> errors; // per-iteration contraction metric
};

// Alternating forward/backward sweeps for coupled systems. The contraction
// metric is the sup over nodes of the mean absolute change in the state plus
// the change in the backward value reconstructed on the new state. Three
// consecutive non-contracting sweeps abort (divergent coupling).
inline PicardResult picard_coupled(const ModelSpec& m, const PathEnsemble& ens,
                                   const ControlPolicy& policy, const SolveConfig& cfg) {
    PicardResult res;
    if (!m.forward_needs_backward) {
        res.fwd = forward_euler(m, ens, policy, nullptr, cfg);
        res.bwd = lsmc_backward(m, ens, res.fwd.x, policy, cfg,
                                res.fwd.Y.empty() ? nullptr : &res.fwd.Y);
        res.iterations = 1;
        res.converged = true;
        res.errors.push_back(0.0);
        return res;
    }
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    ForwardResult fwd = forward_euler(m, ens, policy, nullptr, cfg);
    BackwardSolution bwd =
        lsmc_backward(m, ens, fwd.x, policy, cfg, fwd.Y.empty() ? nullptr : &fwd.Y);
    int bad_streak = 0;
    for (int it = 1; it <= cfg.picard_max; ++it) {
        ForwardResult fwd2 = forward_euler(m, ens, policy, &bwd, cfg);
        BackwardSolution bwd2 =
            lsmc_backward(m, ens, fwd2.x, policy, cfg, fwd2.Y.empty() ? nullptr : &fwd2.Y);
        double err = 0.0;
        std::size_t stride = std::max<std::size_t>(1, g.n_steps / 16);
        bool use_pathwise = !bwd.pathwise.empty() && !bwd2.pathwise.empty();
        for (std::size_t k = 0; k <= g.n_steps; k += stride) {
            double ax = 0.0, ay = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
                ax += std::abs(fwd2.x.at(k, p) - fwd.x.at(k, p));
                ay += use_pathwise
                          ? std::abs(bwd2.pathwise.at(k, p) - bwd.pathwise.at(k, p))
                          : std::abs(bwd2.y(k, fwd2.x.at(k, p)) - bwd.y(k, fwd2.x.at(k, p)));
            }
            err = std::max(err, ax / double(n) + ay / double(n));
        }
        res.errors.push_back(err);
        bool contracted = res.errors.size() < 2 || err < res.errors[res.errors.size() - 2];
        bad_streak = contracted ? 0 : bad_streak + 1;
        if (bad_streak >= 3)
            throw SolverError("coupled iteration diverged: three consecutive non-contracting sweeps");
        fwd = std::move(fwd2);
        bwd = std::move(bwd2);
        res.iterations = it + 1;
        if (err < cfg.picard_tol) {
            res.converged = true;
            break;
        }
    }
    res.fwd = std::move(fwd);
    res.bwd = std::move(bwd);
    return res;
}

struct LpEstimate {
    double lhs = 0.0;
    double rhs = 0.0;
    double ratio = 0.0;
};

// Moment-bound diagnostic: p-th moment of the solution bundle against the
// same moment of the data entering the a-priori estimate. Only the ratio is
// meaningful; it should stay bounded as the discretization is refined.
inline LpEstimate lp_estimate_diagnostic(const ModelSpec& m, const PathEnsemble& ens,
                                         const ForwardResult& fwd, const BackwardSolution& bwd,
                                         const ControlPolicy& policy, double pmoment = 2.0) {
    const TimeGrid& g = ens.grid;
    const std::size_t n = ens.n_paths;
    Derived d(m);
    std::vector<double> lhs(n), rhs(n);
    State6 zero{};
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double supx = 0.0, supy = 0.0, qz = 0.0, qzt = 0.0;
        double ig0 = 0.0, ib0 = 0.0, is0 = 0.0, jf0 = 0.0;
        for (std::size_t k = 0; k <= g.n_steps; ++k) {
            double xv = fwd.x.at(k, p);
            supx = std::max(supx, std::abs(xv));
            double yv = bwd.pathwise.empty() ? bwd.y(k, xv) : bwd.pathwise.at(k, p);
            supy = std::max(supy, std::abs(yv));
            if (k == g.n_steps) break;
            double t = g.node(k);
            double z1 = bwd.z1(k, xv), z2 = bwd.z2(k, xv);
            qz += (z1 * z1 + z2 * z2) * g.dt;
            for (std::size_t j = 0; j < m.marks1.size(); ++j) {
                double zt = bwd.zt1(k, j, xv);
                qzt += zt * zt * m.marks1.weights[j] * g.dt;
            }
            for (std::size_t j = 0; j < m.marks2.size(); ++j) {
                double zt = bwd.zt2(k, j, xv);
                qzt += zt * zt * m.marks2.weights[j] * g.dt;
            }
            ObsFeatures f;
            f.t = t;
            if (policy.kind == ControlPolicy::Kind::Spike) f.jump_in_step = pn.any_jump(k);
            double u = policy.eval(f);
            ig0 += std::abs(m.g(t, zero, u)) * g.dt;
            ib0 += std::abs(d.drift_b(t, zero, u)) * g.dt;
            double s1 = m.sigma1(t, 0.0, 0.0, u), s2 = m.sigma2(t, 0.0, 0.0, u);
            is0 += (s1 * s1 + s2 * s2) * g.dt;
            for (std::size_t j = 0; j < m.marks1.size(); ++j) {
                double fv = m.f1(t, 0.0, 0.0, u, m.marks1.atoms[j]);
                jf0 += fv * fv * double(pn.dN1(k, j));
            }
            for (std::size_t j = 0; j < m.marks2.size(); ++j) {
                double fv = m.f2(t, 0.0, 0.0, u, m.marks2.atoms[j]);
                jf0 += fv * fv * double(pn.dN2(k, j));
            }
        }
        double ph = pmoment / 2.0;
        lhs[p] = std::pow(supx, pmoment) + std::pow(supy, pmoment) + std::pow(qz, ph) +
                 std::pow(qzt, ph);
        rhs[p] = std::pow(std::abs(m.x0), pmoment) + std::pow(std::abs(m.phi(0.0)), pmoment) +
                 std::pow(ig0, pmoment) + std::pow(ib0, pmoment) + std::pow(is0, ph) +
                 std::pow(jf0, ph);
    }
    LpEstimate est;
    est.lhs = mean(lhs);
    est.rhs = mean(rhs);
    est.ratio = est.rhs > 0.0 ? est.lhs / est.rhs : std::numeric_limits<double>::infinity();
    return est;
}

} // namespace rsjd
