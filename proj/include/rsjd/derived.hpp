#pragma once

#include <cmath>
#include <cstddef>

#include "rsjd/common.hpp"
#include "rsjd/model.hpp"

namespace rsjd {

// Clamp for jump integrands inside exponentials. Activations are counted so
// pipelines can warn (> 1% of evaluations) or abort (> 25%).
struct TruncationPolicy {
    double kappa_max = 10.0;
    mutable std::size_t clamped = 0;
    mutable std::size_t total = 0;

    double clamp(double k) const {
        ++total;
        if (std::abs(k) > kappa_max) {
            ++clamped;
            return k > 0.0 ? kappa_max : -kappa_max;
        }
        return k;
    }
    double fraction() const { return total ? double(clamped) / double(total) : 0.0; }
};

// Direction vector for exact second-order quadratic forms. Jump slots carry
// one entry per atom; null pointers mean zero.
struct Direction {
    double x = 0.0, y = 0.0, z1 = 0.0, z2 = 0.0;
    const double* zt1 = nullptr; // per-atom, first measure
    const double* zt2 = nullptr; // per-atom, second measure
    double k1 = 0.0, k2 = 0.0;
    const double* kt1 = nullptr;
    const double* kt2 = nullptr;
};

// Coefficients of the decoupled reference-measure system. The state drift
// absorbs the observation-drift shift and the intensity-ratio compensation;
// the running cost absorbs the quadratic and jump risk adjustments plus the
// cross term coming from the same measure change. All second-order forms are
// exact per atom: jump integrands are never linearized.
class Derived {
  public:
    Derived(const ModelSpec& m, const TruncationPolicy* trunc = nullptr)
        : m_(&m), trunc_(trunc) {}

    const ModelSpec& model() const { return *m_; }

    double clampk(double k) const { return trunc_ ? trunc_->clamp(k) : k; }

    // Girsanov shift carried by the observation channel.
    double shift(double t, const State6& s, double u) const {
        return m_->b2(t, s, u) / m_->sigma3(t);
    }

    // ---- state drift under the reference measure ----

    double drift_b(double t, const State6& s, double u) const {
        double v = m_->b1(t, s, u);
        if (m_->obs_coupled)
            v -= m_->sigma2(t, s[0], s[1], u) * shift(t, s, u);
        if (m_->jumps_affect_state2 && !m_->lambda_is_one)
            for (std::size_t j = 0; j < m_->marks2.size(); ++j)
                v -= (m_->lambda(t, s[0], u, m_->marks2.atoms[j]) - 1.0) *
                     m_->f2(t, s[0], s[1], u, m_->marks2.atoms[j]) * m_->marks2.weights[j];
        return v;
    }

    Grad6 grad_drift_b(double t, const State6& s, double u) const {
        Grad6 g = m_->grad_b1(t, s, u);
        if (m_->obs_coupled) {
            double s3i = 1.0 / m_->sigma3(t);
            double b2 = m_->b2(t, s, u);
            double sig2 = m_->sigma2(t, s[0], s[1], u);
            Grad6 b2d = m_->grad_b2(t, s, u);
            Grad2 s2d = m_->grad_sigma2(t, s[0], s[1], u);
            for (int c = 0; c < 6; ++c) g[c] -= s3i * sig2 * b2d[c];
            g[Coord::X] -= s3i * s2d[0] * b2;
            g[Coord::Y] -= s3i * s2d[1] * b2;
        }
        if (m_->jumps_affect_state2 && !m_->lambda_is_one)
            for (std::size_t j = 0; j < m_->marks2.size(); ++j) {
                double e = m_->marks2.atoms[j], nu = m_->marks2.weights[j];
                double lam = m_->lambda(t, s[0], u, e);
                double f2 = m_->f2(t, s[0], s[1], u, e);
                Grad2 f2d = m_->grad_f2(t, s[0], s[1], u, e);
                g[Coord::X] -= nu * (m_->dlambda_x(t, s[0], u, e) * f2 + (lam - 1.0) * f2d[0]);
                g[Coord::Y] -= nu * (lam - 1.0) * f2d[1];
            }
        return g;
    }

    // Exact quadratic form V' D2b V with per-atom jump directions.
    double quad_b(double t, const State6& s, double u, const Direction& V) const {
        double w6[6];
        effective_dir(V, w6);
        double q = quad6(m_->hess_b1(t, s, u), w6);
        if (m_->obs_coupled) {
            double s3i = 1.0 / m_->sigma3(t);
            double b2 = m_->b2(t, s, u);
            double sig2 = m_->sigma2(t, s[0], s[1], u);
            Grad6 b2d = m_->grad_b2(t, s, u);
            Grad2 s2d = m_->grad_sigma2(t, s[0], s[1], u);
            Hess2 s2dd = m_->hess_sigma2(t, s[0], s[1], u);
            double w_b2d = dot6(b2d, w6);
            double s2_dir = s2d[0] * V.x + s2d[1] * V.y;
            double s2_quad = quad2(s2dd, V.x, V.y);
            q -= s3i * (sig2 * quad6(m_->hess_b2(t, s, u), w6) + b2 * s2_quad +
                        2.0 * s2_dir * w_b2d);
        }
        if (m_->jumps_affect_state2 && !m_->lambda_is_one)
            for (std::size_t j = 0; j < m_->marks2.size(); ++j) {
                double e = m_->marks2.atoms[j], nu = m_->marks2.weights[j];
                double lam = m_->lambda(t, s[0], u, e);
                double f2 = m_->f2(t, s[0], s[1], u, e);
                Grad2 f2d = m_->grad_f2(t, s[0], s[1], u, e);
                double f2_dir = f2d[0] * V.x + f2d[1] * V.y;
                q -= nu * (m_->dlambda_xx(t, s[0], u, e) * f2 * V.x * V.x +
                           2.0 * m_->dlambda_x(t, s[0], u, e) * V.x * f2_dir +
                           (lam - 1.0) * quad2(m_->hess_f2(t, s[0], s[1], u, e), V.x, V.y));
            }
        return q;
    }

    // ---- risk-adjusted running cost ----
    // kt1 / kt2 are per-atom jump integrands of the value recursion; null
    // means identically zero for that measure.

    double run_l(double t, const State6& s, double k1, double k2, const double* kt1,
                 const double* kt2, double u) const {
        const double th = m_->theta;
        double v = m_->l_run(t, s, u) + 0.5 * th * (k1 * k1 + k2 * k2);
        for (std::size_t j = 0; j < m_->marks1.size() && kt1; ++j) {
            double k = clampk(kt1[j]);
            v += (std::expm1(th * k) - th * k) / th * m_->marks1.weights[j];
        }
        double c = m_->obs_coupled ? shift(t, s, u) : 0.0;
        v += c * k2;
        for (std::size_t j = 0; j < m_->marks2.size() && kt2; ++j) {
            double k = clampk(kt2[j]);
            double nu = m_->marks2.weights[j];
            v += (std::expm1(th * k) - th * k) / th * nu;
            if (!m_->lambda_is_one)
                v += (m_->lambda(t, s[0], u, m_->marks2.atoms[j]) - 1.0) * std::expm1(th * k) * nu;
        }
        return v;
    }

    Grad6 grad_l6(double t, const State6& s, double k2, const double* kt2, double u) const {
        Grad6 g = m_->grad_l(t, s, u);
        if (m_->obs_coupled) {
            double s3i = 1.0 / m_->sigma3(t);
            Grad6 b2d = m_->grad_b2(t, s, u);
            for (int c = 0; c < 6; ++c) g[c] += s3i * k2 * b2d[c];
        }
        if (!m_->lambda_is_one && kt2)
            for (std::size_t j = 0; j < m_->marks2.size(); ++j)
                g[Coord::X] += m_->dlambda_x(t, s[0], u, m_->marks2.atoms[j]) *
                               std::expm1(m_->theta * clampk(kt2[j])) * m_->marks2.weights[j];
        return g;
    }

    double l_k1(double k1) const { return m_->theta * k1; }
    double l_k2(double t, const State6& s, double k2, double u) const {
        return m_->theta * k2 + (m_->obs_coupled ? shift(t, s, u) : 0.0);
    }
    // Per-atom jump-risk sensitivities (densities; integrate against weights).
    double l_kt1(double kt) const { return std::expm1(m_->theta * clampk(kt)); }
    double l_kt2(double t, double x, double kt, double u, double e) const {
        double k = clampk(kt);
        double v = std::expm1(m_->theta * k);
        if (!m_->lambda_is_one)
            v += (m_->lambda(t, x, u, e) - 1.0) * m_->theta * std::exp(m_->theta * k);
        return v;
    }

    double quad_l(double t, const State6& s, double k2, const double* kt1, const double* kt2,
                  double u, const Direction& V) const {
        const double th = m_->theta;
        double w6[6];
        effective_dir(V, w6);
        double q = quad6(m_->hess_l(t, s, u), w6);
        q += th * (V.k1 * V.k1 + V.k2 * V.k2);
        for (std::size_t j = 0; j < m_->marks1.size() && V.kt1; ++j) {
            double k = kt1 ? clampk(kt1[j]) : 0.0;
            q += th * std::exp(th * k) * V.kt1[j] * V.kt1[j] * m_->marks1.weights[j];
        }
        if (m_->obs_coupled) {
            double s3i = 1.0 / m_->sigma3(t);
            Grad6 b2d = m_->grad_b2(t, s, u);
            q += s3i * (k2 * quad6(m_->hess_b2(t, s, u), w6) + 2.0 * V.k2 * dot6(b2d, w6));
        }
        for (std::size_t j = 0; j < m_->marks2.size(); ++j) {
            double e = m_->marks2.atoms[j], nu = m_->marks2.weights[j];
            double k = kt2 ? clampk(kt2[j]) : 0.0;
            double ek = std::exp(th * k);
            double vk = V.kt2 ? V.kt2[j] : 0.0;
            double lam1 = m_->lambda_is_one ? 0.0 : m_->lambda(t, s[0], u, e) - 1.0;
            q += th * ek * (1.0 + lam1 * th) * vk * vk * nu;
            if (!m_->lambda_is_one)
                q += nu * (m_->dlambda_xx(t, s[0], u, e) * std::expm1(th * k) * V.x * V.x +
                           2.0 * m_->dlambda_x(t, s[0], u, e) * th * ek * V.x * vk);
        }
        return q;
    }

    // Generator quadratic form (callback already lives on the six-vector).
    double quad_g(double t, const State6& s, double u, const Direction& V) const {
        double w6[6];
        effective_dir(V, w6);
        return quad6(m_->hess_g(t, s, u), w6);
    }

    // Collapse per-atom jump directions onto the integrated coordinates.
    void effective_dir(const Direction& V, double* w6) const {
        w6[0] = V.x;
        w6[1] = V.y;
        w6[2] = V.z1;
        w6[3] = V.z2;
        w6[4] = w6[5] = 0.0;
        if (V.zt1)
            for (std::size_t j = 0; j < m_->marks1.size(); ++j)
                w6[4] += V.zt1[j] * m_->marks1.weights[j];
        if (V.zt2)
            for (std::size_t j = 0; j < m_->marks2.size(); ++j)
                w6[5] += V.zt2[j] * m_->marks2.weights[j];
    }

    static double quad6(const Hess6& H, const double* w) {
        double q = 0.0;
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b) q += H[a * 6 + b] * w[a] * w[b];
        return q;
    }
    static double quad2(const Hess2& H, double vx, double vy) {
        return H[0] * vx * vx + (H[1] + H[2]) * vx * vy + H[3] * vy * vy;
    }
    static double dot6(const Grad6& g, const double* w) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += g[c] * w[c];
        return s;
    }

  private:
    const ModelSpec* m_;
    const TruncationPolicy* trunc_;
};

} // namespace rsjd
