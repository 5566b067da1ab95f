#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "rsjd/common.hpp"

namespace rsjd {

// Polynomial basis in one or two variables, total degree <= degree, on
// standardized inputs. Standardization constants are estimated from the fit
// sample and stored with the table so evaluation is self-contained.
struct PolyBasis {
    int dim = 1;
    int degree = 3;
    double mu[2] = {0.0, 0.0};
    double sd[2] = {1.0, 1.0};

    int n_terms() const {
        return dim == 1 ? degree + 1 : (degree + 1) * (degree + 2) / 2;
    }

    void fill_row(double x0, double x1, double* row) const {
        double s0 = (x0 - mu[0]) / sd[0];
        if (dim == 1) {
            double p = 1.0;
            for (int d = 0; d <= degree; ++d) {
                row[d] = p;
                p *= s0;
            }
            return;
        }
        double s1 = (x1 - mu[1]) / sd[1];
        double p0[16], p1[16];
        p0[0] = p1[0] = 1.0;
        for (int d = 1; d <= degree; ++d) {
            p0[d] = p0[d - 1] * s0;
            p1[d] = p1[d - 1] * s1;
        }
        int idx = 0;
        for (int tot = 0; tot <= degree; ++tot)
            for (int i = tot; i >= 0; --i) row[idx++] = p0[i] * p1[tot - i];
    }
};

// Fitted conditional-expectation table for one time node.
struct RegressionTable {
    PolyBasis basis;
    std::vector<double> coef;

    double eval(double x0, double x1 = 0.0) const {
        double row[32];
        basis.fill_row(x0, x1, row);
        double s = 0.0;
        for (std::size_t i = 0; i < coef.size(); ++i) s += coef[i] * row[i];
        return s;
    }
    bool empty() const { return coef.empty(); }
};

// One time node's regression workspace: basis matrix built once, Gram matrix
// factorized once, then any number of targets projected cheaply. Ridge is
// relative to the mean diagonal and escalates by 100x when the factorization
// is unusable (degenerate designs: deterministic states collapse every column
// except the constant one).
class StepFit {
  public:
    StepFit(const double* x0, const double* x1, std::size_t n, int degree, double ridge = 1e-8)
        : n_(n) {
        basis_.dim = x1 ? 2 : 1;
        basis_.degree = degree;
        standardize(x0, 0);
        if (x1) standardize(x1, 1);
        const int d = basis_.n_terms();
        B_.resize(n_, d);
        std::vector<double> row(d);
        for (std::size_t p = 0; p < n_; ++p) {
            basis_.fill_row(x0[p], x1 ? x1[p] : 0.0, row.data());
            for (int j = 0; j < d; ++j) B_(p, j) = row[j];
        }
        Eigen::MatrixXd G = B_.transpose() * B_;
        double diag_scale = G.trace() / double(d);
        if (diag_scale <= 0.0) diag_scale = 1.0;
        double r = ridge;
        for (int attempt = 0; attempt < 8; ++attempt) {
            Eigen::MatrixXd R = G + r * diag_scale * Eigen::MatrixXd::Identity(d, d);
            ldlt_.compute(R);
            if (ldlt_.info() == Eigen::Success) {
                Eigen::VectorXd probe = ldlt_.solve(Eigen::VectorXd::Ones(d));
                if (probe.allFinite()) break;
            }
            r *= 100.0;
            ++escalations_;
        }
    }

    // Projection of target onto the basis.
    RegressionTable fit(const double* target) const {
        Eigen::Map<const Eigen::VectorXd> y(target, n_);
        Eigen::VectorXd rhs = B_.transpose() * y;
        Eigen::VectorXd c = ldlt_.solve(rhs);
        RegressionTable t;
        t.basis = basis_;
        t.coef.assign(c.data(), c.data() + c.size());
        return t;
    }

    // Martingale-increment projection with control variate:
    //   (1/den) * Proj[(target - proj_table(state)) * inc]
    // The subtraction does not change the population projection (inc has
    // conditional mean zero, proj is state-measurable) but removes almost all
    // sample variance; with it deterministic reductions return exact zeros.
    RegressionTable fit_increment(const double* target, const RegressionTable& proj,
                                  const double* inc, double den, const double* x0,
                                  const double* x1 = nullptr) const {
        std::vector<double> resid(n_);
        for (std::size_t p = 0; p < n_; ++p) {
            double base = proj.eval(x0[p], x1 ? x1[p] : 0.0);
            resid[p] = (target[p] - base) * inc[p] / den;
        }
        return fit(resid.data());
    }

    // Residual standard deviation of a fitted table: dispersion diagnostic.
    double residual_sd(const double* target, const RegressionTable& t, const double* x0,
                       const double* x1 = nullptr) const {
        if (n_ < 2) return 0.0;
        std::vector<double> r(n_);
        for (std::size_t p = 0; p < n_; ++p)
            r[p] = target[p] - t.eval(x0[p], x1 ? x1[p] : 0.0);
        return std::sqrt(mean_var(r).var);
    }

    int escalations() const { return escalations_; }

  private:
    void standardize(const double* x, int which) {
        double m = 0.0;
        for (std::size_t p = 0; p < n_; ++p) m += x[p];
        m /= double(n_);
        double v = 0.0;
        for (std::size_t p = 0; p < n_; ++p) v += (x[p] - m) * (x[p] - m);
        v = n_ > 1 ? v / double(n_ - 1) : 0.0;
        basis_.mu[which] = m;
        basis_.sd[which] = v > 1e-24 ? std::sqrt(v) : 1.0;
    }

    std::size_t n_;
    PolyBasis basis_;
    Eigen::MatrixXd B_;
    Eigen::LDLT<Eigen::MatrixXd> ldlt_;
    int escalations_ = 0;
};

} // namespace rsjd
