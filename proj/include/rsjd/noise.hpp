#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rsjd/common.hpp"
#include "rsjd/grid.hpp"
#include "rsjd/rng.hpp"

namespace rsjd {

// Driver layout. Streams per base path:
//   0, 1          Brownian increments dW1, dW2
//   8 + 0*64 + j  Poisson counts, first measure, atom j
//   8 + 1*64 + j  Poisson counts, second measure, atom j
// Antithetic pairing: path 2i+1 reuses base path i with Brownian increments
// negated and jump counts shared, so each pair has exactly mirrored diffusion
// and identical jump skeleton.
struct PathEnsemble {
    TimeGrid grid;
    MarkSpace marks1;
    MarkSpace marks2;
    std::size_t n_paths = 0;
    std::uint64_t master_seed = 0;
    bool antithetic = false;

    PathEnsemble() = default;
    PathEnsemble(TimeGrid g, MarkSpace m1, MarkSpace m2, std::size_t paths,
                 std::uint64_t seed, bool anti = false)
        : grid(g), marks1(std::move(m1)), marks2(std::move(m2)), n_paths(paths),
          master_seed(seed), antithetic(anti) {
        require(n_paths > 0, "PathEnsemble: need at least one path");
        if (antithetic) require(n_paths % 2 == 0, "PathEnsemble: antithetic needs even path count");
        require(marks1.size() <= 64 && marks2.size() <= 64, "PathEnsemble: at most 64 atoms per measure");
    }
};

// Per-path O(1) accessor; cheap to construct inside path loops.
class PathNoise {
  public:
    PathNoise(const PathEnsemble& ens, std::size_t path) : ens_(&ens) {
        std::size_t base = ens.antithetic ? path / 2 : path;
        sign_ = (ens.antithetic && (path % 2 == 1)) ? -1.0 : 1.0;
        std::uint64_t pk = rng::path_key(ens.master_seed, base);
        kw1_ = rng::stream_key(pk, 0);
        kw2_ = rng::stream_key(pk, 1);
        n1_ = ens.marks1.size();
        n2_ = ens.marks2.size();
        for (std::size_t j = 0; j < n1_; ++j) kj1_[j] = rng::stream_key(pk, 8 + j);
        for (std::size_t j = 0; j < n2_; ++j) kj2_[j] = rng::stream_key(pk, 8 + 64 + j);
        sdt_ = std::sqrt(ens.grid.dt);
    }

    double dW1(std::size_t k) const { return sign_ * sdt_ * rng::normal(kw1_, k); }
    double dW2(std::size_t k) const { return sign_ * sdt_ * rng::normal(kw2_, k); }

    int dN1(std::size_t k, std::size_t j) const {
        return rng::poisson(kj1_[j], k, ens_->marks1.weights[j] * ens_->grid.dt);
    }
    int dN2(std::size_t k, std::size_t j) const {
        return rng::poisson(kj2_[j], k, ens_->marks2.weights[j] * ens_->grid.dt);
    }

    // Compensated count against the exact compensator nu_j * dt.
    double dTilde1(std::size_t k, std::size_t j) const {
        return double(dN1(k, j)) - ens_->marks1.weights[j] * ens_->grid.dt;
    }
    double dTilde2(std::size_t k, std::size_t j) const {
        return double(dN2(k, j)) - ens_->marks2.weights[j] * ens_->grid.dt;
    }

    bool any_jump(std::size_t k) const {
        for (std::size_t j = 0; j < n1_; ++j)
            if (dN1(k, j) > 0) return true;
        for (std::size_t j = 0; j < n2_; ++j)
            if (dN2(k, j) > 0) return true;
        return false;
    }

  private:
    const PathEnsemble* ens_;
    double sign_ = 1.0;
    double sdt_ = 0.0;
    std::uint64_t kw1_ = 0, kw2_ = 0;
    std::size_t n1_ = 0, n2_ = 0;
    std::uint64_t kj1_[64], kj2_[64];
};

struct MomentsReport {
    double worst_brownian_z = 0.0; // per-step mean and variance z-scores
    double worst_cross_z = 0.0;    // dW1 dW2 correlation, jump/Brownian covariance
    double worst_jump_z = 0.0;     // per-atom count mean vs nu * dt
    bool ok = true;
};

// Sample-moment screen over a whole ensemble: per-step means, variances and
// cross moments against their exact values, flagged past 4 standard errors.
inline MomentsReport brownian_moments_check(const PathEnsemble& ens) {
    MomentsReport rep;
    const double dt = ens.grid.dt;
    const std::size_t n = ens.n_paths;
    const double rn = std::sqrt(double(n));
    auto track = [](double& worst, double z) {
        if (std::abs(z) > std::abs(worst)) worst = z;
    };
    std::vector<double> w1(n), w2(n);
    for (std::size_t k = 0; k < ens.grid.n_steps; ++k) {
        double sum_cross = 0.0;
        double j1w = 0.0; // covariance of first-measure total count with dW1
        for (std::size_t p = 0; p < n; ++p) {
            PathNoise pn(ens, p);
            w1[p] = pn.dW1(k);
            w2[p] = pn.dW2(k);
            sum_cross += w1[p] * w2[p];
            int c1 = 0;
            for (std::size_t j = 0; j < ens.marks1.size(); ++j) c1 += pn.dN1(k, j);
            j1w += double(c1) * w1[p];
        }
        MeanVar m1 = mean_var(w1), m2 = mean_var(w2);
        track(rep.worst_brownian_z, m1.mean / (std::sqrt(dt) / rn));
        track(rep.worst_brownian_z, m2.mean / (std::sqrt(dt) / rn));
        // Var(dW^2 sample var) ~ 2 dt^2 / n for Gaussian increments
        track(rep.worst_brownian_z, (m1.var - dt) / (dt * std::sqrt(2.0 / double(n - 1))));
        track(rep.worst_brownian_z, (m2.var - dt) / (dt * std::sqrt(2.0 / double(n - 1))));
        track(rep.worst_cross_z, (sum_cross / double(n)) / (dt / rn));
        double mass1 = ens.marks1.total_mass();
        if (mass1 > 0.0)
            track(rep.worst_cross_z, (j1w / double(n)) / std::sqrt(mass1 * dt * dt / double(n)));
    }
    // Aggregate jump-count means over all steps, per atom.
    for (int meas = 0; meas < 2; ++meas) {
        const MarkSpace& mk = meas == 0 ? ens.marks1 : ens.marks2;
        for (std::size_t j = 0; j < mk.size(); ++j) {
            double lam = mk.weights[j] * dt;
            double tot = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
                PathNoise pn(ens, p);
                for (std::size_t k = 0; k < ens.grid.n_steps; ++k)
                    tot += meas == 0 ? pn.dN1(k, j) : pn.dN2(k, j);
            }
            double expect = lam * double(ens.grid.n_steps);
            double se = std::sqrt(expect / double(n)); // Poisson variance = mean
            track(rep.worst_jump_z, (tot / double(n) - expect) / se);
        }
    }
    rep.ok = std::abs(rep.worst_brownian_z) <= 4.0 && std::abs(rep.worst_cross_z) <= 4.0 &&
             std::abs(rep.worst_jump_z) <= 4.0;
    return rep;
}

} // namespace rsjd
