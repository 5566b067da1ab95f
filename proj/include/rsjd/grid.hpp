#pragma once

#include <cstddef>
#include <vector>

#include "rsjd/common.hpp"

namespace rsjd {

struct TimeGrid {
    double T = 1.0;
    std::size_t n_steps = 100;
    double dt = 0.01;

    TimeGrid() = default;
    TimeGrid(double horizon, std::size_t steps) : T(horizon), n_steps(steps) {
        require(horizon > 0.0, "TimeGrid: horizon must be positive");
        require(steps > 0, "TimeGrid: need at least one step");
        dt = T / double(n_steps);
    }

    double node(std::size_t k) const { return (k == n_steps) ? T : dt * double(k); }
    std::size_t n_nodes() const { return n_steps + 1; }
};

// Finitely supported mark measure: atoms e_j with weights nu_j > 0.
// Integrals over the mark space are exact weighted sums.
struct MarkSpace {
    std::vector<double> atoms;
    std::vector<double> weights;

    MarkSpace() = default;
    MarkSpace(std::vector<double> a, std::vector<double> w)
        : atoms(std::move(a)), weights(std::move(w)) {
        require(atoms.size() == weights.size(), "MarkSpace: atoms/weights size mismatch");
        for (double nu : weights) require(nu > 0.0, "MarkSpace: weights must be positive");
    }

    std::size_t size() const { return atoms.size(); }
    double total_mass() const {
        double m = 0.0;
        for (double nu : weights) m += nu;
        return m;
    }
};

} // namespace rsjd
