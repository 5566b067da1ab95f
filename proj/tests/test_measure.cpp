#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rsjd/measure.hpp"
#include "rsjd/models_builtin.hpp"

using namespace rsjd;

namespace {

PathEnsemble make_ens(const ModelSpec& m, double T, std::size_t steps, std::size_t paths,
                      std::uint64_t seed, bool anti) {
    return PathEnsemble(TimeGrid(T, steps), m.marks1, m.marks2, paths, seed, anti);
}

} // namespace

TEST_CASE("density: unit mean with coupled observation and reweighted jumps") {
    auto m = make_linear_test({{"s10", 0.3},
                               {"h0", 0.3},
                               {"hx", 0.2},
                               {"lam", 1.3},
                               {"nu2", 0.5},
                               {"j2", 0.2}});
    REQUIRE(m.obs_coupled);
    REQUIRE_FALSE(m.lambda_is_one);
    auto ens = make_ens(m, 1.0, 32, 40000, 401, false);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto gr = evolve_gamma_tilde(m, ens, fwd, nullptr, pol);
    REQUIRE(gr.terminal_stats.n == 40000);
    REQUIRE(std::abs(gr.terminal_stats.mean - 1.0) < 4.0 * gr.terminal_stats.stderr_);
    REQUIRE(gr.terminal_stats.stderr_ < 0.02);
}

TEST_CASE("density: log path accumulates to the terminal entry") {
    auto m = make_linear_test({{"s10", 0.3}, {"h0", 0.3}, {"hx", 0.2}, {"lam", 1.2},
                               {"nu2", 0.6}, {"j2", 0.1}});
    auto ens = make_ens(m, 1.0, 16, 64, 402, false);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto gr = evolve_gamma_tilde(m, ens, fwd, nullptr, pol, true);
    for (std::size_t p = 0; p < ens.n_paths; ++p) {
        REQUIRE(gr.log_path.at(0, p) == 0.0);
        REQUIRE(gr.log_path.at(16, p) == Catch::Approx(gr.log_terminal[p]).margin(1e-14));
    }
}

TEST_CASE("density: intensity ratio one leaves a pure Brownian exponential") {
    // jumps still move the state (j2 != 0) but carry no density factor
    auto m = make_linear_test({{"s10", 0.3}, {"h0", 0.5}, {"lam", 1.0},
                               {"nu2", 0.5}, {"j2", 0.3}, {"s3", 2.0}});
    REQUIRE(m.lambda_is_one);
    auto ens = make_ens(m, 1.0, 20, 128, 403, false);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto gr = evolve_gamma_tilde(m, ens, fwd, nullptr, pol);
    double c = 0.5 / 2.0;
    for (std::size_t p = 0; p < ens.n_paths; ++p) {
        PathNoise pn(ens, p);
        double w = 0.0;
        for (std::size_t k = 0; k < 20; ++k) w += pn.dW2(k);
        REQUIRE(gr.log_terminal[p] == Catch::Approx(c * w - 0.5 * c * c * 1.0).margin(1e-13));
    }
}

TEST_CASE("reweighting: log decomposes into density plus running cost") {
    auto m = make_linear_test({{"s10", 0.3},
                               {"h0", 0.3},
                               {"hx", 0.2},
                               {"lam", 1.3},
                               {"nu2", 0.5},
                               {"j2", 0.2},
                               {"lx", 0.4},
                               {"qc", 1.0},
                               {"theta", 0.7}});
    auto ens = make_ens(m, 1.0, 16, 200, 404, false);
    auto pol = ControlPolicy::make_constant(0.4);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto gr = evolve_gamma_tilde(m, ens, fwd, nullptr, pol);
    auto lr = rho_log(m, ens, fwd, nullptr, pol);
    double worst = 0.0;
    for (std::size_t p = 0; p < ens.n_paths; ++p) {
        double cost = 0.0;
        for (std::size_t k = 0; k < 16; ++k) {
            State6 s{fwd.x.at(k, p), 0, 0, 0, 0, 0};
            cost += m.l_run(ens.grid.node(k), s, 0.4) * ens.grid.dt;
        }
        worst = std::max(worst, std::abs(lr[p] - (gr.log_terminal[p] + 0.7 * cost)));
    }
    REQUIRE(worst < 1e-12);
}

TEST_CASE("reweighting: unit mean survives an observation-driven control") {
    auto m = make_linear_test({{"s10", 0.3}, {"h0", 0.2}, {"hx", 0.3}, {"lam", 1.4},
                               {"nu2", 0.4}, {"j2", 0.1}});
    auto ens = make_ens(m, 1.0, 24, 20000, 405, false);
    auto pol = ControlPolicy::make_feedback([](const ObsFeatures& f) { return 0.2 * f.Y; });
    SolveConfig cfg;
    cfg.store_obs = true;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto gr = evolve_gamma_tilde(m, ens, fwd, nullptr, pol);
    REQUIRE(std::abs(gr.terminal_stats.mean - 1.0) < 4.0 * gr.terminal_stats.stderr_);
}

TEST_CASE("shift summary reports drift and jump compensation") {
    auto m = make_linear_test({{"h0", 0.3}, {"hx", 0.2}, {"hy", 0.1}, {"s3", 2.0},
                               {"lam", 1.25}, {"nu2", 0.8}});
    State6 s{1.5, 0.4, 0, 0, 0, 0};
    auto gs = girsanov_shift(m, 0.0, s, 0.0);
    REQUIRE(gs.brownian == Catch::Approx((0.3 + 0.2 * 1.5 + 0.1 * 0.4) / 2.0));
    REQUIRE(gs.jump_compensation.size() == 1);
    REQUIRE(gs.jump_compensation[0] == Catch::Approx(0.25 * 0.8));
}
