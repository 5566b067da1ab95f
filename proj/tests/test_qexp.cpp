#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rsjd/models_builtin.hpp"
#include "rsjd/qexp.hpp"

using namespace rsjd;

namespace {

PathEnsemble make_ens(const ModelSpec& m, double T, std::size_t steps, std::size_t paths,
                      std::uint64_t seed, bool anti) {
    return PathEnsemble(TimeGrid(T, steps), m.marks1, m.marks2, paths, seed, anti);
}

} // namespace

TEST_CASE("bracket: zero values give exactly zero") {
    MarkSpace ms{{1.0}, {2.0}};
    QexpBracketSpec spec(1.0, ms);
    REQUIRE(qexp_bracket(spec, {0.0}) == 0.0);
}

TEST_CASE("bracket: scalar oracle") {
    MarkSpace ms{{1.0}, {2.0}};
    QexpBracketSpec spec(1.0, ms);
    REQUIRE(qexp_bracket(spec, {0.5}) ==
            Catch::Approx(2.0 * (std::exp(0.5) - 1.5)).margin(1e-14));
}

TEST_CASE("bracket: small risk parameter approaches the quadratic") {
    MarkSpace ms{{1.0}, {2.0}};
    QexpBracketSpec spec(1e-4, ms);
    double v = qexp_bracket(spec, {0.5});
    REQUIRE(v == Catch::Approx(0.5 * 1e-4 * 0.25 * 2.0).epsilon(1e-4));
}

TEST_CASE("bracket: nonnegative, zero only at zero, midpoint convex") {
    MarkSpace ms{{1.0, -1.0}, {0.7, 0.4}};
    for (double th : {0.2, 0.5, 2.0}) {
        QexpBracketSpec spec(th, ms);
        for (double a : {-3.0, -0.5, 0.3, 2.0})
            for (double b : {-1.0, 0.0, 1.5}) {
                double v = qexp_bracket(spec, {a, b});
                REQUIRE(v >= 0.0);
                if (a != 0.0 || b != 0.0) REQUIRE(v > 0.0);
                // midpoint convexity against the origin
                double mid = qexp_bracket(spec, {a / 2.0, b / 2.0});
                REQUIRE(2.0 * mid <= v + 1e-12);
            }
    }
}

TEST_CASE("solver: constant terminal stays constant with exactly null kappa") {
    auto m = make_linear_test({{"s10", 0.3}, {"j1", 0.3}, {"nu1", 0.4}});
    m.phi_term = [](double, double) { return 0.7; };
    m.phi_term_x = [](double, double) { return 0.0; };
    m.phi_term_y = [](double, double) { return 0.0; };
    m.phi_term_xx = [](double, double) { return 0.0; };
    auto ens = make_ens(m, 1.0, 100, 4000, 501, true);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    cfg.degree = 2;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto ysol = lsmc_backward(m, ens, fwd.x, pol, cfg);
    auto q = solve_qexp(m, ens, fwd.x, pol, ysol, cfg);

    REQUIRE(q.zeta0 == Catch::Approx(0.7).margin(5e-6));
    REQUIRE(q.dispersion0 < 1e-6);
    // control-variate projections keep the integrands at ridge-noise level
    // (table perturbations of ~1e-9 amplified by 1/dt in the increment fit)
    REQUIRE(std::abs(q.sol.z1(3, 1.0)) < 1e-5);
    REQUIRE(std::abs(q.sol.zt1(3, 0, 1.0)) < 1e-5);
    REQUIRE(q.clamp_fraction == 0.0);
}

TEST_CASE("solver: Gaussian exponential moment closed form") {
    // dx = dW, no running cost, terminal x: value x_t + theta (T - t) / 2
    auto m = make_linear_test({{"cx", 1.0}});
    auto ens = make_ens(m, 1.0, 100, 30000, 502, true);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto ysol = lsmc_backward(m, ens, fwd.x, pol, cfg);
    auto q = solve_qexp(m, ens, fwd.x, pol, ysol, cfg);

    REQUIRE(q.zeta0 == Catch::Approx(1.25).margin(5e-3));
    REQUIRE(q.sol.z1(0, 1.0) == Catch::Approx(1.0).margin(5e-2));
    REQUIRE(q.sol.z2(0, 1.0) == Catch::Approx(0.0).margin(5e-2));
    REQUIRE(q.sol.y(50, 1.3) == Catch::Approx(1.3 + 0.25 * 0.5).margin(1e-2));
    REQUIRE(q.clamp_fraction == 0.0);

    auto diag = bmo_energy_diagnostic(m, ens, fwd.x, q.sol);
    REQUIRE(diag.bmo_total == Catch::Approx(1.0).epsilon(0.1)); // |kappa| ~ 1 over [0, T]
    REQUIRE(diag.energy_pass[0]);
    REQUIRE(diag.energy_pass[1]);
}

TEST_CASE("solver: vanishing risk parameter recovers the risk-neutral value") {
    auto m = make_linear_test({{"s10", 0.5}, {"lx", 0.4}, {"cx", 1.0}, {"theta", 1e-3}});
    auto ens = make_ens(m, 1.0, 100, 20000, 503, true);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto ysol = lsmc_backward(m, ens, fwd.x, pol, cfg);
    auto q = solve_qexp(m, ens, fwd.x, pol, ysol, cfg);
    REQUIRE(q.zeta0 == Catch::Approx(1.4).margin(1e-3));
}

TEST_CASE("solver: truncation-dominated run is rejected, generous cap is inert") {
    auto m = make_linear_test({{"s10", 0.3}, {"j1", 0.5}, {"nu1", 0.4}, {"cx", 1.0}});
    auto ens = make_ens(m, 0.5, 40, 4000, 504, true);
    auto pol = ControlPolicy::make_constant(0.0);
    SolveConfig cfg;
    cfg.degree = 2;
    auto fwd = forward_euler(m, ens, pol, nullptr, cfg);
    auto ysol = lsmc_backward(m, ens, fwd.x, pol, cfg);

    SolveConfig tight = cfg;
    tight.kappa_max = 1e-8;
    REQUIRE_THROWS_AS(solve_qexp(m, ens, fwd.x, pol, ysol, tight), SolverError);

    auto q = solve_qexp(m, ens, fwd.x, pol, ysol, cfg);
    REQUIRE(q.clamp_fraction == 0.0);
    REQUIRE(q.clamp_evals > 0);
    REQUIRE_FALSE(q.clamp_warning);
}

TEST_CASE("bmo: deterministic integrand reproduces the integral norm") {
    TimeGrid g(2.0, 20);
    ModelSpec m = make_linear_test({});
    PathEnsemble ens(g, m.marks1, m.marks2, 64, 505, false);
    PathMatrix x;
    x.init(g.n_nodes(), 64);
    for (std::size_t k = 0; k < g.n_nodes(); ++k)
        for (std::size_t p = 0; p < 64; ++p) x.at(k, p) = 1.0 + 0.01 * double(p);

    BackwardSolution sol;
    sol.grid = g;
    sol.nodes.resize(g.n_nodes());
    const double c = 0.4;
    for (std::size_t k = 0; k < g.n_steps; ++k)
        sol.nodes[k].z1 = RegressionTable{PolyBasis{1, 0, {0.0, 0.0}, {1.0, 1.0}}, {c}};

    auto diag = bmo_energy_diagnostic(m, ens, x, sol, 1);
    REQUIRE(diag.bmo_total == Catch::Approx(c * c * 2.0).epsilon(1e-6));
    REQUIRE(diag.bmo_jump == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(diag.energy_lhs[0] == Catch::Approx(diag.energy_rhs[0]).epsilon(1e-6));
    REQUIRE(diag.energy_pass[0]);
    REQUIRE(diag.energy_pass[1]);
    REQUIRE(diag.energy_rhs[1] == Catch::Approx(2.0 * std::pow(c * c * 2.0, 2)).epsilon(1e-6));
}

TEST_CASE("sandwich: assembled generator sits inside the supplied envelope") {
    auto m = make_linear_test(
        {{"s10", 0.3}, {"qc", 1.0}, {"h0", 0.3}, {"lam", 1.3}, {"j2", 0.2}, {"nu2", 0.5}});
    REQUIRE(m.qexp_alpha >= 0.0);
    REQUIRE(m.qexp_theta == Catch::Approx(2.0 * m.theta));
    double worst = 1e30;
    for (double y : {-5.0, 0.0, 5.0})
        for (double k1 : {-3.0, 0.0, 1.0, 3.0})
            for (double k2 : {-3.0, 0.0, 2.0})
                for (double kt : {-2.0, -0.5, 0.0, 0.5, 2.0, 8.0})
                    for (double u : {-0.8, 0.0, 0.8}) {
                        SandwichProbe pr;
                        pr.t = 0.3;
                        pr.S = State6{1.2, y, 0.1, -0.2, 0.0, 0.0};
                        pr.u = u;
                        pr.k1 = k1;
                        pr.k2 = k2;
                        pr.kt2 = {kt};
                        worst = std::min(worst, qexp_sandwich_margin(m, pr));
                    }
    REQUIRE(worst >= -1e-9);

    auto bare = make_linear_test({{"lx", 0.4}});
    SandwichProbe pr;
    REQUIRE_THROWS_AS(qexp_sandwich_margin(bare, pr), ConfigError);
}
