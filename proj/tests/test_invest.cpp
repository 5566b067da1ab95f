#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rsjd/invest.hpp"

using namespace rsjd;

namespace {

// Shipped market: a mean-reverting premium factor, two Brownian drivers, and
// a downward stock jump of intensity one.
MarketParams shipped() { return default_market(); }

// Diffusion-only market with flat premium: wealth under a unit strategy is a
// geometric Brownian motion.
MarketParams flat_gbm() {
    MarketParams mp;
    mp.A1 = 0.0;
    mp.sjump = 0.0;
    mp.finalize();
    return mp;
}

// Same, but with the stock drift chosen so the log price is already
// driftless: the tilt loadings vanish identically.
MarketParams driftless() {
    MarketParams mp;
    mp.A1 = 0.0;
    mp.sjump = 0.0;
    mp.a1 = 0.5 * (mp.sig1 * mp.sig1 + mp.sig2 * mp.sig2);
    mp.finalize();
    return mp;
}

} // namespace

TEST_CASE("derived market constants match their defining formulas") {
    MarketParams mp = shipped();
    double ss = mp.sig1 * mp.sig1 + mp.sig2 * mp.sig2;
    double nu = mp.marks.total_mass();
    double a3 = mp.a1 - 0.5 * ss + (std::log1p(mp.sjump) - mp.sjump) * nu;
    double ls = (mp.lam1 * mp.sig1 + mp.lam2 * mp.sig2) / ss;
    REQUIRE(mp.ss == Catch::Approx(ss).margin(1e-14));
    REQUIRE(mp.a3 == Catch::Approx(a3).margin(1e-14));
    REQUIRE(mp.a4 == Catch::Approx(mp.a2 - ls * a3).margin(1e-14));
    REQUIRE(mp.A4 == Catch::Approx(mp.A2 - ls * mp.A1).margin(1e-14));
    REQUIRE(mp.c1(0.3) == Catch::Approx(mp.sig1 * (a3 + mp.A1 * 0.3) / ss).margin(1e-14));

    MarketParams bad = shipped();
    bad.sig1 = bad.sig2 = 0.0;
    REQUIRE_THROWS_AS(bad.finalize(), ConfigError);
    bad = shipped();
    bad.sjump = -1.0;
    REQUIRE_THROWS_AS(bad.finalize(), ConfigError);
    bad = shipped();
    bad.theta = 0.0;
    REQUIRE_THROWS_AS(bad.finalize(), ConfigError);
}

TEST_CASE("zero strategy keeps wealth constant and the value collapses") {
    MarketParams mp = shipped();
    mp.v0 = 2.0;
    mp.finalize();
    auto ens = market_ensemble(mp, 1.0, 50, 512, 901);
    auto pol = ControlPolicy::make_constant(0.0);

    auto mkt = simulate_market(mp, ens, pol);
    auto fwd = transformed_forward(mp, ens, pol);
    double lv = std::log(2.0);
    for (std::size_t k = 0; k <= 50; ++k)
        for (std::size_t p : {std::size_t(0), std::size_t(317)}) {
            REQUIRE(mkt.lnV.at(k, p) == lv);
            REQUIRE(fwd.lnV.at(k, p) == lv);
        }

    auto val = solve_invest_value(mp, ens, fwd);
    REQUIRE(std::abs(val.zeta0 + lv) < 1e-5);
    REQUIRE(val.dispersion0 < 1e-6);
    REQUIRE(val.clamp_events == 0);
}

TEST_CASE("geometric wealth mean matches the closed form") {
    MarketParams mp = flat_gbm();
    auto ens = market_ensemble(mp, 1.0, 64, 16384, 903);
    auto mkt = simulate_market(mp, ens, ControlPolicy::make_constant(1.0));
    std::size_t N = 64, n = ens.n_paths;
    MeanVar mv = mean_var(std::vector<double>(mkt.lnV.row(N), mkt.lnV.row(N) + n));
    double want = std::log(mp.v0) + (mp.a1 - 0.5 * mp.ss) * 1.0;
    REQUIRE(std::abs(mv.mean - want) < 3.0 * mv.stderr_ + 1e-4);
    // the stock follows the same dynamics under a unit strategy
    MeanVar ms = mean_var(std::vector<double>(mkt.lnS.row(N), mkt.lnS.row(N) + n));
    REQUIRE(std::abs(ms.mean - want) < 3.0 * ms.stderr_ + 1e-4);
}

TEST_CASE("the two log-price routes agree to discretization order") {
    MarketParams mp = shipped();
    auto pol = ControlPolicy::make_constant(0.5);
    auto coarse = simulate_market(mp, market_ensemble(mp, 1.0, 50, 4096, 905), pol);
    auto fine = simulate_market(mp, market_ensemble(mp, 1.0, 100, 4096, 906), pol);
    REQUIRE(coarse.log_gap < 1.0 / 50.0);
    REQUIRE(fine.log_gap < 1.0 / 100.0);
    double ratio = fine.log_gap / coarse.log_gap;
    REQUIRE(ratio > 0.45);
    REQUIRE(ratio < 0.95);
}

TEST_CASE("a vanishing risk weight reduces the value to the mean log wealth") {
    MarketParams mp = driftless();
    mp.theta = 1e-3;
    mp.finalize();
    REQUIRE(std::abs(mp.a3) < 1e-15);
    auto ens = market_ensemble(mp, 1.0, 50, 8192, 907);
    auto fwd = transformed_forward(mp, ens, ControlPolicy::make_constant(0.8));
    auto val = solve_invest_value(mp, ens, fwd);
    std::size_t N = 50, n = ens.n_paths;
    double mlv = mean(std::vector<double>(fwd.lnV.row(N), fwd.lnV.row(N) + n));
    REQUIRE(std::abs(val.zeta0 + mlv) < 5e-4);
}

TEST_CASE("the tilted physical cost matches the certainty equivalent") {
    MarketParams mp = shipped();
    auto ens = market_ensemble(mp, 1.0, 100, 8192, 909);
    auto pol = ControlPolicy::make_constant(0.5);
    auto fwd = transformed_forward(mp, ens, pol);
    auto val = solve_invest_value(mp, ens, fwd);

    // reweight the reference-measure sample back to the physical measure
    std::size_t N = 100, n = ens.n_paths;
    double dt = ens.grid.dt;
    std::vector<double> g(n);
    for (std::size_t p = 0; p < n; ++p) {
        PathNoise pn(ens, p);
        double lg = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            double x = fwd.X.at(k, p);
            double c1 = mp.c1(x), c2 = mp.c2(x);
            lg += c1 * pn.dW1(k) + c2 * pn.dW2(k) - 0.5 * (c1 * c1 + c2 * c2) * dt;
        }
        g[p] = std::exp(lg - mp.theta * fwd.lnV.at(N, p));
    }
    MeanVar mv = mean_var(g);
    double ce = std::exp(mp.theta * val.zeta0);
    double band = 3.0 * mv.stderr_ / mv.mean + 0.015;
    REQUIRE(std::abs(mv.mean - ce) / mv.mean < band);
}

TEST_CASE("trivial tilt gives unit density, unit eta, and constant alpha") {
    MarketParams mp = driftless();
    auto ens = market_ensemble(mp, 1.0, 50, 2048, 911);
    auto pol = ControlPolicy::make_constant(0.0);
    auto fwd = transformed_forward(mp, ens, pol);
    auto val = solve_invest_value(mp, ens, fwd);
    auto adj = solve_invest_adjoints(mp, ens, fwd, val, pol);
    REQUIRE(std::abs(adj.r_mean_T - 1.0) < 1e-6);
    REQUIRE(std::abs(adj.eta_min - 1.0) < 1e-6);
    for (std::size_t k : {std::size_t(0), std::size_t(25), std::size_t(50)})
        for (std::size_t p : {std::size_t(3), std::size_t(1027)}) {
            REQUIRE(adj.eta.at(k, p) == Catch::Approx(1.0).margin(1e-6));
            REQUIRE(adj.alpha.at(k, p) == Catch::Approx(-1.0).margin(1e-5));
            REQUIRE(adj.alpha_exp.at(k, p) == Catch::Approx(-1.0).margin(1e-5));
        }
    auto rep = verify_relations(mp, ens, fwd, val, adj, pol);
    REQUIRE(rep.alpha_two_way < 1e-5);
    REQUIRE(rep.rel_p_alpha_r < 1e-5);
}

TEST_CASE("multiplier identities hold at a zero candidate on the shipped market") {
    MarketParams mp = shipped();
    auto ens = market_ensemble(mp, 1.0, 80, 16384, 913);
    auto pol = ControlPolicy::make_constant(0.0);
    InvestForward fwd;
    InvestValue val;
    InvestAdjoints adj;
    auto rep = invest_pipeline(mp, ens, pol, {}, &fwd, &val, &adj);

    REQUIRE(std::abs(rep.r_mean_T - 1.0) < 3.0 * rep.r_se_T);
    REQUIRE(rep.r_se_T < 0.05);
    REQUIRE(rep.eta_min > 0.0);
    // with constant wealth the normalized multiplier is -1/v0 and eta carries
    // exactly the density tilt
    for (std::size_t k : {std::size_t(0), std::size_t(40)}) {
        double am = mean(std::vector<double>(adj.alpha.row(k), adj.alpha.row(k) + 16384));
        REQUIRE(std::abs(am + 1.0) < 5e-3);
    }
    REQUIRE(rep.rel_p_alpha_r < 0.05);
    REQUIRE(rep.alpha_two_way < 0.01);
    REQUIRE(rep.rel_q < 0.05);
    // zero investment leaves the premium unhedged: the residual is negative
    REQUIRE(rep.resid_mean < 0.0);
    REQUIRE(std::abs(rep.resid_raw_mean - rep.resid_mean) < 0.2 * std::abs(rep.resid_mean));
}

TEST_CASE("relation residuals shrink under refinement") {
    MarketParams mp = shipped();
    auto pol = ControlPolicy::make_constant(0.5);
    InvestConfig cfg;
    auto coarse_rep = invest_pipeline(mp, market_ensemble(mp, 1.0, 50, 4096, 915), pol, cfg);
    auto fine_rep = invest_pipeline(mp, market_ensemble(mp, 1.0, 100, 16384, 916), pol, cfg);
    REQUIRE(coarse_rep.rel_p_alpha_r < 0.05);
    REQUIRE(fine_rep.rel_p_alpha_r < coarse_rep.rel_p_alpha_r);
    REQUIRE(fine_rep.alpha_two_way < coarse_rep.alpha_two_way);
    REQUIRE(fine_rep.alpha_two_way < 0.01);
}

TEST_CASE("the optimality residual crosses zero inside the strategy grid") {
    MarketParams mp = shipped();
    auto ens = market_ensemble(mp, 1.0, 60, 4096, 917);
    std::vector<double> grid;
    for (int i = 0; i <= 8; ++i) grid.push_back(0.25 * i);
    auto sc = strategy_scan(mp, ens, grid);
    REQUIRE(sc.rows.size() == 9);
    REQUIRE(std::abs(sc.rows[0].zeta0) < 1e-5); // zero strategy: value is -ln v0
    REQUIRE(sc.rows[0].resid_mean < 0.0);
    REQUIRE(sc.crossed);
    REQUIRE(sc.crossing > 0.25);
    REQUIRE(sc.crossing < 2.0);
    REQUIRE(std::abs(sc.argmin_u - sc.crossing) <= 0.5);
}

TEST_CASE("strategy guards reject inadmissible policies") {
    MarketParams mp = shipped();
    auto ens = market_ensemble(mp, 1.0, 10, 64, 919);
    REQUIRE_THROWS_AS(transformed_forward(mp, ens, ControlPolicy::make_constant(-0.5)),
                      ConfigError);
    // 1 + u * sjump <= 0: a jump would wipe out more than the whole wealth
    REQUIRE_THROWS_AS(transformed_forward(mp, ens, ControlPolicy::make_constant(7.0)),
                      ConfigError);
    REQUIRE_THROWS_AS(simulate_market(mp, ens, ControlPolicy::make_constant(7.0)), ConfigError);
}
