#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "rsjd/common.hpp"
#include "rsjd/grid.hpp"
#include "rsjd/noise.hpp"
#include "rsjd/rng.hpp"

using namespace rsjd;

TEST_CASE("block sums match plain accumulation and stay deterministic") {
    std::vector<double> v(5000);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(0.1 * double(i)) * 1e-3;
    double plain = 0.0;
    for (double x : v) plain += x;
    CHECK(block_sum(v) == Catch::Approx(plain).epsilon(1e-13));
    CHECK(block_sum(v) == block_sum(v));
}

TEST_CASE("log-mean-exp is exact on constants and immune to large shifts") {
    std::vector<double> c(100, 3.25);
    CHECK(log_mean_exp(c) == Catch::Approx(3.25).margin(1e-14));
    std::vector<double> big{1000.0, 1000.0, 1000.0};
    CHECK(log_mean_exp(big) == Catch::Approx(1000.0).margin(1e-12));
    std::vector<double> two{0.0, 1.0};
    CHECK(log_mean_exp(two) == Catch::Approx(std::log(0.5 * (1.0 + std::exp(1.0)))).epsilon(1e-14));
}

TEST_CASE("sample statistics against hand values") {
    std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    MeanVar mv = mean_var(v);
    CHECK(mv.mean == Catch::Approx(2.5));
    CHECK(mv.var == Catch::Approx(5.0 / 3.0));
    CHECK(mv.stderr_ == Catch::Approx(std::sqrt(5.0 / 12.0)));
}

TEST_CASE("time grid nodes are exact at both ends") {
    TimeGrid g(1.0, 3);
    CHECK(g.node(0) == 0.0);
    CHECK(g.node(3) == 1.0);
    CHECK(g.dt == Catch::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(TimeGrid(0.0, 10), ConfigError);
    CHECK_THROWS_AS(TimeGrid(1.0, 0), ConfigError);
}

TEST_CASE("mark spaces validate their weights") {
    CHECK_THROWS_AS(MarkSpace({1.0}, {0.0}), ConfigError);
    CHECK_THROWS_AS(MarkSpace({1.0, 2.0}, {0.5}), ConfigError);
    MarkSpace m({1.0, 2.0}, {0.3, 0.7});
    CHECK(m.total_mass() == Catch::Approx(1.0));
}

TEST_CASE("counter draws are reproducible and stream-separated") {
    std::uint64_t pk = rng::path_key(42, 7);
    std::uint64_t s0 = rng::stream_key(pk, 0);
    std::uint64_t s1 = rng::stream_key(pk, 1);
    CHECK(s0 != s1);
    CHECK(rng::normal(s0, 13) == rng::normal(s0, 13));
    CHECK(rng::normal(s0, 13) != rng::normal(s0, 14));
    CHECK(rng::normal(s0, 13) != rng::normal(s1, 13));
    double u = rng::uniform(s0, 999);
    CHECK(u > 0.0);
    CHECK(u < 1.0);
}

TEST_CASE("normal draws have the right first moments") {
    std::uint64_t k = rng::stream_key(rng::path_key(2024, 0), 0);
    const int n = 200000;
    double s = 0.0, s2 = 0.0, s4 = 0.0;
    for (int i = 0; i < n; ++i) {
        double z = rng::normal(k, std::uint64_t(i));
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    s /= n;
    s2 /= n;
    s4 /= n;
    CHECK(std::abs(s) < 4.0 / std::sqrt(double(n)));
    CHECK(s2 == Catch::Approx(1.0).margin(0.02));
    CHECK(s4 == Catch::Approx(3.0).margin(0.15));
}

TEST_CASE("poisson counts match their intensity") {
    std::uint64_t k = rng::stream_key(rng::path_key(5, 3), 9);
    const int n = 400000;
    double lam = 0.08;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        int c = rng::poisson(k, std::uint64_t(i), lam);
        s += c;
        s2 += double(c) * double(c);
    }
    double m = s / n, var = s2 / n - m * m;
    CHECK(m == Catch::Approx(lam).margin(4.0 * std::sqrt(lam / n)));
    CHECK(var == Catch::Approx(lam).margin(0.002));
    CHECK(rng::poisson(k, 1, 0.0) == 0);
}

TEST_CASE("antithetic pairs mirror the diffusion and share the jump skeleton") {
    PathEnsemble ens(TimeGrid(1.0, 16), MarkSpace({1.0}, {2.0}), MarkSpace({0.5}, {1.0}), 64,
                     777, true);
    for (std::size_t p = 0; p < ens.n_paths; p += 2) {
        PathNoise a(ens, p), b(ens, p + 1);
        for (std::size_t k = 0; k < 16; ++k) {
            CHECK(a.dW1(k) == -b.dW1(k));
            CHECK(a.dW2(k) == -b.dW2(k));
            CHECK(a.dN1(k, 0) == b.dN1(k, 0));
            CHECK(a.dN2(k, 0) == b.dN2(k, 0));
        }
    }
    // ensemble mean of every Brownian increment vanishes identically
    for (std::size_t k = 0; k < 16; ++k) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t p = 0; p < ens.n_paths; ++p) {
            PathNoise pn(ens, p);
            s1 += pn.dW1(k);
            s2 += pn.dW2(k);
        }
        CHECK(std::abs(s1) < 1e-14);
        CHECK(std::abs(s2) < 1e-14);
    }
    CHECK_THROWS_AS(PathEnsemble(TimeGrid(1.0, 4), MarkSpace(), MarkSpace(), 7, 1, true),
                    ConfigError);
}

TEST_CASE("independent ensembles pass the moment screen") {
    PathEnsemble ens(TimeGrid(0.5, 25), MarkSpace({1.0}, {0.8}), MarkSpace({1.0}, {0.6}), 4000,
                     20240550);
    MomentsReport rep = brownian_moments_check(ens);
    INFO("brownian z " << rep.worst_brownian_z << " cross z " << rep.worst_cross_z << " jump z "
                       << rep.worst_jump_z);
    CHECK(rep.ok);
}

TEST_CASE("distinct master seeds decorrelate ensembles") {
    PathEnsemble a(TimeGrid(1.0, 4), MarkSpace(), MarkSpace(), 8, 1);
    PathEnsemble b(TimeGrid(1.0, 4), MarkSpace(), MarkSpace(), 8, 2);
    std::set<double> seen;
    for (std::size_t p = 0; p < 8; ++p) {
        seen.insert(PathNoise(a, p).dW1(0));
        seen.insert(PathNoise(b, p).dW1(0));
    }
    CHECK(seen.size() == 16);
}
