#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rsjd/derived.hpp"
#include "rsjd/model.hpp"
#include "rsjd/models_builtin.hpp"

using namespace rsjd;

namespace {
ModelSpec rich_model() {
    // every channel active: coupled observation drift, ratio != 1, jumps on
    // both measures, control-dependent diffusion, quadratic terminals
    return make_linear_test({{"b0", 0.1},
                             {"bx", 0.2},
                             {"by", 0.1},
                             {"s10", 0.4},
                             {"s1x", 0.1},
                             {"s1u", 0.2},
                             {"s20", 0.2},
                             {"s2x", 0.05},
                             {"j1", 0.15},
                             {"j1x", 0.05},
                             {"j2", -0.2},
                             {"nu2", 2.0},
                             {"h0", 0.3},
                             {"hx", 0.1},
                             {"hy", 0.05},
                             {"lam", 0.85},
                             {"g0", 0.05},
                             {"gx", 0.2},
                             {"gy", 0.1},
                             {"px", 0.5},
                             {"pxx", 0.3},
                             {"lx", 0.1},
                             {"qc", 1.0},
                             {"cx", 0.4},
                             {"cxx", 0.3},
                             {"cy", 0.25}});
}
} // namespace

TEST_CASE("analytic derivatives agree with finite differences") {
    DerivativeCheck rep = validate_derivatives(rich_model());
    INFO("worst " << rep.worst_label << " rel " << rep.worst_rel);
    CHECK(rep.ok);
    CHECK(validate_derivatives(make_filter_linear({})).ok);
}

TEST_CASE("structural hints are verified, not trusted") {
    ModelSpec m = make_linear_test({{"j1", 0.2}});
    m.jumps_affect_state1 = false; // lie about the jump coefficient
    CHECK_THROWS_AS(validate_derivatives(m), ModelError);

    ModelSpec m2 = make_linear_test({{"lam", 0.8}});
    m2.lambda_is_one = true;
    CHECK_THROWS_AS(validate_derivatives(m2), ModelError);

    ModelSpec m3 = make_linear_test({{"h0", 0.5}});
    m3.obs_coupled = false;
    CHECK_THROWS_AS(validate_derivatives(m3), ModelError);
}

TEST_CASE("unknown parameters are rejected") {
    CHECK_THROWS_AS(make_linear_test({{"nope", 1.0}}), ConfigError);
    CHECK_THROWS_AS(make_model("no-such-model"), ConfigError);
    CHECK_THROWS_AS(make_linear_test({{"theta", -1.0}}), ConfigError);
    CHECK_THROWS_AS(make_linear_test({{"lam", 0.0}}), ConfigError);
}

TEST_CASE("reference-measure drift assembly: frozen hand values") {
    // b = b1 - sigma2 * b2 / sigma3 - sum (lam - 1) f2 nu
    // sigma2 = 0.2, b2 = 0.3, sigma3 = 1, lam = 0.85, f2 = -0.2, nu = 2
    ModelSpec m = make_linear_test({{"b0", 0.7},
                                    {"bu", 0.0},
                                    {"s20", 0.2},
                                    {"h0", 0.3},
                                    {"lam", 0.85},
                                    {"j2", -0.2},
                                    {"nu2", 2.0}});
    Derived d(m);
    State6 s{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    CHECK(d.drift_b(0.3, s, 0.0) == Catch::Approx(0.7 - 0.12).epsilon(1e-14));
    CHECK(d.shift(0.3, s, 0.0) == Catch::Approx(0.3).epsilon(1e-14));
}

TEST_CASE("risk-adjusted running cost: frozen hand values") {
    ModelSpec m = make_linear_test(
        {{"h0", 0.3}, {"lam", 0.85}, {"j2", -0.2}, {"nu2", 2.0}, {"qc", 0.0}, {"theta", 0.5}});
    Derived d(m);
    State6 s{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    double kt1[1] = {0.0};
    double kt2[1] = {1.0};

    // jump risk bracket: (1/th)(e^{th k} - 1 - th k) nu with th=.5, k=1, nu=2
    // plus ratio cost (lam-1)(e^{th k}-1) nu and the channel cross term c k2
    double v = d.run_l(0.2, s, 0.0, 0.4, kt1, kt2, 0.0);
    double expect = 0.5 * 0.5 * (0.4 * 0.4)      // quadratic risk on k2
                    + 0.5948850828005128          // bracket, nu = 2
                    + (-0.1946163812100385)       // ratio cost
                    + 0.3 * 0.4;                  // shift times k2
    CHECK(v == Catch::Approx(expect).epsilon(1e-12));

    CHECK(d.l_k1(0.6) == Catch::Approx(0.3).epsilon(1e-14));
    CHECK(d.l_k2(0.2, s, 0.4, 0.0) == Catch::Approx(0.5).epsilon(1e-14));
    CHECK(d.l_kt1(1.0) == Catch::Approx(std::expm1(0.5)).epsilon(1e-14));
    CHECK(d.l_kt2(0.2, 0.0, 1.0, 0.0, 1.0) == Catch::Approx(0.5250671753976186).epsilon(1e-12));
}

TEST_CASE("assembled quadratic forms match directional second differences") {
    ModelSpec m = rich_model();
    Derived d(m);
    const double t = 0.37, u = -0.4;
    State6 s{0.8, 0.3, 0.15, -0.1, 0.04, -0.02};
    double k1 = 0.2, k2 = -0.1;
    double kt1[1] = {0.3}, kt2[1] = {-0.25};

    double vzt1[1] = {0.7}, vzt2[1] = {-0.4};
    double vkt1[1] = {0.5}, vkt2[1] = {0.6};
    Direction V;
    V.x = 1.0;
    V.y = 0.6;
    V.z1 = -0.3;
    V.z2 = 0.2;
    V.zt1 = vzt1;
    V.zt2 = vzt2;
    V.k1 = 0.4;
    V.k2 = -0.5;
    V.kt1 = vkt1;
    V.kt2 = vkt2;

    auto l_at = [&](double eps) {
        State6 se = s;
        se[0] += eps * V.x;
        se[1] += eps * V.y;
        se[2] += eps * V.z1;
        se[3] += eps * V.z2;
        se[4] += eps * vzt1[0] * m.marks1.weights[0];
        se[5] += eps * vzt2[0] * m.marks2.weights[0];
        double ekt1[1] = {kt1[0] + eps * vkt1[0]};
        double ekt2[1] = {kt2[0] + eps * vkt2[0]};
        return d.run_l(t, se, k1 + eps * V.k1, k2 + eps * V.k2, ekt1, ekt2, u);
    };
    double eps = 1e-4;
    double fd = (l_at(eps) - 2.0 * l_at(0.0) + l_at(-eps)) / (eps * eps);
    CHECK(d.quad_l(t, s, k2, kt1, kt2, u, V) == Catch::Approx(fd).margin(1e-5));

    auto b_at = [&](double eps2) {
        State6 se = s;
        se[0] += eps2 * V.x;
        se[1] += eps2 * V.y;
        se[2] += eps2 * V.z1;
        se[3] += eps2 * V.z2;
        se[4] += eps2 * vzt1[0] * m.marks1.weights[0];
        se[5] += eps2 * vzt2[0] * m.marks2.weights[0];
        return d.drift_b(t, se, u);
    };
    double eps2 = 1e-4;
    double fdb = (b_at(eps2) - 2.0 * b_at(0.0) + b_at(-eps2)) / (eps2 * eps2);
    CHECK(d.quad_b(t, s, u, V) == Catch::Approx(fdb).margin(1e-5));
}

TEST_CASE("assembled first derivatives match directional differences") {
    ModelSpec m = rich_model();
    Derived d(m);
    const double t = 0.61, u = 0.4;
    State6 s{0.5, -0.2, 0.1, 0.05, -0.03, 0.02};
    double k2 = 0.3;
    double kt2[1] = {0.4};

    Grad6 gl = d.grad_l6(t, s, k2, kt2, u);
    Grad6 gb = d.grad_drift_b(t, s, u);
    for (int c = 0; c < 6; ++c) {
        State6 sp = s, sm = s;
        double h = 1e-6;
        sp[c] += h;
        sm[c] -= h;
        double kt1z[1] = {0.0};
        double fdl = (d.run_l(t, sp, 0.0, k2, kt1z, kt2, u) -
                      d.run_l(t, sm, 0.0, k2, kt1z, kt2, u)) / (2.0 * h);
        double fdb = (d.drift_b(t, sp, u) - d.drift_b(t, sm, u)) / (2.0 * h);
        CHECK(gl[c] == Catch::Approx(fdl).margin(1e-7));
        CHECK(gb[c] == Catch::Approx(fdb).margin(1e-7));
    }
}

TEST_CASE("truncation policy counts clamp activations") {
    TruncationPolicy pol;
    pol.kappa_max = 2.0;
    ModelSpec m = make_linear_test({});
    Derived d(m, &pol);
    double kt1[1] = {5.0}, kt2[1] = {1.0};
    State6 s{};
    d.run_l(0.1, s, 0.0, 0.0, kt1, kt2, 0.0);
    CHECK(pol.clamped == 1);
    CHECK(pol.total == 2);
    CHECK(pol.fraction() == Catch::Approx(0.5));
}

TEST_CASE("builtin registry lists the shipped families") {
    auto infos = list_builtins();
    REQUIRE(infos.size() == 3);
    CHECK(infos[0].name == "linear-test");
    CHECK(infos[1].name == "invest");
    CHECK(infos[2].name == "filter-linear");
}

TEST_CASE("control policies evaluate their three kinds") {
    ObsFeatures f;
    f.t = 0.7;
    f.Y = 1.3;
    CHECK(ControlPolicy::make_constant(0.4).eval(f) == 0.4);
    auto pw = ControlPolicy::make_piecewise({0.0, 0.5, 0.9}, {1.0, 2.0, 3.0});
    CHECK(pw.eval(f) == 2.0);
    f.t = 0.95;
    CHECK(pw.eval(f) == 3.0);
    auto fb = ControlPolicy::make_feedback([](const ObsFeatures& o) { return o.Y > 1.0 ? -1.0 : 1.0; });
    CHECK(fb.eval(f) == -1.0);
}
