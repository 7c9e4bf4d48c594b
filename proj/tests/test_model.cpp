#include <catch2/catch_amalgamated.hpp>
#include <mfg/model.hpp>

#include <random>

using namespace mfg;
using Catch::Approx;

namespace {

MeasureCtx make_ctx(const EmpiricalMeasure& m) { return MeasureCtx(m); }

EmpiricalMeasure cloud1d(const std::vector<double>& xs) {
    std::vector<Vec> pts;
    for (double x : xs) {
        Vec p(1);
        p << x;
        pts.push_back(p);
    }
    return EmpiricalMeasure(pts);
}

LQSpec pi_one_spec() {
    // A=0, Abar=0, B=1, Qx=Qv=Qg=1, sigma0=1, sigma1=0 (1-D): Riccati pi == 1.
    LQSpec s;
    s.n = 1;
    s.d = 1;
    s.A = Mat::Zero(1, 1);
    s.Abar = Mat::Zero(1, 1);
    s.B = Mat::Identity(1, 1);
    s.Qx = Mat::Identity(1, 1);
    s.Qv = Mat::Identity(1, 1);
    s.Qg = Mat::Identity(1, 1);
    s.kappa = 0.0;
    s.sigma0 = Mat::Identity(1, 1);
    return s;
}

// Central finite difference of a scalar function of one coordinate.
template <typename F>
double fd1(F&& f, double h = 1e-5) {
    return (f(h) - f(-h)) / (2.0 * h);
}

}  // namespace

TEST_CASE("build_lq_model basic structure") {
    auto model = build_lq_model(pi_one_spec());
    auto m = cloud1d({0.3, -0.7, 1.1});
    auto ctx = make_ctx(m);

    std::mt19937_64 rng(42);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 10; ++k) {
        Vec x(1), v(1);
        x << nd(rng);
        v << nd(rng);
        // D_v b = B exactly
        CHECK(model.Dvb(0.2, x, ctx, v)(0, 0) == 1.0);
        // b = v for this spec
        CHECK(model.b(0.2, x, ctx, v)(0) == Approx(v(0)).margin(1e-15));
        // f = (x^2 + v^2)/2
        CHECK(model.f(0.2, x, ctx, v) ==
              Approx(0.5 * x(0) * x(0) + 0.5 * v(0) * v(0)).margin(1e-14));
        CHECK(model.g(x, ctx) == Approx(0.5 * x(0) * x(0)).margin(1e-15));
    }

    // non-PD Q_v rejected
    auto bad = pi_one_spec();
    bad.Qv = -Mat::Identity(1, 1);
    CHECK_THROWS_AS(build_lq_model(bad), invalid_argument);

    // all cost matrices zero except Qv: f = v^2/2 only
    auto zs = pi_one_spec();
    zs.Qx = Mat::Zero(1, 1);
    zs.Qg = Mat::Zero(1, 1);
    auto zmodel = build_lq_model(zs);
    Vec x0 = Vec::Zero(1), v0(1);
    v0 << 2.0;
    CHECK(zmodel.f(0.0, x0, ctx, v0) == Approx(2.0));
    CHECK(zmodel.Dxf(0.0, x0, ctx, v0)(0) == 0.0);
    CHECK(zmodel.Dxg(x0, ctx)(0) == 0.0);
}

TEST_CASE("LQ analytic derivatives match finite differences") {
    LQSpec s = pi_one_spec();
    s.A << 0.5;
    s.Abar << -0.3;
    s.kappa = 0.7;
    auto model = build_lq_model(s);
    auto m = cloud1d({0.4, -0.2, 0.9, 1.5});
    auto ctx = make_ctx(m);

    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 5; ++k) {
        Vec x(1), v(1);
        x << nd(rng);
        v << nd(rng);
        const double t = 0.3;
        double dbx = fd1([&](double h) {
            Vec xp = x;
            xp(0) += h;
            return model.b(t, xp, ctx, v)(0);
        });
        CHECK(model.Dxb(t, x, ctx, v)(0, 0) == Approx(dbx).epsilon(1e-5));
        double dfv = fd1([&](double h) {
            Vec vp = v;
            vp(0) += h;
            return model.f(t, x, ctx, vp);
        });
        CHECK(model.Dvf(t, x, ctx, v)(0) == Approx(dfv).epsilon(1e-5).margin(1e-9));
        double dgx = fd1([&](double h) {
            Vec xp = x;
            xp(0) += h;
            return model.g(xp, ctx);
        });
        CHECK(model.Dxg(x, ctx)(0) == Approx(dgx).epsilon(1e-5).margin(1e-9));
    }

    // measure derivative of the drift: D_y db/dnu = Abar (constant)
    Vec y(1), x(1), v(1);
    y << 0.2;
    x << 0.1;
    v << 0.0;
    CHECK(model.lfd_b_y(0.0, x, ctx, v, y)(0, 0) == Approx(-0.3));
    // kappa tracking: D_y df/dnu = -kappa (x - mean)
    const double mean = mean_of(m)(0);
    CHECK(model.lfd_f_y(0.0, x, ctx, v, y)(0) == Approx(-0.7 * (x(0) - mean)).margin(1e-12));
    // D_y d/dnu D_xf = -kappa I
    CHECK(model.lfd_Dxf_y(0.0, x, ctx, v, y)(0, 0) == Approx(-0.7));
}

TEST_CASE("LQ satisfies (A3)-style convexity by second differences") {
    auto model = build_lq_model(pi_one_spec());
    auto m = cloud1d({0.0});
    auto ctx = make_ctx(m);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    // f(x,m,v') - f(x,m,v) >= D_vf.(v'-v) + lambda_v |v'-v|^2 with lambda_v = 1/2
    for (int k = 0; k < 10; ++k) {
        Vec x(1), v(1), vp(1);
        x << nd(rng);
        v << nd(rng);
        vp << nd(rng);
        const double lhs = model.f(0, x, ctx, vp) - model.f(0, x, ctx, v);
        const double rhs = model.Dvf(0, x, ctx, v).dot(vp - v) + 0.5 * (vp - v).squaredNorm();
        CHECK(lhs >= rhs - 1e-12);
    }
    // drift second derivatives vanish identically on probes
    Vec x(1), v(1);
    x << 1.3;
    v << -0.4;
    CHECK(model.Dxxb(0, x, ctx, v)[0].norm() == 0.0);
    CHECK(model.consts.L_b0 == 0.0);
    CHECK(model.consts.L_b1 == 0.0);
    CHECK(model.consts.L_b2 == 0.0);
}

TEST_CASE("sigma affine-in-x structure is honored") {
    LQSpec s = pi_one_spec();
    std::vector<Mat> s1(1, Mat::Identity(1, 1) * 0.25);
    s.sigma1 = s1;
    auto model = build_lq_model(s);
    auto m = cloud1d({0.1, 0.2});
    auto ctx = make_ctx(m);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 8; ++k) {
        Vec x(1);
        x << nd(rng);
        Mat full = model.sigma(0.4, x, ctx);
        Mat at0 = model.sigma(0.4, Vec::Zero(1), ctx);
        // sigma(s,x,m) - sigma(s,0,m) linear in x with slope sigma1
        CHECK(full(0, 0) - at0(0, 0) == Approx(0.25 * x(0)).margin(1e-14));
    }
}

TEST_CASE("build_nonlinear_demo") {
    NonlinearDemoSpec spec;  // defaults: alpha, c_m > 0, 1-D
    auto model = build_nonlinear_demo(spec);
    auto m = cloud1d({0.5, -0.3, 1.2, 0.0});
    auto ctx = make_ctx(m);

    SECTION("zero nonlinearity scale coincides with LQ") {
        NonlinearDemoSpec z = spec;
        z.alpha = 0.0;
        z.c_m = 0.0;
        auto nl = build_nonlinear_demo(z);
        LQSpec lq = pi_one_spec();
        lq.Qx = Mat::Identity(1, 1) * z.q_x;
        lq.Qv = Mat::Identity(1, 1) * z.q_v;
        lq.Qg = Mat::Identity(1, 1) * z.q_g;
        lq.sigma0 = Mat::Identity(1, 1) * z.sigma;
        auto ref = build_lq_model(lq);
        std::mt19937_64 rng(5);
        std::normal_distribution<double> nd;
        for (int k = 0; k < 10; ++k) {
            Vec x(1), v(1);
            x << nd(rng);
            v << nd(rng);
            CHECK(nl.b(0.1, x, ctx, v)(0) == Approx(ref.b(0.1, x, ctx, v)(0)).margin(1e-13));
            CHECK(nl.f(0.1, x, ctx, v) == Approx(ref.f(0.1, x, ctx, v)).margin(1e-13));
            CHECK(nl.g(x, ctx) == Approx(ref.g(x, ctx)).margin(1e-13));
        }
    }

    SECTION("analytic derivatives match finite differences") {
        std::mt19937_64 rng(9);
        std::normal_distribution<double> nd;
        for (int k = 0; k < 6; ++k) {
            Vec x(1), v(1), y(1);
            x << nd(rng);
            v << nd(rng);
            y << nd(rng);
            const double t = 0.2;
            double dbx = fd1([&](double h) {
                Vec xp = x;
                xp(0) += h;
                return model.b(t, xp, ctx, v)(0);
            });
            CHECK(model.Dxb(t, x, ctx, v)(0, 0) == Approx(dbx).epsilon(1e-5).margin(1e-8));
            double dbxx = (model.Dxb(t, (Vec(1) << x(0) + 1e-4).finished(), ctx, v)(0, 0) -
                           model.Dxb(t, (Vec(1) << x(0) - 1e-4).finished(), ctx, v)(0, 0)) /
                          2e-4;
            CHECK(model.Dxxb(t, x, ctx, v)[0](0, 0) == Approx(dbxx).epsilon(1e-4).margin(1e-6));
            // D_y db/dnu by finite difference in y of the kernel derivative
            double dk = fd1([&](double h) {
                Vec yp = y;
                yp(0) += h;
                return spec.c_m * std::tanh(x(0) - yp(0));
            });
            CHECK(model.lfd_b_y(t, x, ctx, v, y)(0, 0) == Approx(dk).epsilon(1e-5).margin(1e-8));
            // second y-derivative of db/dnu
            double dk2 = (spec.c_m * std::tanh(x(0) - (y(0) + 1e-4)) -
                          2.0 * spec.c_m * std::tanh(x(0) - y(0)) +
                          spec.c_m * std::tanh(x(0) - (y(0) - 1e-4))) /
                         1e-8;
            CHECK(model.lfd2_b_y(t, x, ctx, v, y)[0](0, 0) == Approx(dk2).epsilon(1e-3).margin(1e-5));
        }
    }

    SECTION("declared curvature bounds hold on probe maximization") {
        // [DERIVED: probe maximization oracle] |D_x^2 b|*(1+|x|+|v|+W2) <= L_b0
        std::mt19937_64 rng(13);
        std::uniform_real_distribution<double> ud(-4.0, 4.0);
        double worst = 0.0;
        for (int k = 0; k < 400; ++k) {
            Vec x(1), v(1);
            x << ud(rng);
            v << ud(rng);
            const double cur = std::abs(model.Dxxb(0.1, x, ctx, v)[0](0, 0)) *
                               (1.0 + std::abs(x(0)) + std::abs(v(0)) + w2_to_dirac(m));
            worst = std::max(worst, cur);
        }
        CHECK(worst <= model.consts.L_b0 + 1e-12);
        // |D_y db/dnu| <= l_b^m on probes
        double worst_m = 0.0;
        for (int k = 0; k < 400; ++k) {
            Vec x(1), y(1), v(1);
            x << ud(rng);
            y << ud(rng);
            v << 0.0;
            worst_m = std::max(worst_m, std::abs(model.lfd_b_y(0.1, x, ctx, v, y)(0, 0)));
        }
        CHECK(worst_m <= model.consts.l_b_m + 1e-12);
    }

    SECTION("declared-bound violation is a construction error") {
        NonlinearDemoSpec bad = spec;
        bad.declared_L_b0_override = 1e-6;  // impossible bound given alpha > 0
        CHECK_THROWS_AS(build_nonlinear_demo(bad), model_error);
    }
}

TEST_CASE("TimeGrid") {
    TimeGrid grid(0.25, 1.25, 4);
    CHECK(grid.t == 0.25);
    CHECK(grid.T == 1.25);
    CHECK(grid.K == 4);
    CHECK(grid.dt == Approx(0.25));
    CHECK(grid.node(0) == Approx(0.25));
    CHECK(grid.node(4) == Approx(1.25));
    CHECK_THROWS_AS(TimeGrid(1.0, 0.5, 4), invalid_argument);
    CHECK_THROWS_AS(TimeGrid(0.0, 1.0, 0), invalid_argument);
}

TEST_CASE("generate_paths determinism and stream stability") {
    TimeGrid grid(0.0, 1.0, 8);
    auto p1 = generate_paths(grid, 16, 1, 99);
    auto p2 = generate_paths(grid, 16, 1, 99);
    // same seed twice -> bit-identical
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t k = 0; k < 8; ++k)
            CHECK((p1.z(i, k) - p2.z(i, k)).cwiseAbs().maxCoeff() == 0.0);

    // adding particles never perturbs existing streams
    auto p3 = generate_paths(grid, 32, 1, 99);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t k = 0; k < 8; ++k)
            CHECK((p3.z(i, k) - p1.z(i, k)).cwiseAbs().maxCoeff() == 0.0);

    // different seed differs somewhere
    auto p4 = generate_paths(grid, 16, 1, 100);
    bool any_diff = false;
    for (std::size_t i = 0; i < 16 && !any_diff; ++i)
        for (std::size_t k = 0; k < 8 && !any_diff; ++k)
            any_diff = (p4.z(i, k) - p1.z(i, k)).cwiseAbs().maxCoeff() != 0.0;
    CHECK(any_diff);
}

TEST_CASE("generate_paths statistics") {
    // N = 1e5, K = 1: per-step sample mean within the CLT band, variance ~ dt
    TimeGrid grid(0.0, 0.5, 1);
    const std::size_t N = 100000;
    auto paths = generate_paths(grid, N, 1, 2024);
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double inc = paths.increment(i, 0, grid.dt)(0);
        sum += inc;
        sumsq += inc * inc;
    }
    const double mean = sum / static_cast<double>(N);
    const double var = sumsq / static_cast<double>(N) - mean * mean;
    CHECK(std::abs(mean) <= 4.0 * std::sqrt(grid.dt / static_cast<double>(N)));  // [DERIVED: CLT bound]
    CHECK(var == Approx(grid.dt).epsilon(0.03));  // [DERIVED: Monte Carlo estimate]
}
