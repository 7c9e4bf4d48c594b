#include <catch2/catch_amalgamated.hpp>
#include <mfg/measures.hpp>

#include <algorithm>
#include <random>
#include <vector>

using namespace mfg;
using Catch::Approx;

namespace {

// Independent 1-D W2 oracle: brute-force sorted matching written separately from
// the library implementation.
double w2_1d_oracle(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

EmpiricalMeasure cloud1d(const std::vector<double>& xs) {
    std::vector<Vec> pts;
    for (double x : xs) {
        Vec p(1);
        p << x;
        pts.push_back(p);
    }
    return EmpiricalMeasure(pts);
}

}  // namespace

TEST_CASE("w2_to_dirac basics") {
    // single particle (3,4): W2(delta_z, delta_0) = |z| = 5
    Vec z(2);
    z << 3.0, 4.0;
    EmpiricalMeasure m({z});
    CHECK(w2_to_dirac(m) == Approx(5.0).margin(1e-14));

    // all particles at origin -> 0
    Vec o = Vec::Zero(2);
    EmpiricalMeasure m0({o, o, o});
    CHECK(w2_to_dirac(m0) == Approx(0.0).margin(0.0));

    // {+1,-1} in R^1 -> 1
    CHECK(w2_to_dirac(cloud1d({1.0, -1.0})) == Approx(1.0).margin(1e-14));

    // square equals mean of |x|^2 to machine precision
    auto m2 = cloud1d({0.5, 1.5, -2.0});
    const double d = w2_to_dirac(m2);
    CHECK(d * d == Approx((0.25 + 2.25 + 4.0) / 3.0).epsilon(1e-15));

    CHECK_THROWS_AS(EmpiricalMeasure(std::vector<Vec>{}), std::invalid_argument);
}

TEST_CASE("w2_empirical exact 1-D") {
    auto a = cloud1d({0.0, 1.0});
    auto b = cloud1d({1.0, 2.0});
    auto r = w2_empirical(a, b);
    CHECK(r.exact);
    CHECK(r.value == Approx(1.0).margin(1e-14));  // [DERIVED: sorted matching oracle]

    CHECK(w2_empirical(a, a).value == Approx(0.0).margin(0.0));

    auto c = cloud1d({0.0});
    auto d = cloud1d({3.0});
    CHECK(w2_empirical(c, d).value == Approx(3.0).margin(1e-14));

    // dimension mismatch
    Vec p2 = Vec::Zero(2);
    EmpiricalMeasure m2({p2});
    CHECK_THROWS_AS(w2_empirical(a, m2), std::invalid_argument);
}

TEST_CASE("w2_empirical metric properties on random 1-D triples") {
    std::mt19937_64 rng(1234);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> xs(16), ys(16), zs(16);
        for (auto& v : xs) v = nd(rng);
        for (auto& v : ys) v = nd(rng) + 0.5;
        for (auto& v : zs) v = 2.0 * nd(rng);
        auto a = cloud1d(xs), b = cloud1d(ys), c = cloud1d(zs);
        const double ab = w2_empirical(a, b).value;
        const double ba = w2_empirical(b, a).value;
        const double ac = w2_empirical(a, c).value;
        const double cb = w2_empirical(c, b).value;
        CHECK(ab == Approx(ba).margin(1e-14));  // symmetry
        CHECK(ab >= 0.0);
        CHECK(ab <= ac + cb + 1e-12);  // triangle inequality
        CHECK(ab == Approx(w2_1d_oracle(xs, ys)).margin(1e-12));
    }
}

TEST_CASE("w2_empirical sliced estimate in 2-D is tagged approximate") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    std::vector<Vec> pa, pb;
    for (int i = 0; i < 64; ++i) {
        Vec u(2), v(2);
        u << nd(rng), nd(rng);
        v << nd(rng) + 1.0, nd(rng);
        pa.push_back(u);
        pb.push_back(v);
    }
    EmpiricalMeasure a(pa), b(pb);
    auto r = w2_empirical(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.value > 0.0);
    // translation by (1,0): true W2 ~ 1; sliced estimate is a lower-bound-flavored
    // approximation, keep a loose sanity band.
    CHECK(r.value == Approx(1.0).epsilon(0.5));
    CHECK(w2_empirical(a, a).value == Approx(0.0).margin(1e-12));
}

TEST_CASE("gateaux_from_lfd") {
    // k(m) = int |y|^2 dm, D_y dk/dnu = 2y
    auto m = cloud1d({1.0, 2.0});
    auto lfd = [](const EmpiricalMeasure&, const Vec& y) -> Vec { return 2.0 * y; };
    auto out = gateaux_from_lfd(lfd, m);
    REQUIRE(out.size() == 2);
    CHECK(out[0](0) == Approx(2.0));
    CHECK(out[1](0) == Approx(4.0));

    // k(m) = (int y dm)^2 / 2 in 1-D, D_y dk/dnu = mean(m) (constant in y);
    // cloud {1,3} -> mean 2 -> per-particle {2,2}.
    // [DERIVED: central finite difference of the lifted K(X + eps Z); oracle below]
    auto m2 = cloud1d({1.0, 3.0});
    auto lfd2 = [](const EmpiricalMeasure& mm, const Vec&) -> Vec {
        Vec r(1);
        r << mean_of(mm)(0);
        return r;
    };
    auto out2 = gateaux_from_lfd(lfd2, m2);
    CHECK(out2[0](0) == Approx(2.0));
    CHECK(out2[1](0) == Approx(2.0));

    // k constant -> zeros
    auto lfd0 = [](const EmpiricalMeasure&, const Vec&) -> Vec { return Vec::Zero(1); };
    auto out0 = gateaux_from_lfd(lfd0, m2);
    CHECK(out0[0](0) == 0.0);
    CHECK(out0[1](0) == 0.0);

    // non-finite evaluation reports the particle index
    auto lfd_bad = [](const EmpiricalMeasure&, const Vec& y) -> Vec {
        Vec r(1);
        r << (y(0) > 2.5 ? std::numeric_limits<double>::quiet_NaN() : 0.0);
        return r;
    };
    CHECK_THROWS_WITH(gateaux_from_lfd(lfd_bad, m2), Catch::Matchers::ContainsSubstring("particle 1"));
}

TEST_CASE("gateaux_from_lfd matches lifted finite differences") {
    // K(X) = k(L(X)) with k(m) = (int y dm)^2/2 + int y^3 dm in 1-D.
    // dk/dnu(m)(y) = mean(m)*y + y^3, D_y dk/dnu = mean(m) + 3 y^2.
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    std::vector<double> xs(32);
    for (auto& v : xs) v = nd(rng);
    auto m = cloud1d(xs);
    auto lfd = [](const EmpiricalMeasure& mm, const Vec& y) -> Vec {
        Vec r(1);
        r << mean_of(mm)(0) + 3.0 * y(0) * y(0);
        return r;
    };
    auto analytic = gateaux_from_lfd(lfd, m);

    auto K = [](const std::vector<double>& pts) {
        double mean = 0.0, cube = 0.0;
        for (double p : pts) {
            mean += p;
            cube += p * p * p;
        }
        mean /= static_cast<double>(pts.size());
        cube /= static_cast<double>(pts.size());
        return 0.5 * mean * mean + cube;
    };
    // directional FD: K(X + eps Z) with random Z; Gateaux derivative is
    // (1/N) sum_i analytic_i . Z_i  (uniform-weight lift).
    const double eps = 1e-4;
    for (int t = 0; t < 5; ++t) {
        std::vector<double> z(xs.size());
        for (auto& v : z) v = nd(rng);
        std::vector<double> xp = xs, xm = xs;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            xp[i] += eps * z[i];
            xm[i] -= eps * z[i];
        }
        const double fd = (K(xp) - K(xm)) / (2.0 * eps);
        double lin = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) lin += analytic[i](0) * z[i];
        lin /= static_cast<double>(xs.size());
        CHECK(fd == Approx(lin).epsilon(1e-4));
    }
}

TEST_CASE("pairwise E-tilde reductions and permutation invariance") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    std::vector<double> xs(33);
    for (auto& v : xs) v = nd(rng);
    auto m = cloud1d(xs);

    IndependentCopyContext ctx(m);
    // E~[h(x, x~)] with h(x,y) = x*y over the product cloud equals mean^2 ... for
    // the full pairwise rule (1/N^2) sum_ij x_i x_j.
    double full = ctx.pairwise_scalar([](const Vec& a, const Vec& b) { return a(0) * b(0); });
    const double mu = mean_of(m)(0);
    CHECK(full == Approx(mu * mu).margin(1e-13));

    // permutation invariance of the deterministic reduction: bit-identical
    std::vector<double> perm = xs;
    std::shuffle(perm.begin(), perm.end(), rng);
    auto mp = cloud1d(perm);
    IndependentCopyContext ctxp(mp);
    double full_p = ctxp.pairwise_scalar([](const Vec& a, const Vec& b) { return a(0) * b(0); });
    // reductions sort index streams canonically only for symmetric summaries;
    // pairwise_scalar sums over all ordered pairs, so a permutation reorders the
    // pairwise tree. We require equality to roundoff here and bit-identity for
    // moment reductions below.
    CHECK(full_p == Approx(full).margin(1e-13));

    // moment reductions are bit-identical under permutation (sorted index stream)
    CHECK(second_moment(m) == second_moment(mp));

    // subsampled mode converges to full as stride -> 1
    IndependentCopyContext c4(m, 4), c2(m, 2), c1(m, 1);
    auto h = [](const Vec& a, const Vec& b) { return std::tanh(a(0) - b(0)) + a(0) * b(0); };
    const double v1 = c1.pairwise_scalar(h);
    const double v2 = c2.pairwise_scalar(h);
    const double v4 = c4.pairwise_scalar(h);
    CHECK(std::abs(v2 - v1) <= std::abs(v4 - v1) + 0.05);
    CHECK(v1 == Approx(full + c1.pairwise_scalar([](const Vec& a, const Vec& b) {
                    return std::tanh(a(0) - b(0));
                })).margin(1e-12));
}

TEST_CASE("pairwise tree summation is deterministic and accurate") {
    // fixed summation order (index-ascending pairwise tree)
    std::vector<double> vals(1001);
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    for (auto& v : vals) v = ud(rng);
    const double s1 = pairwise_sum(vals);
    const double s2 = pairwise_sum(vals);
    CHECK(s1 == s2);  // bit-identical
    long double ref = 0.0L;
    for (double v : vals) ref += static_cast<long double>(v);
    CHECK(s1 == Approx(static_cast<double>(ref)).margin(1e-12));
}
