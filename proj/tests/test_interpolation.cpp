#include <catch2/catch_amalgamated.hpp>

#include <rsfinv/interpolation.hpp>

#include <random>

using namespace rsfinv;

namespace {

SbpNorm uniform_norm(int n, int order) {
    return SbpOperatorSet1D(n, 1.0 / (n - 1), order).norm();
}

Vec coords(int n) {
    Vec x(n);
    for (int i = 0; i < n; ++i) x(i) = double(i) / (n - 1);
    return x;
}

} // namespace

// Exact linears in both directions need the cross moment sum(H x^2) to
// agree between the two quadratures, so the strict invariants are checked
// with norms that integrate x^2 exactly: the Gregory norm on the coarse
// parameter grid against SBP norms of order >= 4 on the fine grid.
TEST_CASE("interpolation pair: consistency and duality on standard pairs") {
    const std::pair<int, int> sizes[] = {{11, 101}, {26, 251}, {51, 251}};
    for (auto [nc, nf] : sizes) {
        for (int order : {4, 6}) {
            CAPTURE(nc, nf, order);
            SbpNorm hc = gregory_norm(nc, 1.0 / (nc - 1));
            SbpNorm hf = uniform_norm(nf, order);
            InterpolationPair ip = build_interpolation(nc, nf, hc, hf);
            Vec xc = coords(nc), xf = coords(nf);

            // constants and linears in both directions
            REQUIRE((ip.c2f * Vec::Ones(nc) - Vec::Ones(nf)).lpNorm<Eigen::Infinity>() < 1e-13);
            REQUIRE((ip.f2c * Vec::Ones(nf) - Vec::Ones(nc)).lpNorm<Eigen::Infinity>() < 1e-12);
            REQUIRE((ip.c2f * xc - xf).lpNorm<Eigen::Infinity>() < 1e-12);
            REQUIRE((ip.f2c * xf - xc).lpNorm<Eigen::Infinity>() < 1e-12);

            // linear roundtrip
            Vec ramp = 3.0 * xc.array() - 0.7;
            REQUIRE((ip.f2c * (ip.c2f * ramp) - ramp).lpNorm<Eigen::Infinity>() < 1e-12);

            // f2c = Hc^{-1} c2f^T Hf entrywise
            Eigen::MatrixXd lhs = Eigen::MatrixXd(ip.f2c);
            Eigen::MatrixXd rhs = hc.weights.cwiseInverse().asDiagonal() *
                                  Eigen::MatrixXd(ip.c2f).transpose() *
                                  Eigen::MatrixXd(hf.weights.asDiagonal());
            const double scale = rhs.cwiseAbs().maxCoeff();
            REQUIRE((lhs - rhs).lpNorm<Eigen::Infinity>() < 1e-13 * scale);
        }
    }
}

TEST_CASE("trapezoid-norm pair: c2f exact, f2c consistent to O(h^2)") {
    const std::pair<int, int> sizes[] = {{11, 101}, {26, 251}, {51, 251}};
    for (auto [nc, nf] : sizes) {
        CAPTURE(nc, nf);
        SbpNorm hc = uniform_norm(nc, 2);
        SbpNorm hf = uniform_norm(nf, 2);
        InterpolationPair ip = build_interpolation(nc, nf, hc, hf);
        Vec xc = coords(nc), xf = coords(nf);
        const double h = 1.0 / (nc - 1);

        REQUIRE((ip.c2f * Vec::Ones(nc) - Vec::Ones(nf)).lpNorm<Eigen::Infinity>() < 1e-13);
        REQUIRE((ip.c2f * xc - xf).lpNorm<Eigen::Infinity>() < 1e-12);
        REQUIRE((ip.f2c * Vec::Ones(nf) - Vec::Ones(nc)).lpNorm<Eigen::Infinity>() < h * h);
        REQUIRE((ip.f2c * xf - xc).lpNorm<Eigen::Infinity>() < 2.0 * h * h);
    }
}

TEST_CASE("interpolation adjoint identity for random vectors") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> dist;
    const std::pair<int, int> sizes[] = {{11, 101}, {26, 251}, {51, 251}};
    for (auto [nc, nf] : sizes) {
        SbpNorm hc = uniform_norm(nc, 2);
        SbpNorm hf = uniform_norm(nf, 2);
        InterpolationPair ip = build_interpolation(nc, nf, hc, hf);
        for (int trial = 0; trial < 100; ++trial) {
            Vec p(nc), w(nf);
            for (int j = 0; j < nc; ++j) p(j) = dist(rng);
            for (int i = 0; i < nf; ++i) w(i) = dist(rng);
            const double a = hf.dot(ip.c2f * p, w);
            const double b = hc.dot(p, ip.f2c * w);
            REQUIRE(std::abs(a - b) < 1e-13 * std::max(1.0, std::abs(a)));
        }
    }
}

TEST_CASE("interpolation is second-order accurate on smooth functions") {
    const int nf = 321;
    SbpNorm hf = uniform_norm(nf, 4);
    Vec xf = coords(nf);
    Vec exact = (3.0 * xf.array()).sin();

    double prev_err = 0.0;
    for (int k = 0; k < 3; ++k) {
        const int nc = 10 * (1 << k) + 1;
        SbpNorm hc = gregory_norm(nc, 1.0 / (nc - 1));
        InterpolationPair ip = build_interpolation(nc, nf, hc, hf);
        Vec fc = (3.0 * coords(nc).array()).sin();
        Vec diff = ip.c2f * fc - exact;
        const double err = std::sqrt(hf.dot(diff, diff));
        if (k > 0) {
            const double ratio = prev_err / err;
            REQUIRE(ratio > 3.0);
            REQUIRE(ratio < 5.5);
        }
        prev_err = err;
    }
}

TEST_CASE("identity interpolation is a bit-exact passthrough") {
    SbpNorm h = uniform_norm(31, 2);
    InterpolationPair ip = identity_interpolation(h);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> dist;
    Vec v(31);
    for (int i = 0; i < 31; ++i) v(i) = dist(rng);
    Vec up = ip.c2f * v, down = ip.f2c * v;
    for (int i = 0; i < 31; ++i) {
        REQUIRE(up(i) == v(i));
        REQUIRE(down(i) == v(i));
    }
}

TEST_CASE("Gregory norm is positive and exact through degree 2") {
    for (int n : {6, 11, 26, 51}) {
        const double h = 1.0 / (n - 1);
        SbpNorm g = gregory_norm(n, h);
        REQUIRE(g.weights.minCoeff() > 0.0);
        Vec x = coords(n);
        for (int k = 0; k <= 2; ++k) {
            const double quad = (g.weights.array() * x.array().pow(k)).sum();
            REQUIRE(quad == Catch::Approx(1.0 / (k + 1)).epsilon(1e-13));
        }
    }
    REQUIRE_THROWS(gregory_norm(5, 1.0));
}

TEST_CASE("interpolation rejects invalid configurations") {
    SbpNorm h11 = uniform_norm(11, 2);
    SbpNorm h101 = uniform_norm(101, 2);
    REQUIRE_THROWS(build_interpolation(101, 11, h101, h11));
    REQUIRE_THROWS(build_interpolation(11, 101, h101, h11));
    SbpNorm stretched = h101;
    stretched.weights *= 2.0; // interval [0,2] against [0,1]
    REQUIRE_THROWS(build_interpolation(11, 101, h11, stretched));
}
