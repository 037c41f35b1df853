#include "doctest.h"

#include "gfmn/metrics.hpp"

using namespace gfmn;

static Tensor point(float v) { return Tensor({1}, {v}); }

TEST_CASE("mmd of a distribution with itself is zero") {
    EmpiricalDistribution p;
    p.support = {point(0), point(1), point(2)};
    p.weights = {0.2, 0.3, 0.5};
    auto phi = indicator_features(3);
    CHECK(mmd_kphi(p, p, phi) == 0.0);
}

TEST_CASE("point masses at 0 and 2 with identity features give 4") {
    EmpiricalDistribution p, q;
    p.support = {point(0)};
    p.weights = {1.0};
    q.support = {point(2)};
    q.weights = {1.0};
    FeatureMap identity = [](const Tensor& x) { return std::vector<double>{x.data[0]}; };
    CHECK(mmd_kphi(p, q, identity) == doctest::Approx(4.0));
}

TEST_CASE("invalid empirical distributions are rejected") {
    EmpiricalDistribution p;
    p.support = {point(0)};
    p.weights = {0.5};
    EmpiricalDistribution q = p;
    auto phi = indicator_features(1);
    CHECK_THROWS_AS(mmd_kphi(p, q, phi), StatsError);  // weights sum to 0.5
    p.weights = {-1.0};
    CHECK_THROWS_AS(mmd_kphi(p, q, phi), StatsError);
}

// every distribution on {a,b,c} with weights in steps of 0.25
static std::vector<std::array<double, 3>> weight_grid() {
    std::vector<std::array<double, 3>> grid;
    for (int i = 0; i <= 4; ++i)
        for (int j = 0; j + i <= 4; ++j)
            grid.push_back({i / 4.0, j / 4.0, (4 - i - j) / 4.0});
    return grid;
}

TEST_CASE("indicator features: MMD^2 = 0 iff distributions equal, exhaustively") {
    auto phi = indicator_features(3);
    auto grid = weight_grid();
    auto make = [](const std::array<double, 3>& w) {
        EmpiricalDistribution d;
        d.support = {point(0), point(1), point(2)};
        d.weights = {w[0], w[1], w[2]};
        return d;
    };
    for (auto& wp : grid)
        for (auto& wq : grid) {
            double m = mmd_kphi(make(wp), make(wq), phi);
            bool equal = wp == wq;
            if (equal) CHECK(m == 0.0);
            else CHECK(m > 0.0);
        }
}

TEST_CASE("mmd is symmetric") {
    auto phi = indicator_features(4);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> du(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        auto draw = [&]() {
            EmpiricalDistribution d;
            double sum = 0.0;
            std::vector<double> w(4);
            for (auto& x : w) { x = du(rng); sum += x; }
            for (int i = 0; i < 4; ++i) {
                d.support.push_back(point((float)i));
                d.weights.push_back(w[i] / sum);
            }
            // renormalize exactly
            double s2 = 0.0;
            for (double x : d.weights) s2 += x;
            d.weights.back() += 1.0 - s2;
            return d;
        };
        auto p = draw(), q = draw();
        CHECK(mmd_kphi(p, q, phi) == doctest::Approx(mmd_kphi(q, p, phi)).epsilon(1e-12));
        CHECK(mmd_kphi(p, q, phi) >= 0.0);
    }
}

// ----- Frechet distance ------------------------------------------------------

TEST_CASE("frechet distance of identical stats is zero") {
    GaussianStats a;
    a.mean = Eigen::Vector2d(1.0, -2.0);
    a.cov = Eigen::Matrix2d();
    a.cov << 2.0, 0.3, 0.3, 1.0;
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
}

TEST_CASE("equal covariances: distance reduces to ||d mu||^2") {
    GaussianStats a, b;
    a.cov = b.cov = (Eigen::Matrix2d() << 1.5, 0.2, 0.2, 0.7).finished();
    a.mean = Eigen::Vector2d(0.0, 0.0);
    b.mean = Eigen::Vector2d(3.0, -4.0);
    CHECK(frechet_distance(a, b) == doctest::Approx(25.0).epsilon(1e-9));
}

TEST_CASE("2x2 random PSD cases match the closed-form trace oracle") {
    // for 2x2: tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)), M = Sa*Sb
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> du(-1.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        auto rand_psd = [&]() {
            Eigen::Matrix2d r;
            r << du(rng), du(rng), du(rng), du(rng);
            return Eigen::Matrix2d(r * r.transpose() + 0.05 * Eigen::Matrix2d::Identity());
        };
        GaussianStats a, b;
        a.cov = rand_psd();
        b.cov = rand_psd();
        a.mean = Eigen::Vector2d(du(rng), du(rng));
        b.mean = Eigen::Vector2d(du(rng), du(rng));

        Eigen::Matrix2d M = a.cov * b.cov;
        double tr_sqrt = std::sqrt(M.trace() + 2.0 * std::sqrt(std::max(0.0, M.determinant())));
        double oracle = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;

        CHECK(frechet_distance(a, b) == doctest::Approx(oracle).epsilon(1e-6).scale(1.0));
        CHECK(frechet_distance(a, b) ==
              doctest::Approx(frechet_distance(b, a)).epsilon(1e-6).scale(1.0));
    }
}

TEST_CASE("frechet rejects asymmetric covariance") {
    GaussianStats a, b;
    a.mean = b.mean = Eigen::Vector2d::Zero();
    a.cov = (Eigen::Matrix2d() << 1.0, 0.5, -0.5, 1.0).finished();
    b.cov = Eigen::Matrix2d::Identity();
    CHECK_THROWS_AS(frechet_distance(a, b), StatsError);
}

TEST_CASE("gaussian_fit recovers moments of a known feature matrix") {
    Tensor f({4, 2}, {1, 0, -1, 0, 0, 2, 0, -2});
    auto g = gaussian_fit(f);
    CHECK(g.mean(0) == doctest::Approx(0.0));
    CHECK(g.mean(1) == doctest::Approx(0.0));
    CHECK(g.cov(0, 0) == doctest::Approx(0.5));
    CHECK(g.cov(1, 1) == doctest::Approx(2.0));
    CHECK(g.cov(0, 1) == doctest::Approx(0.0));
}

// ----- Lap1 -------------------------------------------------------------------

TEST_CASE("lap1 of x with itself is zero; shape mismatch rejected") {
    Tensor x = randn({1, 1, 8, 8}, 301);
    CHECK(lap1_loss(x, x) == 0.0);
    CHECK_THROWS_AS(lap1_loss(x, randn({1, 1, 4, 4}, 302)), ShapeError);
}

TEST_CASE("4x4 images give a depth-1 pyramid: loss is the plain L1 difference") {
    Tensor x = randn({1, 1, 4, 4}, 303);
    Tensor y = randn({1, 1, 4, 4}, 304);
    double l1 = 0.0;
    for (int i = 0; i < 16; ++i) l1 += std::fabs((double)x.data[i] - y.data[i]);
    CHECK(lap1_loss(x, y) == doctest::Approx(l1).epsilon(1e-6));
}

TEST_CASE("lap1 is homogeneous: scaling both inputs by c scales the loss by c") {
    Tensor x = randn({1, 2, 8, 8}, 305);
    Tensor y = randn({1, 2, 8, 8}, 306);
    double base = lap1_loss(x, y);
    for (float c : {0.0f, 0.5f, 3.0f}) {
        Tensor xs = x, ys = y;
        for (auto& v : xs.data) v *= c;
        for (auto& v : ys.data) v *= c;
        CHECK(lap1_loss(xs, ys) == doctest::Approx(c * base).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("lap1 is a pseudometric: symmetry exact, triangle inequality sampled") {
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = randn({1, 1, 8, 8}, 400 + 3 * trial);
        Tensor b = randn({1, 1, 8, 8}, 401 + 3 * trial);
        Tensor c = randn({1, 1, 8, 8}, 402 + 3 * trial);
        double ab = lap1_loss(a, b), ba = lap1_loss(b, a);
        CHECK(ab == ba);
        CHECK(ab <= lap1_loss(a, c) + lap1_loss(c, b) + 1e-6);
    }
}

// ----- regret bench ------------------------------------------------------------

TEST_CASE("constant stream with matched initialization: both regrets exactly 0") {
    std::vector<std::vector<float>> stream(50, {3.0f, -1.0f});
    auto rep = run_regret(stream, 0.1f, {3.0f, -1.0f});
    CHECK(rep.ma.cost == 0.0);
    CHECK(rep.ama.cost == 0.0);
    CHECK(rep.offline_cost == 0.0);
    CHECK(rep.ma.regret == 0.0);
    CHECK(rep.ama.regret == 0.0);
}

TEST_CASE("alternating stream, MA with alpha=1: cost matches the closed form") {
    // v0 = 0; after each step v equals the last observation, so every step
    // from the second pays the alternation gap squared
    const float a = 2.0f, b = -1.0f;
    const int T = 40;
    std::vector<std::vector<float>> stream;
    for (int t = 0; t < T; ++t) stream.push_back({t % 2 == 0 ? a : b});
    auto rep = run_regret(stream, 1.0f, {0.0f});
    double gap = (double)a - b;
    double closed = (double)a * a + (T - 1) * gap * gap;
    CHECK(rep.ma.cost == doctest::Approx(closed).epsilon(1e-6));
}

TEST_CASE("offline optimum equals the stream mean, confirmed by grid search") {
    std::vector<std::vector<float>> stream = {{1.0f}, {2.0f}, {4.0f}, {5.0f}};
    auto rep = run_regret(stream, 0.5f);
    CHECK(rep.v_star[0] == doctest::Approx(3.0));
    // no grid point does better than the analytic optimum
    for (double v = -1.0; v <= 7.0; v += 0.01) {
        double cost = 0.0;
        for (auto& s : stream) cost += (v - s[0]) * (v - s[0]);
        CHECK(cost >= rep.offline_cost - 1e-9);
    }
}

TEST_CASE("regret values are reported, not sign-asserted") {
    std::mt19937_64 rng(8);
    std::normal_distribution<float> dn(0.0f, 1.0f);
    std::vector<std::vector<float>> stream;
    for (int t = 0; t < 200; ++t) stream.push_back({dn(rng), dn(rng)});
    auto rep = run_regret(stream, 0.05f);
    CHECK(std::isfinite(rep.ma.regret));
    CHECK(std::isfinite(rep.ama.regret));
    CHECK(rep.ma.cost >= 0.0);
    CHECK(rep.ama.cost >= 0.0);
}
