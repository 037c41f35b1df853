#include "doctest.h"

#include "gfmn/moments.hpp"

using namespace gfmn;

TEST_CASE("identity extractor two-point dataset gives mu=(1,1), sigma=(1,1)") {
    IdentityExtractor ext({2});
    Tensor data({2, 2}, {0, 0, 2, 2});
    auto st = precompute_stats(data, ext, 1);
    REQUIRE(st.layers() == 1);
    CHECK(st.mu[0] == std::vector<float>{1, 1});
    CHECK(st.sigma[0] == std::vector<float>{1, 1});
    CHECK(st.count == 2);
}

TEST_CASE("single-sample dataset has exactly zero variance") {
    IdentityExtractor ext({3});
    Tensor data({1, 3}, {0.3f, -1.2f, 4.0f});
    auto st = precompute_stats(data, ext, 1);
    for (float v : st.sigma[0]) CHECK(v == 0.0f);
}

TEST_CASE("empty dataset is rejected") {
    IdentityExtractor ext({2});
    CHECK_THROWS_AS(precompute_stats(Tensor::zeros({0, 2}), ext, 1), StatsError);
}

TEST_CASE("streaming stats match a naive two-pass oracle on a 16-image dataset") {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.latent = 4;
    cfg.width_divisor = 16;
    auto [enc, dec] = build_encoder(cfg);
    EncoderExtractor ext(std::move(enc));

    Tensor data = uniform({16, 1, 8, 8}, 101, -1.0f, 1.0f);
    int M = 2;
    auto st = precompute_stats(data, ext, M, 5);   // uneven chunks on purpose

    // two-pass oracle: extract everything at once, mean first, then variance
    auto feats = ext.extract(data, M);
    for (int j = 0; j < M; ++j) {
        int d = feats[j].shape[1];
        for (int k = 0; k < d; ++k) {
            double mean = 0.0;
            for (int i = 0; i < 16; ++i) mean += feats[j].data[(size_t)i * d + k];
            mean /= 16.0;
            double var = 0.0;
            for (int i = 0; i < 16; ++i) {
                double dv = feats[j].data[(size_t)i * d + k] - mean;
                var += dv * dv;
            }
            var /= 16.0;
            CHECK(st.mu[j][k] == doctest::Approx(mean).epsilon(1e-5));
            CHECK(st.sigma[j][k] == doctest::Approx(var).epsilon(1e-5).scale(1.0));
        }
    }
}

TEST_CASE("batch of identical samples has sigma = 0") {
    IdentityExtractor ext({4});
    Tensor one = randn({1, 4}, 111);
    Tensor batch({3, 4}, {one.data[0], one.data[1], one.data[2], one.data[3],
                          one.data[0], one.data[1], one.data[2], one.data[3],
                          one.data[0], one.data[1], one.data[2], one.data[3]});
    auto st = batch_stats(batch, ext, 1);
    for (float v : st.sigma[0]) CHECK(v == 0.0f);
}

TEST_CASE("batch equal to the real dataset gives a zero delta") {
    IdentityExtractor ext({3});
    Tensor data = randn({6, 3}, 121);
    auto real = precompute_stats(data, ext, 1);
    auto fake = batch_stats(data, ext, 1);
    auto d = delta(real, fake);
    for (float v : d.mu[0]) CHECK(v == doctest::Approx(0.0f).scale(1.0).epsilon(1e-6));
    for (float v : d.sigma[0]) CHECK(v == doctest::Approx(0.0f).scale(1.0).epsilon(1e-6));
}

TEST_CASE("batch_stats rejects size-1 batches when variance is requested") {
    IdentityExtractor ext({2});
    Tensor batch({1, 2}, {1, 2});
    CHECK_THROWS_AS(batch_stats(batch, ext, 1, true), StatsError);
    CHECK_NOTHROW(batch_stats(batch, ext, 1, false));
}

TEST_CASE("gradient of batch mean w.r.t. upstream params matches finite differences") {
    // tiny linear "generator": out = z*W, batch mean of out dotted with a
    // fixed vector plays the role of the loss
    Graph g;
    auto z = g.constant(randn({4, 3}, 131));
    auto w = g.param("w", randn({3, 2}, 132));
    auto out = g.matmul(z, w);
    auto stats = batch_stat_nodes(g, {out}, true);
    auto r1 = g.constant(randn({2}, 133));
    auto r2 = g.constant(randn({2}, 134));
    auto loss = g.add(g.dot(stats.mean[0], r1), g.dot(stats.var[0], r2));
    auto rep = grad_check(g, loss, 1e-3);
    CHECK(rep.max_rel_err() < 1e-3);
}

TEST_CASE("full_loss trivial values") {
    MomentStats a, b;
    a.mu = {{1.0f}};
    a.sigma = {{2.0f}};
    b = a;
    CHECK(full_loss(a, a) == 0.0);

    // one layer, one feature, mu diff 1, sigma diff 0
    b.mu = {{0.0f}};
    CHECK(full_loss(a, b) == doctest::Approx(1.0));

    // two layers with diffs (3,4) and (0,0.5) -> 9+16+0.25
    MomentStats c, d;
    c.mu = {{3.0f, 4.0f}, {0.0f}};
    c.sigma = {{0.0f, 0.0f}, {0.5f}};
    d.mu = {{0.0f, 0.0f}, {0.0f}};
    d.sigma = {{0.0f, 0.0f}, {0.0f}};
    CHECK(full_loss(c, d) == doctest::Approx(25.25));
}

TEST_CASE("full_loss positivity and fingerprint checks") {
    MomentStats a;
    a.mu = {{1.0f, -2.0f}};
    a.sigma = {{0.5f, 0.25f}};
    a.fingerprint = 7;
    MomentStats b = a;
    CHECK(full_loss(a, b) == 0.0);
    b.sigma[0][1] += 0.125f;
    CHECK(full_loss(a, b) > 0.0);

    b.fingerprint = 8;
    CHECK_THROWS_AS(full_loss(a, b), StatsError);

    MomentStats wrong;
    wrong.mu = {{1.0f}};
    wrong.sigma = {{0.0f}};
    CHECK_THROWS_AS(full_loss(a, wrong), StatsError);
    CHECK_THROWS_AS(delta(a, wrong), StatsError);
}

TEST_CASE("delta arithmetic") {
    MomentStats real, fake;
    real.mu = {{1.0f, 1.0f}};
    real.sigma = {{0.0f, 0.0f}};
    fake.mu = {{0.5f, 2.0f}};
    fake.sigma = {{0.0f, 0.0f}};
    auto d = delta(real, fake);
    CHECK(d.mu[0] == std::vector<float>{0.5f, -1.0f});

    // random stats vs elementwise subtraction oracle: exact equality
    Tensor ra = randn({8}, 141), rb = randn({8}, 142);
    MomentStats x, y;
    x.mu = {std::vector<float>(ra.data.begin(), ra.data.begin() + 4)};
    x.sigma = {std::vector<float>(ra.data.begin() + 4, ra.data.end())};
    y.mu = {std::vector<float>(rb.data.begin(), rb.data.begin() + 4)};
    y.sigma = {std::vector<float>(rb.data.begin() + 4, rb.data.end())};
    auto dd = delta(x, y);
    for (int k = 0; k < 4; ++k) {
        CHECK(dd.mu[0][k] == x.mu[0][k] - y.mu[0][k]);
        CHECK(dd.sigma[0][k] == x.sigma[0][k] - y.sigma[0][k]);
    }
}

TEST_CASE("variance clamp never goes negative") {
    // constant feature at a value whose square amplifies float cancellation
    IdentityExtractor ext({1});
    Tensor data = Tensor::full({1000, 1}, 123.456f);
    auto st = precompute_stats(data, ext, 1, 7);
    CHECK(st.sigma[0][0] >= 0.0f);
}
