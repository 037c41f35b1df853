#pragma once

#include "gfmn/nets.hpp"

#include <functional>
#include <memory>

namespace gfmn {

struct StatsError : std::runtime_error {
    explicit StatsError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Anything that turns a sample batch into per-layer feature matrices [N,d_j],
/// both as plain values and as differentiable graph nodes.
class ExtractorIface {
public:
    virtual ~ExtractorIface() = default;
    virtual int num_taps() const = 0;
    virtual std::vector<int> widths() const = 0;
    virtual uint64_t fingerprint(int M) const = 0;
    /// Input shape for a batch of N samples.
    virtual Shape batch_shape(int N) const = 0;
    /// Appends the (frozen) feature path; returns the first M tap matrices.
    virtual std::vector<Graph::Id> append(Graph& g, Graph::Id x, int M) const = 0;

    std::vector<Tensor> extract(const Tensor& batch, int M) const {
        Graph g;
        auto x = g.input("x", batch.shape);
        auto taps = append(g, x, M);
        g.set_input("x", batch);
        g.forward();
        std::vector<Tensor> out;
        out.reserve(taps.size());
        for (auto id : taps) out.push_back(g.value(id));
        return out;
    }

protected:
    void check_m(int M) const {
        if (M < 1 || M > num_taps())
            throw StatsError("M=" + std::to_string(M) + " out of range [1," +
                             std::to_string(num_taps()) + "]");
    }
};

/// Frozen convolutional encoder taps.
class EncoderExtractor : public ExtractorIface {
public:
    explicit EncoderExtractor(FeatureExtractor enc) : enc_(std::move(enc)) {}

    int num_taps() const override { return enc_.num_taps(); }
    std::vector<int> widths() const override { return enc_.tap_widths(); }
    uint64_t fingerprint(int M) const override { return enc_.fingerprint(M); }
    Shape batch_shape(int N) const override {
        return {N, enc_.cfg.channels, enc_.cfg.image_size, enc_.cfg.image_size};
    }
    std::vector<Graph::Id> append(Graph& g, Graph::Id x, int M) const override {
        check_m(M);
        auto taps = enc_.append(g, x, "enc.", false);
        taps.features.resize(M);
        return taps.features;
    }
    const FeatureExtractor& encoder() const { return enc_; }

private:
    FeatureExtractor enc_;
};

/// One tap, features = the flattened sample itself (test fixture and the
/// degenerate extractor for vector-valued data).
class IdentityExtractor : public ExtractorIface {
public:
    IdentityExtractor(Shape sample_shape)
        : sample_shape_(std::move(sample_shape)), dim_((int)numel(sample_shape_)) {}

    int num_taps() const override { return 1; }
    std::vector<int> widths() const override { return {dim_}; }
    uint64_t fingerprint(int M) const override {
        uint64_t h = hash_bytes("identity", 8);
        return hash_bytes(&M, sizeof(M), h);
    }
    Shape batch_shape(int N) const override {
        Shape s = sample_shape_;
        s.insert(s.begin(), N);
        return s;
    }
    std::vector<Graph::Id> append(Graph& g, Graph::Id x, int M) const override {
        check_m(M);
        int N = g.at(x).shape[0];
        return {g.reshape(x, {N, dim_})};
    }

private:
    Shape sample_shape_;
    int dim_;
};

// ---------------------------------------------------------------------------

/// Per-layer feature means and diagonal variances over a distribution.
struct MomentStats {
    std::vector<std::vector<float>> mu;      // [M][d_j]
    std::vector<std::vector<float>> sigma;   // [M][d_j], variances, >= 0
    long long count = 0;
    uint64_t fingerprint = 0;

    int layers() const { return (int)mu.size(); }
    std::vector<int> widths() const {
        std::vector<int> w;
        for (auto& m : mu) w.push_back((int)m.size());
        return w;
    }
};

struct MomentDelta {
    std::vector<std::vector<float>> mu;      // mu_real - mu_fake per layer
    std::vector<std::vector<float>> sigma;   // sigma_real - sigma_fake per layer
};

namespace detail {

inline void check_widths(const MomentStats& a, const MomentStats& b, const char* what) {
    if (a.widths() != b.widths())
        throw StatsError(std::string(what) + ": per-layer widths differ");
}

} // namespace detail

/// Full-dataset statistics, streamed in fixed order with 64-bit accumulators.
/// mu_j = E[f], sigma_j = E[f^2] - mu_j^2 clamped at 0.
inline MomentStats precompute_stats(const Tensor& data, const ExtractorIface& ext, int M,
                                    int chunk = 32) {
    if (data.shape.empty() || data.shape[0] < 1)
        throw StatsError("precompute_stats: empty dataset");
    int K = data.shape[0];
    size_t sample_sz = (size_t)(data.size() / K);
    auto w = ext.widths();

    std::vector<std::vector<double>> s1(M), s2(M);
    for (int j = 0; j < M; ++j) {
        s1[j].assign(w[j], 0.0);
        s2[j].assign(w[j], 0.0);
    }

    for (int off = 0; off < K; off += chunk) {
        int n = std::min(chunk, K - off);
        Shape bs = ext.batch_shape(n);
        Tensor batch(bs, std::vector<float>(data.data.begin() + (size_t)off * sample_sz,
                                            data.data.begin() + (size_t)(off + n) * sample_sz));
        auto feats = ext.extract(batch, M);
        for (int j = 0; j < M; ++j) {
            int d = w[j];
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < d; ++k) {
                    double v = feats[j].data[(size_t)i * d + k];
                    s1[j][k] += v;
                    s2[j][k] += v * v;
                }
        }
    }

    MomentStats out;
    out.count = K;
    out.fingerprint = ext.fingerprint(M);
    out.mu.resize(M);
    out.sigma.resize(M);
    for (int j = 0; j < M; ++j) {
        out.mu[j].resize(w[j]);
        out.sigma[j].resize(w[j]);
        for (int k = 0; k < w[j]; ++k) {
            double m = s1[j][k] / K;
            double v = s2[j][k] / K - m * m;
            out.mu[j][k] = (float)m;
            out.sigma[j][k] = (float)std::max(0.0, v);   // clamp rounding negatives
        }
    }
    return out;
}

/// Same formulas over a single batch (non-differentiated convenience).
inline MomentStats batch_stats(const Tensor& batch, const ExtractorIface& ext, int M,
                               bool with_variance = true) {
    int N = batch.shape[0];
    if (with_variance && N < 2)
        throw StatsError("batch_stats: batch size must be >= 2 for covariance matching");
    return precompute_stats(batch, ext, M, std::max(N, 1));
}

/// Differentiable per-layer batch mean and variance nodes built from tap
/// matrices [N,d_j]: mean = rowmean(F), var = rowmean(F^2) - mean^2.
struct BatchStatNodes {
    std::vector<Graph::Id> mean;
    std::vector<Graph::Id> var;   // empty when variance not requested
};

inline BatchStatNodes batch_stat_nodes(Graph& g, const std::vector<Graph::Id>& feats,
                                       bool with_variance) {
    BatchStatNodes out;
    for (auto f : feats) {
        auto m = g.mean_rows(f);
        out.mean.push_back(m);
        if (with_variance) {
            if (g.at(f).shape[0] < 2)
                throw StatsError("batch_stat_nodes: batch size must be >= 2 for variance");
            out.var.push_back(g.sub(g.mean_rows(g.square(f)), g.square(m)));
        }
    }
    return out;
}

/// Eq-1 style loss: sum_j ||mu_a - mu_b||^2 + ||sigma_a - sigma_b||^2,
/// optionally weighted per layer (defaults to 1, unnormalized).
inline double full_loss(const MomentStats& real, const MomentStats& fake,
                        const std::vector<double>& layer_weights = {}) {
    detail::check_widths(real, fake, "full_loss");
    if (real.fingerprint && fake.fingerprint && real.fingerprint != fake.fingerprint)
        throw StatsError("full_loss: extractor fingerprints differ");
    double total = 0.0;
    for (int j = 0; j < real.layers(); ++j) {
        double wj = layer_weights.empty() ? 1.0 : layer_weights[j];
        double acc = 0.0;
        for (size_t k = 0; k < real.mu[j].size(); ++k) {
            double dm = (double)real.mu[j][k] - fake.mu[j][k];
            double ds = (double)real.sigma[j][k] - fake.sigma[j][k];
            acc += dm * dm + ds * ds;
        }
        total += wj * acc;
    }
    return total;
}

/// Delta_j = mu_real,j - mu_fake,j (and the variance analog).
inline MomentDelta delta(const MomentStats& real, const MomentStats& fake) {
    detail::check_widths(real, fake, "delta");
    MomentDelta d;
    d.mu.resize(real.layers());
    d.sigma.resize(real.layers());
    for (int j = 0; j < real.layers(); ++j) {
        size_t w = real.mu[j].size();
        d.mu[j].resize(w);
        d.sigma[j].resize(w);
        for (size_t k = 0; k < w; ++k) {
            d.mu[j][k] = real.mu[j][k] - fake.mu[j][k];
            d.sigma[j][k] = real.sigma[j][k] - fake.sigma[j][k];
        }
    }
    return d;
}

} // namespace gfmn
