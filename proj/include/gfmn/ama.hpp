#pragma once

#include "gfmn/moments.hpp"

namespace gfmn {

// Moving-average trackers for the per-layer mean (and variance) difference
// vectors, plus the surrogate generator loss built from them.

using LayerVecs = std::vector<std::vector<float>>;

inline LayerVecs zero_vecs(const std::vector<int>& widths) {
    LayerVecs v(widths.size());
    for (size_t j = 0; j < widths.size(); ++j) v[j].assign(widths[j], 0.0f);
    return v;
}

struct MAState {
    LayerVecs v_mu, v_sigma;
    float alpha = 5e-5f;

    static MAState make(const std::vector<int>& widths, float alpha, bool with_sigma = true) {
        if (alpha <= 0.0f || alpha > 1.0f) throw StatsError("MA rate must be in (0,1]");
        MAState s;
        s.alpha = alpha;
        s.v_mu = zero_vecs(widths);
        if (with_sigma) s.v_sigma = zero_vecs(widths);
        return s;
    }
};

struct AMAState {
    LayerVecs v_mu, v_sigma;
    LayerVecs m_mu, u_mu, m_sigma, u_sigma;   // ADAM accumulators, zero-initialized
    long long t = 0;
    float alpha = 5e-5f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

    static AMAState make(const std::vector<int>& widths, float alpha, bool with_sigma = true) {
        if (alpha <= 0.0f || alpha > 1.0f) throw StatsError("AMA rate must be in (0,1]");
        AMAState s;
        s.alpha = alpha;
        s.v_mu = zero_vecs(widths);
        s.m_mu = zero_vecs(widths);
        s.u_mu = zero_vecs(widths);
        if (with_sigma) {
            s.v_sigma = zero_vecs(widths);
            s.m_sigma = zero_vecs(widths);
            s.u_sigma = zero_vecs(widths);
        }
        return s;
    }
};

namespace detail {

inline void check_vec_widths(const LayerVecs& v, const std::vector<std::vector<float>>& d,
                             const char* what) {
    if (v.size() != d.size()) throw StatsError(std::string(what) + ": layer count mismatch");
    for (size_t j = 0; j < v.size(); ++j)
        if (v[j].size() != d[j].size())
            throw StatsError(std::string(what) + ": width mismatch at layer " + std::to_string(j));
}

} // namespace detail

/// One SGD step on 1/2||v - delta||^2 with rate alpha: v <- v - alpha*(v - delta).
/// Written exactly in that operation order so the MA == SGD identity is bitwise.
inline void ma_track_update(std::vector<float>& v, const std::vector<float>& d, float alpha) {
    for (size_t k = 0; k < v.size(); ++k) v[k] = v[k] - alpha * (v[k] - d[k]);
}

inline void ma_update(MAState& s, const MomentDelta& d) {
    detail::check_vec_widths(s.v_mu, d.mu, "ma_update");
    for (size_t j = 0; j < s.v_mu.size(); ++j) ma_track_update(s.v_mu[j], d.mu[j], s.alpha);
    if (!s.v_sigma.empty()) {
        detail::check_vec_widths(s.v_sigma, d.sigma, "ma_update");
        for (size_t j = 0; j < s.v_sigma.size(); ++j)
            ma_track_update(s.v_sigma[j], d.sigma[j], s.alpha);
    }
}

/// ADAM(x) at step t (t >= 1), updating m and u in place:
///   m <- b1*m + (1-b1)*x, u <- b2*u + (1-b2)*x^2, y = m_hat / (sqrt(u_hat) + eps).
inline void adam_apply(std::vector<float>& y, const std::vector<float>& x, std::vector<float>& m,
                       std::vector<float>& u, long long t, float beta1, float beta2, float eps) {
    double bc1 = 1.0 - std::pow((double)beta1, (double)t);
    double bc2 = 1.0 - std::pow((double)beta2, (double)t);
    y.resize(x.size());
    for (size_t k = 0; k < x.size(); ++k) {
        m[k] = beta1 * m[k] + (1.0f - beta1) * x[k];
        u[k] = beta2 * u[k] + (1.0f - beta2) * x[k] * x[k];
        float mh = (float)(m[k] / bc1);
        float uh = (float)(u[k] / bc2);
        y[k] = mh / (std::sqrt(uh) + eps);
    }
}

/// Standalone ADAM(x) transform: increments t and returns y.
inline std::vector<float> adam_transform(const std::vector<float>& x, std::vector<float>& m,
                                         std::vector<float>& u, long long& t, float beta1 = 0.9f,
                                         float beta2 = 0.999f, float eps = 1e-8f) {
    if (m.size() != x.size() || u.size() != x.size())
        throw StatsError("adam_transform: accumulator widths mismatch");
    ++t;
    std::vector<float> y;
    adam_apply(y, x, m, u, t, beta1, beta2, eps);
    return y;
}

/// v <- v - alpha * ADAM(v - delta); one shared step count per update, all
/// layers and both tracks advanced jointly.
inline void ama_update(AMAState& s, const MomentDelta& d) {
    detail::check_vec_widths(s.v_mu, d.mu, "ama_update");
    if (!s.v_sigma.empty()) detail::check_vec_widths(s.v_sigma, d.sigma, "ama_update");
    ++s.t;
    std::vector<float> grad, y;
    for (size_t j = 0; j < s.v_mu.size(); ++j) {
        auto& v = s.v_mu[j];
        grad.resize(v.size());
        for (size_t k = 0; k < v.size(); ++k) grad[k] = v[k] - d.mu[j][k];
        adam_apply(y, grad, s.m_mu[j], s.u_mu[j], s.t, s.beta1, s.beta2, s.eps);
        for (size_t k = 0; k < v.size(); ++k) v[k] -= s.alpha * y[k];
    }
    for (size_t j = 0; j < s.v_sigma.size(); ++j) {
        auto& v = s.v_sigma[j];
        grad.resize(v.size());
        for (size_t k = 0; k < v.size(); ++k) grad[k] = v[k] - d.sigma[j][k];
        adam_apply(y, grad, s.m_sigma[j], s.u_sigma[j], s.t, s.beta1, s.beta2, s.eps);
        for (size_t k = 0; k < v.size(); ++k) v[k] -= s.alpha * y[k];
    }
}

// ---------------------------------------------------------------------------
// Surrogate generator loss:
//   sum_j v_j . (mu_real,j - batch_mean_j)  [+ covariance analog]
// v enters as input nodes so the training loop can refresh it every step
// without rebuilding the graph; no gradient flows into v.
// ---------------------------------------------------------------------------

struct SurrogateNodes {
    std::vector<Graph::Id> v_mu, v_sigma;   // inputs, set per step
    Graph::Id loss = -1;
};

inline SurrogateNodes surrogate_loss_nodes(Graph& g, const MomentStats& real,
                                           const BatchStatNodes& stats) {
    SurrogateNodes out;
    Graph::Id total = -1;
    for (size_t j = 0; j < stats.mean.size(); ++j) {
        int d = g.at(stats.mean[j]).shape[0];
        if ((int)real.mu[j].size() != d)
            throw StatsError("surrogate: width mismatch at layer " + std::to_string(j));
        auto v = g.input("v_mu." + std::to_string(j), {d});
        out.v_mu.push_back(v);
        auto mu_r = g.constant(Tensor({d}, std::vector<float>(real.mu[j])));
        auto term = g.dot(v, g.sub(mu_r, stats.mean[j]));
        total = total < 0 ? term : g.add(total, term);
    }
    for (size_t j = 0; j < stats.var.size(); ++j) {
        int d = g.at(stats.var[j]).shape[0];
        auto v = g.input("v_sig." + std::to_string(j), {d});
        out.v_sigma.push_back(v);
        auto sig_r = g.constant(Tensor({d}, std::vector<float>(real.sigma[j])));
        auto term = g.dot(v, g.sub(sig_r, stats.var[j]));
        total = g.add(total, term);
    }
    out.loss = total;
    return out;
}

/// Pushes the tracker's current v vectors into the surrogate input nodes.
inline void set_surrogate_v(Graph& g, const SurrogateNodes& nodes, const LayerVecs& v_mu,
                            const LayerVecs& v_sigma) {
    for (size_t j = 0; j < nodes.v_mu.size(); ++j)
        g.set_input("v_mu." + std::to_string(j),
                    Tensor({(int)v_mu[j].size()}, std::vector<float>(v_mu[j])));
    for (size_t j = 0; j < nodes.v_sigma.size(); ++j)
        g.set_input("v_sig." + std::to_string(j),
                    Tensor({(int)v_sigma[j].size()}, std::vector<float>(v_sigma[j])));
}

} // namespace gfmn
