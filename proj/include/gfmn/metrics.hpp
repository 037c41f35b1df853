#pragma once

#include "gfmn/ama.hpp"

#include <Eigen/Dense>

#include <functional>

namespace gfmn {

// ---------------------------------------------------------------------------
// MMD with an explicit feature map: MMD^2 = ||E_p Phi - E_q Phi||^2
// ---------------------------------------------------------------------------

using FeatureMap = std::function<std::vector<double>(const Tensor&)>;

struct EmpiricalDistribution {
    std::vector<Tensor> support;
    std::vector<double> weights;

    void validate() const {
        if (support.size() != weights.size())
            throw StatsError("empirical distribution: support/weight size mismatch");
        double sum = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw StatsError("empirical distribution: negative weight");
            sum += w;
        }
        if (std::fabs(sum - 1.0) > 1e-9)
            throw StatsError("empirical distribution: weights sum to " + std::to_string(sum));
    }
};

inline double mmd_kphi(const EmpiricalDistribution& p, const EmpiricalDistribution& q,
                       const FeatureMap& phi) {
    p.validate();
    q.validate();
    std::vector<double> ep, eq;
    auto accumulate = [&](const EmpiricalDistribution& dist, std::vector<double>& e) {
        for (size_t i = 0; i < dist.support.size(); ++i) {
            auto f = phi(dist.support[i]);
            if (e.empty()) e.assign(f.size(), 0.0);
            if (e.size() != f.size()) throw StatsError("mmd: feature width varies across support");
            for (size_t k = 0; k < f.size(); ++k) e[k] += dist.weights[i] * f[k];
        }
    };
    accumulate(p, ep);
    accumulate(q, eq);
    if (ep.size() != eq.size()) throw StatsError("mmd: feature width differs between p and q");
    double s = 0.0;
    for (size_t k = 0; k < ep.size(); ++k) {
        double d = ep[k] - eq[k];
        s += d * d;
    }
    return s;
}

/// Indicator features on a finite domain {0,...,n-1}; a universal feature set
/// for distributions on that domain.
inline FeatureMap indicator_features(int domain_size) {
    return [domain_size](const Tensor& x) {
        std::vector<double> f(domain_size, 0.0);
        int idx = (int)std::lround(x.data.at(0));
        if (idx < 0 || idx >= domain_size) throw StatsError("indicator: point outside domain");
        f[idx] = 1.0;
        return f;
    };
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians
// ---------------------------------------------------------------------------

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

/// Fits mean and full covariance to a feature matrix [N, d].
inline GaussianStats gaussian_fit(const Tensor& features) {
    int n = features.shape[0], d = features.shape[1];
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) X(i, j) = features.data[(size_t)i * d + j];
    GaussianStats g;
    g.mean = X.colwise().mean();
    Eigen::MatrixXd centered = X.rowwise() - g.mean.transpose();
    g.cov = centered.transpose() * centered / (double)n;
    return g;
}

namespace detail {

/// PSD square root via eigendecomposition, negative eigenvalues clamped to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success)
        throw StatsError("frechet: eigendecomposition failed to converge");
    Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

} // namespace detail

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.size() != b.mean.size())
        throw StatsError("frechet: dimension mismatch");
    double symtol = 1e-8 * (1.0 + a.cov.norm() + b.cov.norm());
    if ((a.cov - a.cov.transpose()).norm() > symtol ||
        (b.cov - b.cov.transpose()).norm() > symtol)
        throw StatsError("frechet: covariance not symmetric");
    Eigen::MatrixXd sa = detail::psd_sqrt(a.cov);
    Eigen::MatrixXd cross = detail::psd_sqrt(sa * b.cov * sa);
    double d2 = (a.mean - b.mean).squaredNorm() +
                (a.cov + b.cov - 2.0 * cross).trace();
    return std::max(0.0, d2);
}

// ---------------------------------------------------------------------------
// Laplacian pyramid L1 loss (evaluation wrapper over the graph builder)
// ---------------------------------------------------------------------------

inline double lap1_loss(const Tensor& x, const Tensor& y) {
    Graph g;
    auto a = g.constant(x);
    auto b = g.constant(y);
    auto loss = lap1_node(g, a, b);
    g.forward();
    return g.scalar64(loss);
}

// ---------------------------------------------------------------------------
// Online tracking regret bench (MA vs AMA on f_t(v) = ||v - Delta_t||^2)
// ---------------------------------------------------------------------------

struct EstimatorRegret {
    double cost = 0.0;     // sum_t ||v_t - Delta_t||^2, v_t = prediction before seeing Delta_t
    double regret = 0.0;   // cost - offline optimum cost
};

struct RegretReport {
    EstimatorRegret ma, ama;
    double offline_cost = 0.0;          // f* at v* = mean of the stream
    std::vector<double> v_star;
};

inline RegretReport run_regret(const std::vector<std::vector<float>>& stream, float alpha,
                               const std::vector<float>& v0 = {}) {
    if (stream.empty()) throw StatsError("run_regret: empty stream");
    size_t d = stream[0].size();
    std::vector<float> init = v0.empty() ? std::vector<float>(d, 0.0f) : v0;
    if (init.size() != d) throw StatsError("run_regret: v0 width mismatch");

    RegretReport rep;
    rep.v_star.assign(d, 0.0);
    for (auto& s : stream)
        for (size_t k = 0; k < d; ++k) rep.v_star[k] += s[k];
    for (auto& v : rep.v_star) v /= (double)stream.size();
    for (auto& s : stream)
        for (size_t k = 0; k < d; ++k) {
            double e = rep.v_star[k] - s[k];
            rep.offline_cost += e * e;
        }

    auto cost_at = [&](const std::vector<float>& v, const std::vector<float>& s) {
        double c = 0.0;
        for (size_t k = 0; k < d; ++k) {
            double e = (double)v[k] - s[k];
            c += e * e;
        }
        return c;
    };

    MAState ma = MAState::make({(int)d}, alpha, false);
    ma.v_mu[0] = init;
    AMAState ama = AMAState::make({(int)d}, alpha, false);
    ama.v_mu[0] = init;
    MomentDelta md;
    md.sigma = {};
    for (auto& s : stream) {
        rep.ma.cost += cost_at(ma.v_mu[0], s);
        rep.ama.cost += cost_at(ama.v_mu[0], s);
        md.mu = {s};
        ma_update(ma, md);
        ama_update(ama, md);
    }
    rep.ma.regret = rep.ma.cost - rep.offline_cost;
    rep.ama.regret = rep.ama.cost - rep.offline_cost;
    return rep;
}

} // namespace gfmn
