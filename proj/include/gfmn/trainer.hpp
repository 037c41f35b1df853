#pragma once

// Training pipeline: noise draw, generator forward, feature extraction,
// tracker update, surrogate (or direct) loss, optimizer step, logging,
// checkpointing.

#include <chrono>
#include <cstdio>
#include <optional>

#include "gfmn/ama.hpp"
#include "gfmn/io.hpp"
#include "gfmn/metrics.hpp"
#include "gfmn/moments.hpp"
#include "gfmn/nets.hpp"

namespace gfmn {

enum class Estimator { MA, AMA, NaiveEq1 };

inline Estimator parse_estimator(const std::string& s) {
    if (s == "ma") return Estimator::MA;
    if (s == "ama") return Estimator::AMA;
    if (s == "naive-eq1") return Estimator::NaiveEq1;
    throw IoError("unknown estimator '" + s + "' (expected ma | ama | naive-eq1)");
}

inline const char* estimator_name(Estimator e) {
    switch (e) {
        case Estimator::MA: return "ma";
        case Estimator::AMA: return "ama";
        default: return "naive-eq1";
    }
}

struct TrainConfig {
    int n_z = 100;
    int batch = 64;
    float g_lr = 1e-4f;
    float tracker_rate = 5e-5f;
    Estimator estimator = Estimator::AMA;
    int layers = 0;  // 0 = all extractor taps
    bool mean_only = false;
    bool normalize_layers = false;
    bool init_v_from_delta = true;
    long long steps = 1000;
    long long eval_interval = 100;
    int eval_samples = 256;
    uint64_t seed = 1;

    void validate() const {
        if (batch < 1) throw StatsError("train: batch must be >= 1");
        if (!mean_only && batch < 2)
            throw StatsError("train: batch must be >= 2 unless mean_only is set");
        if (steps < 0) throw StatsError("train: steps must be >= 0");
        if (eval_interval < 1) throw StatsError("train: eval_interval must be >= 1");
        if (eval_samples < 2) throw StatsError("train: eval_samples must be >= 2");
    }
};

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.n_z = (int)c.get_int("trainer.n_z");
    t.batch = (int)c.get_int("trainer.batch");
    t.g_lr = (float)c.get_float("trainer.g_lr");
    t.tracker_rate = (float)c.get_float("trainer.ama_lr");
    t.estimator = parse_estimator(c.get("trainer.estimator"));
    t.layers = (int)c.get_int("trainer.layers");
    t.mean_only = c.get_bool("trainer.mean_only");
    t.normalize_layers = c.get_bool("trainer.normalize_layers");
    t.init_v_from_delta = c.get_bool("trainer.init_v_from_delta");
    t.steps = c.get_int("trainer.steps");
    t.eval_interval = c.get_int("trainer.eval_interval");
    t.eval_samples = (int)c.get_int("trainer.eval_samples");
    t.seed = (uint64_t)c.get_int("trainer.seed");
    t.validate();
    return t;
}

// One evaluation record. Wall-clock time stays in memory only; the CSV
// contains deterministic columns so identical runs produce identical files.
struct RunRecord {
    long long step = 0;
    double mean_term = 0.0;  // squared mean mismatch on the training batch
    double cov_term = 0.0;   // squared variance mismatch (0 when mean-only)
    double full_loss = 0.0;  // held-out moment loss vs precomputed stats
    double frechet = 0.0;    // on the deepest tap's features
    double wall_ms = 0.0;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace detail

struct RunLog {
    std::vector<RunRecord> records;

    std::string csv() const {
        std::string out = "step,mean_term,cov_term,full_loss,frechet\n";
        for (const auto& r : records)
            out += std::to_string(r.step) + "," + detail::fmt_g(r.mean_term) + "," +
                   detail::fmt_g(r.cov_term) + "," + detail::fmt_g(r.full_loss) + "," +
                   detail::fmt_g(r.frechet) + "\n";
        return out;
    }
};

// Minimal affine generator G(z) = zA + b for vector-valued targets.
struct LinearGenerator {
    int n_z = 2;
    int out_dim = 2;
    ParamMap params;

    static LinearGenerator make(int n_z, int out_dim, uint64_t seed) {
        LinearGenerator g;
        g.n_z = n_z;
        g.out_dim = out_dim;
        g.params.emplace("A", randn({n_z, out_dim}, mix_seed(seed, 0, 900), 0.5f));
        g.params.emplace("b", Tensor::zeros({out_dim}));
        return g;
    }

    int latent_dim() const { return n_z; }

    Graph::Id append(Graph& g, Graph::Id z, const std::string& prefix = "gen.",
                     bool trainable = true) const {
        auto A = g.param(prefix + "A", params.at("A"), trainable);
        auto b = g.param(prefix + "b", params.at("b"), trainable);
        return g.add_bias(g.matmul(z, A), b);
    }

    Tensor forward(const Tensor& z) const {
        Graph g;
        auto zi = g.input("z", z.shape);
        auto out = append(g, zi, "gen.", false);
        g.set_input("z", z);
        g.forward();
        return g.value(out);
    }

    void sync_from(const Graph& g, const std::string& prefix = "gen.") {
        for (auto& [k, v] : params) v = g.value(g.find(prefix + k));
    }
};

/// Draws a deterministic latent batch and pushes it through the generator.
template <class Gen>
Tensor sample(const Gen& gen, int count, uint64_t seed) {
    if (count < 1) throw StatsError("sample: count must be >= 1");
    Tensor z = randn({count, gen.latent_dim()}, mix_seed(seed, 0, 1));
    return gen.forward(z);
}

// ---------------------------------------------------------------------------
// Trainer: owns the graph (built once), the tracker, and the optimizer state.
// All randomness is counter-based on (seed, step, lane), so restoring the
// recorded step index reproduces the remainder of a run bitwise.
// ---------------------------------------------------------------------------

template <class Gen>
class Trainer {
public:
    Trainer(TrainConfig cfg, Gen gen, const Tensor& data, const ExtractorIface& E)
        : cfg_(cfg), gen_(std::move(gen)), ext_(&E) {
        cfg_.validate();
        M_ = cfg_.layers > 0 ? cfg_.layers : E.num_taps();
        stats_ = precompute_stats(data, E, M_);
        if (stats_.fingerprint != E.fingerprint(M_))
            throw StatsError("train: stats fingerprint does not match extractor");
        if (cfg_.normalize_layers)
            for (int w : stats_.widths()) layer_weights_.push_back(1.0 / (double)w);

        // the one training graph: z -> generator (trainable) -> frozen
        // extractor -> batch moments -> loss
        z_ = g_.input("z", {cfg_.batch, gen_.latent_dim()});
        img_ = gen_.append(g_, z_, "gen.", true);
        auto feats = E.append(g_, img_, M_);
        bsn_ = batch_stat_nodes(g_, feats, !cfg_.mean_only);

        if (cfg_.estimator == Estimator::NaiveEq1) {
            loss_ = build_naive_loss();
        } else {
            sur_ = surrogate_loss_nodes(g_, stats_, bsn_);
            loss_ = sur_.loss;
            // placeholder v so the first full forward pass is well-defined
            set_surrogate_v(g_, sur_, zero_vecs(stats_.widths()),
                            cfg_.mean_only ? LayerVecs{} : zero_vecs(stats_.widths()));
            first_v_ = sur_.v_mu.empty() ? loss_ : sur_.v_mu.front();
            bool with_sigma = !cfg_.mean_only;
            if (cfg_.estimator == Estimator::MA)
                ma_ = MAState::make(stats_.widths(), cfg_.tracker_rate, with_sigma);
            else
                ama_ = AMAState::make(stats_.widths(), cfg_.tracker_rate, with_sigma);
            v_initialized_ = !cfg_.init_v_from_delta;
        }
        param_ids_ = g_.trainable_params();

        eval_z_ = randn({cfg_.eval_samples, gen_.latent_dim()}, mix_seed(cfg_.seed, 0, 2));
        real_gauss_ = fit_real_gaussian(data);
    }

    /// Runs `n` steps (or until cfg.steps). Writes checkpoints into `out_dir`
    /// at every evaluation when non-empty.
    void run(long long n = -1, const std::string& out_dir = "", std::ostream* log = nullptr) {
        long long target = n < 0 ? cfg_.steps : std::min(cfg_.steps, step_ + n);
        while (step_ < target) {
            auto t0 = std::chrono::steady_clock::now();
            Tensor z = randn({cfg_.batch, gen_.latent_dim()}, mix_seed(cfg_.seed, (uint64_t)step_, 0));
            g_.set_input("z", z);
            g_.forward();

            if (cfg_.estimator != Estimator::NaiveEq1) {
                MomentDelta d = batch_delta();
                if (!v_initialized_) {
                    if (ma_) { ma_->v_mu = d.mu; ma_->v_sigma = d.sigma; }
                    if (ama_) { ama_->v_mu = d.mu; ama_->v_sigma = d.sigma; }
                    v_initialized_ = true;
                } else if (ma_) {
                    ma_update(*ma_, d);
                } else {
                    ama_update(*ama_, d);
                }
                const LayerVecs& vm = ma_ ? ma_->v_mu : ama_->v_mu;
                const LayerVecs& vs = ma_ ? ma_->v_sigma : ama_->v_sigma;
                set_surrogate_v(g_, sur_, vm, vs);
                g_.forward_from(first_v_);
            }

            double loss = g_.scalar64(loss_);
            if (!std::isfinite(loss))
                throw DivergenceError("train: loss diverged at step " + std::to_string(step_),
                                      last_loss_);
            last_loss_ = (float)loss;

            g_.backward(loss_);
            adam_step(g_, param_ids_, opt_, cfg_.g_lr);
            ++step_;

            if (step_ % cfg_.eval_interval == 0 || step_ == target) {
                double ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
                evaluate(ms, out_dir, log);
            }
        }
        gen_.sync_from(g_);
    }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        for (const auto& [k, v] : gen_.params) {
            (void)v;
            ck.add("GENP", "gen." + k, g_.value(g_.find("gen." + k)));
        }
        for (size_t i = 0; i < opt_.m.size(); ++i) {
            ck.add("GENP", "opt.m." + std::to_string(i), opt_.m[i]);
            ck.add("GENP", "opt.u." + std::to_string(i), opt_.u[i]);
        }
        ck.add("GENP", "opt.t", Tensor({1}, {(float)opt_.t}));
        ck.add("GENP", "step", Tensor({1}, {(float)step_}));

        for (int j = 0; j < stats_.layers(); ++j) {
            ck.add("STAT", "mu." + std::to_string(j), vec_tensor(stats_.mu[j]));
            ck.add("STAT", "sigma." + std::to_string(j), vec_tensor(stats_.sigma[j]));
        }
        ck.add("STAT", "count", Tensor({1}, {(float)stats_.count}));
        ck.add("STAT", "fp", fingerprint_tensor(stats_.fingerprint));

        auto add_vecs = [&](const char* name, const LayerVecs& vs) {
            for (size_t j = 0; j < vs.size(); ++j)
                ck.add("AMAS", std::string(name) + "." + std::to_string(j), vec_tensor(vs[j]));
        };
        if (ma_) {
            add_vecs("v_mu", ma_->v_mu);
            add_vecs("v_sig", ma_->v_sigma);
        }
        if (ama_) {
            add_vecs("v_mu", ama_->v_mu);
            add_vecs("v_sig", ama_->v_sigma);
            add_vecs("m_mu", ama_->m_mu);
            add_vecs("u_mu", ama_->u_mu);
            add_vecs("m_sig", ama_->m_sigma);
            add_vecs("u_sig", ama_->u_sigma);
            ck.add("AMAS", "t", Tensor({1}, {(float)ama_->t}));
        }
        ck.add("AMAS", "v_init", Tensor({1}, {v_initialized_ ? 1.0f : 0.0f}));
        return ck;
    }

    void restore(const Checkpoint& ck) {
        for (auto& [k, v] : gen_.params) {
            (void)v;
            Tensor t = ck.tensor("GENP", "gen." + k);
            g_.mutable_value(g_.find("gen." + k)) = t;
        }
        gen_.sync_from(g_);
        opt_ = AdamBuffers{};
        for (size_t i = 0;; ++i) {
            const CheckpointSection* m = ck.find("GENP", "opt.m." + std::to_string(i));
            if (!m) break;
            opt_.m.push_back(ck.tensor("GENP", "opt.m." + std::to_string(i)));
            opt_.u.push_back(ck.tensor("GENP", "opt.u." + std::to_string(i)));
        }
        opt_.t = (long long)ck.tensor("GENP", "opt.t").data[0];
        step_ = (long long)ck.tensor("GENP", "step").data[0];
        auto load_vecs = [&](const char* name, LayerVecs& vs) {
            for (size_t j = 0; j < vs.size(); ++j) {
                Tensor t = ck.tensor("AMAS", std::string(name) + "." + std::to_string(j));
                vs[j] = t.data;
            }
        };
        if (ma_) {
            load_vecs("v_mu", ma_->v_mu);
            load_vecs("v_sig", ma_->v_sigma);
        }
        if (ama_) {
            load_vecs("v_mu", ama_->v_mu);
            load_vecs("v_sig", ama_->v_sigma);
            load_vecs("m_mu", ama_->m_mu);
            load_vecs("u_mu", ama_->u_mu);
            load_vecs("m_sig", ama_->m_sigma);
            load_vecs("u_sig", ama_->u_sigma);
            ama_->t = (long long)ck.tensor("AMAS", "t").data[0];
        }
        v_initialized_ = ck.tensor("AMAS", "v_init").data[0] != 0.0f;
    }

    const Gen& generator() const { return gen_; }
    Gen& generator() { return gen_; }
    const RunLog& log() const { return log_; }
    const MomentStats& stats() const { return stats_; }
    long long step() const { return step_; }
    int layers() const { return M_; }

private:
    Graph::Id build_naive_loss() {
        Graph::Id total = -1;
        for (size_t j = 0; j < bsn_.mean.size(); ++j) {
            auto mu_r = g_.constant(vec_tensor(stats_.mu[j]));
            Graph::Id term = g_.sum_all(g_.square(g_.sub(mu_r, bsn_.mean[j])));
            if (!layer_weights_.empty()) term = g_.scale(term, (float)layer_weights_[j]);
            total = total < 0 ? term : g_.add(total, term);
        }
        for (size_t j = 0; j < bsn_.var.size(); ++j) {
            auto sig_r = g_.constant(vec_tensor(stats_.sigma[j]));
            Graph::Id term = g_.sum_all(g_.square(g_.sub(sig_r, bsn_.var[j])));
            if (!layer_weights_.empty()) term = g_.scale(term, (float)layer_weights_[j]);
            total = g_.add(total, term);
        }
        return total;
    }

    static Tensor vec_tensor(const std::vector<float>& v) {
        return Tensor({(int)v.size()}, std::vector<float>(v));
    }

    static Tensor fingerprint_tensor(uint64_t fp) {
        uint32_t lo = (uint32_t)(fp & 0xffffffffu), hi = (uint32_t)(fp >> 32);
        float a, b;
        std::memcpy(&a, &lo, 4);
        std::memcpy(&b, &hi, 4);
        return Tensor({2}, {a, b});
    }

    MomentDelta batch_delta() const {
        MomentDelta d;
        for (size_t j = 0; j < bsn_.mean.size(); ++j) {
            const Tensor& m = g_.value(bsn_.mean[j]);
            std::vector<float> dm(m.data.size());
            for (size_t k = 0; k < dm.size(); ++k) dm[k] = stats_.mu[j][k] - m.data[k];
            d.mu.push_back(std::move(dm));
        }
        for (size_t j = 0; j < bsn_.var.size(); ++j) {
            const Tensor& v = g_.value(bsn_.var[j]);
            std::vector<float> ds(v.data.size());
            for (size_t k = 0; k < ds.size(); ++k) ds[k] = stats_.sigma[j][k] - v.data[k];
            d.sigma.push_back(std::move(ds));
        }
        return d;
    }

    GaussianStats fit_real_gaussian(const Tensor& data) const {
        int K = data.shape[0];
        int n = std::min(cfg_.eval_samples, K);
        size_t per = data.data.size() / (size_t)K;
        Shape s = data.shape;
        s[0] = n;
        Tensor head = Tensor::zeros(s);
        std::copy(data.data.begin(), data.data.begin() + (std::ptrdiff_t)(per * (size_t)n),
                  head.data.begin());
        return gaussian_fit(ext_->extract(head, M_).back());
    }

    void evaluate(double wall_ms, const std::string& out_dir, std::ostream* logstream) {
        // current-batch squared moment mismatches
        RunRecord r;
        r.step = step_;
        r.wall_ms = wall_ms;
        for (size_t j = 0; j < bsn_.mean.size(); ++j) {
            double w = layer_weights_.empty() ? 1.0 : layer_weights_[j];
            const Tensor& m = g_.value(bsn_.mean[j]);
            for (size_t k = 0; k < m.data.size(); ++k) {
                double dd = (double)stats_.mu[j][k] - m.data[k];
                r.mean_term += w * dd * dd;
            }
        }
        for (size_t j = 0; j < bsn_.var.size(); ++j) {
            double w = layer_weights_.empty() ? 1.0 : layer_weights_[j];
            const Tensor& v = g_.value(bsn_.var[j]);
            for (size_t k = 0; k < v.data.size(); ++k) {
                double dd = (double)stats_.sigma[j][k] - v.data[k];
                r.cov_term += w * dd * dd;
            }
        }

        // held-out loss and deepest-tap distance on a fixed evaluation batch
        Gen snapshot = gen_;
        snapshot.sync_from(g_);
        Tensor fake = snapshot.forward(eval_z_);
        MomentStats fake_stats = batch_stats(fake, *ext_, M_);
        r.full_loss = full_loss(stats_, fake_stats, layer_weights_);
        r.frechet = frechet_distance(real_gauss_, gaussian_fit(ext_->extract(fake, M_).back()));
        log_.records.push_back(r);
        if (logstream)
            *logstream << "step " << r.step << " loss " << r.full_loss << " fd " << r.frechet
                       << "\n";
        if (!out_dir.empty()) {
            gen_.sync_from(g_);
            save_checkpoint(out_dir + "/step_" + std::to_string(step_) + ".ckpt", checkpoint());
            save_checkpoint(out_dir + "/last.ckpt", checkpoint());
        }
    }

    TrainConfig cfg_;
    Gen gen_;
    const ExtractorIface* ext_;
    int M_ = 1;
    MomentStats stats_;
    std::vector<double> layer_weights_;

    Graph g_;
    Graph::Id z_ = -1, img_ = -1, loss_ = -1, first_v_ = -1;
    BatchStatNodes bsn_;
    SurrogateNodes sur_;
    std::vector<Graph::Id> param_ids_;

    std::optional<MAState> ma_;
    std::optional<AMAState> ama_;
    bool v_initialized_ = true;
    AdamBuffers opt_;
    long long step_ = 0;
    float last_loss_ = 0.0f;

    Tensor eval_z_;
    GaussianStats real_gauss_;
    RunLog log_;
};

template <class Gen>
struct TrainResult {
    Gen generator;
    RunLog log;
};

template <class Gen>
TrainResult<Gen> train(const TrainConfig& cfg, Gen gen, const Tensor& data,
                       const ExtractorIface& E, const std::string& out_dir = "",
                       std::ostream* log = nullptr) {
    Trainer<Gen> t(cfg, std::move(gen), data, E);
    t.run(-1, out_dir, log);
    return {t.generator(), t.log()};
}

// ---------------------------------------------------------------------------
// Layer ablation: one full run per requested tap count, shared seed.
// ---------------------------------------------------------------------------

struct AblationRow {
    int layers = 0;
    double full_loss = 0.0;
    double frechet = 0.0;
};

template <class Gen>
std::vector<AblationRow> layer_ablation(const TrainConfig& base, const Gen& gen,
                                        const Tensor& data, const ExtractorIface& E,
                                        const std::vector<int>& layer_counts,
                                        std::ostream* log = nullptr) {
    std::vector<AblationRow> rows;
    for (int m : layer_counts) {
        if (m < 1 || m > E.num_taps())
            throw StatsError("ablation: layer count " + std::to_string(m) + " out of range");
        TrainConfig cfg = base;
        cfg.layers = m;
        auto res = train(cfg, gen, data, E, "", log);
        const RunRecord& last = res.log.records.back();
        rows.push_back({m, last.full_loss, last.frechet});
    }
    return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "layers,full_loss,frechet\n";
    for (const auto& r : rows)
        out += std::to_string(r.layers) + "," + detail::fmt_g(r.full_loss) + "," +
               detail::fmt_g(r.frechet) + "\n";
    return out;
}

}  // namespace gfmn
