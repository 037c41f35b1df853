#pragma once

#include "gfmn/autograd.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace gfmn {

enum class LayerKind { Dense, Conv, ConvT, ResBlock, Activation };

struct LayerSpec {
    LayerKind kind;
    int in_ch = 0, out_ch = 0;
    int kernel = 0, stride = 1, pad = 0, out_pad = 0;
    bool bias = false;        // plain bias; mutually exclusive with affine
    bool affine = false;      // per-channel scale+shift after the conv
    std::string activation;   // "relu", "tanh" or empty
};

using ParamMap = std::map<std::string, Tensor>;  // ordered -> deterministic

namespace detail {

inline int scaled_width(int base, int divisor) { return std::max(1, base / divisor); }

inline Tensor init_weight(Shape s, uint64_t seed, int index) {
    return randn(std::move(s), mix_seed(seed, 0xA11CE, (uint64_t)index), 0.02f);
}

/// Number of stride-2 stages between `size` and the 4x4 (or 7x7) base grid.
inline int upsample_count(int image_size) {
    switch (image_size) {
    case 8: return 1;
    case 16: return 2;
    case 28: return 2;  // base 7x7
    case 32: return 3;
    default:
        throw ShapeError("unsupported image size " + std::to_string(image_size) +
                         "; supported sizes: 8, 16, 28, 32");
    }
}

inline int base_grid(int image_size) { return image_size == 28 ? 7 : 4; }

} // namespace detail

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct GenConfig {
    int n_z = 100;
    int image_size = 32;
    int channels = 3;
    int width_divisor = 8;   // scales the reference channel widths down
    bool resnet = false;
    int resblocks = 3;       // resnet variant only
    uint64_t seed = 1;
};

struct GeneratorNet {
    GenConfig cfg;
    std::vector<LayerSpec> layers;
    ParamMap params;

    /// Appends the generator to `g`; z is [N, n_z]. Returns the image node.
    Graph::Id append(Graph& g, Graph::Id z, const std::string& prefix = "gen.",
                     bool trainable = true) const;

    Tensor forward(const Tensor& z) const {
        Graph g;
        auto zi = g.input("z", z.shape);
        auto out = append(g, zi, "gen.", false);
        g.set_input("z", z);
        g.forward();
        return g.value(out);
    }

    /// Copies values of graph params named prefix+key back into the store.
    void sync_from(const Graph& g, const std::string& prefix = "gen.") {
        for (auto& [k, v] : params) v = g.value(g.find(prefix + k));
    }

    long long param_count() const {
        long long n = 0;
        for (auto& [k, v] : params) n += v.size();
        return n;
    }

    int latent_dim() const { return cfg.n_z; }
};

namespace detail {

struct ParamBuilder {
    ParamMap& out;
    uint64_t seed;
    int idx = 0;

    void weight(const std::string& name, Shape s) {
        out.emplace(name, init_weight(std::move(s), seed, idx++));
    }
    void affine(const std::string& name, int ch) {
        out.emplace(name + ".g", Tensor::full({ch}, 1.0f));
        out.emplace(name + ".b", Tensor::zeros({ch}));
    }
    void bias(const std::string& name, int ch) { out.emplace(name, Tensor::zeros({ch})); }
};

} // namespace detail

inline GeneratorNet build_generator(const GenConfig& cfg) {
    using namespace detail;
    if (cfg.n_z < 1) throw ShapeError("latent dim must be >= 1");
    int ups = cfg.resnet ? cfg.resblocks : upsample_count(cfg.image_size);
    int s0 = cfg.image_size >> ups;
    if (cfg.resnet) {
        if (s0 << ups != cfg.image_size || s0 < 4)
            throw ShapeError("resnet generator: image size " + std::to_string(cfg.image_size) +
                             " not reachable from a >=4 base grid with " +
                             std::to_string(cfg.resblocks) + " resblocks");
    } else {
        s0 = base_grid(cfg.image_size);
    }

    GeneratorNet net;
    net.cfg = cfg;
    ParamBuilder pb{net.params, cfg.seed};

    auto width_at = [&](int k) { return scaled_width(64 << (ups - k), cfg.width_divisor); };

    int c0 = width_at(0);  // reference 512 when ups == 3
    net.layers.push_back({LayerKind::Dense, cfg.n_z, c0 * s0 * s0, 0, 1, 0, 0, true, false, ""});
    pb.weight("dense.w", {cfg.n_z, c0 * s0 * s0});
    pb.bias("dense.b", c0 * s0 * s0);

    if (cfg.resnet) {
        int in = c0;
        for (int k = 1; k <= cfg.resblocks; ++k) {
            int out = width_at(k);
            net.layers.push_back({LayerKind::ResBlock, in, out, 4, 2, 1, 0, false, true, "relu"});
            std::string b = "res" + std::to_string(k);
            pb.affine(b + ".a1", in);
            pb.weight(b + ".up.w", {in, out, 4, 4});
            pb.affine(b + ".a2", out);
            pb.weight(b + ".conv.w", {out, out, 3, 3});
            pb.weight(b + ".skip.w", {in, out, 4, 4});
            in = out;
        }
        net.layers.push_back({LayerKind::Conv, in, cfg.channels, 3, 1, 1, 0, true, false, "tanh"});
        pb.affine("head.a", in);
        pb.weight("head.w", {cfg.channels, in, 3, 3});
        pb.bias("head.b", cfg.channels);
    } else {
        int in = c0;
        for (int k = 1; k <= ups; ++k) {
            int out = width_at(k);
            net.layers.push_back({LayerKind::ConvT, in, out, 4, 2, 1, 0, false, true, "relu"});
            std::string b = "deconv" + std::to_string(k);
            pb.weight(b + ".w", {in, out, 4, 4});
            pb.affine(b + ".a", out);
            in = out;
        }
        for (int k = 1; k <= 2; ++k) {
            net.layers.push_back({LayerKind::Conv, in, in, 3, 1, 1, 0, false, true, "relu"});
            std::string b = "conv" + std::to_string(k);
            pb.weight(b + ".w", {in, in, 3, 3});
            pb.affine(b + ".a", in);
        }
        net.layers.push_back({LayerKind::Conv, in, cfg.channels, 3, 1, 1, 0, true, false, "tanh"});
        pb.weight("out.w", {cfg.channels, in, 3, 3});
        pb.bias("out.b", cfg.channels);
    }
    return net;
}

inline Graph::Id GeneratorNet::append(Graph& g, Graph::Id z, const std::string& prefix,
                                      bool trainable) const {
    auto P = [&](const std::string& k) { return g.param(prefix + k, params.at(k), trainable); };
    int ups = cfg.resnet ? cfg.resblocks : detail::upsample_count(cfg.image_size);
    int s0 = cfg.resnet ? cfg.image_size >> ups : detail::base_grid(cfg.image_size);
    int c0 = detail::scaled_width(64 << ups, cfg.width_divisor);
    int N = g.at(z).shape[0];

    auto h = g.add_bias(g.matmul(z, P("dense.w")), P("dense.b"));
    auto x = g.reshape(h, {N, c0, s0, s0});

    if (cfg.resnet) {
        int in = c0;
        for (int k = 1; k <= cfg.resblocks; ++k) {
            std::string b = "res" + std::to_string(k);
            auto a1 = g.relu(g.affine_channel(x, P(b + ".a1.g"), P(b + ".a1.b")));
            auto up = g.conv_transpose2d(a1, P(b + ".up.w"), 2, 1);
            auto a2 = g.relu(g.affine_channel(up, P(b + ".a2.g"), P(b + ".a2.b")));
            auto main = g.conv2d(a2, P(b + ".conv.w"), 1, 1);
            auto skip = g.conv_transpose2d(x, P(b + ".skip.w"), 2, 1);
            x = g.add(main, skip);
            in = detail::scaled_width(64 << (ups - k), cfg.width_divisor);
            (void)in;
        }
        auto a = g.relu(g.affine_channel(x, P("head.a.g"), P("head.a.b")));
        return g.tanh(g.add_bias(g.conv2d(a, P("head.w"), 1, 1), P("head.b")));
    }

    for (int k = 1; k <= ups; ++k) {
        std::string b = "deconv" + std::to_string(k);
        auto up = g.conv_transpose2d(x, P(b + ".w"), 2, 1);
        x = g.relu(g.affine_channel(up, P(b + ".a.g"), P(b + ".a.b")));
    }
    for (int k = 1; k <= 2; ++k) {
        std::string b = "conv" + std::to_string(k);
        auto c = g.conv2d(x, P(b + ".w"), 1, 1);
        x = g.relu(g.affine_channel(c, P(b + ".a.g"), P(b + ".a.b")));
    }
    return g.tanh(g.add_bias(g.conv2d(x, P("out.w"), 1, 1), P("out.b")));
}

// ---------------------------------------------------------------------------
// Encoder / feature extractor and mirrored decoder
// ---------------------------------------------------------------------------

struct EncoderConfig {
    int image_size = 32;
    int channels = 3;
    int width_divisor = 8;
    int latent = 128;
    uint64_t seed = 2;
};

struct FeatureExtractor {
    EncoderConfig cfg;
    std::vector<LayerSpec> layers;   // conv stack; dense head goes to the latent
    ParamMap params;
    bool frozen = false;

    int num_taps() const { return (int)layers.size(); }

    std::vector<int> tap_widths() const {
        std::vector<int> w;
        int size = cfg.image_size;
        for (const auto& l : layers) {
            size = (size + 2 * l.pad - l.kernel) / l.stride + 1;
            w.push_back(l.out_ch * size * size);
        }
        return w;
    }

    struct Taps {
        std::vector<Graph::Id> features;  // [N, d_j], post-ReLU, flattened
        Graph::Id latent;
    };

    /// Appends the encoder; x is [N,C,H,W] in [-1,1].
    Taps append(Graph& g, Graph::Id x, const std::string& prefix = "enc.",
                bool trainable = false) const {
        if (frozen && trainable) throw ShapeError("extractor is frozen");
        auto P = [&](const std::string& k) { return g.param(prefix + k, params.at(k), trainable); };
        Taps taps;
        int N = g.at(x).shape[0];
        Graph::Id h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            std::string b = "conv" + std::to_string(i + 1);
            auto c = g.conv2d(h, P(b + ".w"), l.stride, l.pad);
            if (l.affine) c = g.affine_channel(c, P(b + ".a.g"), P(b + ".a.b"));
            else c = g.add_bias(c, P(b + ".b"));
            h = g.relu(c);
            const Shape& s = g.at(h).shape;
            taps.features.push_back(g.reshape(h, {N, s[1] * s[2] * s[3]}));
        }
        const Shape& s = g.at(h).shape;
        auto flat = g.reshape(h, {N, s[1] * s[2] * s[3]});
        taps.latent = g.add_bias(g.matmul(flat, P("dense.w")), P("dense.b"));
        return taps;
    }

    /// Plain (non-differentiated) feature extraction of the first M taps.
    std::vector<Tensor> extract(const Tensor& batch, int M) const {
        if (M < 1 || M > num_taps())
            throw ShapeError("M=" + std::to_string(M) + " out of range [1," +
                             std::to_string(num_taps()) + "]");
        Graph g;
        auto x = g.input("x", batch.shape);
        auto taps = append(g, x, "enc.", false);
        g.set_input("x", batch);
        g.forward();
        std::vector<Tensor> out;
        for (int j = 0; j < M; ++j) out.push_back(g.value(taps.features[j]));
        return out;
    }

    uint64_t fingerprint(int M) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (auto& [k, v] : params) {
            h = hash_bytes(k.data(), k.size(), h);
            h = hash_tensor(v, h);
        }
        return hash_bytes(&M, sizeof(M), h);
    }

    void sync_from(const Graph& g, const std::string& prefix = "enc.") {
        for (auto& [k, v] : params) v = g.value(g.find(prefix + k));
    }
};

struct DecoderNet {
    EncoderConfig cfg;
    std::vector<LayerSpec> layers;
    ParamMap params;

    Graph::Id append(Graph& g, Graph::Id latent, const std::string& prefix = "dec.",
                     bool trainable = true) const {
        auto P = [&](const std::string& k) { return g.param(prefix + k, params.at(k), trainable); };
        int ups = detail::upsample_count(cfg.image_size);
        int s0 = detail::base_grid(cfg.image_size);
        int N = g.at(latent).shape[0];
        int c0 = layers.front().in_ch;
        auto h = g.add_bias(g.matmul(latent, P("dense.w")), P("dense.b"));
        auto x = g.reshape(h, {N, c0, s0, s0});
        for (int k = 1; k <= ups; ++k) {
            std::string b = "deconv" + std::to_string(k);
            auto up = g.conv_transpose2d(x, P(b + ".w"), 2, 1);
            x = g.relu(g.affine_channel(up, P(b + ".a.g"), P(b + ".a.b")));
        }
        return g.tanh(g.add_bias(g.conv2d(x, P("out.w"), 1, 1), P("out.b")));
    }

    void sync_from(const Graph& g, const std::string& prefix = "dec.") {
        for (auto& [k, v] : params) v = g.value(g.find(prefix + k));
    }
};

/// DCGAN-discriminator style encoder: stride-2 convs down to the base grid,
/// one stride-1 conv, post-ReLU tap after every conv, dense head to the
/// latent code. The decoder mirrors the generator topology.
inline std::pair<FeatureExtractor, DecoderNet> build_encoder(const EncoderConfig& cfg) {
    using namespace detail;
    if (cfg.latent < 1) throw ShapeError("latent size must be >= 1");
    int downs = upsample_count(cfg.image_size);
    int s_min = base_grid(cfg.image_size);

    FeatureExtractor enc;
    enc.cfg = cfg;
    ParamBuilder pe{enc.params, cfg.seed};

    int in = cfg.channels;
    for (int i = 0; i < downs; ++i) {
        int out = scaled_width(64 << i, cfg.width_divisor);
        // first conv keeps a plain bias (no affine), like the DCGAN discriminator
        bool affine = i > 0;
        enc.layers.push_back({LayerKind::Conv, in, out, 4, 2, 1, 0, !affine, affine, "relu"});
        std::string b = "conv" + std::to_string(i + 1);
        pe.weight(b + ".w", {out, in, 4, 4});
        if (affine) pe.affine(b + ".a", out);
        else pe.bias(b + ".b", out);
        in = out;
    }
    int top = scaled_width(64 << downs, cfg.width_divisor);
    enc.layers.push_back({LayerKind::Conv, in, top, 3, 1, 1, 0, false, true, "relu"});
    std::string b = "conv" + std::to_string(downs + 1);
    pe.weight(b + ".w", {top, in, 3, 3});
    pe.affine(b + ".a", top);
    pe.weight("dense.w", {top * s_min * s_min, cfg.latent});
    pe.bias("dense.b", cfg.latent);

    DecoderNet dec;
    dec.cfg = cfg;
    ParamBuilder pd{dec.params, mix_seed(cfg.seed, 0xDEC, 0)};
    int c0 = top;
    dec.layers.push_back({LayerKind::Dense, c0, c0 * s_min * s_min, 0, 1, 0, 0, true, false, ""});
    pd.weight("dense.w", {cfg.latent, c0 * s_min * s_min});
    pd.bias("dense.b", c0 * s_min * s_min);
    int din = c0;
    for (int k = 1; k <= downs; ++k) {
        int out = scaled_width(64 << (downs - k), cfg.width_divisor);
        dec.layers.push_back({LayerKind::ConvT, din, out, 4, 2, 1, 0, false, true, "relu"});
        std::string db = "deconv" + std::to_string(k);
        pd.weight(db + ".w", {din, out, 4, 4});
        pd.affine(db + ".a", out);
        din = out;
    }
    dec.layers.push_back({LayerKind::Conv, din, cfg.channels, 3, 1, 1, 0, true, false, "tanh"});
    pd.weight("out.w", {cfg.channels, din, 3, 3});
    pd.bias("out.b", cfg.channels);

    return {std::move(enc), std::move(dec)};
}

// ---------------------------------------------------------------------------
// Laplacian pyramid loss (in-graph, differentiable)
// ---------------------------------------------------------------------------

namespace detail {

/// Block-diagonal 5x5 binomial blur kernel acting per channel.
inline Tensor blur_kernel(int channels, float gain) {
    const float k1[5] = {1, 4, 6, 4, 1};
    Tensor w = Tensor::zeros({channels, channels, 5, 5});
    for (int c = 0; c < channels; ++c)
        for (int r = 0; r < 5; ++r)
            for (int s = 0; s < 5; ++s)
                w.at4(c, c, r, s) = gain * k1[r] * k1[s] / 256.0f;
    return w;
}

} // namespace detail

inline int lap_pyramid_depth(const Shape& image_shape) {
    int m = std::min(image_shape[2], image_shape[3]);
    int depth = (int)std::floor(std::log2((double)m)) - 1;
    return std::max(1, depth);
}

/// L1 difference of Laplacian pyramids with level weights 2^(-2j).
/// Level bands use a 5-tap binomial blur for down/up sampling; the last
/// level is the remaining low-pass residual.
inline Graph::Id lap1_node(Graph& g, Graph::Id a, Graph::Id b) {
    const Shape& sa = g.at(a).shape;
    if (sa != g.at(b).shape)
        throw ShapeError("lap1: shape mismatch " + shape_str(sa) + " vs " +
                         shape_str(g.at(b).shape));
    if (sa.size() != 4 || sa[2] < 4 || sa[3] < 4)
        throw ShapeError("lap1: expected [N,C,H,W] with H,W >= 4, got " + shape_str(sa));
    int C = sa[1];
    int depth = lap_pyramid_depth(sa);
    auto down_k = g.constant(detail::blur_kernel(C, 1.0f));
    auto up_k = g.constant(detail::blur_kernel(C, 4.0f));

    auto diff = g.sub(a, b);   // pyramid is linear, so diff first
    Graph::Id total = -1;
    Graph::Id cur = diff;
    for (int j = 0; j < depth; ++j) {
        Graph::Id band;
        if (j + 1 < depth) {
            auto low = g.conv2d(cur, down_k, 2, 2);
            auto up = g.conv_transpose2d(low, up_k, 2, 2, 1);
            band = g.sub(cur, up);
            cur = low;
        } else {
            band = cur;   // low-pass residual
        }
        auto term = g.scale(g.sum_all(g.abs(band)), std::pow(2.0f, -2.0f * (float)j));
        total = (total < 0) ? term : g.add(total, term);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Autoencoder pretraining
// ---------------------------------------------------------------------------

enum class AELoss { MSE, Lap1 };

struct AEPretrainConfig {
    AELoss loss = AELoss::MSE;
    int epochs = 10;
    int batch = 8;
    float lr = 1e-3f;
    uint64_t seed = 3;
};

struct AdamBuffers {
    std::vector<Tensor> m, u;
    long long t = 0;
};

/// One ADAM step over the graph's trainable params (beta1=.9, beta2=.999).
inline void adam_step(Graph& g, const std::vector<Graph::Id>& ids, AdamBuffers& buf, float lr,
                      float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f) {
    if (buf.m.empty()) {
        for (auto id : ids) {
            buf.m.push_back(Tensor::zeros(g.at(id).shape));
            buf.u.push_back(Tensor::zeros(g.at(id).shape));
        }
    }
    ++buf.t;
    double bc1 = 1.0 - std::pow((double)beta1, (double)buf.t);
    double bc2 = 1.0 - std::pow((double)beta2, (double)buf.t);
    for (size_t i = 0; i < ids.size(); ++i) {
        Tensor& p = g.mutable_value(ids[i]);
        const Tensor& gr = g.grad(ids[i]);
        for (size_t k = 0; k < p.data.size(); ++k) {
            float gk = gr.data[k];
            buf.m[i].data[k] = beta1 * buf.m[i].data[k] + (1.0f - beta1) * gk;
            buf.u[i].data[k] = beta2 * buf.u[i].data[k] + (1.0f - beta2) * gk * gk;
            float mh = (float)(buf.m[i].data[k] / bc1);
            float uh = (float)(buf.u[i].data[k] / bc2);
            p.data[k] -= lr * mh / (std::sqrt(uh) + eps);
        }
    }
}

struct DivergenceError : std::runtime_error {
    float last_finite_loss;
    explicit DivergenceError(float last)
        : std::runtime_error("autoencoder pretraining diverged; last finite loss " +
                             std::to_string(last)),
          last_finite_loss(last) {}
    DivergenceError(const std::string& what, float last)
        : std::runtime_error(what + "; last finite loss " + std::to_string(last)),
          last_finite_loss(last) {}
};

/// Trains encoder+decoder to reconstruct `data` ([K,C,H,W] in [-1,1]) and
/// returns the frozen extractor. Throws DivergenceError on NaN loss.
inline FeatureExtractor pretrain_autoencoder(const Tensor& data, FeatureExtractor enc,
                                             DecoderNet dec, const AEPretrainConfig& cfg,
                                             std::vector<float>* loss_log = nullptr) {
    if (data.shape.size() != 4 || data.shape[0] < 1)
        throw ShapeError("pretrain: data must be a nonempty [K,C,H,W] tensor");
    int K = data.shape[0];
    int B = std::min(cfg.batch, K);
    Shape bshape = {B, data.shape[1], data.shape[2], data.shape[3]};

    Graph g;
    auto x = g.input("x", bshape);
    auto taps = enc.append(g, x, "enc.", true);
    auto recon = dec.append(g, taps.latent, "dec.", true);
    Graph::Id loss;
    if (cfg.loss == AELoss::MSE) loss = g.mean_all(g.square(g.sub(x, recon)));
    else loss = lap1_node(g, x, recon);

    auto ids = g.trainable_params();
    AdamBuffers buf;
    size_t sample_sz = (size_t)(data.size() / K);
    long long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // fixed-seed shuffle per epoch
        std::vector<int> order(K);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(mix_seed(cfg.seed, (uint64_t)epoch, 0));
        std::shuffle(order.begin(), order.end(), rng);
        for (int off = 0; off + B <= K; off += B) {
            Tensor batch = Tensor::zeros(bshape);
            for (int i = 0; i < B; ++i)
                std::copy_n(data.data.begin() + (size_t)order[off + i] * sample_sz, sample_sz,
                            batch.data.begin() + (size_t)i * sample_sz);
            g.set_input("x", std::move(batch));
            g.forward();
            float l = g.value(loss).data[0];
            if (!std::isfinite(l))
                throw DivergenceError(loss_log && !loss_log->empty() ? loss_log->back() : 0.0f);
            if (loss_log) loss_log->push_back(l);
            g.backward(loss);
            adam_step(g, ids, buf, cfg.lr);
            ++step;
        }
    }
    enc.sync_from(g, "enc.");
    dec.sync_from(g, "dec.");
    enc.frozen = true;
    return enc;
}

} // namespace gfmn
