// gfmn: command-line front end for moment-matching generator training.

#include <CLI11.hpp>
#include <iostream>

#include "gfmn/trainer.hpp"

using namespace gfmn;

namespace {

// ---------------------------------------------------------------------------
// Checkpoint plumbing for whole networks: parameters plus a small config
// tensor so a checkpoint is self-describing.
// ---------------------------------------------------------------------------

Checkpoint encoder_checkpoint(const FeatureExtractor& enc) {
    Checkpoint ck;
    const EncoderConfig& c = enc.cfg;
    ck.add("ENCP", "config",
           Tensor({5}, {(float)c.image_size, (float)c.channels, (float)c.width_divisor,
                        (float)c.latent, (float)c.seed}));
    for (const auto& [k, v] : enc.params) ck.add("ENCP", k, v);
    return ck;
}

FeatureExtractor load_encoder(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, &std::cerr);
    Tensor c = ck.tensor("ENCP", "config");
    EncoderConfig cfg;
    cfg.image_size = (int)c.data[0];
    cfg.channels = (int)c.data[1];
    cfg.width_divisor = (int)c.data[2];
    cfg.latent = (int)c.data[3];
    cfg.seed = (uint64_t)c.data[4];
    auto [enc, dec] = build_encoder(cfg);
    (void)dec;
    for (auto& [k, v] : enc.params) v = ck.tensor("ENCP", k);
    enc.frozen = true;
    return enc;
}

Checkpoint generator_checkpoint(const GeneratorNet& gen) {
    Checkpoint ck;
    const GenConfig& c = gen.cfg;
    ck.add("GENP", "config",
           Tensor({7}, {(float)c.n_z, (float)c.image_size, (float)c.channels,
                        (float)c.width_divisor, c.resnet ? 1.0f : 0.0f, (float)c.resblocks,
                        (float)c.seed}));
    for (const auto& [k, v] : gen.params) ck.add("GENP", "gen." + k, v);
    return ck;
}

GeneratorNet load_generator(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, &std::cerr);
    Tensor c = ck.tensor("GENP", "config");
    GenConfig cfg;
    cfg.n_z = (int)c.data[0];
    cfg.image_size = (int)c.data[1];
    cfg.channels = (int)c.data[2];
    cfg.width_divisor = (int)c.data[3];
    cfg.resnet = c.data[4] != 0.0f;
    cfg.resblocks = (int)c.data[5];
    cfg.seed = (uint64_t)c.data[6];
    GeneratorNet gen = build_generator(cfg);
    for (auto& [k, v] : gen.params) v = ck.tensor("GENP", "gen." + k);
    return gen;
}

GenConfig gen_config_from(const Config& c) {
    GenConfig g;
    g.n_z = (int)c.get_int("trainer.n_z");
    g.image_size = (int)c.get_int("generator.image_size");
    g.channels = (int)c.get_int("generator.channels");
    g.width_divisor = (int)c.get_int("generator.width_divisor");
    g.resnet = c.get_bool("generator.resnet");
    g.resblocks = (int)c.get_int("generator.resblocks");
    g.seed = (uint64_t)c.get_int("trainer.seed");
    return g;
}

EncoderConfig enc_config_from(const Config& c) {
    EncoderConfig e;
    e.image_size = (int)c.get_int("generator.image_size");
    e.channels = (int)c.get_int("generator.channels");
    e.width_divisor = (int)c.get_int("encoder.width_divisor");
    e.latent = (int)c.get_int("encoder.latent");
    e.seed = (uint64_t)c.get_int("trainer.seed");
    return e;
}

Config load_run_config(const std::string& path) {
    Config c = load_config(path, &std::cerr);
    apply_env_seed(c, &std::cerr);
    return c;
}

GaussianStats deepest_tap_gaussian(const Tensor& data, const ExtractorIface& ext, int M) {
    return gaussian_fit(ext.extract(data, M).back());
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

int cmd_stats(const std::string& data_path, const std::string& enc_path, int layers,
              const std::string& out) {
    Tensor data = load_dataset(data_path);
    EncoderExtractor ext(load_encoder(enc_path));
    int M = layers > 0 ? layers : ext.num_taps();
    MomentStats s = precompute_stats(data, ext, M);
    Checkpoint ck;
    for (int j = 0; j < s.layers(); ++j) {
        ck.add("STAT", "mu." + std::to_string(j),
               Tensor({(int)s.mu[j].size()}, std::vector<float>(s.mu[j])));
        ck.add("STAT", "sigma." + std::to_string(j),
               Tensor({(int)s.sigma[j].size()}, std::vector<float>(s.sigma[j])));
    }
    ck.add("STAT", "count", Tensor({1}, {(float)s.count}));
    save_checkpoint(out, ck);
    std::cout << "wrote " << s.layers() << " layer stats over " << s.count << " samples to " << out
              << "\n";
    return 0;
}

int cmd_pretrain_ae(const std::string& config_path, const std::string& data_override) {
    Config c = load_run_config(config_path);
    Tensor data = load_dataset(data_override.empty() ? c.get("paths.data") : data_override);
    auto [enc, dec] = build_encoder(enc_config_from(c));
    AEPretrainConfig acfg;
    acfg.loss = c.get("ae.loss") == "lap1" ? AELoss::Lap1 : AELoss::MSE;
    acfg.epochs = (int)c.get_int("ae.epochs");
    acfg.batch = (int)c.get_int("ae.batch");
    acfg.lr = (float)c.get_float("ae.lr");
    acfg.seed = (uint64_t)c.get_int("trainer.seed");
    std::vector<float> losses;
    FeatureExtractor frozen = pretrain_autoencoder(data, enc, dec, acfg, &losses);
    save_checkpoint(c.get("paths.encoder"), encoder_checkpoint(frozen));
    std::cout << "pretrained " << acfg.epochs << " epochs, final loss "
              << (losses.empty() ? 0.0f : losses.back()) << ", wrote " << c.get("paths.encoder")
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path) {
    Config c = load_run_config(config_path);
    Tensor data = load_dataset(c.get("paths.data"));
    EncoderExtractor ext(load_encoder(c.get("paths.encoder")));
    TrainConfig cfg = train_config_from(c);
    std::string out_dir = c.get("paths.out_dir");
    std::filesystem::create_directories(out_dir);

    Trainer<GeneratorNet> trainer(cfg, build_generator(gen_config_from(c)), data, ext);
    trainer.run(-1, out_dir, &std::cerr);
    detail::atomic_write(out_dir + "/log.csv", trainer.log().csv());
    save_checkpoint(out_dir + "/generator.ckpt", generator_checkpoint(trainer.generator()));
    std::cout << "trained " << trainer.step() << " steps; log and checkpoints in " << out_dir
              << "\n";
    return 0;
}

int cmd_sample(const std::string& gen_path, int count, uint64_t seed, const std::string& out_dir) {
    GeneratorNet gen = load_generator(gen_path);
    Tensor batch = sample(gen, count, seed);
    auto files = write_images(batch, out_dir);
    std::cout << "wrote " << files.size() << " images to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& a_path, const std::string& b_path, const std::string& enc_path,
             const std::string& metric) {
    Tensor a = load_dataset(a_path), b = load_dataset(b_path);
    if (metric == "lap1") {
        std::cout << lap1_loss(a, b) << "\n";
        return 0;
    }
    EncoderExtractor ext(load_encoder(enc_path));
    int M = ext.num_taps();
    if (metric == "fd") {
        std::cout << frechet_distance(deepest_tap_gaussian(a, ext, M),
                                      deepest_tap_gaussian(b, ext, M))
                  << "\n";
        return 0;
    }
    if (metric == "loss") {
        std::cout << full_loss(precompute_stats(a, ext, M), precompute_stats(b, ext, M)) << "\n";
        return 0;
    }
    throw IoError("unknown metric '" + metric + "' (expected fd | loss | lap1)");
}

int cmd_ablate(const std::string& config_path, const std::vector<int>& layer_counts) {
    Config c = load_run_config(config_path);
    Tensor data = load_dataset(c.get("paths.data"));
    EncoderExtractor ext(load_encoder(c.get("paths.encoder")));
    TrainConfig cfg = train_config_from(c);
    std::vector<int> counts = layer_counts;
    if (counts.empty())
        for (int m = 1; m <= ext.num_taps(); ++m) counts.push_back(m);
    auto rows = layer_ablation(cfg, build_generator(gen_config_from(c)), data, ext, counts,
                               &std::cerr);
    std::cout << ablation_csv(rows);
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    Graph g;
    auto z = g.constant(randn({4, 3}, seed));
    auto w1 = g.param("w1", randn({3, 8}, seed + 1, 0.5f), true);
    auto b1 = g.param("b1", randn({8}, seed + 2, 0.1f), true);
    auto h = g.relu(g.add_bias(g.matmul(z, w1), b1));
    auto w2 = g.param("w2", randn({8, 4}, seed + 3, 0.5f), true);
    auto out = g.matmul(h, w2);
    IdentityExtractor ext({4});
    MomentStats stats = precompute_stats(randn({32, 4}, seed + 4), ext, 1);
    auto bsn = batch_stat_nodes(g, {out}, true);
    SurrogateNodes sur = surrogate_loss_nodes(g, stats, bsn);
    LayerVecs v = {std::vector<float>(randn({4}, seed + 5).data)};
    set_surrogate_v(g, sur, v, v);
    g.forward();
    g.backward(sur.loss);
    GradReport rep = grad_check(g, sur.loss, 1e-3, 4096, seed + 6);
    for (const auto& p : rep.params)
        std::cout << p.name << " max_rel_err " << p.max_rel_err << " checked " << p.checked
                  << " skipped " << p.skipped << "\n";
    std::cout << "overall " << rep.max_rel_err() << "\n";
    return rep.max_rel_err() < 1e-3 ? 0 : 1;
}

int cmd_regret_bench(int steps, int dim, float alpha, uint64_t seed) {
    std::vector<std::vector<float>> stream;
    for (int t = 0; t < steps; ++t) {
        Tensor d = randn({dim}, mix_seed(seed, (uint64_t)t, 7));
        stream.push_back(d.data);
    }
    RegretReport rep = run_regret(stream, alpha);
    std::cout << "estimator,cost,regret\n";
    std::cout << "ma," << rep.ma.cost << "," << rep.ma.regret << "\n";
    std::cout << "ama," << rep.ama.cost << "," << rep.ama.regret << "\n";
    std::cout << "offline," << rep.offline_cost << ",0\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moment-matching generator toolkit"};
    app.require_subcommand(1);

    std::string data_path, enc_path, out_path, config_path, a_path, b_path, metric = "fd";
    std::string gen_path, out_dir = "samples";
    int layers = 0, count = 16, steps = 200, dim = 8;
    float alpha = 0.1f;
    uint64_t seed = 1;
    std::vector<int> layer_counts;

    auto* stats = app.add_subcommand("stats", "precompute per-layer feature moments");
    stats->add_option("--data", data_path, "dataset (.tnsr or IDX)")->required();
    stats->add_option("--encoder", enc_path, "encoder checkpoint")->required();
    stats->add_option("--layers", layers, "number of taps (0 = all)");
    stats->add_option("--out", out_path, "output stats checkpoint")->required();

    auto* pre = app.add_subcommand("pretrain-ae", "pretrain the autoencoder feature extractor");
    pre->add_option("--config", config_path, "run config file")->required();
    pre->add_option("--data", data_path, "dataset override");

    auto* tr = app.add_subcommand("train", "train a generator by feature matching");
    tr->add_option("--config", config_path, "run config file")->required();

    auto* sam = app.add_subcommand("sample", "draw images from a trained generator");
    sam->add_option("--gen", gen_path, "generator checkpoint")->required();
    sam->add_option("--count", count, "number of samples");
    sam->add_option("--seed", seed, "sampling seed");
    sam->add_option("--out", out_dir, "output directory");

    auto* ev = app.add_subcommand("eval", "compare two datasets under a metric");
    ev->add_option("--a", a_path, "first dataset")->required();
    ev->add_option("--b", b_path, "second dataset")->required();
    ev->add_option("--encoder", enc_path, "encoder checkpoint (fd/loss metrics)");
    ev->add_option("--metric", metric, "fd | loss | lap1");

    auto* ab = app.add_subcommand("ablate-layers", "train once per tap count, emit CSV");
    ab->add_option("--config", config_path, "run config file")->required();
    ab->add_option("--layers", layer_counts, "tap counts (default: 1..all)");

    auto* gc = app.add_subcommand("gradcheck", "check analytic gradients numerically");
    gc->add_option("--seed", seed, "graph seed");

    auto* rb = app.add_subcommand("regret-bench", "online tracking cost benchmark");
    rb->add_option("--steps", steps, "stream length");
    rb->add_option("--dim", dim, "vector width");
    rb->add_option("--alpha", alpha, "tracker rate");
    rb->add_option("--seed", seed, "stream seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (stats->parsed()) return cmd_stats(data_path, enc_path, layers, out_path);
        if (pre->parsed()) return cmd_pretrain_ae(config_path, data_path);
        if (tr->parsed()) return cmd_train(config_path);
        if (sam->parsed()) return cmd_sample(gen_path, count, seed, out_dir);
        if (ev->parsed()) return cmd_eval(a_path, b_path, enc_path, metric);
        if (ab->parsed()) return cmd_ablate(config_path, layer_counts);
        if (gc->parsed()) return cmd_gradcheck(seed);
        if (rb->parsed()) return cmd_regret_bench(steps, dim, alpha, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
