#pragma once

// Configuration text format, checkpoint/dataset containers, and image emission.

#include <array>
#include <cstdint>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gfmn/tensor.hpp"

namespace gfmn {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config: flat `key = value` text, `#` comments, keys namespaced by module.
// ---------------------------------------------------------------------------

inline const std::map<std::string, std::string>& config_defaults() {
    static const std::map<std::string, std::string> defaults = {
        {"trainer.n_z", "100"},
        {"trainer.batch", "64"},
        {"trainer.g_lr", "0.0001"},
        {"trainer.ama_lr", "0.00005"},
        {"trainer.estimator", "ama"},  // ma | ama | naive-eq1
        {"trainer.mean_only", "0"},
        {"trainer.normalize_layers", "0"},
        {"trainer.init_v_from_delta", "1"},
        {"trainer.steps", "1000"},
        {"trainer.eval_interval", "100"},
        {"trainer.eval_samples", "256"},
        {"trainer.seed", "1"},
        {"trainer.layers", "0"},  // 0 = all extractor taps
        {"generator.image_size", "32"},
        {"generator.channels", "3"},
        {"generator.width_divisor", "8"},
        {"generator.resnet", "0"},
        {"generator.resblocks", "3"},
        {"encoder.latent", "32"},
        {"encoder.width_divisor", "8"},
        {"ae.epochs", "10"},
        {"ae.lr", "0.001"},
        {"ae.batch", "64"},
        {"ae.loss", "mse"},  // mse | lap1
        {"paths.data", "data.tnsr"},
        {"paths.encoder", "encoder.ckpt"},
        {"paths.stats", "stats.ckpt"},
        {"paths.out_dir", "out"},
    };
    return defaults;
}

struct Config {
    std::map<std::string, std::string> values;

    const std::string& get(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) throw IoError("config: unknown key '" + key + "'");
        return it->second;
    }
    long get_int(const std::string& key) const {
        const std::string& s = get(key);
        try {
            size_t pos = 0;
            long v = std::stol(s, &pos);
            if (pos == s.size()) return v;
        } catch (const std::exception&) {
        }
        throw IoError("config: key '" + key + "' is not an integer: " + s);
    }
    double get_float(const std::string& key) const {
        const std::string& s = get(key);
        try {
            size_t pos = 0;
            double v = std::stod(s, &pos);
            if (pos == s.size()) return v;
        } catch (const std::exception&) {
        }
        throw IoError("config: key '" + key + "' is not a number: " + s);
    }
    bool get_bool(const std::string& key) const { return get_int(key) != 0; }

    bool operator==(const Config& o) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

// Parses config text. Unknown keys are rejected; missing keys take their
// defaults, each noted on `log`.
inline Config parse_config(const std::string& text, std::ostream* log = nullptr) {
    Config c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw IoError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        if (!config_defaults().count(key))
            throw IoError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (c.values.count(key))
            throw IoError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        c.values[key] = val;
    }
    for (const auto& [key, def] : config_defaults()) {
        if (!c.values.count(key)) {
            c.values[key] = def;
            if (log) *log << "config: using default " << key << " = " << def << "\n";
        }
    }
    return c;
}

inline std::string render_config(const Config& c) {
    std::ostringstream out;
    for (const auto& [key, val] : c.values) out << key << " = " << val << "\n";
    return out.str();
}

inline Config load_config(const std::string& path, std::ostream* log = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), log);
}

// GFMN_SEED environment variable overrides trainer.seed (logged when used).
inline void apply_env_seed(Config& c, std::ostream* log = nullptr) {
    if (const char* env = std::getenv("GFMN_SEED")) {
        c.values["trainer.seed"] = env;
        if (log) *log << "config: trainer.seed overridden by GFMN_SEED = " << env << "\n";
    }
}

// ---------------------------------------------------------------------------
// Little-endian binary primitives.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32_le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("unexpected end of file");
    return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

inline uint32_t get_u32_be(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("unexpected end of file");
    return ((uint32_t)b[0] << 24) | ((uint32_t)b[1] << 16) | ((uint32_t)b[2] << 8) | (uint32_t)b[3];
}

inline void put_f32_le(std::ostream& out, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32_le(out, u);
}

inline float get_f32_le(std::istream& in) {
    uint32_t u = get_u32_le(in);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

// Write-to-temp-then-rename, so readers never observe a partial file.
inline void atomic_write(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write file: " + tmp.string());
        out.write(bytes.data(), (std::streamsize)bytes.size());
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint container: magic "GFMN", version, tagged named tensor sections.
// ---------------------------------------------------------------------------

struct CheckpointSection {
    std::array<char, 4> tag{};  // "GENP", "STAT", "AMAS", "ENCP"
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;

    bool operator==(const CheckpointSection& o) const = default;
};

struct Checkpoint {
    uint32_t version = 1;
    std::vector<CheckpointSection> sections;

    void add(const char tag[4], const std::string& name, const Tensor& t) {
        CheckpointSection s;
        std::copy(tag, tag + 4, s.tag.begin());
        for (int d : t.shape) s.dims.push_back((uint32_t)d);
        s.name = name;
        s.data = t.data;
        sections.push_back(std::move(s));
    }

    const CheckpointSection* find(const std::string& tag, const std::string& name) const {
        for (const auto& s : sections)
            if (std::string(s.tag.data(), 4) == tag && s.name == name) return &s;
        return nullptr;
    }

    Tensor tensor(const std::string& tag, const std::string& name) const {
        const CheckpointSection* s = find(tag, name);
        if (!s) throw IoError("checkpoint: missing section " + tag + "/" + name);
        Shape shape(s->dims.begin(), s->dims.end());
        Tensor t = Tensor::zeros(shape);
        t.data = s->data;
        return t;
    }

    bool operator==(const Checkpoint& o) const = default;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ostringstream out(std::ios::binary);
    out.write("GFMN", 4);
    detail::put_u32_le(out, ck.version);
    detail::put_u32_le(out, (uint32_t)ck.sections.size());
    for (const auto& s : ck.sections) {
        size_t n = 1;
        for (uint32_t d : s.dims) n *= d;
        if (n != s.data.size())
            throw IoError("checkpoint: section '" + s.name + "' dims do not match payload size");
        out.write(s.tag.data(), 4);
        detail::put_u32_le(out, (uint32_t)s.name.size());
        out.write(s.name.data(), (std::streamsize)s.name.size());
        detail::put_u32_le(out, (uint32_t)s.dims.size());
        for (uint32_t d : s.dims) detail::put_u32_le(out, d);
        for (float v : s.data) detail::put_f32_le(out, v);
    }
    detail::atomic_write(path, out.str());
}

inline Checkpoint load_checkpoint(const std::string& path, std::ostream* log = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "GFMN") throw IoError("bad checkpoint magic: " + path);
    Checkpoint ck;
    ck.version = detail::get_u32_le(in);
    uint32_t count = detail::get_u32_le(in);
    static const std::vector<std::string> known = {"GENP", "STAT", "AMAS", "ENCP"};
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointSection s;
        in.read(s.tag.data(), 4);
        if (!in) throw IoError("unexpected end of checkpoint: " + path);
        uint32_t name_len = detail::get_u32_le(in);
        s.name.resize(name_len);
        in.read(s.name.data(), name_len);
        uint32_t rank = detail::get_u32_le(in);
        size_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            s.dims.push_back(detail::get_u32_le(in));
            n *= s.dims.back();
        }
        if (n > (1u << 28)) throw IoError("checkpoint section too large: " + s.name);
        s.data.resize(n);
        for (size_t k = 0; k < n; ++k) s.data[k] = detail::get_f32_le(in);
        if (!in) throw IoError("unexpected end of checkpoint: " + path);
        std::string tag(s.tag.data(), 4);
        if (std::find(known.begin(), known.end(), tag) == known.end()) {
            if (log) *log << "checkpoint: skipping unknown section tag '" << tag << "'\n";
            continue;
        }
        ck.sections.push_back(std::move(s));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Dataset container: native "TNSR" float tensor, or IDX images/labels.
// ---------------------------------------------------------------------------

inline void save_tnsr(const std::string& path, const Tensor& t) {
    std::ostringstream out(std::ios::binary);
    out.write("TNSR", 4);
    detail::put_u32_le(out, 1);  // version
    detail::put_u32_le(out, (uint32_t)t.shape.size());
    for (int d : t.shape) detail::put_u32_le(out, (uint32_t)d);
    for (float v : t.data) detail::put_f32_le(out, v);
    detail::atomic_write(path, out.str());
}

// Loads a TNSR tensor or an IDX image/label file; IDX pixel bytes are
// rescaled from [0,255] to [-1,1] and images gain an explicit channel axis.
inline Tensor load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in) throw IoError("dataset too short: " + path);

    if (std::string(magic, 4) == "TNSR") {
        detail::get_u32_le(in);  // version
        uint32_t rank = detail::get_u32_le(in);
        if (rank == 0 || rank > 8) throw IoError("dataset: bad rank in " + path);
        Shape shape;
        size_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint32_t dim = detail::get_u32_le(in);
            if (dim == 0 || n > (1u << 28) / dim)
                throw IoError("dataset: bad dimensions in " + path);
            shape.push_back((int)dim);
            n *= dim;
        }
        Tensor t = Tensor::zeros(shape);
        for (size_t k = 0; k < n; ++k) t.data[k] = detail::get_f32_le(in);
        if (!in) throw IoError("dataset truncated: " + path);
        return t;
    }

    // IDX: big-endian magic 0x00000803 (images) or 0x00000801 (labels).
    in.seekg(0);
    uint32_t idx_magic = detail::get_u32_be(in);
    if (idx_magic == 0x00000803u) {
        uint32_t n = detail::get_u32_be(in);
        uint32_t rows = detail::get_u32_be(in);
        uint32_t cols = detail::get_u32_be(in);
        if (n == 0 || rows == 0 || cols == 0 || (size_t)n * rows * cols > (1u << 28))
            throw IoError("dataset: bad IDX dimensions in " + path);
        Tensor t = Tensor::zeros({(int)n, 1, (int)rows, (int)cols});
        std::vector<unsigned char> bytes((size_t)n * rows * cols);
        in.read(reinterpret_cast<char*>(bytes.data()), (std::streamsize)bytes.size());
        if (!in) throw IoError("dataset truncated: " + path);
        for (size_t k = 0; k < bytes.size(); ++k) t.data[k] = (float)bytes[k] / 127.5f - 1.0f;
        return t;
    }
    if (idx_magic == 0x00000801u) {
        uint32_t n = detail::get_u32_be(in);
        if (n == 0 || n > (1u << 28)) throw IoError("dataset: bad IDX label count in " + path);
        Tensor t = Tensor::zeros({(int)n});
        std::vector<unsigned char> bytes(n);
        in.read(reinterpret_cast<char*>(bytes.data()), (std::streamsize)n);
        if (!in) throw IoError("dataset truncated: " + path);
        for (size_t k = 0; k < n; ++k) t.data[k] = (float)bytes[k];
        return t;
    }
    throw IoError("unrecognized dataset magic in " + path);
}

// ---------------------------------------------------------------------------
// Image emission: P6 PPM for 3-channel, P5 PGM for 1-channel, plus a tiled
// grid per batch. Values map linearly from [-1,1] to [0,255].
// ---------------------------------------------------------------------------

namespace detail {

inline unsigned char to_byte(float v) {
    float mapped = (v + 1.0f) * 127.5f;
    long r = std::lround(mapped);
    return (unsigned char)std::clamp(r, 0l, 255l);
}

inline std::string encode_pnm(const Tensor& img) {  // img [C,H,W], C in {1,3}
    size_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
    std::ostringstream out(std::ios::binary);
    out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            for (size_t ch = 0; ch < c; ++ch)
                out.put((char)to_byte(img.data[(ch * h + y) * w + x]));
    return out.str();
}

}  // namespace detail

inline std::vector<std::string> write_images(const Tensor& batch, const std::string& directory,
                                             const std::string& prefix = "sample") {
    if (batch.shape.size() != 4) throw ShapeError("write_images: expected [N,C,H,W]");
    size_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
    if (c != 1 && c != 3) throw ShapeError("write_images: channel count must be 1 or 3");
    std::filesystem::create_directories(directory);
    const std::string ext = c == 3 ? ".ppm" : ".pgm";
    std::vector<std::string> files;
    for (size_t i = 0; i < n; ++i) {
        Tensor img = Tensor::zeros({(int)c, (int)h, (int)w});
        std::copy(batch.data.begin() + (std::ptrdiff_t)(i * c * h * w),
                  batch.data.begin() + (std::ptrdiff_t)((i + 1) * c * h * w), img.data.begin());
        std::string path = directory + "/" + prefix + "_" + std::to_string(i) + ext;
        detail::atomic_write(path, detail::encode_pnm(img));
        files.push_back(path);
    }
    // square-ish tile grid of the whole batch
    size_t cols = (size_t)std::ceil(std::sqrt((double)n));
    size_t rows = (n + cols - 1) / cols;
    Tensor grid = Tensor::zeros({(int)c, (int)(rows * h), (int)(cols * w)});
    for (auto& v : grid.data) v = -1.0f;
    for (size_t i = 0; i < n; ++i) {
        size_t r = i / cols, cc = i % cols;
        for (size_t ch = 0; ch < c; ++ch)
            for (size_t y = 0; y < h; ++y)
                for (size_t x = 0; x < w; ++x)
                    grid.data[(ch * rows * h + r * h + y) * cols * w + cc * w + x] =
                        batch.data[((i * c + ch) * h + y) * w + x];
    }
    std::string grid_path = directory + "/" + prefix + "_grid" + ext;
    detail::atomic_write(grid_path, detail::encode_pnm(grid));
    files.push_back(grid_path);
    return files;
}

// Reads back a binary PPM/PGM written by write_images (used for verification
// and by the eval tooling).
inline Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image: " + path);
    std::string magic;
    size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if ((magic != "P6" && magic != "P5") || maxval != 255)
        throw IoError("unsupported image format in " + path);
    in.get();  // single whitespace after header
    size_t c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> bytes(w * h * c);
    in.read(reinterpret_cast<char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!in) throw IoError("image truncated: " + path);
    Tensor t = Tensor::zeros({(int)c, (int)h, (int)w});
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            for (size_t ch = 0; ch < c; ++ch)
                t.data[(ch * h + y) * w + x] = (float)bytes[(y * w + x) * c + ch] / 127.5f - 1.0f;
    return t;
}

}  // namespace gfmn
