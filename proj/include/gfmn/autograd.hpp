#pragma once

#include "gfmn/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace gfmn {

// Reverse-mode tape over a fixed set of primitives. Nodes are appended in
// build order; that order is the topological evaluation order, so forward
// and backward are deterministic for a fixed build sequence.

enum class Op {
    Input, Param, Const,
    Add, AddBias, Sub, Mul, Scale, Square, Abs,
    Relu, Tanh,
    MatMul, Conv2d, ConvT2d,
    MeanAll, SumAll, MeanRows, Dot,
    Reshape, AffineChannel,
};

struct Node {
    Op op;
    std::vector<int> in;
    Shape shape;
    Tensor value;
    Tensor grad;
    std::string name;     // inputs/params only
    bool trainable = false;
    int stride = 1, pad = 0, out_pad = 0;   // conv family
    float scalar = 0.0f;                    // Scale
    double value64 = 0.0;                   // full-precision copy for scalar reductions
};

class Graph {
public:
    using Id = int;

    Id input(const std::string& name, Shape shape) {
        Node n;
        n.op = Op::Input;
        n.shape = std::move(shape);
        n.name = name;
        Id id = push(std::move(n));
        named_[name] = id;
        return id;
    }

    Id param(const std::string& name, Tensor init, bool trainable = true) {
        Node n;
        n.op = Op::Param;
        n.shape = init.shape;
        n.value = std::move(init);
        n.name = name;
        n.trainable = trainable;
        Id id = push(std::move(n));
        named_[name] = id;
        return id;
    }

    Id constant(Tensor v) {
        Node n;
        n.op = Op::Const;
        n.shape = v.shape;
        n.value = std::move(v);
        return push(std::move(n));
    }

    Id add(Id a, Id b) { return binary(Op::Add, a, b, "add"); }
    Id sub(Id a, Id b) { return binary(Op::Sub, a, b, "sub"); }
    Id mul(Id a, Id b) { return binary(Op::Mul, a, b, "mul"); }

    /// x [N,C,H,W] or [N,D] plus per-channel (or per-feature) bias.
    Id add_bias(Id x, Id b) {
        const Shape& xs = at(x).shape;
        const Shape& bs = at(b).shape;
        int ch = xs.size() == 4 ? xs[1] : xs.back();
        if (bs.size() != 1 || bs[0] != ch)
            fail("add_bias", "bias " + shape_str(bs) + " does not match channels of " + shape_str(xs));
        Node n;
        n.op = Op::AddBias;
        n.in = {x, b};
        n.shape = xs;
        return push(std::move(n));
    }

    Id scale(Id a, float c) {
        Node n;
        n.op = Op::Scale;
        n.in = {a};
        n.shape = at(a).shape;
        n.scalar = c;
        return push(std::move(n));
    }

    Id square(Id a) { return unary(Op::Square, a); }
    Id abs(Id a) { return unary(Op::Abs, a); }
    Id relu(Id a) { return unary(Op::Relu, a); }
    Id tanh(Id a) { return unary(Op::Tanh, a); }

    Id matmul(Id a, Id b) {
        const Shape& sa = at(a).shape;
        const Shape& sb = at(b).shape;
        if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
            fail("matmul", shape_str(sa) + " x " + shape_str(sb));
        Node n;
        n.op = Op::MatMul;
        n.in = {a, b};
        n.shape = {sa[0], sb[1]};
        return push(std::move(n));
    }

    /// x [N,C,H,W], w [F,C,kh,kw], explicit zero padding.
    Id conv2d(Id x, Id w, int stride, int pad) {
        const Shape& xs = at(x).shape;
        const Shape& ws = at(w).shape;
        if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
            fail("conv2d", "input " + shape_str(xs) + " kernel " + shape_str(ws));
        int oh = (xs[2] + 2 * pad - ws[2]) / stride + 1;
        int ow = (xs[3] + 2 * pad - ws[3]) / stride + 1;
        if (oh <= 0 || ow <= 0)
            fail("conv2d", "empty output for input " + shape_str(xs) + " kernel " + shape_str(ws));
        Node n;
        n.op = Op::Conv2d;
        n.in = {x, w};
        n.shape = {xs[0], ws[0], oh, ow};
        n.stride = stride;
        n.pad = pad;
        return push(std::move(n));
    }

    /// x [N,C,H,W], w [C,F,kh,kw]; out spatial (H-1)*stride - 2*pad + kh + out_pad.
    Id conv_transpose2d(Id x, Id w, int stride, int pad, int out_pad = 0) {
        const Shape& xs = at(x).shape;
        const Shape& ws = at(w).shape;
        if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0])
            fail("conv_transpose2d", "input " + shape_str(xs) + " kernel " + shape_str(ws));
        int oh = (xs[2] - 1) * stride - 2 * pad + ws[2] + out_pad;
        int ow = (xs[3] - 1) * stride - 2 * pad + ws[3] + out_pad;
        if (oh <= 0 || ow <= 0)
            fail("conv_transpose2d", "empty output for " + shape_str(xs));
        Node n;
        n.op = Op::ConvT2d;
        n.in = {x, w};
        n.shape = {xs[0], ws[1], oh, ow};
        n.stride = stride;
        n.pad = pad;
        n.out_pad = out_pad;
        return push(std::move(n));
    }

    Id mean_all(Id a) { return reduce(Op::MeanAll, a); }
    Id sum_all(Id a) { return reduce(Op::SumAll, a); }

    /// [N,D] -> [D], mean over rows.
    Id mean_rows(Id a) {
        const Shape& s = at(a).shape;
        if (s.size() != 2) fail("mean_rows", "expected matrix, got " + shape_str(s));
        Node n;
        n.op = Op::MeanRows;
        n.in = {a};
        n.shape = {s[1]};
        return push(std::move(n));
    }

    Id dot(Id a, Id b) {
        const Shape& sa = at(a).shape;
        const Shape& sb = at(b).shape;
        if (sa != sb || sa.size() != 1) fail("dot", shape_str(sa) + " . " + shape_str(sb));
        Node n;
        n.op = Op::Dot;
        n.in = {a, b};
        n.shape = {1};
        return push(std::move(n));
    }

    Id reshape(Id a, Shape s) {
        if (numel(s) != numel(at(a).shape))
            fail("reshape", shape_str(at(a).shape) + " -> " + shape_str(s));
        Node n;
        n.op = Op::Reshape;
        n.in = {a};
        n.shape = std::move(s);
        return push(std::move(n));
    }

    /// Per-channel y = gamma*x + beta; x [N,C,H,W] or [N,C].
    Id affine_channel(Id x, Id gamma, Id beta) {
        const Shape& xs = at(x).shape;
        int ch = xs.size() == 4 ? xs[1] : xs.back();
        if (at(gamma).shape != Shape{ch} || at(beta).shape != Shape{ch})
            fail("affine_channel", "scale/shift must be [" + std::to_string(ch) + "]");
        Node n;
        n.op = Op::AffineChannel;
        n.in = {x, gamma, beta};
        n.shape = xs;
        return push(std::move(n));
    }

    void set_input(const std::string& name, Tensor v) {
        Id id = find(name);
        Node& n = nodes_[id];
        if (n.op != Op::Input) throw ShapeError("node '" + name + "' is not an input");
        if (v.shape != n.shape)
            fail(name, "input shape " + shape_str(v.shape) + ", declared " + shape_str(n.shape));
        n.value = std::move(v);
    }

    void forward() {
        for (Node& n : nodes_) eval(n);
    }

    /// Recompute only nodes at or after `from` (build order = topo order).
    void forward_from(Id from) {
        for (size_t i = (size_t)from; i < nodes_.size(); ++i) eval(nodes_[i]);
    }

    void backward(Id loss) {
        const Node& l = at(loss);
        if (numel(l.shape) != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(l.shape));
        for (Node& n : nodes_) n.grad = Tensor::zeros(n.shape);
        nodes_[loss].grad.data[0] = 1.0f;
        for (int i = loss; i >= 0; --i) accumulate(nodes_[i]);
    }

    const Tensor& value(Id id) const { return at(id).value; }
    double scalar64(Id id) const { return at(id).value64; }
    const Tensor& grad(Id id) const { return at(id).grad; }
    Tensor& mutable_value(Id id) { return nodes_[id].value; }

    Id find(const std::string& name) const {
        auto it = named_.find(name);
        if (it == named_.end()) throw ShapeError("unknown node '" + name + "'");
        return it->second;
    }

    std::vector<Id> trainable_params() const {
        std::vector<Id> out;
        for (size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].op == Op::Param && nodes_[i].trainable) out.push_back((Id)i);
        return out;
    }

    const Node& at(Id id) const { return nodes_[id]; }
    size_t size() const { return nodes_.size(); }

    /// Sign pattern of every ReLU input; used by the gradient checker to
    /// detect kink crossings between perturbed evaluations.
    std::vector<uint8_t> relu_sign_mask() const {
        std::vector<uint8_t> mask;
        for (const Node& n : nodes_) {
            if (n.op != Op::Relu) continue;
            const Tensor& x = nodes_[n.in[0]].value;
            for (float v : x.data) mask.push_back(v > 0.0f ? 1 : 0);
        }
        return mask;
    }

    /// Double-precision re-evaluation of the whole tape. This is the numeric
    /// side of the gradient checker; the trained path stays float32.
    /// Returns per-node value vectors; `kink_mask` (if given) collects the
    /// sign pattern of all ReLU inputs.
    std::vector<std::vector<double>> forward64(std::vector<uint8_t>* kink_mask = nullptr) const {
        std::vector<std::vector<double>> vals(nodes_.size());
        for (size_t id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            auto& out = vals[id];
            out.assign((size_t)numel(n.shape), 0.0);
            auto in = [&](int i) -> const std::vector<double>& { return vals[n.in[i]]; };
            switch (n.op) {
            case Op::Input:
            case Op::Param:
            case Op::Const:
                for (size_t i = 0; i < out.size(); ++i) out[i] = n.value.data[i];
                break;
            case Op::Add:
                for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] + in(1)[i];
                break;
            case Op::Sub:
                for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] - in(1)[i];
                break;
            case Op::Mul:
                for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * in(1)[i];
                break;
            case Op::Scale:
                for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * n.scalar;
                break;
            case Op::Square:
                for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * in(0)[i];
                break;
            case Op::Abs:
                for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(in(0)[i]);
                break;
            case Op::Relu:
                for (size_t i = 0; i < out.size(); ++i) {
                    if (kink_mask) kink_mask->push_back(in(0)[i] > 0.0 ? 1 : 0);
                    out[i] = in(0)[i] > 0.0 ? in(0)[i] : 0.0;
                }
                break;
            case Op::Tanh:
                for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in(0)[i]);
                break;
            case Op::AddBias: {
                const Shape& xs = nodes_[n.in[0]].shape;
                if (xs.size() == 4) {
                    int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
                    for (int i = 0; i < N; ++i)
                        for (int c = 0; c < C; ++c)
                            for (int p = 0; p < HW; ++p) {
                                size_t k = ((size_t)i * C + c) * HW + p;
                                out[k] = in(0)[k] + in(1)[c];
                            }
                } else {
                    int D = xs.back();
                    for (size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] + in(1)[i % D];
                }
                break;
            }
            case Op::AffineChannel: {
                const Shape& xs = nodes_[n.in[0]].shape;
                if (xs.size() == 4) {
                    int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
                    for (int i = 0; i < N; ++i)
                        for (int c = 0; c < C; ++c)
                            for (int p = 0; p < HW; ++p) {
                                size_t k = ((size_t)i * C + c) * HW + p;
                                out[k] = in(1)[c] * in(0)[k] + in(2)[c];
                            }
                } else {
                    int D = xs.back();
                    for (size_t i = 0; i < out.size(); ++i)
                        out[i] = in(1)[i % D] * in(0)[i] + in(2)[i % D];
                }
                break;
            }
            case Op::MatMul: {
                const Shape& sa = nodes_[n.in[0]].shape;
                const Shape& sb = nodes_[n.in[1]].shape;
                int m = sa[0], k = sa[1], p = sb[1];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (int l = 0; l < k; ++l)
                            acc += in(0)[(size_t)i * k + l] * in(1)[(size_t)l * p + j];
                        out[(size_t)i * p + j] = acc;
                    }
                break;
            }
            case Op::Conv2d: {
                const Shape& xs = nodes_[n.in[0]].shape;
                const Shape& ws = nodes_[n.in[1]].shape;
                int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
                int F = ws[0], kh = ws[2], kw = ws[3];
                int OH = n.shape[2], OW = n.shape[3];
                for (int i = 0; i < N; ++i)
                    for (int f = 0; f < F; ++f)
                        for (int oh = 0; oh < OH; ++oh)
                            for (int ow = 0; ow < OW; ++ow) {
                                double acc = 0.0;
                                for (int c = 0; c < C; ++c)
                                    for (int r = 0; r < kh; ++r) {
                                        int ih = oh * n.stride - n.pad + r;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int s = 0; s < kw; ++s) {
                                            int iw = ow * n.stride - n.pad + s;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += in(0)[((size_t)i * C + c) * H * W + (size_t)ih * W + iw] *
                                                   in(1)[((size_t)f * C + c) * kh * kw + (size_t)r * kw + s];
                                        }
                                    }
                                out[((size_t)i * F + f) * OH * OW + (size_t)oh * OW + ow] = acc;
                            }
                break;
            }
            case Op::ConvT2d: {
                const Shape& xs = nodes_[n.in[0]].shape;
                const Shape& ws = nodes_[n.in[1]].shape;
                int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
                int F = ws[1], kh = ws[2], kw = ws[3];
                int OH = n.shape[2], OW = n.shape[3];
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int wi = 0; wi < W; ++wi) {
                                double xv = in(0)[((size_t)i * C + c) * H * W + (size_t)h * W + wi];
                                for (int f = 0; f < F; ++f)
                                    for (int r = 0; r < kh; ++r) {
                                        int oh = h * n.stride - n.pad + r;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (int s = 0; s < kw; ++s) {
                                            int ow = wi * n.stride - n.pad + s;
                                            if (ow < 0 || ow >= OW) continue;
                                            out[((size_t)i * F + f) * OH * OW + (size_t)oh * OW + ow] +=
                                                xv * in(1)[((size_t)c * F + f) * kh * kw + (size_t)r * kw + s];
                                        }
                                    }
                            }
                break;
            }
            case Op::MeanAll:
            case Op::SumAll: {
                double acc = 0.0;
                for (double v : in(0)) acc += v;
                if (n.op == Op::MeanAll) acc /= (double)in(0).size();
                out[0] = acc;
                break;
            }
            case Op::MeanRows: {
                const Shape& xs = nodes_[n.in[0]].shape;
                int rows = xs[0], cols = xs[1];
                for (int c = 0; c < cols; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < rows; ++r) acc += in(0)[(size_t)r * cols + c];
                    out[c] = acc / rows;
                }
                break;
            }
            case Op::Dot: {
                double acc = 0.0;
                for (size_t i = 0; i < in(0).size(); ++i) acc += in(0)[i] * in(1)[i];
                out[0] = acc;
                break;
            }
            case Op::Reshape:
                out = in(0);
                break;
            }
        }
        return vals;
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<std::string, Id> named_;

    Id push(Node n) {
        nodes_.push_back(std::move(n));
        return (Id)nodes_.size() - 1;
    }

    [[noreturn]] static void fail(const std::string& node, const std::string& detail) {
        throw ShapeError(node + ": " + detail);
    }

    Id binary(Op op, Id a, Id b, const char* what) {
        if (at(a).shape != at(b).shape)
            fail(what, shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
        Node n;
        n.op = op;
        n.in = {a, b};
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    Id unary(Op op, Id a) {
        Node n;
        n.op = op;
        n.in = {a};
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    Id reduce(Op op, Id a) {
        Node n;
        n.op = op;
        n.in = {a};
        n.shape = {1};
        return push(std::move(n));
    }

    void eval(Node& n) {
        switch (n.op) {
        case Op::Input:
            if (n.value.shape != n.shape)
                throw ShapeError("input '" + n.name + "' not set");
            break;
        case Op::Param:
        case Op::Const:
            break;
        case Op::Add: ew2(n, [](float a, float b) { return a + b; }); break;
        case Op::Sub: ew2(n, [](float a, float b) { return a - b; }); break;
        case Op::Mul: ew2(n, [](float a, float b) { return a * b; }); break;
        case Op::AddBias: eval_add_bias(n); break;
        case Op::Scale: {
            const Tensor& x = val(n, 0);
            n.value = Tensor::zeros(n.shape);
            for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] * n.scalar;
            break;
        }
        case Op::Square: ew1(n, [](float a) { return a * a; }); break;
        case Op::Abs: ew1(n, [](float a) { return std::fabs(a); }); break;
        case Op::Relu: ew1(n, [](float a) { return a > 0.0f ? a : 0.0f; }); break;
        case Op::Tanh: ew1(n, [](float a) { return std::tanh(a); }); break;
        case Op::MatMul: eval_matmul(n); break;
        case Op::Conv2d: eval_conv2d(n); break;
        case Op::ConvT2d: eval_convt2d(n); break;
        case Op::MeanAll:
        case Op::SumAll: {
            const Tensor& x = val(n, 0);
            double acc = 0.0;
            for (float v : x.data) acc += v;
            if (n.op == Op::MeanAll) acc /= (double)x.data.size();
            n.value = Tensor({1}, {(float)acc});
            n.value64 = acc;
            break;
        }
        case Op::MeanRows: {
            const Tensor& x = val(n, 0);
            int rows = x.shape[0], cols = x.shape[1];
            n.value = Tensor::zeros(n.shape);
            for (int c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (int r = 0; r < rows; ++r) acc += x.data[(size_t)r * cols + c];
                n.value.data[c] = (float)(acc / rows);
            }
            break;
        }
        case Op::Dot: {
            const Tensor& a = val(n, 0);
            const Tensor& b = val(n, 1);
            double acc = 0.0;
            for (size_t i = 0; i < a.data.size(); ++i) acc += (double)a.data[i] * b.data[i];
            n.value = Tensor({1}, {(float)acc});
            n.value64 = acc;
            break;
        }
        case Op::Reshape:
            n.value = Tensor(n.shape, val(n, 0).data);
            break;
        case Op::AffineChannel: eval_affine(n, /*backward=*/false);
            break;
        }
        if (numel(n.shape) == 1) propagate64(n);
    }

    // scalar nodes carry a double shadow value so loss readouts keep the
    // reductions' 64-bit precision through trailing scalar arithmetic
    void propagate64(Node& n) {
        auto in64 = [&](int i) { return nodes_[n.in[i]].value64; };
        switch (n.op) {
        case Op::MeanAll: case Op::SumAll: case Op::Dot: break; // set in eval
        case Op::Add: n.value64 = in64(0) + in64(1); break;
        case Op::Sub: n.value64 = in64(0) - in64(1); break;
        case Op::Mul: n.value64 = in64(0) * in64(1); break;
        case Op::Scale: n.value64 = in64(0) * n.scalar; break;
        case Op::Square: n.value64 = in64(0) * in64(0); break;
        case Op::Abs: n.value64 = std::fabs(in64(0)); break;
        case Op::Tanh: n.value64 = std::tanh(in64(0)); break;
        case Op::Relu: n.value64 = in64(0) > 0.0 ? in64(0) : 0.0; break;
        case Op::Reshape: n.value64 = in64(0); break;
        default: n.value64 = n.value.data.empty() ? 0.0 : (double)n.value.data[0]; break;
        }
    }

    const Tensor& val(const Node& n, int i) const { return nodes_[n.in[i]].value; }
    Tensor& grd(const Node& n, int i) { return nodes_[n.in[i]].grad; }

    template <class F>
    void ew1(Node& n, F f) {
        const Tensor& x = val(n, 0);
        n.value = Tensor::zeros(n.shape);
        for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = f(x.data[i]);
    }

    template <class F>
    void ew2(Node& n, F f) {
        const Tensor& a = val(n, 0);
        const Tensor& b = val(n, 1);
        n.value = Tensor::zeros(n.shape);
        for (size_t i = 0; i < a.data.size(); ++i) n.value.data[i] = f(a.data[i], b.data[i]);
    }

    void eval_add_bias(Node& n) {
        const Tensor& x = val(n, 0);
        const Tensor& b = val(n, 1);
        n.value = Tensor::zeros(n.shape);
        if (x.shape.size() == 4) {
            int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    for (int p = 0; p < HW; ++p) {
                        size_t k = ((size_t)i * C + c) * HW + p;
                        n.value.data[k] = x.data[k] + b.data[c];
                    }
        } else {
            int D = x.shape.back();
            for (size_t i = 0; i < x.data.size(); ++i)
                n.value.data[i] = x.data[i] + b.data[i % D];
        }
    }

    void eval_matmul(Node& n) {
        const Tensor& a = val(n, 0);
        const Tensor& b = val(n, 1);
        int m = a.shape[0], k = a.shape[1], p = b.shape[1];
        n.value = Tensor::zeros(n.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p; ++j) {
                double acc = 0.0;
                for (int l = 0; l < k; ++l)
                    acc += (double)a.data[(size_t)i * k + l] * b.data[(size_t)l * p + j];
                n.value.data[(size_t)i * p + j] = (float)acc;
            }
    }

    void eval_conv2d(Node& n) {
        const Tensor& x = val(n, 0);
        const Tensor& w = val(n, 1);
        int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int F = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        int OH = n.shape[2], OW = n.shape[3];
        n.value = Tensor::zeros(n.shape);
        for (int i = 0; i < N; ++i)
            for (int f = 0; f < F; ++f)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        double acc = 0.0;
                        for (int c = 0; c < C; ++c)
                            for (int r = 0; r < kh; ++r) {
                                int ih = oh * n.stride - n.pad + r;
                                if (ih < 0 || ih >= H) continue;
                                for (int s = 0; s < kw; ++s) {
                                    int iw = ow * n.stride - n.pad + s;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += (double)x.at4(i, c, ih, iw) * w.at4(f, c, r, s);
                                }
                            }
                        n.value.at4(i, f, oh, ow) = (float)acc;
                    }
    }

    void eval_convt2d(Node& n) {
        const Tensor& x = val(n, 0);
        const Tensor& w = val(n, 1);
        int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int F = w.shape[1], kh = w.shape[2], kw = w.shape[3];
        int OH = n.shape[2], OW = n.shape[3];
        // scatter with double staging buffer per image/filter
        n.value = Tensor::zeros(n.shape);
        std::vector<double> plane((size_t)OH * OW);
        for (int i = 0; i < N; ++i)
            for (int f = 0; f < F; ++f) {
                std::fill(plane.begin(), plane.end(), 0.0);
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int wi = 0; wi < W; ++wi) {
                            float xv = x.at4(i, c, h, wi);
                            for (int r = 0; r < kh; ++r) {
                                int oh = h * n.stride - n.pad + r;
                                if (oh < 0 || oh >= OH) continue;
                                for (int s = 0; s < kw; ++s) {
                                    int ow = wi * n.stride - n.pad + s;
                                    if (ow < 0 || ow >= OW) continue;
                                    plane[(size_t)oh * OW + ow] +=
                                        (double)xv * w.data[(((size_t)c * F + f) * kh + r) * kw + s];
                                }
                            }
                        }
                for (int p = 0; p < OH * OW; ++p)
                    n.value.data[((size_t)i * F + f) * OH * OW + p] = (float)plane[p];
            }
    }

    void eval_affine(Node& n, bool) {
        const Tensor& x = val(n, 0);
        const Tensor& g = val(n, 1);
        const Tensor& b = val(n, 2);
        n.value = Tensor::zeros(n.shape);
        if (x.shape.size() == 4) {
            int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    for (int p = 0; p < HW; ++p) {
                        size_t k = ((size_t)i * C + c) * HW + p;
                        n.value.data[k] = g.data[c] * x.data[k] + b.data[c];
                    }
        } else {
            int D = x.shape.back();
            for (size_t i = 0; i < x.data.size(); ++i)
                n.value.data[i] = g.data[i % D] * x.data[i] + b.data[i % D];
        }
    }

    void accumulate(Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
        case Op::Input:
        case Op::Param:
        case Op::Const:
            break;
        case Op::Add:
            axpy(grd(n, 0), g, 1.0f);
            axpy(grd(n, 1), g, 1.0f);
            break;
        case Op::Sub:
            axpy(grd(n, 0), g, 1.0f);
            axpy(grd(n, 1), g, -1.0f);
            break;
        case Op::Mul: {
            const Tensor& a = val(n, 0);
            const Tensor& b = val(n, 1);
            Tensor& ga = grd(n, 0);
            Tensor& gb = grd(n, 1);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * b.data[i];
                gb.data[i] += g.data[i] * a.data[i];
            }
            break;
        }
        case Op::AddBias: {
            axpy(grd(n, 0), g, 1.0f);
            Tensor& gb = grd(n, 1);
            const Tensor& x = val(n, 0);
            if (x.shape.size() == 4) {
                int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int i = 0; i < N; ++i)
                        for (int p = 0; p < HW; ++p)
                            acc += g.data[((size_t)i * C + c) * HW + p];
                    gb.data[c] += (float)acc;
                }
            } else {
                int D = x.shape.back();
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i % D] += g.data[i];
            }
            break;
        }
        case Op::Scale:
            axpy(grd(n, 0), g, n.scalar);
            break;
        case Op::Square: {
            const Tensor& x = val(n, 0);
            Tensor& gx = grd(n, 0);
            for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += 2.0f * x.data[i] * g.data[i];
            break;
        }
        case Op::Abs: {
            const Tensor& x = val(n, 0);
            Tensor& gx = grd(n, 0);
            for (size_t i = 0; i < g.data.size(); ++i) {
                float s = x.data[i] > 0.0f ? 1.0f : (x.data[i] < 0.0f ? -1.0f : 0.0f);
                gx.data[i] += s * g.data[i];
            }
            break;
        }
        case Op::Relu: {
            // gradient at exactly 0 is defined as 0
            const Tensor& x = val(n, 0);
            Tensor& gx = grd(n, 0);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (x.data[i] > 0.0f) gx.data[i] += g.data[i];
            break;
        }
        case Op::Tanh: {
            const Tensor& y = n.value;
            Tensor& gx = grd(n, 0);
            for (size_t i = 0; i < g.data.size(); ++i)
                gx.data[i] += (1.0f - y.data[i] * y.data[i]) * g.data[i];
            break;
        }
        case Op::MatMul: {
            const Tensor& a = val(n, 0);
            const Tensor& b = val(n, 1);
            Tensor& ga = grd(n, 0);
            Tensor& gb = grd(n, 1);
            int m = a.shape[0], k = a.shape[1], p = b.shape[1];
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    double acc = 0.0;
                    for (int j = 0; j < p; ++j)
                        acc += (double)g.data[(size_t)i * p + j] * b.data[(size_t)l * p + j];
                    ga.data[(size_t)i * k + l] += (float)acc;
                }
            for (int l = 0; l < k; ++l)
                for (int j = 0; j < p; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += (double)a.data[(size_t)i * k + l] * g.data[(size_t)i * p + j];
                    gb.data[(size_t)l * p + j] += (float)acc;
                }
            break;
        }
        case Op::Conv2d: back_conv2d(n); break;
        case Op::ConvT2d: back_convt2d(n); break;
        case Op::MeanAll: {
            const Tensor& x = val(n, 0);
            float c = g.data[0] / (float)x.data.size();
            Tensor& gx = grd(n, 0);
            for (auto& v : gx.data) v += c;
            break;
        }
        case Op::SumAll: {
            Tensor& gx = grd(n, 0);
            for (auto& v : gx.data) v += g.data[0];
            break;
        }
        case Op::MeanRows: {
            const Tensor& x = val(n, 0);
            int rows = x.shape[0], cols = x.shape[1];
            Tensor& gx = grd(n, 0);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    gx.data[(size_t)r * cols + c] += g.data[c] / (float)rows;
            break;
        }
        case Op::Dot: {
            const Tensor& a = val(n, 0);
            const Tensor& b = val(n, 1);
            Tensor& ga = grd(n, 0);
            Tensor& gb = grd(n, 1);
            for (size_t i = 0; i < a.data.size(); ++i) {
                ga.data[i] += g.data[0] * b.data[i];
                gb.data[i] += g.data[0] * a.data[i];
            }
            break;
        }
        case Op::Reshape:
            axpy(grd(n, 0), g, 1.0f);
            break;
        case Op::AffineChannel: {
            const Tensor& x = val(n, 0);
            const Tensor& gm = val(n, 1);
            Tensor& gx = grd(n, 0);
            Tensor& gg = grd(n, 1);
            Tensor& gb = grd(n, 2);
            if (x.shape.size() == 4) {
                int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
                for (int c = 0; c < C; ++c) {
                    double ag = 0.0, ab = 0.0;
                    for (int i = 0; i < N; ++i)
                        for (int p = 0; p < HW; ++p) {
                            size_t k = ((size_t)i * C + c) * HW + p;
                            gx.data[k] += gm.data[c] * g.data[k];
                            ag += (double)g.data[k] * x.data[k];
                            ab += g.data[k];
                        }
                    gg.data[c] += (float)ag;
                    gb.data[c] += (float)ab;
                }
            } else {
                int D = x.shape.back();
                for (size_t i = 0; i < g.data.size(); ++i) {
                    int c = (int)(i % D);
                    gx.data[i] += gm.data[c] * g.data[i];
                    gg.data[c] += g.data[i] * x.data[i];
                    gb.data[c] += g.data[i];
                }
            }
            break;
        }
        }
    }

    static void axpy(Tensor& y, const Tensor& x, float a) {
        for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
    }

    void back_conv2d(Node& n) {
        const Tensor& x = val(n, 0);
        const Tensor& w = val(n, 1);
        const Tensor& g = n.grad;
        Tensor& gx = grd(n, 0);
        Tensor& gw = grd(n, 1);
        int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int F = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        int OH = n.shape[2], OW = n.shape[3];
        for (int i = 0; i < N; ++i)
            for (int f = 0; f < F; ++f)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        float go = g.at4(i, f, oh, ow);
                        if (go == 0.0f) continue;
                        for (int c = 0; c < C; ++c)
                            for (int r = 0; r < kh; ++r) {
                                int ih = oh * n.stride - n.pad + r;
                                if (ih < 0 || ih >= H) continue;
                                for (int s = 0; s < kw; ++s) {
                                    int iw = ow * n.stride - n.pad + s;
                                    if (iw < 0 || iw >= W) continue;
                                    gx.at4(i, c, ih, iw) += w.at4(f, c, r, s) * go;
                                    gw.at4(f, c, r, s) += x.at4(i, c, ih, iw) * go;
                                }
                            }
                    }
    }

    void back_convt2d(Node& n) {
        const Tensor& x = val(n, 0);
        const Tensor& w = val(n, 1);
        const Tensor& g = n.grad;
        Tensor& gx = grd(n, 0);
        Tensor& gw = grd(n, 1);
        int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int F = w.shape[1], kh = w.shape[2], kw = w.shape[3];
        int OH = n.shape[2], OW = n.shape[3];
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int wi = 0; wi < W; ++wi) {
                        float xv = x.at4(i, c, h, wi);
                        double accx = 0.0;
                        for (int f = 0; f < F; ++f)
                            for (int r = 0; r < kh; ++r) {
                                int oh = h * n.stride - n.pad + r;
                                if (oh < 0 || oh >= OH) continue;
                                for (int s = 0; s < kw; ++s) {
                                    int ow = wi * n.stride - n.pad + s;
                                    if (ow < 0 || ow >= OW) continue;
                                    float go = g.at4(i, f, oh, ow);
                                    size_t wk = (((size_t)c * F + f) * kh + r) * kw + s;
                                    accx += (double)w.data[wk] * go;
                                    gw.data[wk] += xv * go;
                                }
                            }
                        gx.at4(i, c, h, wi) += (float)accx;
                    }
    }
};

// ----- gradient checker ---------------------------------------------------

struct ParamGradCheck {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;   // elements whose perturbation crossed a ReLU kink
};

struct GradReport {
    double epsilon = 0.0;
    std::vector<ParamGradCheck> params;

    double max_rel_err() const {
        double m = 0.0;
        for (auto& p : params) m = std::max(m, p.max_rel_err);
        return m;
    }
    int total_skipped() const {
        int s = 0;
        for (auto& p : params) s += p.skipped;
        return s;
    }
};

/// Central-difference check of every trainable element (or a fixed-seed
/// sample above `sample_threshold`). Elements whose +/-eps evaluations land
/// on opposite sides of a ReLU kink are flagged and skipped.
inline GradReport grad_check(Graph& g, Graph::Id loss, double epsilon = 1e-3,
                             size_t sample_threshold = 4096, uint64_t seed = 17) {
    if (epsilon <= 0.0 || epsilon > 1e-1)
        throw ShapeError("grad_check: epsilon must be in (0, 1e-1]");
    g.forward();
    g.backward(loss);

    GradReport report;
    report.epsilon = epsilon;
    for (Graph::Id pid : g.trainable_params()) {
        const Node& pn = g.at(pid);
        Tensor analytic = g.grad(pid);
        ParamGradCheck pc;
        pc.name = pn.name;

        size_t count = pn.value.data.size();
        std::vector<size_t> indices;
        if (count <= sample_threshold) {
            indices.resize(count);
            std::iota(indices.begin(), indices.end(), (size_t)0);
        } else {
            std::mt19937_64 rng(mix_seed(seed, (uint64_t)pid, 0));
            std::uniform_int_distribution<size_t> pick(0, count - 1);
            for (size_t i = 0; i < sample_threshold; ++i) indices.push_back(pick(rng));
        }

        for (size_t idx : indices) {
            float orig = g.value(pid).data[idx];
            float xp = orig + (float)epsilon;
            float xm = orig - (float)epsilon;
            std::vector<uint8_t> mask_p, mask_m;
            g.mutable_value(pid).data[idx] = xp;
            double fp = g.forward64(&mask_p)[loss][0];
            g.mutable_value(pid).data[idx] = xm;
            double fm = g.forward64(&mask_m)[loss][0];
            g.mutable_value(pid).data[idx] = orig;

            if (mask_p != mask_m) {
                ++pc.skipped;
                continue;
            }
            // effective step after float32 rounding of the perturbed value
            double numeric = (fp - fm) / ((double)xp - (double)xm);
            double a = analytic.data[idx];
            double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            pc.max_rel_err = std::max(pc.max_rel_err, rel);
            ++pc.checked;
        }
        report.params.push_back(std::move(pc));
    }
    g.forward();
    return report;
}

} // namespace gfmn
