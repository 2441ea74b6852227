#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace dnq {

struct Parameter {
    std::string name;
    Tensor value;
};

// Ordered, named parameter tensors. Order is the storage order everywhere
// (checkpoints, optimizer state, flattening).
class ParameterSet {
public:
    std::size_t add(std::string name, Tensor value) {
        if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        items_.push_back({std::move(name), std::move(value)});
        return items_.size() - 1;
    }

    std::size_t size() const noexcept { return items_.size(); }
    bool empty() const noexcept { return items_.empty(); }
    Parameter& operator[](std::size_t i) { return items_.at(i); }
    const Parameter& operator[](std::size_t i) const { return items_.at(i); }

    auto begin() noexcept { return items_.begin(); }
    auto end() noexcept { return items_.end(); }
    auto begin() const noexcept { return items_.begin(); }
    auto end() const noexcept { return items_.end(); }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < items_.size(); ++i) {
            if (items_[i].name == name) return i;
        }
        return std::nullopt;
    }

    std::size_t total_count() const noexcept {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p.value.zero_grad();
    }

    // Values only; gradients are not compared.
    friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
        if (a.items_.size() != b.items_.size()) return false;
        for (std::size_t i = 0; i < a.items_.size(); ++i) {
            if (a.items_[i].name != b.items_[i].name || !(a.items_[i].value == b.items_[i].value)) return false;
        }
        return true;
    }

private:
    std::vector<Parameter> items_;
};

enum class Op {
    input,
    param,     // exposes a parameter tensor as a value (no batch axis)
    linear,    // y = x W^T + b, x [B, in], W [out, in]
    conv2d,    // stride 1, zero padding, x [B, C, H, W], W [O, C, KH, KW]
    relu,
    avg_pool,  // non-overlapping k x k windows
    flatten,   // [B, ...] -> [B, prod(...)]
    mul,       // elementwise product of two equally shaped values
    sum,       // reduction of everything to shape [1]
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::input: return "input";
        case Op::param: return "param";
        case Op::linear: return "linear";
        case Op::conv2d: return "conv2d";
        case Op::relu: return "relu";
        case Op::avg_pool: return "avg_pool";
        case Op::flatten: return "flatten";
        case Op::mul: return "mul";
        case Op::sum: return "sum";
    }
    return "?";
}

using NodeId = std::size_t;

struct Node {
    Op op = Op::input;
    std::string name;
    std::vector<NodeId> inputs;
    std::vector<std::size_t> params;  // weight, then optional bias
    std::size_t padding = 0;
    std::size_t pool = 2;
    Tensor output;       // cached by forward
    Tensor layer_input;  // linear/conv: input after the hook ran
};

// Called on the input of every linear/conv node before it is consumed. The hook
// may modify x in place; the gradient passes through unchanged (straight-through).
// `site` is the index of the node among linear/conv nodes in storage order.
using LayerInputHook = std::function<void(std::size_t site, const Node& node, Tensor& x)>;

// Acyclic computation graph stored in topological order. Caches intermediates
// during forward, so one instance must not be shared between threads.
class Graph {
public:
    explicit Graph(Shape sample_shape = {}) : sample_shape_(std::move(sample_shape)) {}

    const Shape& sample_shape() const noexcept { return sample_shape_; }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    NodeId add_input(std::string name = "input") {
        Node n;
        n.op = Op::input;
        n.name = std::move(name);
        return push(std::move(n));
    }

    NodeId add_param(std::string name, std::size_t param) {
        Node n;
        n.op = Op::param;
        n.name = std::move(name);
        n.params = {param};
        return push(std::move(n));
    }

    NodeId add_linear(std::string name, NodeId x, std::size_t weight, std::optional<std::size_t> bias) {
        Node n;
        n.op = Op::linear;
        n.name = std::move(name);
        n.inputs = {x};
        n.params = {weight};
        if (bias) n.params.push_back(*bias);
        return push(std::move(n));
    }

    NodeId add_conv2d(std::string name, NodeId x, std::size_t weight, std::optional<std::size_t> bias,
                      std::size_t padding) {
        Node n;
        n.op = Op::conv2d;
        n.name = std::move(name);
        n.inputs = {x};
        n.params = {weight};
        if (bias) n.params.push_back(*bias);
        n.padding = padding;
        return push(std::move(n));
    }

    NodeId add_unary(Op op, std::string name, NodeId x) {
        Node n;
        n.op = op;
        n.name = std::move(name);
        n.inputs = {x};
        return push(std::move(n));
    }

    NodeId add_avg_pool(std::string name, NodeId x, std::size_t k) {
        if (k == 0) throw ConfigError("pool size must be positive at node '" + name + "'");
        Node n;
        n.op = Op::avg_pool;
        n.name = std::move(name);
        n.inputs = {x};
        n.pool = k;
        return push(std::move(n));
    }

    NodeId add_mul(std::string name, NodeId a, NodeId b) {
        Node n;
        n.op = Op::mul;
        n.name = std::move(name);
        n.inputs = {a, b};
        return push(std::move(n));
    }

    // Linear and conv nodes in storage order; their position is the "site" index.
    std::vector<NodeId> layer_nodes() const {
        std::vector<NodeId> ids;
        for (NodeId i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].op == Op::linear || nodes_[i].op == Op::conv2d) ids.push_back(i);
        }
        return ids;
    }

    bool has_forward() const noexcept { return forward_done_; }

    // Evaluates every node; returns the last node's output.
    const Tensor& forward(const Tensor& batch, const ParameterSet& params, const LayerInputHook& hook = {}) {
        if (nodes_.empty()) throw ShapeError("cannot run forward on an empty graph");
        forward_done_ = false;
        std::size_t site = 0;
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            Node& n = nodes_[id];
            switch (n.op) {
                case Op::input: {
                    if (batch.rank() != sample_shape_.size() + 1 ||
                        !std::equal(sample_shape_.begin(), sample_shape_.end(), batch.shape().begin() + 1)) {
                        throw ShapeError("node '" + n.name + "': input shape " + shape_str(batch.shape()) +
                                         " does not match [batch]+" + shape_str(sample_shape_));
                    }
                    n.output = batch;
                    break;
                }
                case Op::param: n.output = param_at(params, n, 0).value; break;
                case Op::linear:
                case Op::conv2d: {
                    n.layer_input = nodes_[n.inputs[0]].output;
                    if (hook) hook(site, n, n.layer_input);
                    ++site;
                    n.output = n.op == Op::linear ? linear_forward(n, params) : conv_forward(n, params);
                    break;
                }
                case Op::relu: {
                    n.output = nodes_[n.inputs[0]].output;
                    for (float& v : n.output.data()) v = v > 0.0f ? v : 0.0f;
                    break;
                }
                case Op::avg_pool: n.output = pool_forward(n); break;
                case Op::flatten: {
                    const Tensor& x = nodes_[n.inputs[0]].output;
                    if (x.rank() < 2) throw ShapeError("node '" + n.name + "': flatten needs a batch axis");
                    n.output = x.reshaped({x.dim(0), x.size() / x.dim(0)});
                    break;
                }
                case Op::mul: {
                    const Tensor& a = nodes_[n.inputs[0]].output;
                    const Tensor& b = nodes_[n.inputs[1]].output;
                    if (a.shape() != b.shape()) {
                        throw ShapeError("node '" + n.name + "': mul operands " + shape_str(a.shape()) + " vs " +
                                         shape_str(b.shape()));
                    }
                    n.output = a;
                    for (std::size_t i = 0; i < a.size(); ++i) n.output[i] = a[i] * b[i];
                    break;
                }
                case Op::sum: {
                    double acc = 0.0;
                    for (float v : nodes_[n.inputs[0]].output.data()) acc += v;
                    n.output = Tensor::scalar(static_cast<float>(acc));
                    break;
                }
            }
        }
        forward_done_ = true;
        return nodes_.back().output;
    }

    // Reverse pass from the last node. Parameter gradient slots are zeroed first,
    // so parameters that do not influence the output end with zero gradient.
    void backward(ParameterSet& params, const Tensor& output_grad) {
        if (!forward_done_) throw StateError("backward called before forward");
        const Tensor& out = nodes_.back().output;
        if (output_grad.shape() != out.shape()) {
            throw ShapeError("output gradient shape " + shape_str(output_grad.shape()) + " does not match output " +
                             shape_str(out.shape()));
        }
        params.zero_grads();
        std::vector<std::optional<Tensor>> grads(nodes_.size());
        grads.back() = output_grad;
        for (NodeId id = nodes_.size(); id-- > 0;) {
            if (!grads[id]) continue;
            const Node& n = nodes_[id];
            const Tensor& g = *grads[id];
            switch (n.op) {
                case Op::input: break;
                case Op::param: {
                    auto pg = param_at(params, n, 0).value.grad();
                    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
                    break;
                }
                case Op::linear: accumulate(grads, n.inputs[0], linear_backward(n, params, g)); break;
                case Op::conv2d: accumulate(grads, n.inputs[0], conv_backward(n, params, g)); break;
                case Op::relu: {
                    const Tensor& x = nodes_[n.inputs[0]].output;
                    Tensor dx = g;
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                        if (!(x[i] > 0.0f)) dx[i] = 0.0f;
                    }
                    accumulate(grads, n.inputs[0], std::move(dx));
                    break;
                }
                case Op::avg_pool: accumulate(grads, n.inputs[0], pool_backward(n, g)); break;
                case Op::flatten:
                    accumulate(grads, n.inputs[0], g.reshaped(nodes_[n.inputs[0]].output.shape()));
                    break;
                case Op::mul: {
                    const Tensor& a = nodes_[n.inputs[0]].output;
                    const Tensor& b = nodes_[n.inputs[1]].output;
                    Tensor da = g, db = g;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        da[i] = g[i] * b[i];
                        db[i] = g[i] * a[i];
                    }
                    accumulate(grads, n.inputs[0], std::move(da));
                    accumulate(grads, n.inputs[1], std::move(db));
                    break;
                }
                case Op::sum: {
                    accumulate(grads, n.inputs[0], Tensor(nodes_[n.inputs[0]].output.shape(), g[0]));
                    break;
                }
            }
        }
    }

private:
    NodeId push(Node n) {
        for (NodeId in : n.inputs) {
            if (in >= nodes_.size()) {
                throw ConfigError("node '" + n.name + "' references unknown node " + std::to_string(in));
            }
        }
        if (n.op == Op::input && !nodes_.empty()) {
            for (const auto& other : nodes_) {
                if (other.op == Op::input) throw ConfigError("graph already has an input node");
            }
        }
        nodes_.push_back(std::move(n));
        forward_done_ = false;
        return nodes_.size() - 1;
    }

    static const Parameter& param_at(const ParameterSet& params, const Node& n, std::size_t slot) {
        if (slot >= n.params.size() || n.params[slot] >= params.size()) {
            throw ShapeError("node '" + n.name + "' references a missing parameter");
        }
        return params[n.params[slot]];
    }
    static Parameter& param_at(ParameterSet& params, const Node& n, std::size_t slot) {
        if (slot >= n.params.size() || n.params[slot] >= params.size()) {
            throw ShapeError("node '" + n.name + "' references a missing parameter");
        }
        return params[n.params[slot]];
    }

    static void accumulate(std::vector<std::optional<Tensor>>& grads, NodeId id, Tensor g) {
        if (!grads[id]) {
            grads[id] = std::move(g);
        } else {
            auto dst = grads[id]->data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    }

    Tensor linear_forward(const Node& n, const ParameterSet& params) const {
        const Tensor& x = n.layer_input;
        const Tensor& w = param_at(params, n, 0).value;
        if (w.rank() != 2 || x.rank() != 2 || x.dim(1) != w.dim(1)) {
            throw ShapeError("node '" + n.name + "': linear input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
        }
        const std::size_t batch = x.dim(0), in = w.dim(1), out = w.dim(0);
        const float* bias = nullptr;
        if (n.params.size() > 1) {
            const Tensor& b = param_at(params, n, 1).value;
            if (b.size() != out) throw ShapeError("node '" + n.name + "': bias size mismatch");
            bias = b.data().data();
        }
        Tensor y({batch, out});
        const float* xs = x.data().data();
        const float* ws = w.data().data();
        float* ys = y.data().data();
        for (std::size_t b = 0; b < batch; ++b) {
            const float* xr = xs + b * in;
            for (std::size_t o = 0; o < out; ++o) {
                const float* wr = ws + o * in;
                double acc = bias ? bias[o] : 0.0;
                for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(xr[i]) * wr[i];
                ys[b * out + o] = static_cast<float>(acc);
            }
        }
        return y;
    }

    Tensor linear_backward(const Node& n, ParameterSet& params, const Tensor& g) {
        const Tensor& x = n.layer_input;
        Parameter& wp = param_at(params, n, 0);
        const std::size_t batch = x.dim(0), in = wp.value.dim(1), out = wp.value.dim(0);
        const float* xs = x.data().data();
        const float* ws = wp.value.data().data();
        const float* gs = g.data().data();

        std::vector<double> dw(out * in, 0.0);
        std::vector<double> db(out, 0.0);
        Tensor dx({batch, in});
        std::vector<double> row(in);
        for (std::size_t b = 0; b < batch; ++b) {
            const float* xr = xs + b * in;
            std::fill(row.begin(), row.end(), 0.0);
            for (std::size_t o = 0; o < out; ++o) {
                const double go = gs[b * out + o];
                if (go == 0.0) continue;
                db[o] += go;
                double* dwr = dw.data() + o * in;
                const float* wr = ws + o * in;
                for (std::size_t i = 0; i < in; ++i) {
                    dwr[i] += go * xr[i];
                    row[i] += go * wr[i];
                }
            }
            for (std::size_t i = 0; i < in; ++i) dx[b * in + i] = static_cast<float>(row[i]);
        }
        auto wg = wp.value.grad();
        for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += static_cast<float>(dw[i]);
        if (n.params.size() > 1) {
            auto bg = param_at(params, n, 1).value.grad();
            for (std::size_t o = 0; o < out; ++o) bg[o] += static_cast<float>(db[o]);
        }
        return dx;
    }

    Tensor conv_forward(const Node& n, const ParameterSet& params) const {
        const Tensor& x = n.layer_input;
        const Tensor& w = param_at(params, n, 0).value;
        if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
            throw ShapeError("node '" + n.name + "': conv input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
        }
        const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3), P = n.padding;
        if (H + 2 * P < KH || W + 2 * P < KW) {
            throw ShapeError("node '" + n.name + "': kernel larger than padded input");
        }
        const std::size_t OH = H + 2 * P - KH + 1, OW = W + 2 * P - KW + 1;
        const float* bias = nullptr;
        if (n.params.size() > 1) {
            const Tensor& b = param_at(params, n, 1).value;
            if (b.size() != O) throw ShapeError("node '" + n.name + "': bias size mismatch");
            bias = b.data().data();
        }
        Tensor y({B, O, OH, OW});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        double acc = bias ? bias[o] : 0.0;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t ky = 0; ky < KH; ++ky) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t kx = 0; kx < KW; ++kx) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    acc += static_cast<double>(x[((b * C + c) * H + iy) * W + ix]) *
                                           w[((o * C + c) * KH + ky) * KW + kx];
                                }
                            }
                        y[((b * O + o) * OH + oy) * OW + ox] = static_cast<float>(acc);
                    }
        return y;
    }

    Tensor conv_backward(const Node& n, ParameterSet& params, const Tensor& g) {
        const Tensor& x = n.layer_input;
        Parameter& wp = param_at(params, n, 0);
        const Tensor& w = wp.value;
        const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3), P = n.padding;
        const std::size_t OH = g.dim(2), OW = g.dim(3);
        std::vector<double> dw(w.size(), 0.0), db(O, 0.0), dx(x.size(), 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        const double go = g[((b * O + o) * OH + oy) * OW + ox];
                        if (go == 0.0) continue;
                        db[o] += go;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t ky = 0; ky < KH; ++ky) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t kx = 0; kx < KW; ++kx) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    const std::size_t xi = ((b * C + c) * H + iy) * W + ix;
                                    const std::size_t wi = ((o * C + c) * KH + ky) * KW + kx;
                                    dw[wi] += go * x[xi];
                                    dx[xi] += go * w[wi];
                                }
                            }
                    }
        auto wg = wp.value.grad();
        for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += static_cast<float>(dw[i]);
        if (n.params.size() > 1) {
            auto bg = param_at(params, n, 1).value.grad();
            for (std::size_t o = 0; o < O; ++o) bg[o] += static_cast<float>(db[o]);
        }
        Tensor out(x.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) out[i] = static_cast<float>(dx[i]);
        return out;
    }

    Tensor pool_forward(const Node& n) const {
        const Tensor& x = nodes_[n.inputs[0]].output;
        if (x.rank() != 4 || x.dim(2) < n.pool || x.dim(3) < n.pool) {
            throw ShapeError("node '" + n.name + "': avg_pool needs [B,C,H,W] with H,W >= " +
                             std::to_string(n.pool) + ", got " + shape_str(x.shape()));
        }
        const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = n.pool;
        const std::size_t OH = H / k, OW = W / k;
        Tensor y({B, C, OH, OW});
        const double inv = 1.0 / static_cast<double>(k * k);
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) acc += x[(bc * H + oy * k + ky) * W + ox * k + kx];
                    y[(bc * OH + oy) * OW + ox] = static_cast<float>(acc * inv);
                }
        return y;
    }

    Tensor pool_backward(const Node& n, const Tensor& g) const {
        const Tensor& x = nodes_[n.inputs[0]].output;
        const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = n.pool;
        const std::size_t OH = H / k, OW = W / k;
        Tensor dx(x.shape());
        const double inv = 1.0 / static_cast<double>(k * k);
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    const float go = static_cast<float>(g[(bc * OH + oy) * OW + ox] * inv);
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) dx[(bc * H + oy * k + ky) * W + ox * k + kx] = go;
                }
        return dx;
    }

    Shape sample_shape_;
    std::vector<Node> nodes_;
    bool forward_done_ = false;
};

} // namespace dnq
