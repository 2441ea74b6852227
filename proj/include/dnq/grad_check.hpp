#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "graph.hpp"
#include "loss.hpp"
#include "rng.hpp"

namespace dnq {

// Maps a graph output to a scalar loss and its gradient w.r.t. that output. `exact`
// evaluates the same loss on a double-precision output for the finite differences.
struct Objective {
    std::function<double(const Tensor& output, Tensor* output_grad)> eval;
    std::function<double(std::span<const double> output, const Shape& shape)> exact;

    double operator()(const Tensor& output, Tensor* output_grad) const { return eval(output, output_grad); }
};

// Loss = the (single-element) graph output itself.
inline Objective scalar_output_objective() {
    return {[](const Tensor& out, Tensor* grad) {
                if (out.size() != 1) throw ShapeError("scalar objective needs a single-element output");
                if (grad) *grad = Tensor(out.shape(), 1.0f);
                return static_cast<double>(out[0]);
            },
            [](std::span<const double> out, const Shape&) {
                if (out.size() != 1) throw ShapeError("scalar objective needs a single-element output");
                return out[0];
            }};
}

inline Objective cross_entropy_objective(std::vector<std::int32_t> labels, double eps) {
    auto exact = [labels, eps](std::span<const double> out, const Shape& shape) {
        if (shape.size() != 2 || shape[0] != labels.size()) throw ShapeError("logits do not match the labels");
        const std::size_t batch = shape[0], k = shape[1];
        double loss = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            auto z = out.subspan(b * k, k);
            const double zmax = *std::max_element(z.begin(), z.end());
            double denom = 0.0;
            for (double v : z) denom += std::exp(v - zmax);
            const double log_denom = std::log(denom) + zmax;
            const double t_other = eps / static_cast<double>(k);
            for (std::size_t j = 0; j < k; ++j) {
                const double t = j == static_cast<std::size_t>(labels[b]) ? 1.0 - eps + t_other : t_other;
                loss -= t * (z[j] - log_denom);
            }
        }
        return loss / static_cast<double>(batch);
    };
    return {[labels = std::move(labels), eps](const Tensor& out, Tensor* grad) {
                LossOutput l = softmax_cross_entropy(out, labels, eps);
                if (grad) *grad = std::move(l.grad);
                return l.loss;
            },
            std::move(exact)};
}

// Loss = <c, output> with fixed pseudo-random coefficients c in [-1, 1].
inline Objective projection_objective(std::uint64_t seed) {
    return {[seed](const Tensor& out, Tensor* grad) {
                Rng rng(seed);
                double acc = 0.0;
                if (grad) *grad = Tensor(out.shape());
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double c = 2.0 * rng.uniform() - 1.0;
                    acc += c * out[i];
                    if (grad) (*grad)[i] = static_cast<float>(c);
                }
                return acc;
            },
            [seed](std::span<const double> out, const Shape&) {
                Rng rng(seed);
                double acc = 0.0;
                for (double v : out) acc += (2.0 * rng.uniform() - 1.0) * v;
                return acc;
            }};
}

struct GradCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
    std::string worst;       // parameter[index] with the largest error
    std::string diagnostic;  // set on non-finite loss
};

namespace detail {

struct RefValue {
    Shape shape;
    std::vector<double> v;
};

// Double-precision replay of Graph::forward (no hook). Appends relu input signs to `signs`.
inline RefValue reference_forward(const Graph& g, const ParameterSet& ps, const std::vector<std::vector<double>>& pv,
                                  const Tensor& input, std::vector<bool>& signs) {
    std::vector<RefValue> val(g.size());
    auto param = [&](const Node& n, std::size_t slot) -> const std::vector<double>& { return pv.at(n.params.at(slot)); };
    for (NodeId id = 0; id < g.size(); ++id) {
        const Node& n = g.node(id);
        RefValue& y = val[id];
        switch (n.op) {
            case Op::input: y = {input.shape(), {input.data().begin(), input.data().end()}}; break;
            case Op::param: y = {ps[n.params[0]].value.shape(), param(n, 0)}; break;
            case Op::linear: {
                const RefValue& x = val[n.inputs[0]];
                const Shape& ws = ps[n.params[0]].value.shape();
                const auto& w = param(n, 0);
                const std::size_t batch = x.shape[0], in = ws[1], out = ws[0];
                y = {{batch, out}, std::vector<double>(batch * out)};
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) {
                        double acc = n.params.size() > 1 ? param(n, 1)[o] : 0.0;
                        for (std::size_t i = 0; i < in; ++i) acc += x.v[b * in + i] * w[o * in + i];
                        y.v[b * out + o] = acc;
                    }
                break;
            }
            case Op::conv2d: {
                const RefValue& x = val[n.inputs[0]];
                const Shape& ws = ps[n.params[0]].value.shape();
                const auto& w = param(n, 0);
                const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
                const std::size_t O = ws[0], KH = ws[2], KW = ws[3], P = n.padding;
                const std::size_t OH = H + 2 * P - KH + 1, OW = W + 2 * P - KW + 1;
                y = {{B, O, OH, OW}, std::vector<double>(B * O * OH * OW)};
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t o = 0; o < O; ++o)
                        for (std::size_t oy = 0; oy < OH; ++oy)
                            for (std::size_t ox = 0; ox < OW; ++ox) {
                                double acc = n.params.size() > 1 ? param(n, 1)[o] : 0.0;
                                for (std::size_t c = 0; c < C; ++c)
                                    for (std::size_t ky = 0; ky < KH; ++ky)
                                        for (std::size_t kx = 0; kx < KW; ++kx) {
                                            const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
                                            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                                            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                                                ix >= static_cast<std::ptrdiff_t>(W)) {
                                                continue;
                                            }
                                            acc += x.v[((b * C + c) * H + static_cast<std::size_t>(iy)) * W +
                                                       static_cast<std::size_t>(ix)] *
                                                   w[((o * C + c) * KH + ky) * KW + kx];
                                        }
                                y.v[((b * O + o) * OH + oy) * OW + ox] = acc;
                            }
                break;
            }
            case Op::relu: {
                y = val[n.inputs[0]];
                for (double& v : y.v) {
                    signs.push_back(v > 0.0);
                    v = v > 0.0 ? v : 0.0;
                }
                break;
            }
            case Op::avg_pool: {
                const RefValue& x = val[n.inputs[0]];
                const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3], k = n.pool;
                const std::size_t OH = H / k, OW = W / k;
                y = {{B, C, OH, OW}, std::vector<double>(B * C * OH * OW)};
                for (std::size_t bc = 0; bc < B * C; ++bc)
                    for (std::size_t oy = 0; oy < OH; ++oy)
                        for (std::size_t ox = 0; ox < OW; ++ox) {
                            double acc = 0.0;
                            for (std::size_t ky = 0; ky < k; ++ky)
                                for (std::size_t kx = 0; kx < k; ++kx) acc += x.v[(bc * H + oy * k + ky) * W + ox * k + kx];
                            y.v[(bc * OH + oy) * OW + ox] = acc / static_cast<double>(k * k);
                        }
                break;
            }
            case Op::flatten: {
                const RefValue& x = val[n.inputs[0]];
                y = {{x.shape[0], x.v.size() / x.shape[0]}, x.v};
                break;
            }
            case Op::mul: {
                y = val[n.inputs[0]];
                const auto& b = val[n.inputs[1]].v;
                for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] *= b[i];
                break;
            }
            case Op::sum: {
                double acc = 0.0;
                for (double v : val[n.inputs[0]].v) acc += v;
                y = {{1}, {acc}};
                break;
            }
        }
    }
    return std::move(val.back());
}

} // namespace detail

// Compares backward() against central differences for every parameter element.
// Analytic gradients come from the float backward pass; the central differences are
// taken on a double-precision replay of the graph so float rounding does not swamp
// small gradients. Relative error is |a - n| / max(|a|, |n|, floor); coordinates whose
// perturbation flips any relu input across its kink are skipped.
inline GradCheckReport grad_check(Graph& graph, ParameterSet& params, const Tensor& input, const Objective& objective,
                                  double tolerance, double step = 1e-3, double floor = 1e-2) {
    GradCheckReport report;
    if (params.total_count() == 0) return report;

    const Tensor& out = graph.forward(input, params);
    Tensor out_grad;
    const double base = objective(out, &out_grad);
    if (!std::isfinite(base)) {
        report.passed = false;
        report.diagnostic = "non-finite loss at the evaluation point";
        return report;
    }
    graph.backward(params, out_grad);

    std::vector<std::vector<double>> values;
    for (const auto& p : params) values.emplace_back(p.value.data().begin(), p.value.data().end());
    std::vector<bool> base_signs;
    detail::reference_forward(graph, params, values, input, base_signs);

    auto eval = [&](bool& kink) {
        std::vector<bool> signs;
        const detail::RefValue y = detail::reference_forward(graph, params, values, input, signs);
        if (signs != base_signs) kink = true;
        return objective.exact(y.v, y.shape);
    };

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto analytic = params[pi].value.grad();
        for (std::size_t i = 0; i < values[pi].size(); ++i) {
            const double orig = values[pi][i];
            bool kink = false;
            values[pi][i] = orig + step;
            const double up = eval(kink);
            values[pi][i] = orig - step;
            const double down = eval(kink);
            values[pi][i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.passed = false;
                report.diagnostic = "non-finite loss while perturbing " + params[pi].name;
                return report;
            }
            if (kink) {
                ++report.skipped_kinks;
                continue;
            }
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = params[pi].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

} // namespace dnq
