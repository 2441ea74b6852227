#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "datasets.hpp"
#include "errors.hpp"
#include "loss.hpp"
#include "models.hpp"
#include "noise_stats.hpp"
#include "quantizer.hpp"

namespace dnq {

// Simple PTQ: min-max calibration only, per-channel weights, per-tensor activations.
struct PtqConfig {
    int weight_bits = 4;
    int act_bits = 4;
    std::optional<int> first_last_bits = 8;
    std::size_t calib_size = 100;
    bool bypass = false;  // full-precision pass-through

    std::string label() const {
        return bypass ? "FP" : "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits);
    }
};

struct QuantizedModel {
    Model model;  // graph plus fake-quantized weight copies
    std::vector<LayerBits> bits;
    std::vector<std::optional<QuantParams>> weight_params;
    std::vector<std::optional<QuantParams>> act_params;
    bool bypass = false;
};

// Quantizes the weights of `fp` and calibrates activation ranges on `calib` (full-precision pass).
inline QuantizedModel ptq_calibrate(Model& fp, const Tensor& calib, const PtqConfig& cfg) {
    if (calib.empty()) throw DataError("empty calibration set");
    QuantizedModel qm;
    qm.model = fp;
    qm.bypass = cfg.bypass;
    const std::size_t n = fp.layers.size();
    qm.weight_params.resize(n);
    qm.act_params.resize(n);
    if (cfg.bypass) {
        qm.bits.resize(n);
        return qm;
    }
    qm.bits = resolve_bits(fp, cfg.weight_bits, cfg.act_bits, cfg.first_last_bits);
    for (std::size_t l = 0; l < n; ++l) {
        if (!qm.bits[l].weight) continue;
        Tensor& w = qm.model.params[fp.layers[l].weight].value;
        qm.weight_params[l] = calibrate_minmax(w, *qm.bits[l].weight, Granularity::per_channel, 0);
        fake_quantize_inplace(w, *qm.weight_params[l]);
    }
    std::vector<Tensor> inputs = capture_layer_inputs(fp, calib);
    for (std::size_t l = 0; l < n; ++l) {
        if (!qm.bits[l].activation) continue;
        qm.act_params[l] = calibrate_minmax(inputs[l], *qm.bits[l].activation, Granularity::per_tensor);
    }
    return qm;
}

inline LayerInputHook quantizing_hook(const QuantizedModel& qm) {
    return [&qm](std::size_t site, const Node&, Tensor& x) {
        if (qm.act_params[site]) fake_quantize_inplace(x, *qm.act_params[site]);
    };
}

// Weight layers use fake-quantized weights and fake-quantize their input first.
inline Tensor quantized_forward(QuantizedModel& qm, const Tensor& inputs) {
    if (qm.bypass) return qm.model.graph.forward(inputs, qm.model.params);
    return qm.model.graph.forward(inputs, qm.model.params, quantizing_hook(qm));
}

namespace detail {

inline Tensor batch_slice(const Tensor& x, std::size_t start, std::size_t count) {
    const std::size_t per = x.size() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    return Tensor(shape, std::vector<float>(x.data().begin() + start * per, x.data().begin() + (start + count) * per));
}

inline double accuracy_of(const LabeledDataset& data, const std::function<Tensor(const Tensor&)>& forward,
                          std::size_t batch_size) {
    if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t b = std::min(batch_size, data.size() - start);
        Tensor logits = forward(batch_slice(data.inputs, start, b));
        const std::size_t k = logits.dim(1);
        for (std::size_t i = 0; i < b; ++i) {
            auto row = logits.data().subspan(i * k, k);
            const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            if (arg == static_cast<std::size_t>(data.labels[start + i])) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace detail

// Top-1 accuracy (first maximal logit wins ties).
inline double evaluate(Model& model, const LabeledDataset& data, std::size_t batch_size = 256) {
    return detail::accuracy_of(data, [&](const Tensor& x) { return model.graph.forward(x, model.params); }, batch_size);
}

inline double evaluate(QuantizedModel& qm, const LabeledDataset& data, std::size_t batch_size = 256) {
    return detail::accuracy_of(data, [&](const Tensor& x) { return quantized_forward(qm, x); }, batch_size);
}

// Mean label-smoothed loss over a dataset.
inline double dataset_loss(Model& model, const LabeledDataset& data, double eps, std::size_t batch_size = 256) {
    double total = 0.0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t b = std::min(batch_size, data.size() - start);
        const Tensor& logits = model.graph.forward(detail::batch_slice(data.inputs, start, b), model.params);
        std::span<const std::int32_t> labels(data.labels.data() + start, b);
        total += softmax_cross_entropy(logits, labels, eps).loss * static_cast<double>(b);
    }
    return total / static_cast<double>(data.size());
}

// Bias-free layer response W x in double precision: [B, out] or [B, O, OH, OW].
inline std::vector<double> layer_response(const Shape& w_shape, const std::vector<double>& w,
                                          const Shape& x_shape, const std::vector<double>& x, std::size_t padding) {
    if (w_shape.size() == 2) {
        const std::size_t batch = x_shape[0], in = w_shape[1], out = w_shape[0];
        if (x.size() != batch * in) throw ShapeError("layer response: input does not match weight");
        std::vector<double> y(batch * out, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out; ++o) {
                double acc = 0.0;
                for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[b * in + i];
                y[b * out + o] = acc;
            }
        return y;
    }
    const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
    const std::size_t O = w_shape[0], KH = w_shape[2], KW = w_shape[3], P = padding;
    const std::size_t OH = H + 2 * P - KH + 1, OW = W + 2 * P - KW + 1;
    std::vector<double> y(B * O * OH * OW, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += w[((o * C + c) * KH + ky) * KW + kx] * x[((b * C + c) * H + iy) * W + ix];
                            }
                        }
                    y[((b * O + o) * OH + oy) * OW + ox] = acc;
                }
    return y;
}

// Output-error decomposition of one layer:
//   W_q x_q - W x = W dx (AQE term) + dW x (WQE term) + dW dx (second-order term).
struct LayerErrorTerms {
    std::vector<double> total, aqe, wqe, second;
};

inline LayerErrorTerms decompose_layer_error(const Tensor& w, const Tensor& w_q, const Tensor& x, const Tensor& x_q,
                                             std::size_t padding = 0) {
    if (w.shape() != w_q.shape() || x.shape() != x_q.shape()) throw ShapeError("decomposition operands differ in shape");
    const std::vector<double> wd(w.data().begin(), w.data().end());
    const std::vector<double> wqd(w_q.data().begin(), w_q.data().end());
    const std::vector<double> xd(x.data().begin(), x.data().end());
    const std::vector<double> xqd(x_q.data().begin(), x_q.data().end());
    std::vector<double> dw(w.size()), dx(x.size());
    for (std::size_t i = 0; i < dw.size(); ++i) dw[i] = wqd[i] - wd[i];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = xqd[i] - xd[i];

    auto apply = [&](const std::vector<double>& weights, const std::vector<double>& in) {
        return layer_response(w.shape(), weights, x.shape(), in, padding);
    };
    LayerErrorTerms t;
    const std::vector<double> y = apply(wd, xd);
    const std::vector<double> yq = apply(wqd, xqd);
    t.total.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) t.total[i] = yq[i] - y[i];
    t.aqe = apply(wd, dx);
    t.wqe = apply(dw, xd);
    t.second = apply(dw, dx);
    return t;
}

struct LayerMse {
    std::string layer;
    std::optional<int> weight_bits;
    std::optional<int> act_bits;
    double total = 0.0;
    double aqe = 0.0;
    double wqe = 0.0;
    double second = 0.0;
    double max_residual = 0.0;  // max |total - (aqe + wqe + second)| relative to max |total|
};

struct MseReport {
    std::vector<LayerMse> layers;
    std::size_t samples = 0;
};

// Per weight layer: FP input x (FP model) vs the input the quantized model consumes.
inline MseReport layer_mse_report(Model& fp, QuantizedModel& qm, const Tensor& data, std::size_t batch_size = 256) {
    if (fp.layers.size() != qm.model.layers.size()) throw ShapeError("FP and quantized models differ in topology");
    for (std::size_t l = 0; l < fp.layers.size(); ++l) {
        if (fp.params[fp.layers[l].weight].value.shape() != qm.model.params[qm.model.layers[l].weight].value.shape()) {
            throw ShapeError("FP and quantized models differ at layer '" + fp.layers[l].name + "'");
        }
    }
    if (data.empty()) throw DataError("cannot build an MSE report on empty data");
    const std::size_t n_layers = fp.layers.size();
    MseReport report;
    report.samples = data.dim(0);
    std::vector<double> sums(n_layers * 4, 0.0), counts(n_layers, 0.0), max_total(n_layers, 0.0), max_res(n_layers, 0.0);
    for (std::size_t start = 0; start < data.dim(0); start += batch_size) {
        const std::size_t b = std::min(batch_size, data.dim(0) - start);
        const Tensor batch = detail::batch_slice(data, start, b);
        std::vector<Tensor> x_fp(n_layers), x_q(n_layers);
        fp.graph.forward(batch, fp.params, [&](std::size_t s, const Node&, Tensor& x) { x_fp[s] = x; });
        LayerInputHook qhook = qm.bypass ? LayerInputHook{} : quantizing_hook(qm);
        qm.model.graph.forward(batch, qm.model.params, [&](std::size_t s, const Node& node, Tensor& x) {
            if (qhook) qhook(s, node, x);
            x_q[s] = x;
        });
        for (std::size_t l = 0; l < n_layers; ++l) {
            const Node& node = fp.graph.node(fp.layers[l].node);
            const LayerErrorTerms t =
                decompose_layer_error(fp.params[fp.layers[l].weight].value, qm.model.params[qm.model.layers[l].weight].value,
                                      x_fp[l], x_q[l], node.padding);
            for (std::size_t i = 0; i < t.total.size(); ++i) {
                sums[l * 4 + 0] += t.total[i] * t.total[i];
                sums[l * 4 + 1] += t.aqe[i] * t.aqe[i];
                sums[l * 4 + 2] += t.wqe[i] * t.wqe[i];
                sums[l * 4 + 3] += t.second[i] * t.second[i];
                max_total[l] = std::max(max_total[l], std::abs(t.total[i]));
                max_res[l] = std::max(max_res[l], std::abs(t.total[i] - (t.aqe[i] + t.wqe[i] + t.second[i])));
            }
            counts[l] += static_cast<double>(t.total.size());
        }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        LayerMse m;
        m.layer = fp.layers[l].name;
        if (!qm.bypass) {
            m.weight_bits = qm.bits[l].weight;
            m.act_bits = qm.bits[l].activation;
        }
        m.total = sums[l * 4 + 0] / counts[l];
        m.aqe = sums[l * 4 + 1] / counts[l];
        m.wqe = sums[l * 4 + 2] / counts[l];
        m.second = sums[l * 4 + 3] / counts[l];
        m.max_residual = max_total[l] > 0.0 ? max_res[l] / max_total[l] : max_res[l];
        report.layers.push_back(m);
    }
    return report;
}

inline void write_mse_csv(const MseReport& r, std::ostream& os) {
    os << "# per-layer output MSE; expectation taken over the provided dataset (" << r.samples << " samples)\n";
    os << "layer,q_w,q_a,MSE_total,MSE_aqe_term,MSE_wqe_term,MSE_second_order\n";
    auto bits = [](const std::optional<int>& b) { return b ? std::to_string(*b) : std::string("32"); };
    os.precision(9);
    for (const auto& l : r.layers) {
        os << l.layer << ',' << bits(l.weight_bits) << ',' << bits(l.act_bits) << ',' << l.total << ',' << l.aqe << ','
           << l.wqe << ',' << l.second << '\n';
    }
}

// Quantization parameters as checkpoint records (<layer>.weight.scale, ...).
inline Checkpoint quant_checkpoint(const QuantizedModel& qm) {
    Checkpoint c;
    auto add = [&](const std::string& key, const QuantParams& p) {
        c.add(key + ".scale", Tensor({p.scale.size()}, p.scale));
        std::vector<float> z(p.zero_point.begin(), p.zero_point.end());
        const std::size_t groups = z.size();
        c.add(key + ".zero_point", Tensor({groups}, std::move(z)));
        c.add(key + ".bits", Tensor::scalar(static_cast<float>(p.bits)));
    };
    for (std::size_t l = 0; l < qm.model.layers.size(); ++l) {
        const std::string& name = qm.model.layers[l].name;
        if (qm.weight_params[l]) add(name + ".weight", *qm.weight_params[l]);
        if (qm.act_params[l]) add(name + ".input", *qm.act_params[l]);
    }
    return c;
}

} // namespace dnq
