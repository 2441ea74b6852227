#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "models.hpp"
#include "quantizer.hpp"
#include "tensor.hpp"

namespace dnq {

// Bit-widths one weight layer is quantized at. `std::nullopt` = left in full precision.
struct LayerBits {
    std::optional<int> weight;
    std::optional<int> activation;
};

// Resolves the per-layer bit map: first/last layers use `first_last_bits` when given,
// otherwise a layer's own override, otherwise (q_w, q_a).
inline std::vector<LayerBits> resolve_bits(const Model& model, int q_w, int q_a,
                                           std::optional<int> first_last_bits = std::nullopt) {
    std::vector<LayerBits> bits;
    const std::size_t n = model.layers.size();
    for (std::size_t i = 0; i < n; ++i) {
        const LayerInfo& l = model.layers[i];
        std::optional<int> override = l.bit_width_override;
        if (first_last_bits && (i == 0 || i + 1 == n)) override = first_last_bits;
        LayerBits b;
        if (l.quantize_weights) b.weight = override.value_or(q_w);
        if (l.quantize_activations) b.activation = override.value_or(q_a);
        if (b.weight) check_bits(*b.weight);
        if (b.activation) check_bits(*b.activation);
        bits.push_back(b);
    }
    return bits;
}

// Population mean and variance per group.
struct GroupStats {
    std::vector<double> mean;
    std::vector<double> var;
};

// E_w = fake_quantize(W) - W with per-output-channel min-max parameters.
inline Tensor measure_wqe(const Tensor& w, int bits) {
    const QuantParams p = calibrate_minmax(w, bits, Granularity::per_channel, 0);
    Tensor e = fake_quantize(w, p);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(static_cast<double>(e[i]) - w[i]);
    return e;
}

// Mean and variance (divide by N) of every slice along `axis`.
inline GroupStats channel_stats(const Tensor& e, std::size_t axis = 0) {
    if (axis >= e.rank()) throw ShapeError("channel axis out of range for " + shape_str(e.shape()));
    const std::size_t channels = e.dim(axis);
    const std::size_t inner = detail::inner_size(e.shape(), axis);
    std::vector<std::size_t> count(channels, 0);
    GroupStats s{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
    for (std::size_t i = 0; i < e.size(); ++i) {
        const std::size_t c = (i / inner) % channels;
        s.mean[c] += e[i];
        ++count[c];
    }
    for (std::size_t c = 0; c < channels; ++c) s.mean[c] /= static_cast<double>(count[c]);
    for (std::size_t i = 0; i < e.size(); ++i) {
        const std::size_t c = (i / inner) % channels;
        const double d = e[i] - s.mean[c];
        s.var[c] += d * d;
    }
    for (std::size_t c = 0; c < channels; ++c) s.var[c] /= static_cast<double>(count[c]);
    return s;
}

// Mean and variance of a pooled element multiset.
inline GroupStats pooled_stats(std::span<const float> values) {
    if (values.empty()) throw DataError("cannot compute statistics of an empty set");
    double mean = 0.0;
    for (float v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (float v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    return {{mean}, {var}};
}

// Runs `calib` (shape [N, ...]) through the full-precision model and returns the
// inputs of every weight layer, concatenated over calibration batches.
inline std::vector<Tensor> capture_layer_inputs(Model& model, const Tensor& calib, std::size_t batch_size = 256) {
    if (calib.empty() || calib.rank() < 2) throw DataError("calibration set is empty");
    const std::size_t n = calib.dim(0);
    const std::size_t per = calib.size() / n;
    const std::size_t sites = model.layers.size();
    std::vector<std::vector<float>> acc(sites);
    std::vector<Shape> sample_shapes(sites);
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t b = std::min(batch_size, n - start);
        Shape shape = calib.shape();
        shape[0] = b;
        Tensor batch(shape, std::vector<float>(calib.data().begin() + start * per,
                                               calib.data().begin() + (start + b) * per));
        model.graph.forward(batch, model.params, [&](std::size_t site, const Node&, Tensor& x) {
            acc[site].insert(acc[site].end(), x.data().begin(), x.data().end());
            sample_shapes[site] = Shape(x.shape().begin() + 1, x.shape().end());
        });
    }
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < sites; ++s) {
        Shape shape{n};
        shape.insert(shape.end(), sample_shapes[s].begin(), sample_shapes[s].end());
        out.emplace_back(std::move(shape), std::move(acc[s]));
    }
    return out;
}

// Activation quantization error statistics for every weight layer's input.
// Per-tensor min-max params are calibrated on the same pass; mean and variance are
// taken over the pooled (sample x element) error set. Sites without activation
// quantization get std::nullopt.
inline std::vector<std::optional<GroupStats>> measure_aqe(Model& model, const Tensor& calib,
                                                          std::span<const LayerBits> bits) {
    if (bits.size() != model.layers.size()) throw ConfigError("bit map does not match the model's layers");
    std::vector<Tensor> inputs = capture_layer_inputs(model, calib);
    std::vector<std::optional<GroupStats>> out(inputs.size());
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        if (!bits[s].activation) continue;
        const QuantParams p = calibrate_minmax(inputs[s], *bits[s].activation, Granularity::per_tensor);
        Tensor e = fake_quantize(inputs[s], p);
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(static_cast<double>(e[i]) - inputs[s][i]);
        out[s] = pooled_stats(e.data());
    }
    return out;
}

enum class NoiseKind { weight, activation };

// EMA-smoothed Gaussian parameters of one layer's quantization error.
struct NoiseEntry {
    NoiseKind kind = NoiseKind::weight;
    std::vector<double> mean;
    std::vector<double> var;
    bool initialized = false;
};

// The first update copies `fresh`; later ones blend: s <- beta * s + (1 - beta) * fresh.
inline void ema_update(NoiseEntry& entry, const GroupStats& fresh, double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("EMA decay must lie in [0, 1)");
    if (fresh.mean.size() != fresh.var.size()) throw ShapeError("mean/variance group counts differ");
    if (!entry.initialized) {
        entry.mean = fresh.mean;
        entry.var = fresh.var;
        entry.initialized = true;
        return;
    }
    if (entry.mean.size() != fresh.mean.size()) {
        throw ShapeError("EMA update with " + std::to_string(fresh.mean.size()) + " groups, entry has " +
                         std::to_string(entry.mean.size()));
    }
    for (std::size_t i = 0; i < entry.mean.size(); ++i) {
        entry.mean[i] = beta * entry.mean[i] + (1.0 - beta) * fresh.mean[i];
        entry.var[i] = beta * entry.var[i] + (1.0 - beta) * fresh.var[i];
    }
}

// Per-layer weight and activation entries of a model.
struct NoiseStats {
    std::vector<std::string> layer_names;
    std::vector<NoiseEntry> weight;
    std::vector<NoiseEntry> activation;

    static NoiseStats for_model(const Model& m) {
        NoiseStats s;
        for (const auto& l : m.layers) {
            s.layer_names.push_back(l.name);
            s.weight.push_back({NoiseKind::weight, {}, {}, false});
            s.activation.push_back({NoiseKind::activation, {}, {}, false});
        }
        return s;
    }
};

} // namespace dnq
