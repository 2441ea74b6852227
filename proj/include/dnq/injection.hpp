#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "errors.hpp"
#include "noise_stats.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dnq {

// Noise intensity of epoch e (1-based) in the noise stage: min(1, (e - E_warm) / E_ramp).
// Epochs at or before the warm-up end get 0.
inline double ramp_factor(std::size_t epoch, std::size_t warmup_epochs, std::size_t ramp_epochs) {
    if (ramp_epochs == 0) throw ConfigError("ramp_epochs must be at least 1");
    if (epoch <= warmup_epochs) return 0.0;
    return std::min(1.0, static_cast<double>(epoch - warmup_epochs) / static_cast<double>(ramp_epochs));
}

// Draws delta with every element of output channel i ~ Normal(mu_i, sigma_i^2).
// Negative variances are floored at zero.
inline Tensor sample_weight_noise(const NoiseEntry& stats, const Shape& shape, Rng& rng) {
    if (!stats.initialized) throw StateError("weight noise statistics are not initialized");
    if (shape.empty() || shape[0] != stats.mean.size()) {
        throw ShapeError("weight noise stats have " + std::to_string(stats.mean.size()) +
                         " channels, weight shape is " + shape_str(shape));
    }
    Tensor delta(shape);
    const std::size_t inner = delta.size() / shape[0];
    for (std::size_t c = 0; c < shape[0]; ++c) {
        const double mu = stats.mean[c];
        const double sd = std::sqrt(std::max(0.0, stats.var[c]));
        for (std::size_t j = 0; j < inner; ++j) delta[c * inner + j] = static_cast<float>(mu + sd * rng.normal());
    }
    return delta;
}

// W' = W + f_ramp * (delta_t - delta_prev). Returns a new tensor; W is not touched.
inline Tensor differential_perturb(const Tensor& w, const Tensor& delta_t, const Tensor& delta_prev, double f_ramp) {
    if (w.shape() != delta_t.shape() || w.shape() != delta_prev.shape()) {
        throw ShapeError("differential perturbation shapes differ: W " + shape_str(w.shape()) + ", delta " +
                         shape_str(delta_t.shape()) + ", previous " + shape_str(delta_prev.shape()));
    }
    Tensor out = w;
    if (f_ramp == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double p = static_cast<double>(delta_t[i]) - static_cast<double>(delta_prev[i]);
        out[i] = static_cast<float>(w[i] + f_ramp * p);
    }
    return out;
}

// x' = x + f_ramp * (M .* delta_x), M_ij ~ Bernoulli(p_drop), delta_x ~ Normal(mu_x, sigma_x^2).
// The mask and the noise come from separate streams. Returns the number of perturbed elements.
inline std::size_t stochastic_activation_perturb(Tensor& x, const NoiseEntry& stats, double p_drop, double f_ramp,
                                                 Rng& noise_rng, Rng& mask_rng) {
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("p_drop must lie in [0, 1]");
    if (!stats.initialized) throw StateError("activation noise statistics are not initialized");
    if (stats.mean.size() != 1) throw ShapeError("activation noise statistics must be per-tensor");
    if (p_drop == 0.0) return 0;
    const double mu = stats.mean[0];
    const double sd = std::sqrt(std::max(0.0, stats.var[0]));
    std::size_t hits = 0;
    for (float& v : x.data()) {
        if (!mask_rng.bernoulli(p_drop)) continue;
        ++hits;
        v = static_cast<float>(v + f_ramp * (mu + sd * noise_rng.normal()));
    }
    return hits;
}

// Per-layer history for differential injection.
struct NoiseState {
    std::vector<Tensor> previous;  // delta_{w,t-1} per layer

    // Zero-fills the history at an epoch boundary.
    void reset(const std::vector<Shape>& shapes) {
        previous.clear();
        for (const auto& s : shapes) previous.emplace_back(s);
    }
};

} // namespace dnq
