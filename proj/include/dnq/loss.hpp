#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace dnq {

namespace detail {

inline void check_smoothing(double eps) {
    if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
}

// -sum_k t_k log softmax(z)_k for one row; writes softmax(z) - t into dz when given.
inline double smoothed_ce_row(std::span<const float> z, std::size_t label, double eps, std::span<float> dz = {}) {
    const std::size_t k = z.size();
    if (k < 2) throw ShapeError("cross-entropy needs at least two classes");
    if (label >= k) {
        throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    }
    double zmax = z[0];
    for (float v : z) zmax = std::max<double>(zmax, v);
    double denom = 0.0;
    for (float v : z) denom += std::exp(static_cast<double>(v) - zmax);
    const double log_denom = std::log(denom) + zmax;
    const double t_other = eps / static_cast<double>(k);
    const double t_true = 1.0 - eps + t_other;
    double loss = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        const double logp = static_cast<double>(z[j]) - log_denom;
        const double t = j == label ? t_true : t_other;
        loss -= t * logp;
        if (!dz.empty()) dz[j] = static_cast<float>(std::exp(logp) - t);
    }
    return loss;
}

} // namespace detail

// Label-smoothed cross-entropy of a single logit vector.
inline double ce_label_smoothing(std::span<const float> logits, std::size_t label, double eps) {
    detail::check_smoothing(eps);
    return detail::smoothed_ce_row(logits, label, eps);
}

struct LossOutput {
    double loss = 0.0;  // mean over the batch
    Tensor grad;        // d loss / d logits
    std::size_t correct = 0;
};

// Mean label-smoothed softmax cross-entropy over a [B, K] logit batch.
inline LossOutput softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels, double eps) {
    detail::check_smoothing(eps);
    if (logits.rank() != 2) throw ShapeError("logits must be [batch, classes], got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    if (labels.size() != batch) throw ShapeError("label count does not match batch size");
    LossOutput out;
    out.grad = Tensor(logits.shape());
    const double inv_batch = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = logits.data().subspan(b * k, k);
        auto drow = out.grad.data().subspan(b * k, k);
        if (labels[b] < 0) throw DataError("negative label");
        out.loss += detail::smoothed_ce_row(row, static_cast<std::size_t>(labels[b]), eps, drow);
        for (float& v : drow) v = static_cast<float>(v * inv_batch);
        const auto argmax = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (argmax == static_cast<std::size_t>(labels[b])) ++out.correct;
    }
    out.loss *= inv_batch;
    if (!std::isfinite(out.loss)) throw DivergenceError("cross-entropy loss is not finite");
    return out;
}

} // namespace dnq
