#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "datasets.hpp"
#include "errors.hpp"
#include "loss.hpp"
#include "models.hpp"
#include "rng.hpp"

namespace dnq {

// Loss over a flat parameter vector. Fills `grad` (same length as w) when non-null.
using LossFn = std::function<double(std::span<const double> w, std::vector<double>* grad)>;

namespace detail {

inline double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline std::vector<double> gradient_at(const LossFn& fn, std::span<const double> w) {
    std::vector<double> g(w.size(), 0.0);
    const double l = fn(w, &g);
    if (!std::isfinite(l)) throw DivergenceError("non-finite loss at a probe point");
    for (double x : g) {
        if (!std::isfinite(x)) throw DivergenceError("non-finite gradient at a probe point");
    }
    return g;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline std::pair<double, double> mean_stderr(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

} // namespace detail

// H v by central differences of the gradient, step h = 1e-3 (1 + |w|_inf).
inline std::vector<double> hvp(const LossFn& fn, std::span<const double> w, std::span<const double> v) {
    if (v.size() != w.size()) {
        throw ShapeError("direction has " + std::to_string(v.size()) + " entries, parameters have " +
                         std::to_string(w.size()));
    }
    const double h = 1e-3 * (1.0 + detail::inf_norm(w));
    std::vector<double> plus(w.begin(), w.end()), minus(w.begin(), w.end());
    for (std::size_t i = 0; i < w.size(); ++i) {
        plus[i] += h * v[i];
        minus[i] -= h * v[i];
    }
    const auto gp = detail::gradient_at(fn, plus);
    const auto gm = detail::gradient_at(fn, minus);
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
    return out;
}

struct TraceEstimate {
    double trace = 0.0;
    double stderr_ = 0.0;
    std::size_t samples = 0;
};

// Hutchinson: mean of v^T H v over Rademacher probes.
inline TraceEstimate hutchinson_trace(const LossFn& fn, std::span<const double> w, std::size_t n_samples, Rng& rng) {
    if (n_samples < 2) throw ConfigError("hutchinson_trace needs at least 2 samples");
    std::vector<double> quad;
    quad.reserve(n_samples);
    std::vector<double> v(w.size());
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (double& x : v) x = rng.rademacher();
        quad.push_back(detail::dot(v, hvp(fn, w, v)));
    }
    const auto [mean, se] = detail::mean_stderr(quad);
    return {mean, se, n_samples};
}

struct SharpnessPoint {
    double sigma = 0.0;
    double mean = 0.0;    // mean of L(w + eps) - L(w)
    double stderr_ = 0.0;
    std::size_t draws = 0;
};

// Loss-gap curve for eps ~ Normal(0, sigma^2 diag(scale^2)). Each draw averages the
// antithetic pair +eps / -eps, which cancels the first-order term exactly.
inline std::vector<SharpnessPoint> perturbation_sharpness(const LossFn& fn, std::span<const double> w,
                                                          std::span<const double> scale,
                                                          std::span<const double> sigmas, std::size_t n_draws,
                                                          Rng& rng) {
    if (scale.size() != w.size()) throw ShapeError("perturbation scale must match the parameter count");
    if (n_draws == 0) throw ConfigError("perturbation_sharpness needs at least one draw");
    const double base = fn(w, nullptr);
    std::vector<SharpnessPoint> curve;
    std::vector<double> plus(w.size()), minus(w.size());
    for (double sigma : sigmas) {
        if (!(sigma >= 0.0)) throw ConfigError("perturbation scales must be non-negative");
        SharpnessPoint pt;
        pt.sigma = sigma;
        pt.draws = n_draws;
        if (sigma == 0.0) {
            curve.push_back(pt);
            continue;
        }
        std::vector<double> gaps;
        gaps.reserve(n_draws);
        for (std::size_t d = 0; d < n_draws; ++d) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double e = sigma * scale[i] * rng.normal();
                plus[i] = w[i] + e;
                minus[i] = w[i] - e;
            }
            gaps.push_back(0.5 * (fn(plus, nullptr) + fn(minus, nullptr)) - base);
        }
        std::tie(pt.mean, pt.stderr_) = detail::mean_stderr(gaps);
        curve.push_back(pt);
    }
    return curve;
}

// Least-squares slope of log(dL) against log(sigma) for points with sigma in [lo, hi].
// Points with non-positive gaps are skipped; NaN when fewer than two remain.
inline double loglog_slope(std::span<const SharpnessPoint> curve, double lo, double hi) {
    std::vector<double> xs, ys;
    for (const auto& p : curve) {
        if (p.sigma < lo || p.sigma > hi || p.sigma <= 0.0 || p.mean <= 0.0) continue;
        xs.push_back(std::log(p.sigma));
        ys.push_back(std::log(p.mean));
    }
    if (xs.size() < 2) return std::nan("");
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    return sxy / sxx;
}

// Clean label-smoothed loss of `model` on `data` as a function of its flattened parameters
// (in ParameterSet order). The model's stored parameters are left unchanged.
class ModelLoss {
public:
    ModelLoss(Model& model, const LabeledDataset& data, double eps, std::size_t batch_size = 256)
        : model_(model), data_(data), eps_(eps), batch_size_(batch_size), work_(model.params) {
        check_dataset(data_);
    }

    std::vector<double> flat_params() const {
        std::vector<double> w;
        w.reserve(model_.params.total_count());
        for (const auto& p : model_.params) w.insert(w.end(), p.value.data().begin(), p.value.data().end());
        return w;
    }

    // Per-coordinate scale: RMS of the owning layer's weight tensor (biases share their layer's).
    std::vector<double> rms_scale() const {
        std::vector<double> per_param(model_.params.size(), 1.0);
        for (const auto& l : model_.layers) {
            const Tensor& w = model_.params[l.weight].value;
            double ss = 0.0;
            for (float v : w.data()) ss += static_cast<double>(v) * v;
            const double rms = std::sqrt(ss / static_cast<double>(w.size()));
            per_param[l.weight] = rms;
            if (l.bias) per_param[*l.bias] = rms;
        }
        std::vector<double> scale;
        scale.reserve(model_.params.total_count());
        for (std::size_t i = 0; i < model_.params.size(); ++i) {
            scale.insert(scale.end(), model_.params[i].value.size(), per_param[i]);
        }
        return scale;
    }

    double operator()(std::span<const double> w, std::vector<double>* grad) {
        if (w.size() != model_.params.total_count()) throw ShapeError("flat parameter vector has the wrong length");
        std::size_t off = 0;
        for (auto& p : work_) {
            auto d = p.value.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(w[off + i]);
            off += d.size();
        }
        if (grad) grad->assign(w.size(), 0.0);
        const std::size_t n = data_.size();
        double total = 0.0;
        Shape shape = data_.inputs.shape();
        const std::size_t per = data_.sample_size();
        for (std::size_t start = 0; start < n; start += batch_size_) {
            const std::size_t b = std::min(batch_size_, n - start);
            shape[0] = b;
            Tensor x(shape, std::vector<float>(data_.inputs.data().begin() + start * per,
                                               data_.inputs.data().begin() + (start + b) * per));
            const Tensor& logits = model_.graph.forward(x, work_);
            std::span<const std::int32_t> labels(data_.labels.data() + start, b);
            LossOutput out = softmax_cross_entropy(logits, labels, eps_);
            const double weight = static_cast<double>(b) / static_cast<double>(n);
            total += out.loss * weight;
            if (grad) {
                model_.graph.backward(work_, out.grad);
                std::size_t g_off = 0;
                for (const auto& p : work_) {
                    const auto g = p.value.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[g_off + i] += g[i] * weight;
                    g_off += g.size();
                }
            }
        }
        return total;
    }

    LossFn as_fn() {
        return [this](std::span<const double> w, std::vector<double>* g) { return (*this)(w, g); };
    }

private:
    Model& model_;
    const LabeledDataset& data_;
    double eps_;
    std::size_t batch_size_;
    ParameterSet work_;
};

struct SharpnessConfig {
    std::size_t probe_size = 1024;
    std::size_t trace_samples = 20;
    std::vector<double> sigmas = {0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05};
    std::size_t draws = 16;
    double label_smoothing = 0.1;
};

struct SharpnessReport {
    double trace = 0.0;
    double trace_stderr = 0.0;
    std::size_t trace_samples = 0;
    std::vector<SharpnessPoint> curve;
    std::uint64_t seed = 0;

    // Mean gap at the grid point closest to sigma.
    double gap_at(double sigma) const {
        if (curve.empty()) throw StateError("empty sharpness curve");
        const auto it = std::min_element(curve.begin(), curve.end(), [&](const auto& a, const auto& b) {
            return std::abs(a.sigma - sigma) < std::abs(b.sigma - sigma);
        });
        return it->mean;
    }
};

// Fixed probe subset: the first `size` samples of a seeded permutation of `train`.
inline LabeledDataset probe_subset(const LabeledDataset& train, std::size_t size, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {tag(Stream::probe), 0}));
    auto idx = permutation(train.size(), rng);
    idx.resize(std::min(size, train.size()));
    return subset(train, idx);
}

inline SharpnessReport probe_sharpness(Model& model, const LabeledDataset& train, const SharpnessConfig& cfg,
                                       std::uint64_t seed) {
    const LabeledDataset probe = probe_subset(train, cfg.probe_size, seed);
    ModelLoss loss(model, probe, cfg.label_smoothing);
    const auto w = loss.flat_params();
    SharpnessReport r;
    r.seed = seed;
    if (cfg.trace_samples > 0) {
        Rng trace_rng(derive_seed(seed, {tag(Stream::probe), 1}));
        const auto t = hutchinson_trace(loss.as_fn(), w, cfg.trace_samples, trace_rng);
        r.trace = t.trace;
        r.trace_stderr = t.stderr_;
        r.trace_samples = t.samples;
    }
    Rng curve_rng(derive_seed(seed, {tag(Stream::probe), 2}));
    r.curve = perturbation_sharpness(loss.as_fn(), w, loss.rms_scale(), cfg.sigmas, cfg.draws, curve_rng);
    return r;
}

} // namespace dnq
