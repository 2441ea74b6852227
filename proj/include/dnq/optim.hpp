#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"

namespace dnq {

// Cosine annealing from lr0 over `cosine_epochs`, then a constant `tail_lr`.
// `epoch` is 0-based.
inline double cosine_lr(std::size_t epoch, double lr0, std::size_t cosine_epochs, double tail_lr) {
    if (epoch >= cosine_epochs) return tail_lr;
    const double t = static_cast<double>(epoch) / static_cast<double>(cosine_epochs);
    return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * t));
}

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 0.001;
    bool nesterov = true;
};

// SGD with (Nesterov) momentum:
//   g <- grad + wd * w;  v <- m * v + g;  w <- w - lr * (g + m * v)   (nesterov)
//                                         w <- w - lr * v             (classic)
class SgdNesterov {
public:
    explicit SgdNesterov(SgdConfig cfg = {}) : cfg_(cfg) {}

    const SgdConfig& config() const noexcept { return cfg_; }
    std::vector<std::vector<float>>& velocity() noexcept { return velocity_; }
    const std::vector<std::vector<float>>& velocity() const noexcept { return velocity_; }

    // Updates `params` from gradients supplied per parameter (same layout as params).
    void step(ParameterSet& params, const std::vector<std::span<const float>>& grads, double lr) {
        if (grads.size() != params.size()) throw ShapeError("gradient list does not match parameter count");
        if (velocity_.empty()) {
            for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0f);
        }
        if (velocity_.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            const auto& g = grads[pi];
            for (float v : g) {
                if (!std::isfinite(v)) throw DivergenceError("non-finite gradient in '" + params[pi].name + "'");
            }
        }
        const float m = static_cast<float>(cfg_.momentum);
        const float wd = static_cast<float>(cfg_.weight_decay);
        const float rate = static_cast<float>(lr);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto w = params[pi].value.data();
            auto& v = velocity_[pi];
            const auto& grad = grads[pi];
            if (w.size() != grad.size() || v.size() != w.size()) {
                throw ShapeError("gradient size mismatch for '" + params[pi].name + "'");
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                const float g = grad[i] + wd * w[i];
                v[i] = m * v[i] + g;
                w[i] -= rate * (cfg_.nesterov ? g + m * v[i] : v[i]);
            }
        }
    }

    // Convenience: uses the gradient slots of `params`.
    void step(ParameterSet& params, double lr) {
        std::vector<std::span<const float>> grads;
        for (const auto& p : params) grads.push_back(p.value.grad());
        step(params, grads, lr);
    }

private:
    SgdConfig cfg_;
    std::vector<std::vector<float>> velocity_;
};

// Streaming arithmetic mean of parameter snapshots; accumulated in double.
class SwaState {
public:
    std::size_t count() const noexcept { return count_; }

    void update(const ParameterSet& params) {
        if (count_ == 0) {
            avg_.clear();
            for (const auto& p : params) avg_.emplace_back(p.value.values().begin(), p.value.values().end());
        } else {
            if (avg_.size() != params.size()) throw ShapeError("SWA snapshot has a different parameter count");
            const double n = static_cast<double>(count_);
            for (std::size_t pi = 0; pi < params.size(); ++pi) {
                const auto w = params[pi].value.data();
                if (w.size() != avg_[pi].size()) throw ShapeError("SWA snapshot shape mismatch for '" + params[pi].name + "'");
                for (std::size_t i = 0; i < w.size(); ++i) avg_[pi][i] = (avg_[pi][i] * n + w[i]) / (n + 1.0);
            }
        }
        ++count_;
    }

    // Writes the average into a copy of `like`.
    ParameterSet average(const ParameterSet& like) const {
        if (count_ == 0) throw StateError("SWA average requested before any snapshot");
        ParameterSet out = like;
        for (std::size_t pi = 0; pi < out.size(); ++pi) {
            auto w = out[pi].value.data();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(avg_[pi][i]);
            out[pi].value.drop_grad();
        }
        return out;
    }

    const std::vector<std::vector<double>>& raw() const noexcept { return avg_; }

    void restore(std::vector<std::vector<double>> avg, std::size_t count) {
        avg_ = std::move(avg);
        count_ = count;
    }

private:
    std::vector<std::vector<double>> avg_;
    std::size_t count_ = 0;
};

} // namespace dnq
