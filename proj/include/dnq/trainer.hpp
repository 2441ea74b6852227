#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "datasets.hpp"
#include "errors.hpp"
#include "injection.hpp"
#include "loss.hpp"
#include "models.hpp"
#include "noise_stats.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace dnq {

// Defaults follow the reference protocol: 400 epochs, noise from epoch 200 ramping over
// 50 epochs, cosine for 300 epochs, then constant-LR SWA.
struct TrainConfig {
    std::size_t epochs = 400;
    std::size_t warmup_epochs = 200;
    std::size_t ramp_epochs = 50;
    std::size_t swa_start = 300;  // SWA absorbs epochs e >= swa_start; disabled when > epochs
    std::size_t cosine_epochs = 300;
    double lr = 0.015;
    double swa_lr = 0.0015;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 0.001;
    std::size_t batch_size = 64;
    double label_smoothing = 0.1;
    double beta_w = 0.9;
    double beta_a = 0.9;
    double p_drop = 0.5;
    std::uint64_t seed = 0;
    int weight_bits = 4;  // bit-widths the noise statistics are measured at
    int act_bits = 4;
    std::optional<int> first_last_bits = 8;
    bool wqer = true;  // inject weight noise in the noise stage
    bool aqer = true;  // inject activation noise in the noise stage

    bool swa_enabled() const noexcept { return swa_start <= epochs; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (epochs == 0) fail("train.epochs must be at least 1");
        if (warmup_epochs > epochs) fail("train.warmup_epochs must not exceed train.epochs");
        if (warmup_epochs >= swa_start) {
            fail("train.warmup_epochs (" + std::to_string(warmup_epochs) + ") must be smaller than train.swa_start (" +
                 std::to_string(swa_start) + ")");
        }
        if (ramp_epochs == 0) fail("train.ramp_epochs must be at least 1");
        if (cosine_epochs == 0) fail("train.cosine_epochs must be at least 1");
        if (!(lr > 0.0) || !(swa_lr >= 0.0)) fail("train.lr must be positive and train.swa_lr non-negative");
        if (!(momentum >= 0.0 && momentum < 1.0)) fail("train.momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) fail("train.weight_decay must be non-negative");
        if (batch_size == 0) fail("train.batch_size must be at least 1");
        if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("train.label_smoothing must lie in [0, 1)");
        if (!(beta_w >= 0.0 && beta_w < 1.0) || !(beta_a >= 0.0 && beta_a < 1.0)) fail("EMA decays must lie in [0, 1)");
        if (!(p_drop >= 0.0 && p_drop <= 1.0)) fail("train.p_drop must lie in [0, 1]");
        check_bits(weight_bits);
        check_bits(act_bits);
        if (first_last_bits) check_bits(*first_last_bits);
    }
};

struct LayerNoiseSummary {
    std::string layer;
    double mean_abs_mu_w = 0.0;
    double mean_sigma_w = 0.0;
    double sigma_x = 0.0;
    double mu_x = 0.0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double f_ramp = 0.0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    bool swa_absorbed = false;
    std::vector<LayerNoiseSummary> layers;  // filled in the noise stage
};

// Called before each optimizer update with the stored parameters, the gradients about to
// be applied and the learning rate.
using StepObserver = std::function<void(const ParameterSet& stored, const std::vector<std::span<const float>>& grads,
                                        double lr)>;

// Runs the two-stage schedule: clean training up to warmup_epochs, then per-epoch noise
// statistics refresh and noise-injected training, with SWA from swa_start.
class Trainer {
public:
    Trainer(TrainConfig cfg, Model& model, const LabeledDataset& train, const LabeledDataset& calib)
        : cfg_(cfg),
          model_(model),
          train_(train),
          calib_(calib),
          opt_(SgdConfig{cfg.momentum, cfg.weight_decay, cfg.nesterov}),
          stats_(NoiseStats::for_model(model)) {
        cfg_.validate();
        check_dataset(train_);
        if (train_.inputs.dim(0) == 0) throw DataError("training set is empty");
        if (calib_.size() == 0) throw DataError("calibration set is empty");
        if (calib_.split == "test") throw DataError("calibration data must not come from the test split");
        bits_ = resolve_bits(model_, cfg_.weight_bits, cfg_.act_bits, cfg_.first_last_bits);
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    std::size_t epochs_done() const noexcept { return epoch_; }
    bool finished() const noexcept { return epoch_ >= cfg_.epochs; }
    const NoiseStats& noise_stats() const noexcept { return stats_; }
    const SwaState& swa() const noexcept { return swa_; }
    void set_step_observer(StepObserver obs) { observer_ = std::move(obs); }

    // Runs epoch `epochs_done() + 1`.
    EpochMetrics run_epoch() {
        if (finished()) throw StateError("training already finished");
        const std::size_t e = ++epoch_;
        EpochMetrics m;
        m.epoch = e;
        m.lr = cosine_lr(e - 1, cfg_.lr, cfg_.cosine_epochs, cfg_.swa_lr);
        const bool noisy = e > cfg_.warmup_epochs;
        if (noisy) {
            m.f_ramp = ramp_factor(e, cfg_.warmup_epochs, cfg_.ramp_epochs);
            refresh_statistics();
            std::vector<Shape> shapes;
            for (const auto& l : model_.layers) shapes.push_back(model_.params[l.weight].value.shape());
            noise_.reset(shapes);
            m.layers = summarize();
        }
        train_one_epoch(e, noisy, m);
        if (cfg_.swa_enabled() && e >= cfg_.swa_start) {
            swa_.update(model_.params);
            m.swa_absorbed = true;
        }
        return m;
    }

    // The SWA average when SWA ran, otherwise the current parameters.
    ParameterSet final_params() const {
        if (swa_.count() > 0) return swa_.average(model_.params);
        ParameterSet p = model_.params;
        for (auto& x : p) x.value.drop_grad();
        return p;
    }

    // Full resumable state: parameters, optimizer velocity, SWA accumulator, EMA statistics.
    Checkpoint state_checkpoint() const {
        Checkpoint c = snapshot(model_.params);
        c.add("state.epoch", Tensor::scalar(static_cast<float>(epoch_)));
        const auto& vel = opt_.velocity();
        for (std::size_t i = 0; i < vel.size(); ++i) {
            c.add("state.velocity." + model_.params[i].name, Tensor(model_.params[i].value.shape(), vel[i]));
        }
        c.add("state.swa.count", Tensor::scalar(static_cast<float>(swa_.count())));
        for (std::size_t i = 0; i < swa_.raw().size(); ++i) {
            c.add("state.swa.avg." + model_.params[i].name, pack_doubles(swa_.raw()[i]));
        }
        for (std::size_t l = 0; l < stats_.layer_names.size(); ++l) {
            add_entry(c, "state.noise.w." + stats_.layer_names[l], stats_.weight[l]);
            add_entry(c, "state.noise.a." + stats_.layer_names[l], stats_.activation[l]);
        }
        return c;
    }

    void restore_state(const Checkpoint& c) {
        restore(c, model_.params);
        epoch_ = static_cast<std::size_t>(c.at("state.epoch")[0]);
        if (c.find("state.velocity." + model_.params[0].name)) {
            auto& vel = opt_.velocity();
            vel.clear();
            for (const auto& p : model_.params) {
                const Tensor& t = c.at("state.velocity." + p.name);
                vel.emplace_back(t.data().begin(), t.data().end());
            }
        }
        const auto count = static_cast<std::size_t>(c.at("state.swa.count")[0]);
        std::vector<std::vector<double>> avg;
        if (count > 0) {
            for (const auto& p : model_.params) avg.push_back(unpack_doubles(c.at("state.swa.avg." + p.name)));
        }
        swa_.restore(std::move(avg), count);
        for (std::size_t l = 0; l < stats_.layer_names.size(); ++l) {
            read_entry(c, "state.noise.w." + stats_.layer_names[l], stats_.weight[l]);
            read_entry(c, "state.noise.a." + stats_.layer_names[l], stats_.activation[l]);
        }
    }

private:
    // Doubles stored bit-exactly as pairs of 32-bit words.
    static Tensor pack_doubles(const std::vector<double>& v) {
        std::vector<float> words(v.size() * 2);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto u = std::bit_cast<std::uint64_t>(v[i]);
            words[2 * i] = std::bit_cast<float>(static_cast<std::uint32_t>(u));
            words[2 * i + 1] = std::bit_cast<float>(static_cast<std::uint32_t>(u >> 32));
        }
        return Tensor({v.size(), 2}, std::move(words));
    }

    static std::vector<double> unpack_doubles(const Tensor& t) {
        std::vector<double> v(t.size() / 2);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::uint64_t lo = std::bit_cast<std::uint32_t>(t[2 * i]);
            const std::uint64_t hi = std::bit_cast<std::uint32_t>(t[2 * i + 1]);
            v[i] = std::bit_cast<double>(lo | (hi << 32));
        }
        return v;
    }

    static void add_entry(Checkpoint& c, const std::string& key, const NoiseEntry& e) {
        if (!e.initialized) return;
        c.add(key + ".mean", pack_doubles(e.mean));
        c.add(key + ".var", pack_doubles(e.var));
    }

    static void read_entry(const Checkpoint& c, const std::string& key, NoiseEntry& e) {
        if (!c.find(key + ".mean")) return;
        e.mean = unpack_doubles(c.at(key + ".mean"));
        e.var = unpack_doubles(c.at(key + ".var"));
        e.initialized = true;
    }

    void refresh_statistics() {
        for (std::size_t l = 0; l < model_.layers.size(); ++l) {
            if (!bits_[l].weight) continue;
            const Tensor& w = model_.params[model_.layers[l].weight].value;
            ema_update(stats_.weight[l], channel_stats(measure_wqe(w, *bits_[l].weight), 0), cfg_.beta_w);
        }
        const auto aqe = measure_aqe(model_, calib_.inputs, bits_);
        for (std::size_t l = 0; l < aqe.size(); ++l) {
            if (aqe[l]) ema_update(stats_.activation[l], *aqe[l], cfg_.beta_a);
        }
    }

    std::vector<LayerNoiseSummary> summarize() const {
        std::vector<LayerNoiseSummary> out;
        for (std::size_t l = 0; l < stats_.layer_names.size(); ++l) {
            LayerNoiseSummary s;
            s.layer = stats_.layer_names[l];
            const NoiseEntry& w = stats_.weight[l];
            if (w.initialized) {
                for (std::size_t c = 0; c < w.mean.size(); ++c) {
                    s.mean_abs_mu_w += std::abs(w.mean[c]);
                    s.mean_sigma_w += std::sqrt(std::max(0.0, w.var[c]));
                }
                s.mean_abs_mu_w /= static_cast<double>(w.mean.size());
                s.mean_sigma_w /= static_cast<double>(w.mean.size());
            }
            const NoiseEntry& a = stats_.activation[l];
            if (a.initialized) {
                s.mu_x = a.mean[0];
                s.sigma_x = std::sqrt(std::max(0.0, a.var[0]));
            }
            out.push_back(s);
        }
        return out;
    }

    void train_one_epoch(std::size_t e, bool noisy, EpochMetrics& m) {
        const std::size_t n = train_.size();
        const std::size_t per = train_.sample_size();
        Rng shuffle(derive_seed(cfg_.seed, {tag(Stream::shuffle), e}));
        const std::vector<std::size_t> order = permutation(n, shuffle);

        const std::size_t n_layers = model_.layers.size();
        std::vector<Rng> w_rng, a_rng, mask_rng;
        for (std::size_t l = 0; l < n_layers; ++l) {
            w_rng.emplace_back(derive_seed(cfg_.seed, {tag(Stream::weight_noise), l, e}));
            a_rng.emplace_back(derive_seed(cfg_.seed, {tag(Stream::activation_noise), l, e}));
            mask_rng.emplace_back(derive_seed(cfg_.seed, {tag(Stream::activation_mask), l, e}));
        }
        const bool inject_w = noisy && cfg_.wqer && m.f_ramp > 0.0;
        const bool inject_a = noisy && cfg_.aqer && m.f_ramp > 0.0;

        LayerInputHook act_hook;
        if (inject_a) {
            act_hook = [&](std::size_t site, const Node&, Tensor& x) {
                if (!bits_[site].activation || !stats_.activation[site].initialized) return;
                stochastic_activation_perturb(x, stats_.activation[site], cfg_.p_drop, m.f_ramp, a_rng[site],
                                              mask_rng[site]);
            };
        }

        double loss_sum = 0.0;
        std::size_t correct = 0;
        Shape batch_shape = train_.inputs.shape();
        ParameterSet working;
        for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
            const std::size_t b = std::min(cfg_.batch_size, n - start);
            batch_shape[0] = b;
            Tensor x(batch_shape);
            std::vector<std::int32_t> y(b);
            for (std::size_t k = 0; k < b; ++k) {
                const std::size_t i = order[start + k];
                std::copy_n(train_.inputs.data().begin() + i * per, per, x.data().begin() + k * per);
                y[k] = train_.labels[i];
            }

            // Perturbations act on a temporary copy; the optimizer updates the stored weights.
            ParameterSet* used = &model_.params;
            if (inject_w) {
                working = model_.params;
                for (std::size_t l = 0; l < n_layers; ++l) {
                    if (!bits_[l].weight || !stats_.weight[l].initialized) continue;
                    const std::size_t wi = model_.layers[l].weight;
                    Tensor delta = sample_weight_noise(stats_.weight[l], model_.params[wi].value.shape(), w_rng[l]);
                    working[wi].value = differential_perturb(model_.params[wi].value, delta, noise_.previous[l], m.f_ramp);
                    noise_.previous[l] = std::move(delta);
                }
                used = &working;
            }

            const Tensor& logits = model_.graph.forward(x, *used, act_hook);
            LossOutput loss = softmax_cross_entropy(logits, y, cfg_.label_smoothing);
            model_.graph.backward(*used, loss.grad);

            std::vector<std::span<const float>> grads;
            for (const auto& p : *used) grads.push_back(p.value.grad());
            if (observer_) observer_(model_.params, grads, m.lr);
            opt_.step(model_.params, grads, m.lr);

            loss_sum += loss.loss * static_cast<double>(b);
            correct += loss.correct;
        }
        m.train_loss = loss_sum / static_cast<double>(n);
        m.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        if (!std::isfinite(m.train_loss)) throw DivergenceError("training loss diverged in epoch " + std::to_string(e));
    }

    TrainConfig cfg_;
    Model& model_;
    const LabeledDataset& train_;
    const LabeledDataset& calib_;
    SgdNesterov opt_;
    SwaState swa_;
    NoiseStats stats_;
    NoiseState noise_;
    std::vector<LayerBits> bits_;
    StepObserver observer_;
    std::size_t epoch_ = 0;
};

} // namespace dnq
