#include <gtest/gtest.h>

#include <cmath>

#include "dnq/injection.hpp"

using namespace dnq;

namespace {

NoiseEntry entry(std::vector<double> mean, std::vector<double> var) {
    NoiseEntry e;
    e.mean = std::move(mean);
    e.var = std::move(var);
    e.initialized = true;
    return e;
}

} // namespace

TEST(Ramp, HandEvaluated) {
    EXPECT_DOUBLE_EQ(ramp_factor(225, 200, 50), 0.5);
    EXPECT_DOUBLE_EQ(ramp_factor(250, 200, 50), 1.0);
    EXPECT_DOUBLE_EQ(ramp_factor(400, 200, 50), 1.0);
    EXPECT_DOUBLE_EQ(ramp_factor(200, 200, 50), 0.0);
    EXPECT_THROW(ramp_factor(10, 5, 0), ConfigError);
}

TEST(Ramp, StaysInUnitInterval) {
    for (std::size_t e = 1; e <= 60; ++e) {
        const double f = ramp_factor(e, 20, 7);
        EXPECT_GE(f, 0.0);
        EXPECT_LE(f, 1.0);
    }
}

TEST(WeightNoise, ZeroVarianceBroadcastsMean) {
    Rng rng(1);
    const Tensor d = sample_weight_noise(entry({0.5, -0.25}, {0.0, 0.0}), {2, 3}, rng);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d[i], 0.5f);
    for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(d[i], -0.25f);
}

TEST(WeightNoise, MonteCarloMoments) {
    Rng rng(2);
    const Tensor d = sample_weight_noise(entry({0.0}, {1.0}), {1, 100000}, rng);
    double m = 0, m2 = 0;
    for (float v : d.data()) {
        m += v;
        m2 += static_cast<double>(v) * v;
    }
    m /= 1e5;
    const double var = m2 / 1e5 - m * m;
    EXPECT_LE(std::abs(m), 0.02);
    EXPECT_GE(var, 0.98);
    EXPECT_LE(var, 1.02);
}

TEST(WeightNoise, DeterministicAndGuarded) {
    const auto e = entry({0.1, 0.2}, {0.3, -1e-12});
    Rng a(9), b(9);
    EXPECT_EQ(sample_weight_noise(e, {2, 4}, a), sample_weight_noise(e, {2, 4}, b));
    NoiseEntry blank;
    EXPECT_THROW(sample_weight_noise(blank, {2, 4}, a), StateError);
    EXPECT_THROW(sample_weight_noise(e, {3, 4}, a), ShapeError);
}

TEST(Differential, HandEvaluated) {
    const Tensor w({1}, {1.0f});
    const Tensor out = differential_perturb(w, Tensor({1}, {0.03f}), Tensor({1}, {0.01f}), 1.0);
    EXPECT_NEAR(out[0], 1.02f, 1e-7);
}

TEST(Differential, RampOffAndEqualSamplesLeaveWeights) {
    Rng rng(4);
    Tensor w({3, 3});
    for (float& v : w.data()) v = static_cast<float>(rng.normal());
    const Tensor before = w;
    const Tensor d1 = sample_weight_noise(entry({0.1, 0.1, 0.1}, {1, 1, 1}), {3, 3}, rng);
    const Tensor d2 = sample_weight_noise(entry({0.1, 0.1, 0.1}, {1, 1, 1}), {3, 3}, rng);
    EXPECT_EQ(differential_perturb(w, d1, d2, 0.0), w);
    EXPECT_EQ(differential_perturb(w, d1, d1, 0.7), w);
    EXPECT_FALSE(differential_perturb(w, d1, d2, 1.0) == w);
    EXPECT_EQ(w, before);  // never mutated
    EXPECT_THROW(differential_perturb(w, Tensor({3, 2}), d2, 1.0), ShapeError);
}

TEST(Differential, ZeroMeanEvenWithBiasedSamples) {
    const std::vector<double> mu = {0.05, -0.3, 1.0, 0.0};
    const std::vector<double> var = {0.01, 0.04, 0.25, 1.0};
    const auto e = entry(mu, var);
    Rng rng(12);
    const std::size_t n = 10000;
    std::vector<double> sum(4, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        const Tensor a = sample_weight_noise(e, {4, 1}, rng);
        const Tensor b = sample_weight_noise(e, {4, 1}, rng);
        for (std::size_t c = 0; c < 4; ++c) sum[c] += static_cast<double>(a[c]) - b[c];
    }
    for (std::size_t c = 0; c < 4; ++c) {
        const double bound = 4.0 * std::sqrt(var[c]) * std::sqrt(2.0 / static_cast<double>(n));
        EXPECT_LE(std::abs(sum[c] / n), bound) << "channel " << c;
    }
}

TEST(Differential, TelescopesWithinAnEpoch) {
    const auto e = entry({0.02, -0.01}, {0.001, 0.004});
    Rng rng(21);
    NoiseState state;
    state.reset({{2, 8}});
    const Tensor zero = state.previous[0];
    std::vector<double> total(16, 0.0);
    for (int t = 0; t < 500; ++t) {
        Tensor d = sample_weight_noise(e, {2, 8}, rng);
        for (std::size_t i = 0; i < 16; ++i) total[i] += static_cast<double>(d[i]) - state.previous[0][i];
        state.previous[0] = std::move(d);
    }
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_EQ(total[i], static_cast<double>(state.previous[0][i]) - zero[i]);
    }
    state.reset({{2, 8}});
    EXPECT_EQ(state.previous[0], zero);
}

TEST(Activation, ZeroDropIsIdentity) {
    Rng n(1), m(2);
    Tensor x({4, 4}, 0.5f);
    const Tensor before = x;
    EXPECT_EQ(stochastic_activation_perturb(x, entry({1.0}, {1.0}), 0.0, 1.0, n, m), 0u);
    EXPECT_EQ(x, before);
}

TEST(Activation, FullMaskZeroVarianceShiftsByMean) {
    Rng n(1), m(2);
    Tensor x({3, 5}, 0.25f);
    EXPECT_EQ(stochastic_activation_perturb(x, entry({0.125}, {0.0}), 1.0, 1.0, n, m), 15u);
    for (float v : x.data()) EXPECT_EQ(v, 0.375f);
}

TEST(Activation, MaskFractionWithinBinomialBounds) {
    Rng n(3), m(4);
    Tensor x({100000});
    const auto hits = stochastic_activation_perturb(x, entry({0.0}, {1.0}), 0.5, 1.0, n, m);
    const double frac = static_cast<double>(hits) / 1e5;
    EXPECT_GE(frac, 0.494);
    EXPECT_LE(frac, 0.506);
}

TEST(Activation, Preconditions) {
    Rng n(1), m(2);
    Tensor x({2});
    EXPECT_THROW(stochastic_activation_perturb(x, entry({0.0}, {1.0}), 1.5, 1.0, n, m), ConfigError);
    NoiseEntry blank;
    EXPECT_THROW(stochastic_activation_perturb(x, blank, 0.5, 1.0, n, m), StateError);
}

TEST(Streams, LayersDoNotShareState) {
    // Drawing from layer 0's stream never shifts layer 1's.
    Rng a1(derive_seed(5, {tag(Stream::weight_noise), 1, 3}));
    Rng b0(derive_seed(5, {tag(Stream::weight_noise), 0, 3}));
    Rng b1(derive_seed(5, {tag(Stream::weight_noise), 1, 3}));
    for (int i = 0; i < 10; ++i) b0.normal();
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a1.normal(), b1.normal());
}
