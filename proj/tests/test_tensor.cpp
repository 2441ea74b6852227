#include <gtest/gtest.h>

#include <cmath>

#include "dnq/grad_check.hpp"
#include "dnq/graph.hpp"
#include "dnq/loss.hpp"
#include "dnq/rng.hpp"

using namespace dnq;

namespace {

Graph linear_graph(ParameterSet& ps, Tensor w, std::optional<Tensor> b) {
    Graph g({w.dim(1)});
    const auto x = g.add_input();
    const auto wi = ps.add("w", std::move(w));
    std::optional<std::size_t> bi;
    if (b) bi = ps.add("b", std::move(*b));
    g.add_linear("fc", x, wi, bi);
    return g;
}

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (float& v : t.data()) v = static_cast<float>(scale * rng.normal());
    return t;
}

} // namespace

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    Tensor t({2, 3}, 1.5f);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_THROW(t.grad(), StateError);
    t.zero_grad();
    EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Forward, IdentityGraph) {
    Graph g({3});
    g.add_input();
    ParameterSet ps;
    const Tensor x({1, 3}, {1, 2, 3});
    EXPECT_EQ(g.forward(x, ps), x);
}

TEST(Forward, IdentityWeights) {
    ParameterSet ps;
    Graph g = linear_graph(ps, Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}));
    const Tensor y = g.forward(Tensor({1, 2}, {5, 7}), ps);
    EXPECT_EQ(y, Tensor({1, 2}, {5, 7}));
}

TEST(Forward, HandEvaluatedAffine) {
    ParameterSet ps;
    Graph g = linear_graph(ps, Tensor({1, 1}, {2}), Tensor({1}, {1}));
    EXPECT_FLOAT_EQ(g.forward(Tensor({1, 1}, {3}), ps)[0], 7.0f);
}

TEST(Forward, ShapeErrorNamesNode) {
    ParameterSet ps;
    Graph g = linear_graph(ps, Tensor({2, 3}), std::nullopt);
    try {
        g.forward(Tensor({1, 4}), ps);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
    }
}

TEST(Forward, DeterministicAndLinear) {
    Rng rng(3);
    ParameterSet ps;
    Graph g = linear_graph(ps, random_tensor({4, 5}, rng), std::nullopt);
    const Tensor x = random_tensor({3, 5}, rng);
    const Tensor y1 = g.forward(x, ps);
    const Tensor y2 = g.forward(x, ps);
    EXPECT_EQ(y1, y2);
    Tensor x2 = x;
    for (float& v : x2.data()) v *= 2.0f;
    const Tensor y3 = g.forward(x2, ps);
    for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y3[i], 2.0f * y1[i], 1e-5);
}

TEST(Forward, ConvAndPoolByHand) {
    // 1x3x3 input, one 3x3 all-ones kernel with padding 1: each output sums its neighbourhood.
    Graph g({1, 3, 3});
    ParameterSet ps;
    const auto x = g.add_input();
    const auto w = ps.add("w", Tensor({1, 1, 3, 3}, 1.0f));
    const auto c = g.add_conv2d("conv", x, w, std::nullopt, 1);
    const Tensor in({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor y = g.forward(in, ps);
    EXPECT_FLOAT_EQ(y[0], 1 + 2 + 4 + 5);
    EXPECT_FLOAT_EQ(y[4], 45);
    EXPECT_FLOAT_EQ(y[8], 5 + 6 + 8 + 9);
    g.add_avg_pool("pool", c, 2);
    const Tensor p = g.forward(in, ps);
    ASSERT_EQ(p.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(p[0], (12 + 21 + 27 + 45) / 4.0f);
}

TEST(Loss, UniformLogitsGiveLn2) {
    const std::vector<float> z = {0, 0};
    EXPECT_NEAR(ce_label_smoothing(z, 0, 0.1), std::log(2.0), 1e-12);
}

TEST(Loss, ConfidentCorrectLogit) {
    const std::vector<float> z = {10, -10};
    EXPECT_NEAR(ce_label_smoothing(z, 0, 0.0), 2.06e-9, 1e-11);
}

TEST(Loss, SymmetricFourClasses) {
    const std::vector<float> z = {0, 0, 0, 0};
    for (double eps : {0.0, 0.1, 0.5}) EXPECT_NEAR(ce_label_smoothing(z, 2, eps), std::log(4.0), 1e-12);
}

TEST(Loss, LabelOutOfRange) {
    const std::vector<float> z = {0, 0};
    EXPECT_THROW(ce_label_smoothing(z, 2, 0.1), Error);
    EXPECT_THROW(ce_label_smoothing(z, 0, 1.0), Error);
}

TEST(Loss, NonFiniteLogitsDiverge) {
    const Tensor logits({1, 2}, {std::nanf(""), 0});
    const std::vector<std::int32_t> labels = {0};
    EXPECT_THROW(softmax_cross_entropy(logits, labels, 0.1), DivergenceError);
}

TEST(Backward, SquareGradient) {
    // loss = w * w
    Graph g({1});
    ParameterSet ps;
    g.add_input();
    const auto wi = ps.add("w", Tensor::scalar(3));
    const auto p = g.add_param("w", wi);
    g.add_mul("sq", p, p);
    g.forward(Tensor({1, 1}), ps);
    g.backward(ps, Tensor::scalar(1));
    EXPECT_FLOAT_EQ(ps[0].value.grad()[0], 6.0f);
}

TEST(Backward, ReluSubgradient) {
    Graph g({1});
    ParameterSet ps;
    g.add_input();
    const auto wi = ps.add("w", Tensor({2}, {-1, 2}));
    const auto p = g.add_param("w", wi);
    const auto r = g.add_unary(Op::relu, "relu", p);
    g.add_unary(Op::sum, "sum", r);
    g.forward(Tensor({1, 1}), ps);
    g.backward(ps, Tensor::scalar(1));
    EXPECT_FLOAT_EQ(ps[0].value.grad()[0], 0.0f);
    EXPECT_FLOAT_EQ(ps[0].value.grad()[1], 1.0f);
}

TEST(Backward, ReluGradientAtZeroIsZero) {
    Graph g({1});
    ParameterSet ps;
    g.add_input();
    const auto p = g.add_param("w", ps.add("w", Tensor({1}, {0})));
    g.add_unary(Op::sum, "sum", g.add_unary(Op::relu, "relu", p));
    g.forward(Tensor({1, 1}), ps);
    g.backward(ps, Tensor::scalar(1));
    EXPECT_EQ(ps[0].value.grad()[0], 0.0f);
}

TEST(Backward, BeforeForwardIsAnError) {
    ParameterSet ps;
    Graph g = linear_graph(ps, Tensor({1, 1}, {1}), std::nullopt);
    EXPECT_THROW(g.backward(ps, Tensor({1, 1})), StateError);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
    ParameterSet ps;
    Graph g = linear_graph(ps, Tensor({1, 1}, {2}), std::nullopt);
    ps.add("unused", Tensor({3}, 5.0f));
    g.forward(Tensor({1, 1}, {1}), ps);
    g.backward(ps, Tensor({1, 1}, {1}));
    for (float v : ps[1].value.grad()) EXPECT_EQ(v, 0.0f);
}

TEST(GradCheck, QuadraticBowl) {
    Graph g({1});
    ParameterSet ps;
    g.add_input();
    Rng rng(1);
    const auto p = g.add_param("w", ps.add("w", random_tensor({6}, rng)));
    g.add_unary(Op::sum, "sum", g.add_mul("sq", p, p));
    const auto r = grad_check(g, ps, Tensor({1, 1}), scalar_output_objective(), 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, TwoLayerMlpWith64Params) {
    // 4 -> 8 with bias (40), 8 -> 3 without (24).
    Graph g({4});
    ParameterSet ps;
    Rng rng(7);
    const auto x = g.add_input();
    const auto w1 = ps.add("w1", random_tensor({8, 4}, rng, 0.5));
    const auto b1 = ps.add("b1", random_tensor({8}, rng, 0.1));
    const auto w2 = ps.add("w2", random_tensor({3, 8}, rng, 0.5));
    const auto h = g.add_unary(Op::relu, "relu", g.add_linear("fc1", x, w1, b1));
    g.add_linear("fc2", h, w2, std::nullopt);
    ASSERT_EQ(ps.total_count(), 64u);
    const Tensor in = random_tensor({3, 4}, rng);
    const auto r = grad_check(g, ps, in, cross_entropy_objective({0, 2, 1}, 0.1), 1e-3);
    EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
    EXPECT_GT(r.checked, 0u);
}

TEST(GradCheck, ZeroParameterGraphPasses) {
    Graph g({2});
    g.add_input();
    ParameterSet ps;
    const auto r = grad_check(g, ps, Tensor({1, 2}), scalar_output_objective(), 1e-3);
    EXPECT_TRUE(r.passed);
    EXPECT_EQ(r.checked, 0u);
}

TEST(GradCheck, ConvPoolFlattenGraph) {
    Graph g({2, 4, 4});
    ParameterSet ps;
    Rng rng(11);
    const auto x = g.add_input();
    const auto w = ps.add("w", random_tensor({3, 2, 3, 3}, rng, 0.4));
    const auto b = ps.add("b", random_tensor({3}, rng, 0.1));
    const auto c = g.add_conv2d("conv", x, w, b, 1);
    const auto p = g.add_avg_pool("pool", g.add_unary(Op::relu, "relu", c), 2);
    const auto f = g.add_unary(Op::flatten, "flat", p);
    const auto w2 = ps.add("w2", random_tensor({3, 12}, rng, 0.4));
    g.add_linear("fc", f, w2, std::nullopt);
    const auto r = grad_check(g, ps, random_tensor({2, 2, 4, 4}, rng), projection_objective(5), 1e-3);
    EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
}

TEST(GradCheck, NonFiniteLossFailsWithDiagnostic) {
    Graph g({1});
    ParameterSet ps;
    g.add_input();
    g.add_param("w", ps.add("w", Tensor({1}, {std::numeric_limits<float>::infinity()})));
    const auto r = grad_check(g, ps, Tensor({1, 1}), scalar_output_objective(), 1e-3);
    EXPECT_FALSE(r.passed);
    EXPECT_FALSE(r.diagnostic.empty());
}

// A backward pass that disagrees with the forward must be caught.
TEST(GradCheck, WrongAnalyticGradientFails) {
    Graph g({3});
    ParameterSet ps;
    Rng rng(12);
    const auto x = g.add_input();
    g.add_linear("fc", x, ps.add("w", random_tensor({2, 3}, rng, 0.5)), std::nullopt);
    Objective skewed = projection_objective(3);
    skewed.eval = [inner = skewed.eval](const Tensor& out, Tensor* grad) {
        const double l = inner(out, grad);
        if (grad) for (float& v : grad->data()) v *= 1.01f;
        return l;
    };
    const auto r = grad_check(g, ps, random_tensor({2, 3}, rng), skewed, 1e-3);
    EXPECT_FALSE(r.passed);
    EXPECT_NEAR(r.max_rel_error, 0.01, 2e-3);
}
