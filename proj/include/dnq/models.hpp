#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "rng.hpp"

namespace dnq {

enum class LayerKind { linear, conv2d, relu, avg_pool, flatten };

struct LayerSpec {
    LayerKind kind = LayerKind::linear;
    std::string name;
    std::size_t in = 0;   // fan-in (linear) or input channels (conv)
    std::size_t out = 0;  // fan-out (linear) or output channels (conv)
    std::size_t kernel = 3;
    std::size_t padding = 1;
    std::size_t pool = 2;
    bool bias = true;
    bool quantize_weights = true;
    bool quantize_activations = true;
    std::optional<int> bit_width_override;
};

struct ModelSpec {
    std::string name;
    Shape input_shape;  // per sample
    std::size_t classes = 0;
    std::vector<LayerSpec> layers;
};

// A linear or conv layer of a built model.
struct LayerInfo {
    std::string name;
    NodeId node = 0;
    std::size_t weight = 0;
    std::optional<std::size_t> bias;
    std::size_t out_channels = 0;
    bool quantize_weights = true;
    bool quantize_activations = true;
    std::optional<int> bit_width_override;
};

struct Model {
    ModelSpec spec;
    Graph graph;
    ParameterSet params;
    std::vector<LayerInfo> layers;  // in site order
};

inline LayerSpec linear_layer(std::string name, std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.name = std::move(name);
    l.in = in;
    l.out = out;
    return l;
}

inline LayerSpec conv_layer(std::string name, std::size_t in, std::size_t out, std::size_t kernel = 3,
                            std::size_t padding = 1) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.name = std::move(name);
    l.in = in;
    l.out = out;
    l.kernel = kernel;
    l.padding = padding;
    return l;
}

inline LayerSpec simple_layer(LayerKind kind, std::string name, std::size_t pool = 2) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    l.pool = pool;
    return l;
}

// Marks the first and last weight layers with the given bit-width override.
inline void set_first_last_bits(ModelSpec& spec, int bits) {
    LayerSpec* first = nullptr;
    LayerSpec* last = nullptr;
    for (auto& l : spec.layers) {
        if (l.kind != LayerKind::linear && l.kind != LayerKind::conv2d) continue;
        if (!first) first = &l;
        last = &l;
    }
    if (first) first->bit_width_override = bits;
    if (last) last->bit_width_override = bits;
}

// input -> [hidden -> relu]* -> classes
inline ModelSpec toy_mlp(std::size_t input_dim = 784, std::vector<std::size_t> hidden = {128},
                         std::size_t classes = 10) {
    ModelSpec spec;
    spec.name = "toy-mlp";
    spec.input_shape = {input_dim};
    spec.classes = classes;
    std::size_t in = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        spec.layers.push_back(linear_layer("fc" + std::to_string(i + 1), in, hidden[i]));
        spec.layers.push_back(simple_layer(LayerKind::relu, "relu" + std::to_string(i + 1)));
        in = hidden[i];
    }
    spec.layers.push_back(linear_layer("fc" + std::to_string(hidden.size() + 1), in, classes));
    set_first_last_bits(spec, 8);
    return spec;
}

// conv8 -> pool -> conv16 -> pool -> linear, for square single-channel images.
inline ModelSpec toy_cnn(std::size_t channels = 1, std::size_t side = 28, std::size_t classes = 10) {
    ModelSpec spec;
    spec.name = "toy-cnn";
    spec.input_shape = {channels, side, side};
    spec.classes = classes;
    spec.layers.push_back(conv_layer("conv1", channels, 8));
    spec.layers.push_back(simple_layer(LayerKind::relu, "relu1"));
    spec.layers.push_back(simple_layer(LayerKind::avg_pool, "pool1"));
    spec.layers.push_back(conv_layer("conv2", 8, 16));
    spec.layers.push_back(simple_layer(LayerKind::relu, "relu2"));
    spec.layers.push_back(simple_layer(LayerKind::avg_pool, "pool2"));
    spec.layers.push_back(simple_layer(LayerKind::flatten, "flatten"));
    const std::size_t s = side / 4;
    spec.layers.push_back(linear_layer("fc", 16 * s * s, classes));
    set_first_last_bits(spec, 8);
    return spec;
}

// Walks the layer list and throws if consecutive shapes do not compose.
inline void validate(const ModelSpec& spec) {
    if (spec.layers.empty()) throw ConfigError("model '" + spec.name + "' has an empty layer list");
    if (spec.input_shape.empty()) throw ConfigError("model '" + spec.name + "' has no input shape");
    Shape cur = spec.input_shape;
    std::string prev = "input";
    for (const auto& l : spec.layers) {
        const std::string where = "layer '" + l.name + "' (after '" + prev + "')";
        switch (l.kind) {
            case LayerKind::linear:
                if (cur.size() != 1 || cur[0] != l.in) {
                    throw ShapeError(where + " expects [" + std::to_string(l.in) + "], receives " + shape_str(cur));
                }
                if (l.out == 0) throw ShapeError(where + " has zero outputs");
                cur = {l.out};
                break;
            case LayerKind::conv2d:
                if (cur.size() != 3 || cur[0] != l.in) {
                    throw ShapeError(where + " expects " + std::to_string(l.in) + " channels, receives " +
                                     shape_str(cur));
                }
                if (l.out == 0 || l.kernel == 0 || cur[1] + 2 * l.padding < l.kernel ||
                    cur[2] + 2 * l.padding < l.kernel) {
                    throw ShapeError(where + " kernel does not fit input " + shape_str(cur));
                }
                cur = {l.out, cur[1] + 2 * l.padding - l.kernel + 1, cur[2] + 2 * l.padding - l.kernel + 1};
                break;
            case LayerKind::relu: break;
            case LayerKind::avg_pool:
                if (cur.size() != 3 || l.pool == 0 || cur[1] < l.pool || cur[2] < l.pool) {
                    throw ShapeError(where + " cannot pool " + shape_str(cur));
                }
                cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
                break;
            case LayerKind::flatten: cur = {shape_numel(cur)}; break;
        }
        prev = l.name;
    }
    if (cur.size() != 1 || cur[0] != spec.classes) {
        throw ShapeError("model '" + spec.name + "' ends with " + shape_str(cur) + " but declares " +
                         std::to_string(spec.classes) + " classes");
    }
}

// Builds the graph and draws parameters: weights uniform in +-sqrt(6/(fan_in+fan_out)),
// biases zero. Each layer draws from its own stream, so results depend only on the seed.
inline Model build(const ModelSpec& spec, std::uint64_t seed) {
    validate(spec);
    Model m;
    m.spec = spec;
    m.graph = Graph(spec.input_shape);
    NodeId cur = m.graph.add_input();
    std::size_t layer_index = 0;
    for (const auto& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::linear:
            case LayerKind::conv2d: {
                const bool conv = l.kind == LayerKind::conv2d;
                Shape wshape = conv ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out, l.in};
                const std::size_t receptive = conv ? l.kernel * l.kernel : 1;
                const double bound = std::sqrt(6.0 / static_cast<double>((l.in + l.out) * receptive));
                Tensor w(wshape);
                Rng rng(derive_seed(seed, {tag(Stream::init), layer_index}));
                for (float& v : w.data()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
                LayerInfo info;
                info.name = l.name;
                info.weight = m.params.add(l.name + ".weight", std::move(w));
                if (l.bias) info.bias = m.params.add(l.name + ".bias", Tensor({l.out}));
                info.out_channels = l.out;
                info.quantize_weights = l.quantize_weights;
                info.quantize_activations = l.quantize_activations;
                info.bit_width_override = l.bit_width_override;
                cur = conv ? m.graph.add_conv2d(l.name, cur, info.weight, info.bias, l.padding)
                           : m.graph.add_linear(l.name, cur, info.weight, info.bias);
                info.node = cur;
                m.layers.push_back(std::move(info));
                ++layer_index;
                break;
            }
            case LayerKind::relu: cur = m.graph.add_unary(Op::relu, l.name, cur); break;
            case LayerKind::avg_pool: cur = m.graph.add_avg_pool(l.name, cur, l.pool); break;
            case LayerKind::flatten: cur = m.graph.add_unary(Op::flatten, l.name, cur); break;
        }
    }
    return m;
}

} // namespace dnq
