#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace dnq {

enum class Granularity { per_tensor, per_channel };

inline bool valid_bits(int bits) noexcept { return bits == 2 || bits == 3 || bits == 4 || bits == 8; }

inline void check_bits(int bits) {
    if (!valid_bits(bits)) throw ConfigError("bit-width must be one of 2, 3, 4, 8 (got " + std::to_string(bits) + ")");
}

inline std::int32_t qmax_for(int bits) noexcept { return (std::int32_t{1} << bits) - 1; }

// Affine quantization parameters: x_int = clip(round(x / s) + z, 0, 2^q - 1),
// x_hat = (x_int - z) * s. One (s, z) pair per channel, or a single pair.
struct QuantParams {
    std::vector<float> scale;
    std::vector<std::int32_t> zero_point;
    int bits = 8;
    Granularity granularity = Granularity::per_tensor;
    std::size_t axis = 0;

    std::size_t groups() const noexcept { return scale.size(); }
    std::int32_t qmax() const noexcept { return qmax_for(bits); }
};

struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> data;
};

namespace detail {

// Number of contiguous elements per channel step along `axis`.
inline std::size_t inner_size(const Shape& shape, std::size_t axis) {
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return inner;
}

inline void check_compatible(const Shape& shape, const QuantParams& p) {
    check_bits(p.bits);
    if (p.scale.empty() || p.scale.size() != p.zero_point.size()) {
        throw ConfigError("quantization params need matching, non-empty scale and zero-point lists");
    }
    if (p.granularity == Granularity::per_tensor) {
        if (p.scale.size() != 1) throw ConfigError("per-tensor params must hold exactly one group");
    } else {
        if (p.axis >= shape.size() || shape[p.axis] != p.scale.size()) {
            throw ShapeError("per-channel params with " + std::to_string(p.scale.size()) +
                             " groups do not fit tensor " + shape_str(shape) + " on axis " + std::to_string(p.axis));
        }
    }
    for (std::size_t g = 0; g < p.scale.size(); ++g) {
        if (!(p.scale[g] > 0.0f) || !std::isfinite(p.scale[g])) throw ConfigError("quantization scale must be positive");
        if (p.zero_point[g] < 0 || p.zero_point[g] > p.qmax()) throw ConfigError("zero-point outside the integer grid");
    }
}

template <typename F>
void for_each_group(const Shape& shape, const QuantParams& p, std::size_t n, F&& f) {
    if (p.granularity == Granularity::per_tensor) {
        for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0});
        return;
    }
    const std::size_t inner = inner_size(shape, p.axis);
    const std::size_t channels = shape[p.axis];
    for (std::size_t i = 0; i < n; ++i) f(i, (i / inner) % channels);
}

inline std::int32_t quantize_one(double x, double s, std::int32_t z, std::int32_t qmax) {
    // std::round rounds halves away from zero.
    const double v = std::round(x / s) + z;
    return static_cast<std::int32_t>(std::clamp(v, 0.0, static_cast<double>(qmax)));
}

inline float dequantize_one(std::int32_t q, double s, std::int32_t z) {
    return static_cast<float>(static_cast<double>(q - z) * s);
}

} // namespace detail

// Scale and zero-point from an observed [lo, hi] range.
// s = (hi - lo) / (2^q - 1); z = round(q_max - hi / s), clamped to the grid.
// A degenerate range (lo == hi == c) becomes s = 2^-16, z = 2^(q-1) when c == 0;
// otherwise the range is widened to include zero so that c stays exactly representable.
inline void range_params(double lo, double hi, int bits, float& scale, std::int32_t& zero_point) {
    const std::int32_t qmax = qmax_for(bits);
    if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw DataError("cannot calibrate a non-finite range");
    if (lo == hi) {
        if (lo == 0.0) {
            scale = 0x1.0p-16f;
            zero_point = std::int32_t{1} << (bits - 1);
            return;
        }
        lo = std::min(lo, 0.0);
        hi = std::max(hi, 0.0);
    }
    scale = static_cast<float>((hi - lo) / qmax);
    if (!(scale > 0.0f)) scale = std::numeric_limits<float>::min();
    const double z = std::round(qmax - hi / static_cast<double>(scale));
    zero_point = static_cast<std::int32_t>(std::clamp(z, 0.0, static_cast<double>(qmax)));
}

// Min-max calibration. Per-channel groups run along `axis`.
inline QuantParams calibrate_minmax(const Tensor& x, int bits, Granularity granularity, std::size_t axis = 0) {
    check_bits(bits);
    if (x.empty()) throw DataError("cannot calibrate an empty tensor");
    QuantParams p;
    p.bits = bits;
    p.granularity = granularity;
    p.axis = axis;
    std::size_t groups = 1;
    if (granularity == Granularity::per_channel) {
        if (axis >= x.rank()) throw ShapeError("channel axis out of range for " + shape_str(x.shape()));
        groups = x.dim(axis);
    }
    std::vector<double> lo(groups, std::numeric_limits<double>::infinity());
    std::vector<double> hi(groups, -std::numeric_limits<double>::infinity());
    p.scale.resize(groups);
    p.zero_point.resize(groups);
    detail::for_each_group(x.shape(), p, x.size(), [&](std::size_t i, std::size_t g) {
        lo[g] = std::min<double>(lo[g], x[i]);
        hi[g] = std::max<double>(hi[g], x[i]);
    });
    for (std::size_t g = 0; g < groups; ++g) range_params(lo[g], hi[g], bits, p.scale[g], p.zero_point[g]);
    return p;
}

inline IntTensor quantize(const Tensor& x, const QuantParams& p) {
    detail::check_compatible(x.shape(), p);
    IntTensor out{x.shape(), std::vector<std::int32_t>(x.size())};
    const std::int32_t qmax = p.qmax();
    detail::for_each_group(x.shape(), p, x.size(), [&](std::size_t i, std::size_t g) {
        out.data[i] = detail::quantize_one(x[i], p.scale[g], p.zero_point[g], qmax);
    });
    return out;
}

inline Tensor dequantize(const IntTensor& q, const QuantParams& p) {
    detail::check_compatible(q.shape, p);
    Tensor out(q.shape);
    detail::for_each_group(q.shape, p, q.data.size(), [&](std::size_t i, std::size_t g) {
        out[i] = detail::dequantize_one(q.data[i], p.scale[g], p.zero_point[g]);
    });
    return out;
}

// Quantize-then-dequantize in place.
inline void fake_quantize_inplace(Tensor& x, const QuantParams& p) {
    detail::check_compatible(x.shape(), p);
    const std::int32_t qmax = p.qmax();
    detail::for_each_group(x.shape(), p, x.size(), [&](std::size_t i, std::size_t g) {
        const double s = p.scale[g];
        const std::int32_t z = p.zero_point[g];
        x[i] = detail::dequantize_one(detail::quantize_one(x[i], s, z, qmax), s, z);
    });
}

inline Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
    Tensor out = x;
    fake_quantize_inplace(out, p);
    return out;
}

// Representable interval [dequant(0), dequant(2^q - 1)] of one group.
inline std::pair<double, double> grid_range(const QuantParams& p, std::size_t group) {
    const double s = p.scale.at(group);
    const double z = p.zero_point.at(group);
    return {(0 - z) * s, (p.qmax() - z) * s};
}

} // namespace dnq
