#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dnq {

struct LabeledDataset {
    Tensor inputs;  // [N, ...]
    std::vector<std::int32_t> labels;
    std::size_t classes = 0;
    std::string provenance;  // "blobs:seed=..", "idx:<path>", ...
    std::uint64_t checksum = 0;
    std::string split = "train";  // train | test | calib

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t sample_size() const { return inputs.size() / inputs.dim(0); }
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Content hash over shape, little-endian float bits and labels.
inline std::uint64_t dataset_checksum(const LabeledDataset& ds) {
    std::vector<std::uint8_t> bytes;
    auto put = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    for (std::size_t d : ds.inputs.shape()) put(static_cast<std::uint32_t>(d));
    for (float v : ds.inputs.data()) put(std::bit_cast<std::uint32_t>(v));
    for (std::int32_t l : ds.labels) put(static_cast<std::uint32_t>(l));
    return fnv1a(bytes);
}

inline void check_dataset(const LabeledDataset& ds) {
    if (ds.labels.empty() || ds.inputs.empty() || ds.inputs.dim(0) != ds.labels.size()) {
        throw DataError("dataset must hold at least one sample with one label per sample");
    }
    for (std::int32_t l : ds.labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= ds.classes) throw DataError("label out of range");
    }
    if (!ds.inputs.all_finite()) throw DataError("dataset contains non-finite inputs");
}

struct BlobsConfig {
    std::size_t classes = 10;
    std::size_t per_class = 500;
    std::size_t dim = 32;
    double spread = 1.0;
    std::uint64_t seed = 0;
};

// Gaussian blobs: class c ~ Normal(center_c, spread^2 I). Centers (standard normal
// vectors) depend only on the seed, so every split shares them; `split` selects an
// independent sample stream (0 = train, 1 = test, ...).
inline LabeledDataset synth_blobs(const BlobsConfig& cfg, std::uint64_t split = 0) {
    if (cfg.classes < 2) throw ConfigError("blobs need at least two classes");
    if (cfg.dim < 1 || cfg.per_class < 1) throw ConfigError("blobs need dim >= 1 and per_class >= 1");
    if (!(cfg.spread >= 0.0)) throw ConfigError("blob spread must be non-negative");
    Rng centers_rng(derive_seed(cfg.seed, {tag(Stream::data), 0}));
    std::vector<double> centers(cfg.classes * cfg.dim);
    for (double& c : centers) c = centers_rng.normal();

    Rng rng(derive_seed(cfg.seed, {tag(Stream::data), 1 + split}));
    const std::size_t n = cfg.classes * cfg.per_class;
    LabeledDataset ds;
    ds.inputs = Tensor({n, cfg.dim});
    ds.labels.resize(n);
    ds.classes = cfg.classes;
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        for (std::size_t k = 0; k < cfg.per_class; ++k) {
            const std::size_t i = c * cfg.per_class + k;
            ds.labels[i] = static_cast<std::int32_t>(c);
            for (std::size_t d = 0; d < cfg.dim; ++d) {
                ds.inputs[i * cfg.dim + d] = static_cast<float>(centers[c * cfg.dim + d] + cfg.spread * rng.normal());
            }
        }
    }
    ds.provenance = "blobs:classes=" + std::to_string(cfg.classes) + ",per_class=" + std::to_string(cfg.per_class) +
                    ",dim=" + std::to_string(cfg.dim) + ",spread=" + std::to_string(cfg.spread) +
                    ",seed=" + std::to_string(cfg.seed) + ",split=" + std::to_string(split);
    ds.split = split == 0 ? "train" : "test";
    ds.checksum = dataset_checksum(ds);
    return ds;
}

// IDX decoding errors, one kind per failure mode.
class IdxError : public DataError {
public:
    enum class Kind { bad_magic, count_mismatch, truncated, io };
    IdxError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

namespace detail {

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IdxError(IdxError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

} // namespace detail

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
// Pixels are scaled to [0, 1]; inputs have shape [N, 1, rows, cols].
inline LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                               std::size_t classes = 10) {
    using K = IdxError::Kind;
    const auto img = detail::read_file(images);
    const auto lab = detail::read_file(labels);
    if (img.size() < 16) throw IdxError(K::truncated, "image file " + images.string() + " is truncated");
    if (lab.size() < 8) throw IdxError(K::truncated, "label file " + labels.string() + " is truncated");
    if (detail::be32(img, 0) != 0x00000803) throw IdxError(K::bad_magic, "bad IDX image magic in " + images.string());
    if (detail::be32(lab, 0) != 0x00000801) throw IdxError(K::bad_magic, "bad IDX label magic in " + labels.string());
    const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
    const std::size_t nl = detail::be32(lab, 4);
    if (n != nl) {
        throw IdxError(K::count_mismatch, "image count " + std::to_string(n) + " != label count " + std::to_string(nl));
    }
    if (n == 0 || rows == 0 || cols == 0) throw IdxError(K::truncated, "IDX files hold no samples");
    if (img.size() < 16 + n * rows * cols) throw IdxError(K::truncated, "image data truncated in " + images.string());
    if (lab.size() < 8 + n) throw IdxError(K::truncated, "label data truncated in " + labels.string());

    LabeledDataset ds;
    ds.inputs = Tensor({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) ds.inputs[i] = static_cast<float>(img[16 + i] / 255.0);
    ds.labels.resize(n);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max<std::size_t>(max_label, lab[8 + i]);
    }
    ds.classes = std::max(classes, max_label + 1);
    const std::uint64_t sum = fnv1a(lab, fnv1a(img));
    ds.checksum = sum;
    ds.provenance = "idx:" + images.string() + "," + labels.string();
    return ds;
}

inline void write_idx(const LabeledDataset& ds, const std::filesystem::path& images,
                      const std::filesystem::path& labels) {
    if (ds.inputs.rank() < 3) throw DataError("IDX export needs [N, (1,) rows, cols] inputs");
    const std::size_t n = ds.size();
    const std::size_t rows = ds.inputs.dim(ds.inputs.rank() - 2), cols = ds.inputs.dim(ds.inputs.rank() - 1);
    std::vector<std::uint8_t> img, lab;
    detail::put_be32(img, 0x00000803);
    detail::put_be32(img, static_cast<std::uint32_t>(n));
    detail::put_be32(img, static_cast<std::uint32_t>(rows));
    detail::put_be32(img, static_cast<std::uint32_t>(cols));
    for (float v : ds.inputs.data()) img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    detail::put_be32(lab, 0x00000801);
    detail::put_be32(lab, static_cast<std::uint32_t>(n));
    for (std::int32_t l : ds.labels) lab.push_back(static_cast<std::uint8_t>(l));
    std::ofstream(images, std::ios::binary).write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    std::ofstream(labels, std::ios::binary).write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
}

// Samples in the given order.
inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    if (indices.empty()) throw DataError("subset must not be empty");
    const std::size_t per = ds.sample_size();
    Shape shape = ds.inputs.shape();
    shape[0] = indices.size();
    LabeledDataset out;
    out.inputs = Tensor(shape);
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= ds.size()) throw DataError("subset index out of range");
        std::copy_n(ds.inputs.data().begin() + i * per, per, out.inputs.data().begin() + k * per);
        out.labels.push_back(ds.labels[i]);
    }
    out.classes = ds.classes;
    out.split = ds.split;
    out.provenance = ds.provenance;
    out.checksum = dataset_checksum(out);
    return out;
}

// Seeded permutation of [0, n) (Fisher-Yates).
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

// Uniform sample without replacement; only training data may be sampled.
inline LabeledDataset sample_calibration(const LabeledDataset& ds, std::size_t size, std::uint64_t seed) {
    if (ds.split != "train") throw DataError("calibration samples must come from training data, not '" + ds.split + "'");
    if (size == 0 || size > ds.size()) {
        throw DataError("calibration size " + std::to_string(size) + " exceeds dataset size " + std::to_string(ds.size()));
    }
    Rng rng(derive_seed(seed, {tag(Stream::calibration)}));
    std::vector<std::size_t> idx = permutation(ds.size(), rng);
    idx.resize(size);
    LabeledDataset out = subset(ds, idx);
    out.split = "calib";
    out.provenance = ds.provenance + ";calib:size=" + std::to_string(size) + ",seed=" + std::to_string(seed);
    return out;
}

// Inputs reshaped to [N, prod(sample)] (for MLPs on image data).
inline LabeledDataset flattened(LabeledDataset ds) {
    ds.inputs = ds.inputs.reshaped({ds.size(), ds.sample_size()});
    return ds;
}

// Dataset as a checkpoint container ("inputs", "labels" as floats), for fixture pinning.
inline Checkpoint export_dataset(const LabeledDataset& ds) {
    Checkpoint c;
    c.add("inputs", ds.inputs);
    std::vector<float> labels(ds.labels.begin(), ds.labels.end());
    c.add("labels", Tensor({ds.labels.size()}, std::move(labels)));
    return c;
}

} // namespace dnq
