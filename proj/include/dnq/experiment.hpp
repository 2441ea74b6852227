#pragma once

#include <string>

#include "config.hpp"
#include "datasets.hpp"
#include "models.hpp"

namespace dnq {

struct ExperimentData {
    LabeledDataset train;
    LabeledDataset test;
    LabeledDataset calib;
};

// Train/test splits plus the calibration subset drawn from train. MLPs see flattened images.
inline ExperimentData load_data(const RunConfig& c) {
    ExperimentData d;
    if (c.data.source == "blobs") {
        BlobsConfig b;
        b.classes = c.data.classes;
        b.per_class = c.data.per_class;
        b.dim = c.data.dim;
        b.spread = c.data.spread;
        b.seed = c.data.seed;
        d.train = synth_blobs(b, 0);
        b.per_class = c.data.test_per_class;
        d.test = synth_blobs(b, 1);
        if (c.model.arch == "cnn") throw ConfigError("model.arch = cnn needs image data (data.source = idx)");
    } else {
        d.train = load_idx(c.data.train_images, c.data.train_labels, c.data.classes);
        d.test = load_idx(c.data.test_images, c.data.test_labels, c.data.classes);
        d.train.split = "train";
        d.test.split = "test";
        if (d.train.sample_size() != d.test.sample_size()) throw DataError("train and test images differ in size");
        d.test.classes = d.train.classes = std::max(d.train.classes, d.test.classes);
        if (c.model.arch == "mlp") {
            d.train = flattened(std::move(d.train));
            d.test = flattened(std::move(d.test));
        }
    }
    check_dataset(d.train);
    check_dataset(d.test);
    d.calib = sample_calibration(d.train, c.quant.calib_size, c.data.seed);
    return d;
}

// The presets pin first/last layers at 8 bits; `first_last_bits = none` lifts that.
inline ModelSpec model_spec(const RunConfig& c, const LabeledDataset& train) {
    ModelSpec spec;
    if (c.model.arch == "mlp") {
        spec = toy_mlp(train.sample_size(), c.model.hidden, train.classes);
    } else {
        const Shape& s = train.inputs.shape();
        if (s.size() != 4 || s[2] != s[3]) throw DataError("cnn needs square [N, C, H, W] images");
        spec = toy_cnn(s[1], s[2], train.classes);
    }
    if (c.model.first_last_bits) {
        set_first_last_bits(spec, *c.model.first_last_bits);
    } else {
        for (auto& l : spec.layers) l.bit_width_override.reset();
    }
    return spec;
}

} // namespace dnq
