#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "flatness.hpp"
#include "quantizer.hpp"
#include "trainer.hpp"

namespace dnq {

struct DataConfig {
    std::string source = "blobs";  // blobs | idx
    std::size_t classes = 10;
    std::size_t per_class = 200;
    std::size_t test_per_class = 100;
    std::size_t dim = 32;
    double spread = 1.0;
    std::uint64_t seed = 0;  // data seed, independent of the training seed
    std::string train_images, train_labels, test_images, test_labels;
};

struct ModelConfig {
    std::string arch = "mlp";  // mlp | cnn
    std::vector<std::size_t> hidden = {128, 128};
    std::optional<int> first_last_bits = 8;
};

struct QuantConfig {
    int weight_bits = 4;
    int act_bits = 4;
    std::size_t calib_size = 100;
    std::vector<std::pair<int, int>> eval_bits = {{8, 8}, {4, 4}, {2, 2}};
};

struct AblateConfig {
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    bool dry_run = false;  // one epoch per stage, for plumbing checks
};

struct RunConfig {
    std::string preset = "paper";  // paper | toy
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    QuantConfig quant;
    SharpnessConfig probe;
    AblateConfig ablate;

    // Training settings with the noise-measurement precision taken from [quant]/[model].
    TrainConfig trainer_config() const {
        TrainConfig t = train;
        t.weight_bits = quant.weight_bits;
        t.act_bits = quant.act_bits;
        t.first_last_bits = model.first_last_bits;
        return t;
    }
};

// Sets all epoch counts from the named preset: "paper" (400/200/50/300/300) or
// "toy" (each divided by 10).
inline void apply_preset(RunConfig& c, const std::string& name) {
    std::size_t div = 1;
    if (name == "toy") {
        div = 10;
    } else if (name != "paper") {
        throw ConfigError("unknown preset '" + name + "' (expected paper or toy)");
    }
    c.preset = name;
    c.train.epochs = 400 / div;
    c.train.warmup_epochs = 200 / div;
    c.train.ramp_epochs = 50 / div;
    c.train.swa_start = 300 / div;
    c.train.cosine_epochs = 300 / div;
}

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) throw ConfigError(key + ": cannot parse '" + text + "' as a number");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
    return out;
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;

    std::string full() const { return section.empty() ? key : section + "." + key; }
};

inline Field size_field(std::string sec, std::string key, std::size_t& v) {
    const std::string name = sec + "." + key;
    return {sec, key, [&v, name](const std::string& s) { v = parse_number<std::size_t>(name, s); },
            [&v] { return std::to_string(v); }};
}

inline Field u64_field(std::string sec, std::string key, std::uint64_t& v) {
    const std::string name = sec + "." + key;
    return {sec, key, [&v, name](const std::string& s) { v = parse_number<std::uint64_t>(name, s); },
            [&v] { return std::to_string(v); }};
}

inline Field int_field(std::string sec, std::string key, int& v) {
    const std::string name = sec + "." + key;
    return {sec, key, [&v, name](const std::string& s) { v = parse_number<int>(name, s); },
            [&v] { return std::to_string(v); }};
}

inline Field double_field(std::string sec, std::string key, double& v) {
    const std::string name = sec + "." + key;
    return {sec, key, [&v, name](const std::string& s) { v = parse_number<double>(name, s); },
            [&v] { return format_double(v); }};
}

inline Field bool_field(std::string sec, std::string key, bool& v) {
    const std::string name = sec + "." + key;
    return {sec, key, [&v, name](const std::string& s) { v = parse_bool(name, s); },
            [&v] { return std::string(v ? "true" : "false"); }};
}

inline Field string_field(std::string sec, std::string key, std::string& v) {
    return {sec, key, [&v](const std::string& s) { v = s; }, [&v] { return v; }};
}

inline Field optional_bits_field(std::string sec, std::string key, std::optional<int>& v) {
    const std::string name = sec + "." + key;
    return {sec, key,
            [&v, name](const std::string& s) {
                if (s == "none") {
                    v.reset();
                } else {
                    v = parse_number<int>(name, s);
                }
            },
            [&v] { return v ? std::to_string(*v) : std::string("none"); }};
}

// Every documented key, in serialization order. `preset` must stay first so explicit
// epoch counts override it.
inline std::vector<Field> schema(RunConfig& c) {
    std::vector<Field> f;
    f.push_back({"", "preset", [&c](const std::string& s) { apply_preset(c, s); }, [&c] { return c.preset; }});

    auto& d = c.data;
    f.push_back(string_field("data", "source", d.source));
    f.push_back(size_field("data", "classes", d.classes));
    f.push_back(size_field("data", "per_class", d.per_class));
    f.push_back(size_field("data", "test_per_class", d.test_per_class));
    f.push_back(size_field("data", "dim", d.dim));
    f.push_back(double_field("data", "spread", d.spread));
    f.push_back(u64_field("data", "seed", d.seed));
    f.push_back(string_field("data", "train_images", d.train_images));
    f.push_back(string_field("data", "train_labels", d.train_labels));
    f.push_back(string_field("data", "test_images", d.test_images));
    f.push_back(string_field("data", "test_labels", d.test_labels));

    auto& m = c.model;
    f.push_back(string_field("model", "arch", m.arch));
    f.push_back({"model", "hidden",
                 [&m](const std::string& s) {
                     m.hidden.clear();
                     for (const auto& item : split_list(s)) m.hidden.push_back(parse_number<std::size_t>("model.hidden", item));
                 },
                 [&m] { return join<std::size_t>(m.hidden, [](const std::size_t& x) { return std::to_string(x); }); }});
    f.push_back(optional_bits_field("model", "first_last_bits", m.first_last_bits));

    auto& t = c.train;
    f.push_back(size_field("train", "epochs", t.epochs));
    f.push_back(size_field("train", "warmup_epochs", t.warmup_epochs));
    f.push_back(size_field("train", "ramp_epochs", t.ramp_epochs));
    f.push_back(size_field("train", "swa_start", t.swa_start));
    f.push_back(size_field("train", "cosine_epochs", t.cosine_epochs));
    f.push_back(double_field("train", "lr", t.lr));
    f.push_back(double_field("train", "swa_lr", t.swa_lr));
    f.push_back(double_field("train", "momentum", t.momentum));
    f.push_back(bool_field("train", "nesterov", t.nesterov));
    f.push_back(double_field("train", "weight_decay", t.weight_decay));
    f.push_back(size_field("train", "batch_size", t.batch_size));
    f.push_back(double_field("train", "label_smoothing", t.label_smoothing));
    f.push_back(double_field("train", "beta_w", t.beta_w));
    f.push_back(double_field("train", "beta_a", t.beta_a));
    f.push_back(double_field("train", "p_drop", t.p_drop));
    f.push_back(u64_field("train", "seed", t.seed));
    f.push_back(bool_field("train", "wqer", t.wqer));
    f.push_back(bool_field("train", "aqer", t.aqer));

    auto& q = c.quant;
    f.push_back(int_field("quant", "weight_bits", q.weight_bits));
    f.push_back(int_field("quant", "act_bits", q.act_bits));
    f.push_back(size_field("quant", "calib_size", q.calib_size));
    f.push_back({"quant", "eval_bits",
                 [&q](const std::string& s) {
                     q.eval_bits.clear();
                     for (const auto& item : split_list(s)) {
                         const auto slash = item.find('/');
                         if (slash == std::string::npos) throw ConfigError("quant.eval_bits: expected w/a pairs, got '" + item + "'");
                         q.eval_bits.emplace_back(parse_number<int>("quant.eval_bits", item.substr(0, slash)),
                                                  parse_number<int>("quant.eval_bits", item.substr(slash + 1)));
                     }
                 },
                 [&q] {
                     return join<std::pair<int, int>>(q.eval_bits, [](const std::pair<int, int>& p) {
                         return std::to_string(p.first) + "/" + std::to_string(p.second);
                     });
                 }});

    auto& p = c.probe;
    f.push_back(size_field("probe", "probe_size", p.probe_size));
    f.push_back(size_field("probe", "trace_samples", p.trace_samples));
    f.push_back({"probe", "sigmas",
                 [&p](const std::string& s) {
                     p.sigmas.clear();
                     for (const auto& item : split_list(s)) p.sigmas.push_back(parse_number<double>("probe.sigmas", item));
                 },
                 [&p] { return join<double>(p.sigmas, [](const double& x) { return format_double(x); }); }});
    f.push_back(size_field("probe", "draws", p.draws));
    f.push_back(double_field("probe", "label_smoothing", p.label_smoothing));

    auto& a = c.ablate;
    f.push_back({"ablate", "seeds",
                 [&a](const std::string& s) {
                     a.seeds.clear();
                     for (const auto& item : split_list(s)) a.seeds.push_back(parse_number<std::uint64_t>("ablate.seeds", item));
                 },
                 [&a] { return join<std::uint64_t>(a.seeds, [](const std::uint64_t& x) { return std::to_string(x); }); }});
    f.push_back(bool_field("ablate", "dry_run", a.dry_run));
    return f;
}

} // namespace config_detail

// Semantic checks beyond per-key parsing.
inline void validate(const RunConfig& c) {
    if (c.data.source != "blobs" && c.data.source != "idx") throw ConfigError("data.source must be blobs or idx");
    if (c.data.source == "idx" && (c.data.train_images.empty() || c.data.train_labels.empty() ||
                                   c.data.test_images.empty() || c.data.test_labels.empty())) {
        throw ConfigError("data.source = idx needs data.train_images, data.train_labels, data.test_images and data.test_labels");
    }
    if (c.data.source == "blobs" && (c.data.classes < 2 || c.data.per_class == 0 || c.data.test_per_class == 0 || c.data.dim == 0)) {
        throw ConfigError("blobs need data.classes >= 2 and positive data.per_class, data.test_per_class, data.dim");
    }
    if (!(c.data.spread >= 0.0)) throw ConfigError("data.spread must be non-negative");
    if (c.model.arch != "mlp" && c.model.arch != "cnn") throw ConfigError("model.arch must be mlp or cnn");
    if (c.model.first_last_bits) check_bits(*c.model.first_last_bits);
    for (std::size_t h : c.model.hidden) {
        if (h == 0) throw ConfigError("model.hidden sizes must be positive");
    }
    check_bits(c.quant.weight_bits);
    check_bits(c.quant.act_bits);
    if (c.quant.calib_size == 0) throw ConfigError("quant.calib_size must be at least 1");
    if (c.quant.eval_bits.empty()) throw ConfigError("quant.eval_bits must list at least one w/a pair");
    for (const auto& [w, a] : c.quant.eval_bits) {
        check_bits(w);
        check_bits(a);
    }
    if (c.probe.probe_size == 0 || c.probe.draws == 0) throw ConfigError("probe.probe_size and probe.draws must be positive");
    if (c.probe.trace_samples == 1) throw ConfigError("probe.trace_samples must be 0 (off) or at least 2");
    for (double s : c.probe.sigmas) {
        if (!(s >= 0.0)) throw ConfigError("probe.sigmas must be non-negative");
    }
    if (!(c.probe.label_smoothing >= 0.0 && c.probe.label_smoothing < 1.0)) {
        throw ConfigError("probe.label_smoothing must lie in [0, 1)");
    }
    c.trainer_config().validate();
}

// Parses `key = value` lines grouped under `[section]` headers; `#` and `;` start comments.
// Unknown or repeated keys are errors.
inline RunConfig parse_config(std::istream& in, std::optional<std::string> preset = std::nullopt) {
    RunConfig c;
    apply_preset(c, preset.value_or("paper"));
    auto fields = config_detail::schema(c);
    std::map<std::string, const config_detail::Field*> by_name;
    for (const auto& f : fields) by_name[f.full()] = &f;

    std::vector<std::pair<const config_detail::Field*, std::string>> assignments;
    std::map<std::string, std::size_t> seen;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header");
            section = config_detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        const std::string key = config_detail::trim(line.substr(0, eq));
        const std::string value = config_detail::trim(line.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        const auto it = by_name.find(full);
        if (it == by_name.end()) throw ConfigError(where + "unknown key '" + full + "'");
        if (auto [pos, fresh] = seen.emplace(full, lineno); !fresh) {
            throw ConfigError(where + "key '" + full + "' already set on line " + std::to_string(pos->second));
        }
        assignments.emplace_back(it->second, value);
    }
    // The preset applies before everything else regardless of where it appears.
    for (const auto& [f, v] : assignments) {
        if (f->full() == "preset" && !preset) f->set(v);
    }
    for (const auto& [f, v] : assignments) {
        if (f->full() != "preset") f->set(v);
    }
    validate(c);
    return c;
}

inline RunConfig parse_config_string(const std::string& text, std::optional<std::string> preset = std::nullopt) {
    std::istringstream is(text);
    return parse_config(is, std::move(preset));
}

// Every key with its resolved value.
inline std::string serialize_config(const RunConfig& c) {
    RunConfig copy = c;
    std::string out, section;
    for (const auto& f : config_detail::schema(copy)) {
        if (f.section != section) {
            section = f.section;
            out += "\n[" + section + "]\n";
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

} // namespace dnq
