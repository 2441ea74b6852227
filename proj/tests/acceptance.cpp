// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero on any failure.
//   acceptance --dnq <binary> --ablate-config <ini> --train-config <ini> --work-dir <dir> [--only N]

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "dnq/dnq.hpp"

using namespace dnq;
namespace fs = std::filesystem;

namespace {

struct Args {
    std::string dnq;
    std::string ablate_config;
    std::string train_config;
    fs::path work = "acceptance_work";
    std::optional<int> only;
};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream ss;
    ss.precision(precision);
    ss << v;
    return ss.str();
}

// ---- 1: quantizer oracles --------------------------------------------------------------

Outcome quantizer_oracles() {
    Outcome o{true, ""};
    std::size_t failures = 0;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok && failures++ < 3) o.detail += what + "; ";
        o.pass = o.pass && ok;
    };
    {
        const auto p = calibrate_minmax(Tensor({3}, {-0.5f, 0.2f, 1.0f}), 4, Granularity::per_tensor);
        check(std::abs(p.scale[0] - 0.1f) <= 1e-7f && p.zero_point[0] == 5, "s=0.1,z=5 calibration");
        check(quantize(Tensor({1}, {0.23f}), p).data[0] == 7, "q(0.23)=7");
        check(quantize(Tensor({1}, {2.0f}), p).data[0] == 15, "q(2.0) clamps to 15");
        check(quantize(Tensor({1}, {-3.0f}), p).data[0] == 0, "q(-3) clamps to 0");
        check(std::abs(fake_quantize(Tensor({1}, {0.23f}), p)[0] - 0.2f) <= 1e-7f, "fq(0.23)=0.2");
    }
    Rng rng(20240601);
    const std::array<int, 4> widths = {2, 3, 4, 8};
    const std::size_t tensors = 10000;
    for (std::size_t t = 0; t < tensors; ++t) {
        const int bits = widths[t % 4];
        const auto gran = (t / 4) % 2 ? Granularity::per_channel : Granularity::per_tensor;
        const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(16);
        Tensor x({rows, cols});
        const double scale = std::exp(3.0 * rng.normal());
        const double shift = rng.bernoulli(0.3) ? scale * rng.normal() * 3.0 : 0.0;
        for (float& v : x.data()) v = static_cast<float>(shift + scale * rng.normal());
        if (t % 97 == 0) std::fill(x.data().begin(), x.data().end(), static_cast<float>(shift));
        const auto p = calibrate_minmax(x, bits, gran, 0);
        const Tensor y = fake_quantize(x, p);
        check(fake_quantize(y, p) == y, "idempotence at tensor " + std::to_string(t));
        const auto q = quantize(x, p);
        for (std::size_t g = 0; g < (gran == Granularity::per_channel ? rows : 1); ++g) {
            const auto [lo, hi] = grid_range(p, g);
            const std::size_t begin = gran == Granularity::per_channel ? g * cols : 0;
            const std::size_t end = gran == Granularity::per_channel ? begin + cols : x.size();
            std::vector<std::pair<float, std::int32_t>> pairs;
            for (std::size_t i = begin; i < end; ++i) {
                if (x[i] >= lo && x[i] <= hi) {
                    // s/2 plus the rounding of the float result itself.
                    const double bound = p.scale[g] / 2.0 + 4.0 * std::numeric_limits<float>::epsilon() *
                                                                std::max<double>(std::abs(x[i]), p.scale[g]);
                    check(std::abs(static_cast<double>(y[i]) - x[i]) <= bound,
                          "error bound at tensor " + std::to_string(t));
                }
                pairs.emplace_back(x[i], q.data[i]);
            }
            std::sort(pairs.begin(), pairs.end());
            for (std::size_t i = 1; i < pairs.size(); ++i) {
                check(pairs[i - 1].second <= pairs[i].second, "monotonicity at tensor " + std::to_string(t));
            }
        }
    }
    o.detail = std::to_string(tensors) + " tensors, q in {2,3,4,8}, both granularities" +
               (failures ? ", " + std::to_string(failures) + " violations: " + o.detail : "");
    return o;
}

// ---- 2: gradient correctness --------------------------------------------------------------

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (float& v : t.data()) v = static_cast<float>(scale * rng.normal());
    return t;
}

// Image graphs cover every op: conv -> relu -> pool -> flatten -> two linear heads, their
// elementwise product summed, times the sum of a squared free parameter.
void image_graph(Rng& rng, Graph& g, ParameterSet& ps, Tensor& input) {
    const std::size_t c = 1 + rng.below(2), o = 1 + rng.below(3);
    const bool pad = rng.bernoulli(0.5);
    const std::size_t side = pad ? 4 : 5;  // conv output is 4x4 either way (3x3 pad 1, or 2x2 pad 0)
    const std::size_t k = pad ? 3 : 2;
    g = Graph({c, side, side});
    const auto x = g.add_input();
    const auto w = ps.add("conv.w", random_tensor({o, c, k, k}, rng, 0.5));
    std::optional<std::size_t> b;
    if (rng.bernoulli(0.5)) b = ps.add("conv.b", random_tensor({o}, rng, 0.1));
    const auto conv = g.add_conv2d("conv", x, w, b, pad ? 1 : 0);
    const auto pool = g.add_avg_pool("pool", g.add_unary(Op::relu, "relu", conv), 2);
    const auto flat = g.add_unary(Op::flatten, "flat", pool);
    const std::size_t feat = o * 4, out = 1 + rng.below(3);
    const auto h1 = g.add_linear("head1", flat, ps.add("h1.w", random_tensor({out, feat}, rng, 0.5)),
                                 ps.add("h1.b", random_tensor({out}, rng, 0.1)));
    const auto h2 = g.add_linear("head2", flat, ps.add("h2.w", random_tensor({out, feat}, rng, 0.5)), std::nullopt);
    const auto s1 = g.add_unary(Op::sum, "sum1", g.add_mul("prod", h1, h2));
    const auto p = g.add_param("free", ps.add("free", random_tensor({1 + rng.below(3)}, rng)));
    const auto s2 = g.add_unary(Op::sum, "sum2", g.add_mul("sq", p, p));
    g.add_mul("out", s1, s2);
    input = random_tensor({1 + rng.below(2), c, side, side}, rng);
}

// MLP graphs under the training loss.
void mlp_graph(Rng& rng, Graph& g, ParameterSet& ps, Tensor& input, std::vector<std::int32_t>& labels) {
    const std::size_t in = 2 + rng.below(5), depth = 1 + rng.below(3), classes = 2 + rng.below(3);
    g = Graph({in});
    auto x = g.add_input();
    std::size_t width = in;
    for (std::size_t d = 0; d < depth; ++d) {
        const std::size_t next = d + 1 == depth ? classes : 2 + rng.below(6);
        const std::string n = "fc" + std::to_string(d);
        std::optional<std::size_t> b;
        if (rng.bernoulli(0.7)) b = ps.add(n + ".b", random_tensor({next}, rng, 0.1));
        x = g.add_linear(n, x, ps.add(n + ".w", random_tensor({next, width}, rng, 0.6)), b);
        if (d + 1 < depth) x = g.add_unary(Op::relu, n + ".relu", x);
        width = next;
    }
    const std::size_t batch = 1 + rng.below(4);
    input = random_tensor({batch, in}, rng);
    labels.clear();
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<std::int32_t>(rng.below(classes)));
}

Outcome gradient_correctness() {
    Rng rng(77);
    double worst = 0.0;
    std::size_t checked = 0, failed = 0;
    std::set<Op> covered;
    for (int n = 0; n < 50; ++n) {
        Graph g;
        ParameterSet ps;
        Tensor input;
        GradCheckReport r;
        if (n % 2 == 0) {
            image_graph(rng, g, ps, input);
            r = grad_check(g, ps, input, scalar_output_objective(), 1e-3);
        } else {
            std::vector<std::int32_t> labels;
            mlp_graph(rng, g, ps, input, labels);
            r = grad_check(g, ps, input, cross_entropy_objective(labels, 0.1), 1e-3);
        }
        for (const auto& node : g.nodes()) covered.insert(node.op);
        worst = std::max(worst, r.max_rel_error);
        checked += r.checked;
        if (!r.passed || !(r.max_rel_error < 1e-3)) ++failed;
    }
    const bool all_ops = covered.size() == 9;
    return {failed == 0 && all_ops && checked > 0,
            "50 graphs, " + std::to_string(checked) + " coordinates, max rel error " + fmt(worst) + " (< 1e-3), " +
                std::to_string(covered.size()) + "/9 op kinds" + (failed ? ", " + std::to_string(failed) + " graphs failed" : "")};
}

// ---- 3: differential noise ----------------------------------------------------------------

Outcome differential_noise() {
    NoiseEntry e;
    e.mean = {0.0, 0.05, -0.2, 0.01, 1.0, -0.003, 0.3, 0.0};
    e.var = {1.0, 0.01, 0.04, 1e-4, 0.25, 1e-6, 0.09, 2.0};
    e.initialized = true;
    const std::size_t channels = e.mean.size(), n = 10000;
    const Shape shape = {channels, 1};
    const Tensor w(shape, 0.0f);
    Rng rng(31);
    std::vector<double> sum(channels, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        // Independent (current, previous) pairs: each P_t is a fresh draw of the increment.
        const Tensor cur = sample_weight_noise(e, shape, rng);
        const Tensor prev = sample_weight_noise(e, shape, rng);
        const Tensor moved = differential_perturb(w, cur, prev, 1.0);
        for (std::size_t c = 0; c < channels; ++c) sum[c] += moved[c];
    }
    bool unbiased = true;
    double worst_ratio = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double bound = 4.0 * std::sqrt(e.var[c]) * std::sqrt(2.0 / static_cast<double>(n));
        const double mean = sum[c] / static_cast<double>(n);
        worst_ratio = std::max(worst_ratio, std::abs(mean) / bound);
        unbiased = unbiased && std::abs(mean) <= bound;
    }

    // Telescoping over one 500-step epoch: the accumulated increments equal last - first.
    NoiseState state;
    state.reset({{4, 16}});
    const Tensor first = state.previous[0];
    Rng trng(32);
    NoiseEntry we;
    we.mean = {0.02, -0.01, 0.0, 0.5};
    we.var = {1e-3, 4e-3, 1.0, 1e-5};
    we.initialized = true;
    std::vector<double> total(64, 0.0);
    for (int t = 0; t < 500; ++t) {
        Tensor d = sample_weight_noise(we, {4, 16}, trng);
        for (std::size_t i = 0; i < 64; ++i) total[i] += static_cast<double>(d[i]) - static_cast<double>(state.previous[0][i]);
        state.previous[0] = std::move(d);
    }
    bool telescopes = true;
    for (std::size_t i = 0; i < 64; ++i) {
        telescopes = telescopes && total[i] == static_cast<double>(state.previous[0][i]) - static_cast<double>(first[i]);
    }
    return {unbiased && telescopes, "worst |mean| / (4 sigma sqrt(2/n)) = " + fmt(worst_ratio, 3) +
                                        " over 8 channels x 1e4 samples; telescoping " +
                                        (telescopes ? "bit-exact" : "NOT exact") + " over 500 steps"};
}

// ---- 4: output-error decomposition --------------------------------------------------------

Outcome decomposition() {
    Rng rng(44);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const bool conv = trial % 2;
        const int wb = std::array{2, 3, 4, 8}[rng.below(4)], ab = std::array{2, 3, 4, 8}[rng.below(4)];
        Tensor w, x;
        std::size_t padding = 0;
        if (conv) {
            const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(4), k = 1 + 2 * rng.below(2), side = 3 + rng.below(4);
            padding = rng.below(2);
            w = random_tensor({o, c, k, k}, rng, 0.5);
            x = random_tensor({1 + rng.below(3), c, side, side}, rng);
        } else {
            const std::size_t in = 1 + rng.below(12), out = 1 + rng.below(8);
            w = random_tensor({out, in}, rng, 0.5);
            x = random_tensor({1 + rng.below(5), in}, rng);
        }
        const Tensor wq = fake_quantize(w, calibrate_minmax(w, wb, Granularity::per_channel, 0));
        const Tensor xq = fake_quantize(x, calibrate_minmax(x, ab, Granularity::per_tensor));
        const auto t = decompose_layer_error(w, wq, x, xq, padding);
        double peak = 0.0, res = 0.0;
        for (std::size_t i = 0; i < t.total.size(); ++i) {
            peak = std::max(peak, std::abs(t.total[i]));
            res = std::max(res, std::abs(t.total[i] - (t.aqe[i] + t.wqe[i] + t.second[i])));
        }
        worst = std::max(worst, peak > 0.0 ? res / peak : res);
    }
    return {worst <= 1e-5, "100 random linear/conv layers, worst residual " + fmt(worst, 3) + " relative (<= 1e-5)"};
}

// ---- 5: Stage-1 reduction -----------------------------------------------------------------

Outcome stage1_reduction() {
    BlobsConfig b;
    b.per_class = 100;
    const LabeledDataset train = synth_blobs(b);
    const LabeledDataset calib = sample_calibration(train, 100, 0);
    const ModelSpec spec = toy_mlp(32, {128, 128}, 10);
    TrainConfig cfg;
    cfg.epochs = cfg.warmup_epochs = cfg.cosine_epochs = 3;
    cfg.swa_start = 4;
    cfg.seed = 5;

    Model m = build(spec, cfg.seed);
    Trainer tr(cfg, m, train, calib);
    while (!tr.finished()) tr.run_epoch();
    const ParameterSet got = tr.final_params();

    Model ref = build(spec, cfg.seed);
    SgdNesterov opt({cfg.momentum, cfg.weight_decay, cfg.nesterov});
    const std::size_t n = train.size(), per = train.sample_size();
    for (std::size_t e = 1; e <= cfg.epochs; ++e) {
        Rng shuffle(derive_seed(cfg.seed, {tag(Stream::shuffle), e}));
        const auto order = permutation(n, shuffle);
        const double lr = cosine_lr(e - 1, cfg.lr, cfg.cosine_epochs, cfg.swa_lr);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t bs = std::min(cfg.batch_size, n - start);
            Tensor x({bs, per});
            std::vector<std::int32_t> y(bs);
            for (std::size_t k = 0; k < bs; ++k) {
                std::copy_n(train.inputs.data().begin() + order[start + k] * per, per, x.data().begin() + k * per);
                y[k] = train.labels[order[start + k]];
            }
            const LossOutput l = softmax_cross_entropy(ref.graph.forward(x, ref.params), y, cfg.label_smoothing);
            ref.graph.backward(ref.params, l.grad);
            opt.step(ref.params, lr);
        }
    }
    for (auto& p : ref.params) p.value.drop_grad();
    const bool same = serialize(snapshot(got)) == serialize(snapshot(ref.params));
    return {same, std::string("3 epochs, ") + std::to_string(ref.params.total_count()) + " parameters, " +
                      (same ? "bit-identical" : "DIFFERENT") + " to the plain Nesterov-SGD loop"};
}

// ---- 6: flatness probe calibration ----------------------------------------------------------

Outcome flatness_calibration() {
    auto quadratic = [](std::vector<double> a) {
        return LossFn([a](std::span<const double> w, std::vector<double>* g) {
            if (g) *g = {a[0] * w[0] + a[1] * w[1], a[2] * w[0] + a[3] * w[1]};
            return 0.5 * (a[0] * w[0] * w[0] + (a[1] + a[2]) * w[0] * w[1] + a[3] * w[1] * w[1]);
        });
    };
    const std::vector<double> w0 = {0.3, -0.2};
    Rng r1(1), r2(2);
    const auto diag = hutchinson_trace(quadratic({2, 0, 0, 4}), w0, 30, r1);
    const auto dense = hutchinson_trace(quadratic({2, 1.5, 1.5, 4}), w0, 200, r2);
    const bool diag_ok = std::abs(diag.trace - 6.0) <= 3.0 * diag.stderr_ + 1e-9;
    const bool dense_ok = std::abs(dense.trace - 6.0) <= 3.0 * dense.stderr_;

    // Toy minimum: full-batch training of a small MLP on blobs.
    BlobsConfig b;
    b.classes = 3;
    b.per_class = 100;
    b.dim = 6;
    b.spread = 1.5;
    b.seed = 2;
    const LabeledDataset train = synth_blobs(b);
    Model m = build(toy_mlp(6, {10}, 3), 1);
    TrainConfig cfg;
    cfg.epochs = cfg.cosine_epochs = cfg.warmup_epochs = 30;
    cfg.swa_start = 31;
    cfg.batch_size = 300;
    cfg.lr = 0.2;
    Trainer tr(cfg, m, train, sample_calibration(train, 10, 0));
    while (!tr.finished()) tr.run_epoch();
    m.params = tr.final_params();
    SharpnessConfig sc;
    sc.probe_size = 300;
    sc.trace_samples = 0;
    sc.sigmas = {0.001, 0.002, 0.005, 0.01};
    const auto rep = probe_sharpness(m, train, sc, 0);
    const double slope = loglog_slope(rep.curve, 1e-3, 1e-2);
    const bool slope_ok = slope >= 1.7 && slope <= 2.3;
    return {diag_ok && dense_ok && slope_ok,
            "trace diag(2,4) " + fmt(diag.trace) + " +- " + fmt(diag.stderr_) + ", dense " + fmt(dense.trace) + " +- " +
                fmt(dense.stderr_) + " (target 6 within 3 stderr); log-log slope " + fmt(slope) + " (in [1.7, 2.3])"};
}

// ---- 7-9: ablation grid -------------------------------------------------------------------

struct Grid {
    RunConfig cfg;
    ExperimentData data;
    AblationResult result;
    double seconds = 0.0;
    std::string error;
};

Grid run_grid(const Args& a) {
    Grid g;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        std::ifstream is(a.ablate_config);
        if (!is) throw ConfigError("cannot read " + a.ablate_config);
        g.cfg = parse_config(is);
        g.data = load_data(g.cfg);
        g.result = run_ablation(g.cfg, g.data);
        fs::create_directories(a.work);
        std::ofstream summary(a.work / "ablation.csv"), runs(a.work / "ablation_runs.csv");
        write_ablation_csv(g.result, summary);
        write_ablation_runs_csv(g.result, runs);
    } catch (const std::exception& e) {
        g.error = e.what();
    }
    g.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return g;
}

std::size_t bits_index(const AblationResult& r, int w, int a) {
    for (std::size_t i = 0; i < r.eval_bits.size(); ++i) {
        if (r.eval_bits[i] == std::pair{w, a}) return i;
    }
    throw ConfigError("ablation config must evaluate " + bits_label({w, a}));
}

Outcome ordering(const Grid& g) {
    if (!g.error.empty()) return {false, g.error};
    const auto& r = g.result;
    const std::size_t t = bits_index(r, 4, 4);
    const double full = r.arm("dnq_swa").ptq_accuracy[t], base = r.arm("baseline").ptq_accuracy[t];
    const double swa = r.arm("swa_only").ptq_accuracy[t], dnq = r.arm("dnq_only").ptq_accuracy[t];
    const double sharp_full = r.arm("dnq_swa").sharpness, sharp_base = r.arm("baseline").sharpness;
    const bool ok = full > base && full >= swa && full >= dnq && sharp_full < sharp_base;
    return {ok, "median W4A4: dnq_swa " + fmt(full) + " vs baseline " + fmt(base) + ", swa_only " + fmt(swa) +
                    ", dnq_only " + fmt(dnq) + "; sharpness " + fmt(sharp_full, 3) + " vs baseline " + fmt(sharp_base, 3) +
                    "; " + std::to_string(r.runs.size() / ablation_arms().size()) + " seeds"};
}

Outcome dissection(const Grid& g) {
    if (!g.error.empty()) return {false, g.error};
    const auto& r = g.result;
    const std::size_t t = bits_index(r, 4, 4);
    const double full = r.arm("dnq_swa").ptq_accuracy[t];
    const double no_aqer = r.arm("wqer_swa").ptq_accuracy[t], no_wqer = r.arm("aqer_swa").ptq_accuracy[t];
    return {no_aqer <= full && no_wqer <= full, "median W4A4: full " + fmt(full) + ", without AQER " + fmt(no_aqer) +
                                                    ", without WQER " + fmt(no_wqer)};
}

// Re-quantizes every cached final checkpoint at W8A8, W4A4 and W2A2.
Outcome bit_monotonicity(const Grid& g) {
    if (!g.error.empty()) return {false, g.error};
    const auto& r = g.result;
    const std::vector<std::pair<int, int>> widths = {{8, 8}, {4, 4}, {2, 2}};
    const ModelSpec spec = model_spec(g.cfg, g.data.train);
    std::map<std::string, std::vector<std::vector<double>>> acc;  // arm -> width -> per-seed
    bool consistent = true;
    for (const auto& run : r.runs) {
        Model m = build(spec, run.seed);
        restore(run.final_params, m.params);
        auto& cols = acc[run.arm];
        cols.resize(widths.size());
        for (std::size_t k = 0; k < widths.size(); ++k) {
            PtqConfig p;
            p.weight_bits = widths[k].first;
            p.act_bits = widths[k].second;
            p.first_last_bits = g.cfg.model.first_last_bits;
            QuantizedModel qm = ptq_calibrate(m, g.data.calib.inputs, p);
            cols[k].push_back(evaluate(qm, g.data.test));
            consistent = consistent && cols[k].back() == run.ptq_accuracy[bits_index(r, widths[k].first, widths[k].second)];
        }
    }
    bool ok = consistent;
    std::string detail;
    for (const auto& arm : ablation_arms()) {
        const auto& cols = acc[arm.name];
        const double a8 = median(cols[0]), a4 = median(cols[1]), a2 = median(cols[2]);
        const bool arm_ok = a8 >= a4 && a4 >= a2;
        ok = ok && arm_ok;
        detail += arm.name + " " + fmt(a8, 3) + "/" + fmt(a4, 3) + "/" + fmt(a2, 3) + (arm_ok ? "" : " (violated)") + "; ";
    }
    return {ok, "median W8A8/W4A4/W2A2 over cached checkpoints: " + detail.substr(0, detail.size() - 2) +
                    (consistent ? "" : "; re-evaluation DISAGREES with the grid")};
}

// ---- 10: end-to-end determinism -----------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome cli_determinism(const Args& a) {
    std::string detail;
    for (const char* run : {"train_a", "train_b"}) {
        const std::string cmd = a.dnq + " train --config " + a.train_config + " --run-dir " + (a.work / run).string() +
                                " --force >/dev/null 2>" + (a.work / (std::string(run) + ".log")).string();
        const int status = std::system(cmd.c_str());
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
            return {false, std::string(run) + " exited with status " + std::to_string(WEXITSTATUS(status))};
        }
    }
    const std::string ca = slurp(a.work / "train_a" / "final.ckpt"), cb = slurp(a.work / "train_b" / "final.ckpt");
    const std::string ma = slurp(a.work / "train_a" / "metrics.jsonl"), mb = slurp(a.work / "train_b" / "metrics.jsonl");
    const bool ok = !ca.empty() && !ma.empty() && ca == cb && ma == mb;
    return {ok, "final.ckpt " + std::to_string(ca.size()) + " bytes " + (ca == cb ? "identical" : "DIFFER") +
                    ", metrics.jsonl " + std::to_string(ma.size()) + " bytes " + (ma == mb ? "identical" : "DIFFER")};
}

} // namespace

int main(int argc, char** argv) {
    Args a;
    for (int i = 1; i + 1 < argc; i += 2) {
        const std::string k = argv[i], v = argv[i + 1];
        if (k == "--dnq") a.dnq = v;
        else if (k == "--ablate-config") a.ablate_config = v;
        else if (k == "--train-config") a.train_config = v;
        else if (k == "--work-dir") a.work = v;
        else if (k == "--only") a.only = std::stoi(v);
        else {
            std::cerr << "unknown argument " << k << '\n';
            return 2;
        }
    }
    if (a.dnq.empty() || a.ablate_config.empty() || a.train_config.empty()) {
        std::cerr << "usage: acceptance --dnq <binary> --ablate-config <ini> --train-config <ini> --work-dir <dir> [--only N]\n";
        return 2;
    }
    fs::create_directories(a.work);

    bool all = true;
    auto report = [&](int id, const std::string& name, double budget_s, const std::function<Outcome()>& fn,
                      std::optional<double> elapsed_override = std::nullopt) {
        if (a.only && *a.only != id) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = elapsed_override.value_or(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        const bool in_time = secs < budget_s;
        const bool pass = o.pass && in_time;
        all = all && pass;
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " -- " << o.detail << " ["
                  << fmt(secs, 3) << " s, budget " << budget_s << " s" << (in_time ? "" : ", OVER BUDGET") << "]"
                  << std::endl;
    };

    report(1, "quantizer oracle suite", 10, quantizer_oracles);
    report(2, "gradient correctness", 30, gradient_correctness);
    report(3, "differential-noise unbiasedness and telescoping", 5, differential_noise);
    report(4, "output-error decomposition identity", 5, decomposition);
    report(5, "Stage-1 reduction to plain SGD", 60, stage1_reduction);
    report(6, "flatness probe calibration", 120, flatness_calibration);
    if (!a.only || (*a.only >= 7 && *a.only <= 9)) {
        const Grid grid = run_grid(a);
        report(7, "full method ordering (W4A4 accuracy, sharpness)", 1800, [&] { return ordering(grid); }, grid.seconds);
        report(8, "noise dissection (removing WQER or AQER does not help)", 1800, [&] { return dissection(grid); },
               grid.seconds);
        report(9, "bit-width monotonicity per arm", 300, [&] { return bit_monotonicity(grid); });
    }
    report(10, "end-to-end determinism of dnq train", 120, [&] { return cli_determinism(a); });
    std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
    return all ? 0 : 1;
}
