#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "config.hpp"
#include "experiment.hpp"
#include "flatness.hpp"
#include "ptq.hpp"
#include "trainer.hpp"

namespace dnq {

struct Arm {
    std::string name;
    bool wqer = false;
    bool aqer = false;
    bool swa = false;
};

// Component grid: the four combinations of noise and SWA, plus the two single-noise variants.
inline const std::vector<Arm>& ablation_arms() {
    static const std::vector<Arm> arms = {
        {"baseline", false, false, false}, {"swa_only", false, false, true},  {"dnq_only", true, true, false},
        {"dnq_swa", true, true, true},     {"wqer_swa", true, false, true},   {"aqer_swa", false, true, true},
    };
    return arms;
}

// All arms share the schedule; they differ only in which noise sources are injected and
// whether SWA averages the tail.
inline TrainConfig arm_config(TrainConfig base, const Arm& arm) {
    base.wqer = arm.wqer;
    base.aqer = arm.aqer;
    if (!arm.swa) base.swa_start = base.epochs + 1;
    return base;
}

// Shortest schedule that still exercises both stages and SWA.
inline void make_dry_run(TrainConfig& t) {
    t.epochs = 2;
    t.warmup_epochs = 1;
    t.ramp_epochs = 1;
    t.swa_start = 2;
    t.cosine_epochs = 2;
}

struct ArmResult {
    std::string arm;
    std::uint64_t seed = 0;
    double fp_accuracy = 0.0;
    std::vector<double> ptq_accuracy;  // one per RunConfig::quant.eval_bits entry
    double sharpness = 0.0;            // perturbation gap at the reference sigma
    double trace = 0.0;
    Checkpoint final_params;
};

struct ArmSummary {
    std::string arm;
    double fp_accuracy = 0.0;
    std::vector<double> ptq_accuracy;
    double sharpness = 0.0;
    double trace = 0.0;
};

struct AblationResult {
    std::vector<std::pair<int, int>> eval_bits;
    std::size_t target = 0;  // index of the (q_w, q_a) pair the noise was measured at
    std::vector<ArmResult> runs;
    std::vector<ArmSummary> summary;  // medians per arm, in ablation_arms() order

    const ArmSummary& arm(const std::string& name) const {
        for (const auto& s : summary) {
            if (s.arm == name) return s;
        }
        throw StateError("no ablation arm named '" + name + "'");
    }
};

inline constexpr double reference_sigma = 0.01;

inline double median(std::vector<double> xs) {
    if (xs.empty()) throw StateError("median of an empty sample");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline std::size_t worker_count(std::size_t jobs) {
    std::size_t n = 1;
    if (const char* env = std::getenv("DNQ_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) n = static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs jobs 0..n-1 on up to `workers` threads; the first exception is rethrown.
inline void run_jobs(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto loop = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                job(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        loop();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
}

inline ArmResult evaluate_arm(const RunConfig& cfg, const ExperimentData& data, Model& model, const Arm& arm,
                              std::uint64_t seed) {
    ArmResult r;
    r.arm = arm.name;
    r.seed = seed;
    r.final_params = snapshot(model.params);
    r.fp_accuracy = evaluate(model, data.test);
    for (const auto& [w, a] : cfg.quant.eval_bits) {
        PtqConfig p;
        p.weight_bits = w;
        p.act_bits = a;
        p.first_last_bits = cfg.model.first_last_bits;
        QuantizedModel qm = ptq_calibrate(model, data.calib.inputs, p);
        r.ptq_accuracy.push_back(evaluate(qm, data.test));
    }
    // Only the reference scale enters the table; the full curve is the probe command's job.
    SharpnessConfig probe = cfg.probe;
    probe.sigmas = {reference_sigma};
    const SharpnessReport rep = probe_sharpness(model, data.train, probe, seed);
    r.sharpness = rep.gap_at(reference_sigma);
    r.trace = rep.trace;
    return r;
}

// For every seed: one shared clean stage up to the warm-up end, then each arm continues
// from that state. Arms therefore have identical Stage-1 trajectories by construction.
inline AblationResult run_ablation(const RunConfig& cfg, const ExperimentData& data) {
    if (cfg.ablate.seeds.size() < 3) throw ConfigError("ablate.seeds must list at least 3 seeds");
    const auto& arms = ablation_arms();
    TrainConfig base = cfg.trainer_config();
    if (cfg.ablate.dry_run) make_dry_run(base);
    const ModelSpec spec = model_spec(cfg, data.train);

    AblationResult out;
    out.eval_bits = cfg.quant.eval_bits;
    out.target = cfg.quant.eval_bits.size();
    for (std::size_t i = 0; i < cfg.quant.eval_bits.size(); ++i) {
        if (cfg.quant.eval_bits[i] == std::pair{cfg.quant.weight_bits, cfg.quant.act_bits}) out.target = i;
    }
    if (out.target == cfg.quant.eval_bits.size()) {
        throw ConfigError("quant.eval_bits must include quant.weight_bits/quant.act_bits");
    }

    const std::size_t n_seeds = cfg.ablate.seeds.size();
    out.runs.resize(n_seeds * arms.size());
    run_jobs(n_seeds, worker_count(n_seeds), [&](std::size_t si) {
        const std::uint64_t seed = cfg.ablate.seeds[si];
        TrainConfig seeded = base;
        seeded.seed = seed;
        Model stage1 = build(spec, seed);
        Trainer warm(seeded, stage1, data.train, data.calib);
        while (warm.epochs_done() < seeded.warmup_epochs) warm.run_epoch();
        const Checkpoint prefix = warm.state_checkpoint();
        for (std::size_t ai = 0; ai < arms.size(); ++ai) {
            Model model = build(spec, seed);
            Trainer t(arm_config(seeded, arms[ai]), model, data.train, data.calib);
            t.restore_state(prefix);
            while (!t.finished()) t.run_epoch();
            model.params = t.final_params();
            out.runs[si * arms.size() + ai] = evaluate_arm(cfg, data, model, arms[ai], seed);
        }
    });

    for (std::size_t ai = 0; ai < arms.size(); ++ai) {
        ArmSummary s;
        s.arm = arms[ai].name;
        std::vector<double> fp, sharp, trace;
        std::vector<std::vector<double>> ptq(out.eval_bits.size());
        for (std::size_t si = 0; si < n_seeds; ++si) {
            const ArmResult& r = out.runs[si * arms.size() + ai];
            fp.push_back(r.fp_accuracy);
            sharp.push_back(r.sharpness);
            trace.push_back(r.trace);
            for (std::size_t b = 0; b < ptq.size(); ++b) ptq[b].push_back(r.ptq_accuracy[b]);
        }
        s.fp_accuracy = median(fp);
        s.sharpness = median(sharp);
        s.trace = median(trace);
        for (auto& col : ptq) s.ptq_accuracy.push_back(median(col));
        out.summary.push_back(std::move(s));
    }
    return out;
}

inline std::string bits_label(const std::pair<int, int>& b) {
    return "W" + std::to_string(b.first) + "A" + std::to_string(b.second);
}

// Median table: FP and per-precision PTQ accuracy, delta vs baseline and drop from the
// full method at the target precision, sharpness and Hessian trace.
inline void write_ablation_csv(const AblationResult& r, std::ostream& os) {
    os << "arm,fp_acc";
    for (const auto& b : r.eval_bits) os << ",ptq_acc_" << bits_label(b);
    os << ",delta_vs_baseline,drop_from_full,sharpness_sigma_0.01,hessian_trace\n";
    const double base = r.arm("baseline").ptq_accuracy[r.target];
    const double full = r.arm("dnq_swa").ptq_accuracy[r.target];
    os.precision(6);
    os << std::fixed;
    for (const auto& s : r.summary) {
        os << s.arm << ',' << s.fp_accuracy;
        for (double a : s.ptq_accuracy) os << ',' << a;
        os << ',' << s.ptq_accuracy[r.target] - base << ',' << full - s.ptq_accuracy[r.target] << ','
           << std::scientific << s.sharpness << ',' << s.trace << std::fixed << '\n';
    }
}

inline void write_ablation_runs_csv(const AblationResult& r, std::ostream& os) {
    os << "arm,seed,fp_acc";
    for (const auto& b : r.eval_bits) os << ",ptq_acc_" << bits_label(b);
    os << ",sharpness_sigma_0.01,hessian_trace\n";
    os.precision(6);
    for (const auto& run : r.runs) {
        os << std::fixed << run.arm << ',' << run.seed << ',' << run.fp_accuracy;
        for (double a : run.ptq_accuracy) os << ',' << a;
        os << ',' << std::scientific << run.sharpness << ',' << run.trace << '\n';
    }
}

} // namespace dnq
