// dnq: train / ptq / probe / ablate / report over a run directory.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dnq/dnq.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum Exit : int { ok = 0, failure = 1, config_error = 2, data_error = 3, divergence = 4, refused = 5 };

struct Options {
    std::string config;
    std::string run_dir;
    std::optional<std::uint64_t> seed;
    bool toy = false;
    bool force = false;
};

class Refused : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw dnq::ConfigError("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os << text;
        if (!os) throw std::runtime_error("cannot write " + p.string());
    }
    fs::rename(tmp, p);
}

void append_line(const fs::path& p, const json& j) {
    std::ofstream os(p, std::ios::binary | std::ios::app);
    os << j.dump() << '\n';
    if (!os) throw std::runtime_error("cannot append to " + p.string());
}

// A config file, or a manifest.json whose resolved config is replayed verbatim.
dnq::RunConfig load_config(const Options& o) {
    std::string path = o.config;
    if (path.empty()) {
        const fs::path m = fs::path(o.run_dir) / "manifest.json";
        if (!fs::exists(m)) throw dnq::ConfigError("--config is required (no manifest.json in the run directory)");
        path = m.string();
    }
    const std::string text = read_text(path);
    dnq::RunConfig c;
    if (fs::path(path).extension() == ".json") {
        json m;
        try {
            m = json::parse(text);
        } catch (const json::exception& e) {
            throw dnq::ConfigError(path + ": " + e.what());
        }
        if (!m.contains("config") || !m["config"].is_string()) throw dnq::ConfigError(path + ": manifest has no config");
        c = dnq::parse_config_string(m["config"].get<std::string>());
    } else {
        c = dnq::parse_config_string(text, o.toy ? std::optional<std::string>("toy") : std::nullopt);
    }
    if (o.seed) c.train.seed = *o.seed;
    dnq::validate(c);
    return c;
}

json dataset_record(const dnq::LabeledDataset& d) {
    return {{"provenance", d.provenance}, {"split", d.split}, {"samples", d.size()}, {"classes", d.classes},
            {"checksum", d.checksum}};
}

json data_provenance(const dnq::ExperimentData& d) {
    return {{"type", "data"},
            {"train", dataset_record(d.train)},
            {"test", dataset_record(d.test)},
            {"calib", dataset_record(d.calib)}};
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

json manifest(const dnq::RunConfig& c, const dnq::ExperimentData& d, const std::string& command) {
    return {{"tool", "dnq"},
            {"version", DNQ_VERSION},
            {"command", command},
            {"seed", c.train.seed},
            {"config", dnq::serialize_config(c)},
            {"data", data_provenance(d)},
            {"created", timestamp()}};
}

json epoch_record(const dnq::EpochMetrics& m) {
    json layers = json::array();
    for (const auto& l : m.layers) {
        json j = {{"layer", l.layer},
                  {"mean_abs_mu_w", l.mean_abs_mu_w},
                  {"mean_sigma_w", l.mean_sigma_w},
                  {"mu_x", l.mu_x},
                  {"sigma_x", l.sigma_x}};
        j["aqe_wqe_ratio"] = l.mean_sigma_w > 0.0 ? json(l.sigma_x / l.mean_sigma_w) : json(nullptr);
        layers.push_back(std::move(j));
    }
    return {{"type", "epoch"},
            {"epoch", m.epoch},
            {"lr", m.lr},
            {"f_ramp", m.f_ramp},
            {"train_loss", m.train_loss},
            {"train_accuracy", m.train_accuracy},
            {"swa_absorbed", m.swa_absorbed},
            {"layers", std::move(layers)}};
}

fs::path epoch_path(const fs::path& dir, std::size_t e) { return dir / ("epoch_" + std::to_string(e) + ".ckpt"); }

// Latest epoch_<e>.ckpt in the directory, if any.
std::optional<std::size_t> latest_epoch(const fs::path& dir) {
    std::optional<std::size_t> best;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("epoch_", 0) != 0 || entry.path().extension() != ".ckpt") continue;
        try {
            const std::size_t e = std::stoul(name.substr(6));
            if (!best || e > *best) best = e;
        } catch (const std::exception&) {
        }
    }
    return best;
}

// Keeps metrics lines up to (and including) epoch `upto`; later lines belong to a lost tail.
void truncate_metrics(const fs::path& p, std::size_t upto) {
    std::ifstream is(p);
    std::string line, kept;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j.value("type", "") == "epoch" && j["epoch"].get<std::size_t>() > upto) break;
        kept += line + '\n';
    }
    is.close();
    write_text(p, kept);
}

void clear_run(const fs::path& dir) {
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name == "manifest.json" || name == "metrics.jsonl" || name == "final.ckpt" ||
            (name.rfind("epoch_", 0) == 0 && entry.path().extension() == ".ckpt")) {
            fs::remove(entry.path());
        }
    }
}

// Epoch checkpoints are full trainer states. Older ones are pruned except at multiples of
// ten and at the stage boundaries, so long runs keep their resumable history bounded.
bool keep_epoch(std::size_t e, const dnq::TrainConfig& t) {
    return e % 10 == 0 || e == t.warmup_epochs || e + 1 == t.swa_start || e == t.epochs;
}

int cmd_train(const Options& o) {
    const dnq::RunConfig cfg = load_config(o);
    const fs::path dir = o.run_dir;
    fs::create_directories(dir);
    const fs::path final_ckpt = dir / "final.ckpt", metrics = dir / "metrics.jsonl", man = dir / "manifest.json";
    if (fs::exists(final_ckpt) && !o.force) throw Refused(dir.string() + " already holds a completed run (use --force)");

    const dnq::ExperimentData data = dnq::load_data(cfg);
    const dnq::TrainConfig tcfg = cfg.trainer_config();
    dnq::Model model = dnq::build(dnq::model_spec(cfg, data.train), tcfg.seed);
    dnq::Trainer trainer(tcfg, model, data.train, data.calib);

    bool resumed = false;
    if (o.force) {
        clear_run(dir);
    } else if (fs::exists(man)) {
        const json old = json::parse(read_text(man));
        if (old.value("config", "") != dnq::serialize_config(cfg)) {
            throw Refused(dir.string() + " holds an unfinished run with a different config (use --force)");
        }
        if (const auto e = latest_epoch(dir)) {
            trainer.restore_state(dnq::load_checkpoint(epoch_path(dir, *e)));
            truncate_metrics(metrics, *e);
            resumed = true;
            std::cerr << "resuming " << dir.string() << " after epoch " << *e << '\n';
        }
    }
    if (!resumed) {
        write_text(man, manifest(cfg, data, "train").dump(2) + '\n');
        write_text(metrics, "");
        append_line(metrics, data_provenance(data));
    }

    while (!trainer.finished()) {
        const dnq::EpochMetrics m = trainer.run_epoch();
        append_line(metrics, epoch_record(m));
        dnq::save_checkpoint(trainer.state_checkpoint(), epoch_path(dir, m.epoch));
        if (m.epoch > 1 && !keep_epoch(m.epoch - 1, tcfg)) fs::remove(epoch_path(dir, m.epoch - 1));
        std::cerr << "epoch " << m.epoch << "/" << tcfg.epochs << " loss " << m.train_loss << " acc "
                  << m.train_accuracy << '\n';
    }
    model.params = trainer.final_params();
    dnq::save_checkpoint(dnq::snapshot(model.params), final_ckpt);
    const double test_acc = dnq::evaluate(model, data.test);
    append_line(metrics, {{"type", "final"},
                          {"epochs", tcfg.epochs},
                          {"swa_snapshots", trainer.swa().count()},
                          {"fp_test_accuracy", test_acc}});
    std::cout << "FP test accuracy " << test_acc << '\n';
    return ok;
}

// Model restored from <run-dir>/final.ckpt.
dnq::Model trained_model(const dnq::RunConfig& cfg, const dnq::ExperimentData& data, const fs::path& dir) {
    dnq::Model model = dnq::build(dnq::model_spec(cfg, data.train), cfg.train.seed);
    dnq::restore(dnq::load_checkpoint(dir / "final.ckpt"), model.params);
    return model;
}

void refuse_if_exists(const fs::path& p, bool force) {
    if (fs::exists(p) && !force) throw Refused(p.string() + " already exists (use --force)");
}

int cmd_ptq(const Options& o) {
    const dnq::RunConfig cfg = load_config(o);
    const fs::path dir = o.run_dir;
    refuse_if_exists(dir / "ptq.csv", o.force);
    const dnq::ExperimentData data = dnq::load_data(cfg);
    dnq::Model model = trained_model(cfg, data, dir);
    const double fp = dnq::evaluate(model, data.test);

    std::ostringstream table;
    table << "config,weight_bits,act_bits,first_last_bits,fp_acc,ptq_acc\n";
    table.precision(6);
    table << std::fixed;
    for (const auto& [w, a] : cfg.quant.eval_bits) {
        dnq::PtqConfig p;
        p.weight_bits = w;
        p.act_bits = a;
        p.first_last_bits = cfg.model.first_last_bits;
        p.calib_size = cfg.quant.calib_size;
        dnq::QuantizedModel qm = dnq::ptq_calibrate(model, data.calib.inputs, p);
        const double acc = dnq::evaluate(qm, data.test);
        const std::string label = p.label();
        table << label << ',' << w << ',' << a << ','
              << (p.first_last_bits ? std::to_string(*p.first_last_bits) : std::string("none")) << ',' << fp << ','
              << acc << '\n';
        std::ostringstream mse;
        dnq::write_mse_csv(dnq::layer_mse_report(model, qm, data.test.inputs), mse);
        write_text(dir / ("mse_" + label + ".csv"), mse.str());
        dnq::save_checkpoint(dnq::quant_checkpoint(qm), dir / ("quant_" + label + ".ckpt"));
        append_line(dir / "metrics.jsonl",
                    {{"type", "ptq"}, {"config", label}, {"weight_bits", w}, {"act_bits", a}, {"fp_accuracy", fp},
                     {"ptq_accuracy", acc}});
        std::cout << label << " accuracy " << acc << " (FP " << fp << ")\n";
    }
    write_text(dir / "ptq.csv", table.str());
    return ok;
}

int cmd_probe(const Options& o) {
    const dnq::RunConfig cfg = load_config(o);
    const fs::path dir = o.run_dir;
    refuse_if_exists(dir / "sharpness.json", o.force);
    const dnq::ExperimentData data = dnq::load_data(cfg);
    dnq::Model model = trained_model(cfg, data, dir);
    const dnq::SharpnessReport r = dnq::probe_sharpness(model, data.train, cfg.probe, cfg.train.seed);
    json curve = json::array();
    for (const auto& pt : r.curve) curve.push_back({pt.sigma, pt.mean, pt.stderr_});
    json out = {{"trace", r.trace},
                {"trace_stderr", r.trace_stderr},
                {"trace_samples", r.trace_samples},
                {"curve", curve},
                {"draws", cfg.probe.draws},
                {"probe_size", std::min(cfg.probe.probe_size, data.train.size())},
                {"seed", r.seed}};
    write_text(dir / "sharpness.json", out.dump(2) + '\n');
    out["type"] = "probe";
    append_line(dir / "metrics.jsonl", out);
    std::cout << "Hessian trace " << r.trace << " +- " << r.trace_stderr << "; gap at sigma "
              << dnq::reference_sigma << " = " << r.gap_at(dnq::reference_sigma) << '\n';
    return ok;
}

int cmd_ablate(const Options& o) {
    const dnq::RunConfig cfg = load_config(o);
    const fs::path dir = o.run_dir;
    fs::create_directories(dir);
    refuse_if_exists(dir / "ablation.csv", o.force);
    const dnq::ExperimentData data = dnq::load_data(cfg);
    write_text(dir / "manifest.json", manifest(cfg, data, "ablate").dump(2) + '\n');
    const fs::path metrics = dir / "metrics.jsonl";
    write_text(metrics, "");
    append_line(metrics, data_provenance(data));

    const dnq::AblationResult r = dnq::run_ablation(cfg, data);
    for (const auto& run : r.runs) {
        json ptq = json::object();
        for (std::size_t b = 0; b < r.eval_bits.size(); ++b) ptq[dnq::bits_label(r.eval_bits[b])] = run.ptq_accuracy[b];
        append_line(metrics, {{"type", "ablation_run"},
                              {"arm", run.arm},
                              {"seed", run.seed},
                              {"fp_accuracy", run.fp_accuracy},
                              {"ptq_accuracy", ptq},
                              {"sharpness", run.sharpness},
                              {"hessian_trace", run.trace}});
    }
    std::ostringstream runs, summary;
    dnq::write_ablation_runs_csv(r, runs);
    dnq::write_ablation_csv(r, summary);
    write_text(dir / "ablation_runs.csv", runs.str());
    write_text(dir / "ablation.csv", summary.str());
    std::cout << summary.str();
    return ok;
}

void print_file(const fs::path& p, const std::string& title) {
    if (!fs::exists(p)) return;
    std::cout << "== " << title << " (" << p.filename().string() << ")\n" << read_text(p) << '\n';
}

int cmd_report(const Options& o) {
    const fs::path dir = o.run_dir;
    if (!fs::is_directory(dir)) throw dnq::DataError("no run directory at " + dir.string());
    if (fs::exists(dir / "manifest.json")) {
        const json m = json::parse(read_text(dir / "manifest.json"));
        std::cout << "run " << dir.string() << ": " << m.value("command", "?") << ", seed " << m.value("seed", 0)
                  << ", created " << m.value("created", "?") << '\n';
    }
    if (fs::exists(dir / "metrics.jsonl")) {
        std::ifstream is(dir / "metrics.jsonl");
        std::string line;
        std::optional<json> last_epoch, fin;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            if (j.value("type", "") == "epoch") last_epoch = j;
            if (j.value("type", "") == "final") fin = j;
        }
        if (last_epoch) {
            std::cout << "last epoch " << (*last_epoch)["epoch"] << ": train loss " << (*last_epoch)["train_loss"]
                      << ", train accuracy " << (*last_epoch)["train_accuracy"] << '\n';
        }
        if (fin) std::cout << "FP test accuracy " << (*fin)["fp_test_accuracy"] << '\n';
    }
    print_file(dir / "ptq.csv", "post-training quantization");
    print_file(dir / "sharpness.json", "sharpness");
    print_file(dir / "ablation.csv", "ablation medians");
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dnq: differential noise quantization toolkit"};
    app.set_version_flag("--version", std::string(DNQ_VERSION));
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("--config", o.config, "config file (.ini) or a manifest.json to replay");
        if (config_required) c->required();
        sub->add_option("--run-dir", o.run_dir, "run directory")->required();
        sub->add_option("--seed", o.seed, "override train.seed");
        sub->add_flag("--toy", o.toy, "apply the toy preset (epoch counts / 10) before the config keys");
        sub->add_flag("--force", o.force, "overwrite existing outputs");
    };
    struct Command {
        const char* name;
        const char* help;
        bool config_required;
        int (*run)(const Options&);
    };
    const Command commands[] = {
        {"train", "train a model (two-stage noise training with SWA)", true, cmd_train},
        {"ptq", "post-training quantization of <run-dir>/final.ckpt", false, cmd_ptq},
        {"probe", "sharpness probe of <run-dir>/final.ckpt", false, cmd_probe},
        {"ablate", "component ablation grid over several seeds", true, cmd_ablate},
        {"report", "summarize a run directory", false, cmd_report},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const auto& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, c.config_required);
        subs.emplace_back(sub, &c);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }
    try {
        for (const auto& [sub, cmd] : subs) {
            if (sub->parsed()) return cmd->run(o);
        }
    } catch (const dnq::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const dnq::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return data_error;
    } catch (const dnq::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return data_error;
    } catch (const dnq::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return divergence;
    } catch (const Refused& e) {
        std::cerr << "refusing: " << e.what() << '\n';
        return refused;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return failure;
    }
    return failure;
}
