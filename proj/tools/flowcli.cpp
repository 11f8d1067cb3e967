// Command-line front end: synthetic data generation, model training,
// perturbation generation, detection runs and experiment sweeps.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "crowdflow/bench.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<int> parse_layer_list(const std::string& s) {
    std::vector<int> dims;
    for (const std::string& part : crowdflow::detail::split(s, ',')) {
        if (part.empty()) continue;
        dims.push_back(static_cast<int>(crowdflow::detail::parse_int(part, "layers")));
    }
    if (dims.empty()) throw UsageError("--layers needs at least one hidden width");
    return dims;
}

crowdflow::FlowState resolve_target(const std::string& target, const crowdflow::GridShape& shape) {
    if (target == "ones") return crowdflow::ones_target(shape);
    const crowdflow::FlowSeries ts = crowdflow::load(target);
    if (ts.states.empty()) throw crowdflow::FormatError("target file holds no states");
    return crowdflow::transform(ts.states.front());
}

int cmd_generate(const std::string& config_path, const std::string& out, const std::string& stats) {
    const crowdflow::ExperimentSpec spec = crowdflow::parse_experiment_spec(config_path);
    const crowdflow::FlowSeries series = crowdflow::generate(spec.generator);
    crowdflow::save(series, out);
    if (!stats.empty()) crowdflow::export_step_stats(series, stats);
    std::cout << "generated " << series.states.size() << " steps on " << series.shape.l1 << "x"
              << series.shape.l2 << " grid -> " << out << "\n";
    return kExitOk;
}

int cmd_train(const std::string& data, int history, const std::string& layers, const std::string& out,
              crowdflow::TrainConfig cfg) {
    cfg.hidden_dims = parse_layer_list(layers);
    const crowdflow::FlowSeries series = crowdflow::load(data);
    const auto windows = crowdflow::slice_windows(series, history);
    const crowdflow::TrainResult result = crowdflow::train(windows, cfg);
    crowdflow::save(result.model, out);
    std::cout << "trained on " << windows.size() << " windows, held-out loss "
              << crowdflow::format_double(result.test_loss) << " -> " << out << "\n";
    return kExitOk;
}

int cmd_attack(const std::string& model_path, const std::string& data, const std::string& name,
               crowdflow::AttackConfig cfg, std::int64_t budget, int queries, int fit_count,
               const std::string& target, const std::string& out) {
    if (!crowdflow::detail::is_universal_attack(name))
        throw UsageError("attack '" + name +
                         "' is per-window and has no universal perturbation file; use `flowcli run` "
                         "to evaluate it");
    const crowdflow::MlpModel model = crowdflow::load_model(model_path);
    const crowdflow::FlowSeries series = crowdflow::load(data);
    const auto windows = crowdflow::slice_windows(series, model.history);
    cfg.target = resolve_target(target, model.shape);
    const size_t n_fit = std::min<size_t>(std::max(fit_count, 1), windows.size());
    const std::span<const crowdflow::HistoryWindow> fit{windows.data(), n_fit};

    crowdflow::PerturbationFile pf;
    pf.shape = model.shape;
    pf.mode = cfg.mode;
    pf.epsilon = cfg.epsilon;
    pf.steps = static_cast<std::uint32_t>(cfg.steps);
    if (name == "cvpr") {
        crowdflow::PhysicalBudget pb{budget, queries};
        pf.pert = crowdflow::cvpr(model, fit, cfg, &pb);
        pf.kind = 0;
    } else {
        const crowdflow::FlowDelta d =
            crowdflow::adaptive_universal(crowdflow::detail::base_attack_of(name), model, fit, cfg);
        pf.pert.delta_in = d.inflow;
        pf.pert.delta_out = d.outflow;
        pf.pert.w = crowdflow::WeightTensor(model.shape, 0.0);
        pf.kind = 1;
    }
    crowdflow::save(pf, out);
    std::cout << "fitted " << name << " on " << n_fit << " windows -> " << out << "\n";
    return kExitOk;
}

int cmd_detect(const std::string& data, const std::string& pert_path, int history, double frr,
               bool strict, const std::string& log) {
    const crowdflow::FlowSeries series = crowdflow::load(data);
    const auto clean = crowdflow::slice_windows(series, history);

    double tau_c = 0.0, tau_v = 0.0;
    if (frr > 0.0)
        std::tie(tau_c, tau_v) =
            crowdflow::calibrate(clean, frr, series.shape, history, strict);

    std::vector<crowdflow::HistoryWindow> stream = clean;
    if (!pert_path.empty()) {
        const crowdflow::PerturbationFile pf = crowdflow::load_perturbation(pert_path);
        if (pf.shape.l1 != series.shape.l1 || pf.shape.l2 != series.shape.l2)
            throw crowdflow::ShapeMismatch("perturbation grid does not match the data");
        const crowdflow::PerturbationSet pert =
            crowdflow::replicate(pf.pert.to_flow_delta(), history);
        for (crowdflow::HistoryWindow& w : stream) w = crowdflow::apply_perturbation(w, pert);
    }

    crowdflow::Detector detector(series.shape, history, tau_c, tau_v, strict);
    std::vector<crowdflow::DetectionVerdict> verdicts;
    verdicts.reserve(stream.size());
    int flagged = 0, checked = 0;
    for (const crowdflow::HistoryWindow& w : stream) {
        verdicts.push_back(detector.observe(w));
        if (!verdicts.back().warmup) {
            ++checked;
            flagged += verdicts.back().adversarial;
        }
    }
    crowdflow::write_verdict_log(verdicts, log);
    std::cout << "checked " << checked << " post-warmup inputs, flagged " << flagged << " -> " << log
              << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crowd-flow prediction attack/defense workbench"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "generate a synthetic crowd-flow series");
    std::string gen_config, gen_out, gen_stats;
    gen->add_option("--config", gen_config, "spec file with a [generator] section")->required();
    gen->add_option("--out", gen_out, "output FLOWBIN path")->required();
    gen->add_option("--stats", gen_stats, "optional per-step statistics CSV");

    auto* tr = app.add_subcommand("train", "train the reference MLP predictor");
    std::string tr_data, tr_layers = "256", tr_out;
    int tr_history = 5;
    crowdflow::TrainConfig tr_cfg;
    tr->add_option("--data", tr_data, "FLOWBIN input")->required();
    tr->add_option("--history", tr_history, "history length h")->required();
    tr->add_option("--layers", tr_layers, "hidden widths, comma separated");
    tr->add_option("--out", tr_out, "output FLOWNET path")->required();
    tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
    tr->add_option("--batch", tr_cfg.batch_size, "mini-batch size");
    tr->add_option("--lr", tr_cfg.learning_rate, "learning rate");
    tr->add_option("--split", tr_cfg.split_fraction, "chronological train fraction");
    tr->add_option("--seed", tr_cfg.seed, "initialization/shuffle seed");

    auto* at = app.add_subcommand("attack", "fit a universal perturbation (cvpr, adaptive-*)");
    std::string at_model, at_data, at_name = "cvpr", at_target = "ones", at_out, at_mode = "digital";
    crowdflow::AttackConfig at_cfg;
    at_cfg.steps = 200;
    std::int64_t at_budget = 5000;
    int at_queries = 20, at_fit = 100;
    at->add_option("--model", at_model, "FLOWNET model")->required();
    at->add_option("--data", at_data, "FLOWBIN input")->required();
    at->add_option("--attack", at_name, "cvpr | adaptive-fgsm | adaptive-ifgsm | adaptive-pgd");
    at->add_option("--eps", at_cfg.epsilon, "max perturbation");
    at->add_option("--steps", at_cfg.steps, "iterations N");
    at->add_option("--alpha", at_cfg.alpha, "PGD step size (0 = 2.5*eps/N)");
    at->add_option("--lambda", at_cfg.lambda, "Lagrange multiplier");
    at->add_option("--mode", at_mode, "digital | physical");
    at->add_option("--budget", at_budget, "device budget b_d (physical)");
    at->add_option("--queries", at_queries, "query limit (physical)");
    at->add_option("--train-windows", at_fit, "windows used to fit the perturbation");
    at->add_option("--target", at_target, "'ones' or FLOWBIN with the target state");
    at->add_option("--out", at_out, "output FLOWPERT path")->required();

    auto* de = app.add_subcommand("detect", "stream a series through CaV-detect");
    std::string de_data, de_pert, de_log;
    int de_history = 5;
    double de_frr = 0.0;
    bool de_strict = false;
    de->add_option("--data", de_data, "FLOWBIN input")->required();
    de->add_option("--pert", de_pert, "optional FLOWPERT applied to every window");
    de->add_option("--history", de_history, "history length h")->required();
    de->add_option("--frr", de_frr, "calibrate thresholds to this clean FRR");
    de->add_flag("--strict", de_strict, "rectify the two validity scores separately");
    de->add_option("--log", de_log, "verdict CSV output")->required();

    auto* ru = app.add_subcommand("run", "run an experiment sweep from a spec file");
    std::string ru_spec;
    ru->add_option("--spec", ru_spec, "experiment spec file")->required();

    auto* re = app.add_subcommand("report", "emit plot-data CSVs from a results file");
    std::string re_rows, re_out;
    re->add_option("--rows", re_rows, "results.csv from `run`")->required();
    re->add_option("--out", re_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_config, gen_out, gen_stats);
        if (tr->parsed()) return cmd_train(tr_data, tr_history, tr_layers, tr_out, tr_cfg);
        if (at->parsed()) {
            if (at_mode == "physical") at_cfg.mode = crowdflow::PerturbMode::physical;
            else if (at_mode != "digital") throw UsageError("--mode must be digital or physical");
            return cmd_attack(at_model, at_data, at_name, at_cfg, at_budget, at_queries, at_fit,
                              at_target, at_out);
        }
        if (de->parsed()) return cmd_detect(de_data, de_pert, de_history, de_frr, de_strict, de_log);
        if (ru->parsed()) {
            crowdflow::run(crowdflow::parse_experiment_spec(ru_spec));
            return kExitOk;
        }
        if (re->parsed()) {
            crowdflow::report(re_rows, re_out);
            return kExitOk;
        }
        throw UsageError("no subcommand");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const crowdflow::FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const crowdflow::TruncatedFile& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const crowdflow::SeriesTooShort& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const crowdflow::StreamTooShort& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const crowdflow::ShapeMismatch& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}
