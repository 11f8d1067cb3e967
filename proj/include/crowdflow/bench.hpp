#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crowdflow/attacks.hpp"
#include "crowdflow/cavdetect.hpp"
#include "crowdflow/csv.hpp"
#include "crowdflow/gradnet.hpp"
#include "crowdflow/synthflow.hpp"

namespace crowdflow {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean squared error of predictions against the ground-truth next states.
inline double eval_clean(const MlpModel& model, std::span<const HistoryWindow> windows) {
    if (windows.empty()) throw EmptyDataset("eval_clean: no windows");
    detail::MlpWorkspace ws;
    ws.resize(model);
    double total = 0.0;
    for (const HistoryWindow& w : windows) {
        detail::check_window(model, w, "eval_clean");
        const std::vector<double>& y = detail::forward_ws(model, detail::flatten_window(w), ws);
        const std::vector<double> t = detail::flatten_state(w.target);
        double sample = 0.0;
        for (size_t o = 0; o < y.size(); ++o) sample += (y[o] - t[o]) * (y[o] - t[o]);
        total += sample / static_cast<double>(y.size());
    }
    return total / static_cast<double>(windows.size());
}

/// Adversarial MSE: mean squared distance of outputs on (already perturbed)
/// inputs to the attacker's target. Smaller means the attack got closer.
inline double eval_adversarial(const MlpModel& model, std::span<const HistoryWindow> perturbed,
                               const FlowState& y_target) {
    if (perturbed.empty()) throw EmptyDataset("eval_adversarial: no windows");
    detail::MlpWorkspace ws;
    ws.resize(model);
    const std::vector<double> t = detail::flatten_state(y_target);
    double total = 0.0;
    for (const HistoryWindow& w : perturbed) {
        detail::check_window(model, w, "eval_adversarial");
        const std::vector<double>& y = detail::forward_ws(model, detail::flatten_window(w), ws);
        double sample = 0.0;
        for (size_t o = 0; o < y.size(); ++o) sample += (y[o] - t[o]) * (y[o] - t[o]);
        total += sample / static_cast<double>(y.size());
    }
    return total / static_cast<double>(perturbed.size());
}

// ---------------------------------------------------------------------------
// Experiment specification (plain-text key = value file with [sections])
// ---------------------------------------------------------------------------

struct ExperimentSpec {
    // [data]
    std::string data_source = "generate";  // "generate" or a FLOWBIN path
    int history = 5;
    // [generator]
    GeneratorConfig generator;
    // [model]
    std::string model_source = "train";  // "train" or a FLOWNET path
    TrainConfig train;
    // [attack]
    std::string attack = "pgd";  // fgsm|ifgsm|pgd|aware-*|adaptive-*|cvpr
    AttackConfig attack_config;
    std::int64_t budget = 5000;
    int query_limit = 20;
    int fit_windows = 100;          // windows used to fit universal perturbations
    std::string target = "ones";    // "ones" or a FLOWBIN path (first state)
    // [detector]
    bool detector_enabled = true;
    double detector_frr = 0.0;      // 0 keeps the strict zero thresholds
    bool strict_validity = false;
    // [sweep] — empty lists fall back to the single configured value
    std::vector<double> sweep_eps;
    std::vector<int> sweep_steps;
    std::vector<std::int64_t> sweep_budget;
    std::vector<int> sweep_history;
    // [output]
    std::string out_dir = "out";
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(trim(cur));
    return out;
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("spec: bad number for " + key + ": '" + v + "'");
    }
}

inline std::int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw FormatError("spec: bad integer for " + key + ": '" + v + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw FormatError("spec: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace detail

inline ExperimentSpec parse_experiment_spec(std::istream& is) {
    ExperimentSpec spec;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw FormatError("spec: malformed section at line " + std::to_string(lineno));
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("spec: expected key = value at line " + std::to_string(lineno));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        const std::string qual = section + "." + key;

        if (qual == "data.source") spec.data_source = val;
        else if (qual == "data.history") spec.history = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.l1") spec.generator.shape.l1 = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.l2") spec.generator.shape.l2 = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.n") spec.generator.shape.n = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.agents") spec.generator.agents = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.steps") spec.generator.steps = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.move_prob") spec.generator.move_prob = detail::parse_double(val, qual);
        else if (qual == "generator.hotspots") spec.generator.hotspot_count = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "generator.seed") spec.generator.seed = static_cast<std::uint64_t>(detail::parse_int(val, qual));
        else if (qual == "model.source") spec.model_source = val;
        else if (qual == "model.hidden") {
            spec.train.hidden_dims.clear();
            for (const std::string& d : detail::split(val, ','))
                if (!d.empty()) spec.train.hidden_dims.push_back(static_cast<int>(detail::parse_int(d, qual)));
        } else if (qual == "model.epochs") spec.train.epochs = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "model.batch") spec.train.batch_size = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "model.lr") spec.train.learning_rate = detail::parse_double(val, qual);
        else if (qual == "model.split") spec.train.split_fraction = detail::parse_double(val, qual);
        else if (qual == "model.seed") spec.train.seed = static_cast<std::uint64_t>(detail::parse_int(val, qual));
        else if (qual == "attack.name") spec.attack = val;
        else if (qual == "attack.eps") spec.attack_config.epsilon = detail::parse_double(val, qual);
        else if (qual == "attack.steps") spec.attack_config.steps = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "attack.alpha") spec.attack_config.alpha = detail::parse_double(val, qual);
        else if (qual == "attack.lambda") spec.attack_config.lambda = detail::parse_double(val, qual);
        else if (qual == "attack.mode") {
            if (val == "digital") spec.attack_config.mode = PerturbMode::digital;
            else if (val == "physical") spec.attack_config.mode = PerturbMode::physical;
            else throw FormatError("spec: attack.mode must be digital or physical");
        } else if (qual == "attack.budget") spec.budget = detail::parse_int(val, qual);
        else if (qual == "attack.query_limit") spec.query_limit = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "attack.train_windows") spec.fit_windows = static_cast<int>(detail::parse_int(val, qual));
        else if (qual == "attack.target") spec.target = val;
        else if (qual == "detector.enabled") spec.detector_enabled = detail::parse_bool(val, qual);
        else if (qual == "detector.frr") spec.detector_frr = detail::parse_double(val, qual);
        else if (qual == "detector.strict") spec.strict_validity = detail::parse_bool(val, qual);
        else if (qual == "sweep.eps") {
            for (const std::string& d : detail::split(val, ','))
                if (!d.empty()) spec.sweep_eps.push_back(detail::parse_double(d, qual));
        } else if (qual == "sweep.steps") {
            for (const std::string& d : detail::split(val, ','))
                if (!d.empty()) spec.sweep_steps.push_back(static_cast<int>(detail::parse_int(d, qual)));
        } else if (qual == "sweep.budget") {
            for (const std::string& d : detail::split(val, ','))
                if (!d.empty()) spec.sweep_budget.push_back(detail::parse_int(d, qual));
        } else if (qual == "sweep.history") {
            for (const std::string& d : detail::split(val, ','))
                if (!d.empty()) spec.sweep_history.push_back(static_cast<int>(detail::parse_int(d, qual)));
        } else if (qual == "output.dir") spec.out_dir = val;
        else throw FormatError("spec: unknown key '" + qual + "' at line " + std::to_string(lineno));
    }
    return spec;
}

inline ExperimentSpec parse_experiment_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("spec: cannot open: " + path);
    return parse_experiment_spec(is);
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct ResultRow {
    int point = 0;
    std::string attack;
    double eps = 0.0;
    int steps = 0;
    double alpha = 0.0;
    double lambda = 0.0;
    std::string mode;
    std::int64_t budget = 0;
    int history = 0;
    std::uint64_t seed = 0;
    double clean_loss = 0.0;
    double adv_loss = 0.0;
    std::optional<double> far;
    std::optional<double> frr;
    double wall_seconds = 0.0;  // reported on stdout, never in the CSV
    std::string status = "ok";
    std::string trace_file;
};

namespace detail {

inline BaseAttack base_attack_of(const std::string& name) {
    const std::string base = name.substr(name.find('-') + 1);
    if (base == "fgsm") return BaseAttack::fgsm;
    if (base == "ifgsm") return BaseAttack::ifgsm;
    if (base == "pgd") return BaseAttack::pgd;
    throw FormatError("unknown base attack in '" + name + "'");
}

inline bool is_universal_attack(const std::string& name) {
    return name == "cvpr" || name.rfind("adaptive-", 0) == 0;
}

/// Windows from an already transformed state sequence (stride 1, targets are
/// the next states).
inline std::vector<HistoryWindow> windows_from_states(std::span<const FlowState> states, int h) {
    if (static_cast<int>(states.size()) < h + 2)
        throw SeriesTooShort("windows_from_states: need at least h + 2 states");
    std::vector<HistoryWindow> windows;
    for (size_t t = static_cast<size_t>(h); t + 1 < states.size(); ++t) {
        HistoryWindow w;
        w.states.assign(states.begin() + (t - h), states.begin() + t + 1);
        w.target = states[t + 1];
        windows.push_back(std::move(w));
    }
    return windows;
}

struct DetectorOutcome {
    std::vector<DetectionVerdict> clean;
    std::vector<DetectionVerdict> adversarial;
    double far = 0.0;
    double frr = 0.0;
};

inline DetectorOutcome run_detector(const GridShape& shape, int h, double tau_c, double tau_v,
                                    bool strict, std::span<const HistoryWindow> clean_stream,
                                    std::span<const HistoryWindow> adv_stream) {
    DetectorOutcome out;
    Detector clean_det(shape, h, tau_c, tau_v, strict);
    for (const HistoryWindow& w : clean_stream) out.clean.push_back(clean_det.observe(w));
    Detector adv_det(shape, h, tau_c, tau_v, strict);
    for (const HistoryWindow& w : adv_stream) out.adversarial.push_back(adv_det.observe(w));
    std::vector<std::pair<DetectionVerdict, bool>> labeled;
    for (const DetectionVerdict& v : out.clean) labeled.emplace_back(v, false);
    for (const DetectionVerdict& v : out.adversarial) labeled.emplace_back(v, true);
    std::tie(out.far, out.frr) = far_frr(labeled);
    return out;
}

}  // namespace detail

/// Attack a whole stream window by window. Aware attacks see the memory a
/// detector fed with the perturbed stream would hold. The averaged iteration
/// trace is returned through `trace` when non-null.
inline std::vector<HistoryWindow> attack_stream(const std::string& name, const MlpModel& model,
                                                std::span<const HistoryWindow> stream,
                                                const AttackConfig& config,
                                                std::vector<double>* trace = nullptr) {
    std::vector<HistoryWindow> perturbed;
    perturbed.reserve(stream.size());
    const bool aware = name.rfind("aware-", 0) == 0;
    std::vector<HistoryWindow> memory;  // newest first, as the detector stores them
    std::vector<double> trace_sum;
    std::vector<double> one;
    for (const HistoryWindow& w : stream) {
        one.clear();
        PerturbationSet pert;
        if (name == "fgsm") pert = fgsm(model, w, config, trace ? &one : nullptr);
        else if (name == "ifgsm") pert = ifgsm(model, w, config, trace ? &one : nullptr);
        else if (name == "pgd") pert = pgd(model, w, config, trace ? &one : nullptr);
        else if (aware)
            pert = aware_variant(detail::base_attack_of(name), model, w, config, memory,
                                 trace ? &one : nullptr);
        else
            throw FormatError("attack_stream: unknown per-window attack '" + name + "'");
        HistoryWindow adv = apply_perturbation(w, pert);
        if (trace) {
            if (trace_sum.empty()) trace_sum.assign(one.size(), 0.0);
            for (size_t i = 0; i < one.size(); ++i) trace_sum[i] += one[i];
        }
        if (aware) {
            memory.insert(memory.begin(), adv);
            if (static_cast<int>(memory.size()) > model.history) memory.pop_back();
        }
        perturbed.push_back(std::move(adv));
    }
    if (trace) {
        trace->assign(trace_sum.size(), 0.0);
        for (size_t i = 0; i < trace_sum.size(); ++i)
            (*trace)[i] = trace_sum[i] / static_cast<double>(stream.size());
    }
    return perturbed;
}

inline void write_results_csv(std::span<const ResultRow> rows, std::ostream& os) {
    os << "point,attack,eps,steps,alpha,lambda,mode,budget,history,seed,clean_loss,adv_loss,far,frr,"
          "status,trace_file\n";
    for (const ResultRow& r : rows) {
        os << r.point << ',' << r.attack << ',' << format_double(r.eps) << ',' << r.steps << ','
           << format_double(r.alpha) << ',' << format_double(r.lambda) << ',' << r.mode << ','
           << r.budget << ',' << r.history << ',' << r.seed << ',' << format_double(r.clean_loss)
           << ',' << format_double(r.adv_loss) << ',' << (r.far ? format_double(*r.far) : "") << ','
           << (r.frr ? format_double(*r.frr) : "") << ',' << r.status << ',' << r.trace_file << '\n';
    }
}

/// Execute every sweep point of the spec. Writes results.csv, per-point
/// verdict logs and iteration traces into the output directory; each failed
/// point records its error in the row instead of aborting the sweep.
inline std::vector<ResultRow> run(const ExperimentSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(spec.out_dir);

    const std::vector<double> eps_list = spec.sweep_eps.empty()
                                             ? std::vector<double>{spec.attack_config.epsilon}
                                             : spec.sweep_eps;
    const std::vector<int> steps_list =
        spec.sweep_steps.empty() ? std::vector<int>{spec.attack_config.steps} : spec.sweep_steps;
    const std::vector<std::int64_t> budget_list =
        spec.sweep_budget.empty() ? std::vector<std::int64_t>{spec.budget} : spec.sweep_budget;
    const std::vector<int> history_list =
        spec.sweep_history.empty() ? std::vector<int>{spec.history} : spec.sweep_history;

    // The series does not depend on the sweep point.
    FlowSeries series = spec.data_source == "generate" ? generate(spec.generator) : load(spec.data_source);
    const GridShape shape = series.shape;

    FlowState y_target;
    if (spec.target == "ones") {
        y_target = ones_target(shape);
    } else {
        const FlowSeries target_series = load(spec.target);
        if (target_series.states.empty()) throw FormatError("target file holds no states");
        y_target = transform(target_series.states.front());
    }

    std::vector<ResultRow> rows;
    int point = 0;
    for (int h : history_list) {
        std::optional<std::vector<HistoryWindow>> windows;
        std::optional<MlpModel> model;
        for (double eps : eps_list) {
            for (int n_steps : steps_list) {
                for (std::int64_t b_d : budget_list) {
                    ResultRow row;
                    row.point = point++;
                    row.attack = spec.attack;
                    row.eps = eps;
                    row.steps = n_steps;
                    row.alpha = spec.attack_config.alpha;
                    row.lambda = spec.attack_config.lambda;
                    row.mode = spec.attack_config.mode == PerturbMode::physical ? "physical" : "digital";
                    row.budget = b_d;
                    row.history = h;
                    row.seed = spec.generator.seed;
                    const auto started = std::chrono::steady_clock::now();
                    try {
                        if (!windows) windows = slice_windows(series, h);
                        if (!model) {
                            if (spec.model_source == "train") {
                                model = train(*windows, spec.train).model;
                            } else {
                                model = load_model(spec.model_source);
                                if (model->history != h)
                                    throw ShapeMismatch("loaded model history does not match sweep point");
                            }
                        }
                        const size_t n_train = std::clamp<size_t>(
                            static_cast<size_t>(static_cast<double>(windows->size()) *
                                                spec.train.split_fraction),
                            1, windows->size() - 1);
                        const std::span<const HistoryWindow> test_windows{windows->data() + n_train,
                                                                          windows->size() - n_train};
                        row.clean_loss = eval_clean(*model, test_windows);

                        AttackConfig cfg = spec.attack_config;
                        cfg.epsilon = eps;
                        cfg.steps = n_steps;
                        cfg.target = y_target;

                        std::vector<double> trace;
                        std::vector<HistoryWindow> adv_stream;
                        if (detail::is_universal_attack(spec.attack)) {
                            const size_t n_fit = std::min<size_t>(
                                std::max(1, spec.fit_windows), n_train);
                            const std::span<const HistoryWindow> fit{windows->data(), n_fit};
                            FlowDelta universal;
                            if (spec.attack == "cvpr") {
                                PhysicalBudget budget{b_d, spec.query_limit};
                                universal =
                                    cvpr(*model, fit, cfg, &budget, &trace).to_flow_delta();
                            } else {
                                universal = adaptive_universal(detail::base_attack_of(spec.attack),
                                                               *model, fit, cfg, &trace);
                            }
                            if (cfg.mode == PerturbMode::physical) {
                                PhysicalBudget budget{b_d, spec.query_limit};
                                const PhysicalRealization real =
                                    physical_project(universal, series.states, budget);
                                adv_stream = detail::windows_from_states(real.realized, h);
                            } else {
                                const PerturbationSet pert = replicate(universal, h);
                                adv_stream.reserve(windows->size());
                                for (const HistoryWindow& w : *windows)
                                    adv_stream.push_back(apply_perturbation(w, pert));
                            }
                        } else {
                            adv_stream = attack_stream(spec.attack, *model, *windows, cfg, &trace);
                        }

                        const std::span<const HistoryWindow> adv_test{
                            adv_stream.data() + std::min(n_train, adv_stream.size() - 1),
                            adv_stream.size() - std::min(n_train, adv_stream.size() - 1)};
                        row.adv_loss = eval_adversarial(*model, adv_test, y_target);

                        if (!trace.empty()) {
                            row.trace_file = "trace_" + std::to_string(row.point) + ".csv";
                            std::ofstream ts(fs::path(spec.out_dir) / row.trace_file);
                            ts << "iteration,loss\n";
                            for (size_t i = 0; i < trace.size(); ++i)
                                ts << i << ',' << format_double(trace[i]) << '\n';
                        }

                        if (spec.detector_enabled) {
                            double tau_c = 0.0, tau_v = 0.0;
                            if (spec.detector_frr > 0.0)
                                std::tie(tau_c, tau_v) = calibrate(*windows, spec.detector_frr, shape, h,
                                                                   spec.strict_validity);
                            const detail::DetectorOutcome det = detail::run_detector(
                                shape, h, tau_c, tau_v, spec.strict_validity, *windows, adv_stream);
                            row.far = det.far;
                            row.frr = det.frr;
                            write_verdict_log(det.clean,
                                              (fs::path(spec.out_dir) /
                                               ("verdicts_clean_" + std::to_string(row.point) + ".csv"))
                                                  .string());
                            write_verdict_log(det.adversarial,
                                              (fs::path(spec.out_dir) /
                                               ("verdicts_adv_" + std::to_string(row.point) + ".csv"))
                                                  .string());
                        }
                    } catch (const std::exception& e) {
                        std::string msg = e.what();
                        std::replace(msg.begin(), msg.end(), ',', ';');
                        std::replace(msg.begin(), msg.end(), '\n', ' ');
                        row.status = "error: " + msg;
                    }
                    row.wall_seconds =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
                    std::cout << "point " << row.point << " (" << row.attack << ", eps=" << row.eps
                              << ", steps=" << row.steps << ", budget=" << row.budget << ", h="
                              << row.history << "): " << row.status << " [" << row.wall_seconds
                              << " s]\n";
                    rows.push_back(std::move(row));
                }
            }
        }
    }

    std::ofstream os(fs::path(spec.out_dir) / "results.csv");
    if (!os) throw FormatError("run: cannot write results.csv");
    write_results_csv(rows, os);
    return rows;
}

// ---------------------------------------------------------------------------
// Plot-data emission
// ---------------------------------------------------------------------------

namespace detail {

struct RawRow {
    std::map<std::string, std::string> fields;
};

inline std::vector<RawRow> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("report: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("report: empty CSV: " + path);
    const std::vector<std::string> header = split(line, ',');
    std::vector<RawRow> rows;
    while (std::getline(is, line)) {
        if (trim(line).empty()) continue;
        const std::vector<std::string> vals = split(line, ',');
        RawRow r;
        for (size_t i = 0; i < header.size() && i < vals.size(); ++i) r.fields[header[i]] = vals[i];
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace detail

/// Emit per-figure plot CSVs from a results file: adversarial loss against
/// epsilon, budget and history, FAR against epsilon, and the concatenated
/// iteration traces.
inline void report(const std::string& results_csv, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const std::vector<detail::RawRow> rows = detail::read_csv(results_csv);
    if (rows.empty()) throw EmptyDataset("report: no result rows");
    fs::create_directories(out_dir);
    const fs::path results_dir = fs::path(results_csv).parent_path();

    auto emit = [&](const std::string& file, const std::string& x_field, const std::string& y_field,
                    const std::string& header) {
        std::ofstream os(fs::path(out_dir) / file);
        os << header << '\n';
        for (const detail::RawRow& r : rows) {
            if (r.fields.at("status") != "ok") continue;
            os << r.fields.at("attack") << ',' << r.fields.at(x_field) << ',' << r.fields.at(y_field)
               << '\n';
        }
    };
    emit("loss_vs_eps.csv", "eps", "adv_loss", "attack,eps,adv_loss");
    emit("far_vs_eps.csv", "eps", "far", "attack,eps,far");
    emit("loss_vs_budget.csv", "budget", "adv_loss", "attack,budget,adv_loss");
    emit("loss_vs_history.csv", "history", "adv_loss", "attack,history,adv_loss");

    std::ofstream ts(fs::path(out_dir) / "loss_vs_iteration.csv");
    ts << "attack,eps,point,iteration,loss\n";
    for (const detail::RawRow& r : rows) {
        if (r.fields.at("status") != "ok" || r.fields.at("trace_file").empty()) continue;
        const std::vector<detail::RawRow> trace =
            detail::read_csv((results_dir / r.fields.at("trace_file")).string());
        for (const detail::RawRow& t : trace)
            ts << r.fields.at("attack") << ',' << r.fields.at("eps") << ',' << r.fields.at("point")
               << ',' << t.fields.at("iteration") << ',' << t.fields.at("loss") << '\n';
    }
}

}  // namespace crowdflow
