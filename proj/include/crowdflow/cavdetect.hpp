#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crowdflow/binio.hpp"
#include "crowdflow/csv.hpp"
#include "crowdflow/flowgrid.hpp"

namespace crowdflow {

struct StreamTooShort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoLabeledSamples : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DetectionVerdict {
    std::int64_t timestep = 0;
    double gamma_c = 0.0;
    double gamma_v = 0.0;
    bool consistent = true;
    bool valid = true;
    bool adversarial = false;
    bool warmup = false;
};

/// Runtime CaV-detect: keeps the last h observed inputs and flags any input
/// whose inconsistency or invalidity score exceeds its threshold. Strict
/// zero thresholds reproduce the "> 0" checks; calibrate() relaxes them to
/// empirical quantiles when clean scores are not exactly zero. The detector
/// never consults the predictor, so verdicts are model-agnostic.
class Detector {
public:
    Detector(const GridShape& shape, int history, double tau_c = 0.0, double tau_v = 0.0,
             bool strict_validity = false)
        : shape_(shape), history_(history), tau_c_(tau_c), tau_v_(tau_v), strict_(strict_validity) {
        shape_.validate();
        if (history_ < 1) throw std::invalid_argument("Detector: history must be >= 1");
        if (tau_c_ < 0.0 || tau_v_ < 0.0) throw std::invalid_argument("Detector: thresholds must be >= 0");
    }

    int history() const { return history_; }
    double tau_c() const { return tau_c_; }
    double tau_v() const { return tau_v_; }
    void set_thresholds(double tau_c, double tau_v) {
        if (tau_c < 0.0 || tau_v < 0.0) throw std::invalid_argument("Detector: thresholds must be >= 0");
        tau_c_ = tau_c;
        tau_v_ = tau_v;
    }

    /// Check one input against the stored memory, then store it. Single
    /// writer per stream; the first h observations are warm-up passes.
    DetectionVerdict observe(const HistoryWindow& input) {
        if (input.history() != history_) throw ShapeMismatch("observe: window history mismatch");
        for (const FlowState& s : input.states)
            if (s.inflow.rows() != shape_.l1 || s.inflow.cols() != shape_.l2)
                throw ShapeMismatch("observe: grid shape mismatch");

        DetectionVerdict v;
        v.timestep = input.time();
        // Invalidity over the window: maximum over its h+1 states.
        for (const FlowState& s : input.states)
            v.gamma_v = std::max(v.gamma_v, invalidity(s, shape_, strict_));

        if (static_cast<int>(memory_.size()) < history_) {
            v.warmup = true;
            v.valid = v.gamma_v <= tau_v_;
            v.adversarial = false;
        } else {
            v.gamma_c = consistency_score(input, memory_);
            v.consistent = v.gamma_c <= tau_c_;
            v.valid = v.gamma_v <= tau_v_;
            v.adversarial = !(v.consistent && v.valid);
        }

        memory_.insert(memory_.begin(), input);  // memory_[k-1] is the input from t-k
        if (static_cast<int>(memory_.size()) > history_) memory_.pop_back();
        return v;
    }

    /// The stored inputs, newest first (what an aware attacker would see).
    const std::vector<HistoryWindow>& memory() const { return memory_; }

    void reset() { memory_.clear(); }

private:
    GridShape shape_;
    int history_;
    double tau_c_;
    double tau_v_;
    bool strict_;
    std::vector<HistoryWindow> memory_;
};

/// Thresholds from a clean stream: each check is budgeted half the target
/// FRR, so tau_c and tau_v are the (1 - frr/2) empirical quantiles of the
/// post-warmup clean scores. Exactly-zero clean scores yield zero thresholds.
inline std::pair<double, double> calibrate(std::span<const HistoryWindow> clean_stream, double target_frr,
                                           const GridShape& shape, int history,
                                           bool strict_validity = false) {
    if (target_frr <= 0.0 || target_frr > 1.0)
        throw std::invalid_argument("calibrate: target_frr must be in (0,1]");
    Detector probe(shape, history, 0.0, 0.0, strict_validity);
    std::vector<double> cs, vs;
    for (const HistoryWindow& w : clean_stream) {
        const DetectionVerdict v = probe.observe(w);
        if (v.warmup) continue;
        cs.push_back(v.gamma_c);
        vs.push_back(v.gamma_v);
    }
    if (cs.size() < 200) throw StreamTooShort("calibrate: need >= 200 post-warmup observations");
    auto quantile = [](std::vector<double>& xs, double q) {
        std::sort(xs.begin(), xs.end());
        const size_t idx = std::min(
            xs.size() - 1,
            static_cast<size_t>(std::ceil(q * static_cast<double>(xs.size()))) - (q > 0.0 ? 1 : 0));
        return xs[idx];
    };
    const double q = 1.0 - target_frr / 2.0;
    return {quantile(cs, q), quantile(vs, q)};
}

/// FAR = accepted adversarial / total adversarial, FRR = rejected clean /
/// total clean; warm-up verdicts are excluded from both.
inline std::pair<double, double> far_frr(
    std::span<const std::pair<DetectionVerdict, bool>> labeled_verdicts) {
    std::int64_t adv_total = 0, adv_accepted = 0, clean_total = 0, clean_rejected = 0;
    for (const auto& [verdict, is_adversarial] : labeled_verdicts) {
        if (verdict.warmup) continue;
        if (is_adversarial) {
            ++adv_total;
            if (!verdict.adversarial) ++adv_accepted;
        } else {
            ++clean_total;
            if (verdict.adversarial) ++clean_rejected;
        }
    }
    if (adv_total == 0 || clean_total == 0)
        throw NoLabeledSamples("far_frr: need at least one adversarial and one clean sample");
    return {static_cast<double>(adv_accepted) / static_cast<double>(adv_total),
            static_cast<double>(clean_rejected) / static_cast<double>(clean_total)};
}

/// Verdict log CSV: timestep,gamma_c,gamma_v,consistent,valid,adversarial,warmup.
inline void write_verdict_log(std::span<const DetectionVerdict> verdicts, std::ostream& os) {
    os << "timestep,gamma_c,gamma_v,consistent,valid,adversarial,warmup\n";
    for (const DetectionVerdict& v : verdicts) {
        os << v.timestep << ',' << format_double(v.gamma_c) << ',' << format_double(v.gamma_v) << ','
           << int(v.consistent) << ',' << int(v.valid) << ',' << int(v.adversarial) << ','
           << int(v.warmup) << '\n';
    }
}

inline void write_verdict_log(std::span<const DetectionVerdict> verdicts, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("verdict log: cannot open for writing: " + path);
    write_verdict_log(verdicts, os);
}

}  // namespace crowdflow
