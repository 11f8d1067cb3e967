#pragma once

// Shared small-scale trained setup for attack/detector/bench tests.

#include "crowdflow/bench.hpp"

namespace testfx {

struct Fixture {
    crowdflow::GeneratorConfig gen;
    crowdflow::FlowSeries series;
    std::vector<crowdflow::HistoryWindow> windows;
    crowdflow::MlpModel model;
    crowdflow::FlowState target;
    int h = 2;
};

inline const Fixture& fixture() {
    static const Fixture fx = [] {
        Fixture f;
        f.gen.shape = {8, 8, 2};
        f.gen.agents = 2000;
        f.gen.steps = 120;
        f.gen.move_prob = 0.7;
        f.gen.hotspot_count = 2;
        f.gen.seed = 2024;
        f.series = crowdflow::generate(f.gen);
        f.windows = crowdflow::slice_windows(f.series, f.h);
        crowdflow::TrainConfig cfg;
        cfg.epochs = 25;
        cfg.hidden_dims = {64};
        cfg.seed = 5;
        f.model = crowdflow::train(f.windows, cfg).model;
        f.target = crowdflow::ones_target(f.gen.shape);
        return f;
    }();
    return fx;
}

inline crowdflow::AttackConfig attack_config(double eps, int steps) {
    crowdflow::AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.steps = steps;
    cfg.target = fixture().target;
    return cfg;
}

/// Mean squared distance of the model output on a window to the target.
inline double mse_to_target(const crowdflow::MlpModel& m, const crowdflow::HistoryWindow& w,
                            const crowdflow::FlowState& target) {
    const crowdflow::FlowState y = crowdflow::forward(m, w);
    double loss = 0.0;
    for (size_t i = 0; i < y.inflow.size(); ++i) {
        loss += (y.inflow[i] - target.inflow[i]) * (y.inflow[i] - target.inflow[i]);
        loss += (y.outflow[i] - target.outflow[i]) * (y.outflow[i] - target.outflow[i]);
    }
    return loss / (2.0 * static_cast<double>(y.inflow.size()));
}

}  // namespace testfx
