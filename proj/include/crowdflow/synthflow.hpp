#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdflow/binio.hpp"
#include "crowdflow/flowgrid.hpp"
#include "crowdflow/rng.hpp"

namespace crowdflow {

struct SeriesTooShort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Synthetic timeline generator settings. Agents random-walk on the grid;
/// hotspots bias the walk so the series has spatial structure worth learning.
struct GeneratorConfig {
    GridShape shape{16, 16, 2};
    int agents = 20000;
    int steps = 2000;
    double move_prob = 0.6;
    int hotspot_count = 3;
    std::uint64_t seed = 42;

    void validate() const {
        shape.validate();
        if (agents < 0) throw std::invalid_argument("GeneratorConfig: agents must be >= 0");
        if (steps < 1) throw std::invalid_argument("GeneratorConfig: steps must be >= 1");
        if (move_prob < 0.0 || move_prob > 1.0)
            throw std::invalid_argument("GeneratorConfig: move_prob must be in [0,1]");
    }
};

struct FlowSeries {
    GridShape shape;
    std::vector<IntegerFlowState> states;

    size_t size() const { return states.size(); }
};

/// Random-walk generation. Each step every agent independently stays put
/// (contributing to neither flow) or moves to a cell of its n-neighborhood
/// sampled with weight 1 + proximity to the nearest hotspot; a mover counts
/// one unit of outflow at its source and one of inflow at its destination.
/// Output is valid and consistent by construction and bit-identical per seed.
inline FlowSeries generate(const GeneratorConfig& config) {
    config.validate();
    const GridShape& shape = config.shape;
    Rng rng(config.seed);

    // Hotspot proximity weights, 1 everywhere when there are no hotspots.
    GridD weight(shape.l1, shape.l2, 1.0);
    if (config.hotspot_count > 0) {
        std::vector<GridPoint> hotspots;
        hotspots.reserve(static_cast<size_t>(config.hotspot_count));
        for (int i = 0; i < config.hotspot_count; ++i)
            hotspots.push_back({static_cast<int>(rng.next_index(shape.l1)),
                                static_cast<int>(rng.next_index(shape.l2))});
        for (int r = 0; r < shape.l1; ++r) {
            for (int c = 0; c < shape.l2; ++c) {
                int best = std::numeric_limits<int>::max();
                for (const GridPoint& hs : hotspots)
                    best = std::min(best, std::max(std::abs(r - hs.r), std::abs(c - hs.c)));
                weight(r, c) = 1.0 + 1.0 / (1.0 + best);
            }
        }
    }

    std::vector<int> agent_r(static_cast<size_t>(config.agents));
    std::vector<int> agent_c(static_cast<size_t>(config.agents));
    for (int a = 0; a < config.agents; ++a) {
        agent_r[a] = static_cast<int>(rng.next_index(shape.l1));
        agent_c[a] = static_cast<int>(rng.next_index(shape.l2));
    }

    FlowSeries series;
    series.shape = shape;
    series.states.reserve(static_cast<size_t>(config.steps));

    std::vector<double> cumulative;
    std::vector<GridPoint> candidates;
    for (int step = 0; step < config.steps; ++step) {
        IntegerFlowState state(shape, step);
        for (int a = 0; a < config.agents; ++a) {
            if (rng.next_double() >= config.move_prob) continue;
            candidates.clear();
            cumulative.clear();
            double total = 0.0;
            for (int i = -shape.n; i <= shape.n; ++i) {
                for (int j = -shape.n; j <= shape.n; ++j) {
                    if (i == 0 && j == 0) continue;
                    const int r = agent_r[a] + i;
                    const int c = agent_c[a] + j;
                    if (!shape.contains(r, c)) continue;
                    candidates.push_back({r, c});
                    total += weight(r, c);
                    cumulative.push_back(total);
                }
            }
            const double pick = rng.next_double() * total;
            size_t idx = std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin();
            if (idx >= candidates.size()) idx = candidates.size() - 1;
            state.outflow(agent_r[a], agent_c[a]) += 1;
            state.inflow(candidates[idx].r, candidates[idx].c) += 1;
            agent_r[a] = candidates[idx].r;
            agent_c[a] = candidates[idx].c;
        }
        series.states.push_back(std::move(state));
    }
    return series;
}

/// Transform the series and cut overlapping model inputs with stride 1.
/// The window ending at timestep t carries x^{t+1} as its training target.
inline std::vector<HistoryWindow> slice_windows(const FlowSeries& series, int h) {
    if (h < 1) throw std::invalid_argument("slice_windows: history length must be >= 1");
    const int len = static_cast<int>(series.states.size());
    if (len < h + 2) throw SeriesTooShort("slice_windows: series length must be >= h + 2");

    std::vector<FlowState> transformed;
    transformed.reserve(series.states.size());
    for (const IntegerFlowState& s : series.states) transformed.push_back(transform(s));

    std::vector<HistoryWindow> windows;
    windows.reserve(static_cast<size_t>(len - 1 - h));
    for (int t = h; t + 1 < len; ++t) {
        HistoryWindow w;
        w.states.assign(transformed.begin() + (t - h), transformed.begin() + t + 1);
        w.target = transformed[static_cast<size_t>(t) + 1];
        windows.push_back(std::move(w));
    }
    return windows;
}

// ---------------------------------------------------------------------------
// FLOWBIN v1: magic "CFPB", version u16, l1 u16, l2 u16, n u16, steps u32,
// start timestamp i64, then per step inflow and outflow as l1*l2 u32 values
// row-major. All little-endian.
// ---------------------------------------------------------------------------

inline void save(const FlowSeries& series, std::ostream& os) {
    binio::write_magic(os, "CFPB");
    binio::write_le<std::uint16_t>(os, 1);
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(series.shape.l1));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(series.shape.l2));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(series.shape.n));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(series.states.size()));
    binio::write_le<std::int64_t>(os, series.states.empty() ? 0 : series.states.front().timestamp);
    for (const IntegerFlowState& s : series.states) {
        auto write_grid = [&](const GridI& g) {
            for (size_t i = 0; i < g.size(); ++i) {
                if (g[i] < 0 || g[i] > std::numeric_limits<std::uint32_t>::max())
                    throw FormatError("FLOWBIN: count out of u32 range");
                binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(g[i]));
            }
        };
        write_grid(s.inflow);
        write_grid(s.outflow);
    }
    if (!os) throw FormatError("FLOWBIN: write failed");
}

inline void save(const FlowSeries& series, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("FLOWBIN: cannot open for writing: " + path);
    save(series, os);
}

inline FlowSeries load(std::istream& is) {
    binio::expect_magic(is, "CFPB", "FLOWBIN");
    const auto version = binio::read_le<std::uint16_t>(is, "version");
    if (version != 1) throw FormatError("FLOWBIN: unsupported version " + std::to_string(version));
    FlowSeries series;
    series.shape.l1 = binio::read_le<std::uint16_t>(is, "l1");
    series.shape.l2 = binio::read_le<std::uint16_t>(is, "l2");
    series.shape.n = binio::read_le<std::uint16_t>(is, "n");
    series.shape.validate();
    const auto steps = binio::read_le<std::uint32_t>(is, "step count");
    const auto start = binio::read_le<std::int64_t>(is, "start timestamp");
    series.states.reserve(steps);
    for (std::uint32_t t = 0; t < steps; ++t) {
        IntegerFlowState s(series.shape, start + t);
        for (size_t i = 0; i < s.inflow.size(); ++i) s.inflow[i] = binio::read_le<std::uint32_t>(is, "inflow");
        for (size_t i = 0; i < s.outflow.size(); ++i) s.outflow[i] = binio::read_le<std::uint32_t>(is, "outflow");
        series.states.push_back(std::move(s));
    }
    return series;
}

inline FlowSeries load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("FLOWBIN: cannot open: " + path);
    return load(is);
}

/// Per-step aggregate statistics as CSV (timestep,total_inflow,total_outflow,max_cell).
inline void export_step_stats(const FlowSeries& series, std::ostream& os) {
    os << "timestep,total_inflow,total_outflow,max_cell\n";
    for (const IntegerFlowState& s : series.states) {
        std::int64_t max_cell = 0;
        for (size_t i = 0; i < s.inflow.size(); ++i) max_cell = std::max(max_cell, s.inflow[i]);
        for (size_t i = 0; i < s.outflow.size(); ++i) max_cell = std::max(max_cell, s.outflow[i]);
        os << s.timestamp << ',' << s.inflow.sum() << ',' << s.outflow.sum() << ',' << max_cell << '\n';
    }
}

inline void export_step_stats(const FlowSeries& series, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("stats CSV: cannot open for writing: " + path);
    export_step_stats(series, os);
}

}  // namespace crowdflow
