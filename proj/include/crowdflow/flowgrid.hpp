#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdflow/grid.hpp"

namespace crowdflow {

struct InsufficientHistory : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-timestep integer device counts on the city grid.
struct IntegerFlowState {
    GridI inflow;
    GridI outflow;
    std::int64_t timestamp = 0;

    IntegerFlowState() = default;
    IntegerFlowState(const GridShape& shape, std::int64_t t)
        : inflow(shape.l1, shape.l2, 0), outflow(shape.l1, shape.l2, 0), timestamp(t) {}
};

/// Transformed real-valued crowd-flow state, entries in [0, 1].
struct FlowState {
    GridD inflow;
    GridD outflow;
    std::int64_t timestamp = 0;

    FlowState() = default;
    FlowState(const GridShape& shape, std::int64_t t)
        : inflow(shape.l1, shape.l2, 0.0), outflow(shape.l1, shape.l2, 0.0), timestamp(t) {}

    bool operator==(const FlowState&) const = default;
};

/// An additive offset to one crowd-flow state (perturbations, gradients).
struct FlowDelta {
    GridD inflow;
    GridD outflow;

    FlowDelta() = default;
    explicit FlowDelta(const GridShape& shape)
        : inflow(shape.l1, shape.l2, 0.0), outflow(shape.l1, shape.l2, 0.0) {}
};

/// Model input: h+1 consecutive states (oldest first) plus the ground-truth
/// next state as training target.
struct HistoryWindow {
    std::vector<FlowState> states;
    FlowState target;

    int history() const { return static_cast<int>(states.size()) - 1; }
    std::int64_t time() const { return states.back().timestamp; }
};

namespace detail {
inline double transform_count(std::int64_t count) {
    return std::min(static_cast<double>(count) / 1000.0, 1.0);
}
}  // namespace detail

/// The element-wise transformation T(n) = min(n / 1000, 1).
inline FlowState transform(const IntegerFlowState& n_state) {
    FlowState x;
    x.timestamp = n_state.timestamp;
    x.inflow = GridD(n_state.inflow.rows(), n_state.inflow.cols());
    x.outflow = GridD(n_state.outflow.rows(), n_state.outflow.cols());
    for (size_t i = 0; i < n_state.inflow.size(); ++i) x.inflow[i] = detail::transform_count(n_state.inflow[i]);
    for (size_t i = 0; i < n_state.outflow.size(); ++i) x.outflow[i] = detail::transform_count(n_state.outflow[i]);
    return x;
}

struct InverseTransformResult {
    IntegerFlowState counts;
    Grid<std::uint8_t> inflow_saturated;   // 1 where the entry sat at the clamp
    Grid<std::uint8_t> outflow_saturated;  //   (count >= 1000 is unrecoverable)
    bool any_saturated = false;
};

/// Inverse of T on the linear branch; saturated entries (value 1) map to 1000
/// and are flagged, since every count >= 1000 transforms to 1.
inline InverseTransformResult inverse_transform(const FlowState& x_state) {
    InverseTransformResult res;
    res.counts.timestamp = x_state.timestamp;
    res.counts.inflow = GridI(x_state.inflow.rows(), x_state.inflow.cols());
    res.counts.outflow = GridI(x_state.outflow.rows(), x_state.outflow.cols());
    res.inflow_saturated = Grid<std::uint8_t>(x_state.inflow.rows(), x_state.inflow.cols(), 0);
    res.outflow_saturated = Grid<std::uint8_t>(x_state.outflow.rows(), x_state.outflow.cols(), 0);
    auto invert = [&](const GridD& src, GridI& dst, Grid<std::uint8_t>& sat) {
        for (size_t i = 0; i < src.size(); ++i) {
            dst[i] = std::llround(1000.0 * src[i]);
            if (src[i] >= 1.0) {
                sat[i] = 1;
                res.any_saturated = true;
            }
        }
    };
    invert(x_state.inflow, res.counts.inflow, res.inflow_saturated);
    invert(x_state.outflow, res.counts.outflow, res.outflow_saturated);
    return res;
}

struct ValidityScores {
    GridD gamma_vi;  // inflow invalidity: inflow(p) - sum of neighborhood outflow
    GridD gamma_vo;  // outflow invalidity: outflow(p) - sum of neighborhood inflow
};

/// Invalidity score matrices via 2-D convolution with the center-one filter f:
///   gamma_vi = inflow  (*) f - outflow (*) (1 - f)
///   gamma_vo = outflow (*) f - inflow  (*) (1 - f)
/// Zero padding keeps the output shape; a point is valid where both are <= 0.
inline ValidityScores validity_scores(const FlowState& state, const GridShape& shape) {
    const GridD f = center_one_filter(shape.n);
    const GridD g = neighborhood_filter(shape.n);
    ValidityScores s;
    s.gamma_vi = convolve_same(state.inflow, f);
    s.gamma_vo = convolve_same(state.outflow, f);
    const GridD out_nbh = convolve_same(state.outflow, g);
    const GridD in_nbh = convolve_same(state.inflow, g);
    for (size_t i = 0; i < s.gamma_vi.size(); ++i) {
        s.gamma_vi[i] -= out_nbh[i];
        s.gamma_vo[i] -= in_nbh[i];
    }
    return s;
}

/// Element-wise invalidity gamma_v = relu(gamma_vi + gamma_vo). In strict
/// mode each score is rectified separately before summing, so a positive
/// inflow violation cannot be masked by a negative outflow margin.
inline GridD validity_indicator(const FlowState& state, const GridShape& shape, bool strict = false) {
    const ValidityScores s = validity_scores(state, shape);
    GridD gv(s.gamma_vi.rows(), s.gamma_vi.cols());
    for (size_t i = 0; i < gv.size(); ++i) {
        if (strict)
            gv[i] = std::max(s.gamma_vi[i], 0.0) + std::max(s.gamma_vo[i], 0.0);
        else
            gv[i] = std::max(s.gamma_vi[i] + s.gamma_vo[i], 0.0);
    }
    return gv;
}

/// Scalar invalidity of one state: sum of the element-wise gamma_v matrix.
inline double invalidity(const FlowState& state, const GridShape& shape, bool strict = false) {
    return validity_indicator(state, shape, strict).sum();
}

/// Inconsistency score of a window against the h windows received before it.
/// previous[k-1] must be the input received at time t-k. The overlap between
/// the current window and the one received k steps ago covers the states
/// t-h .. t-k; gamma_c accumulates the absolute element-wise differences of
/// every such overlap, so it is exactly 0 iff all shared states are identical.
inline double consistency_score(const HistoryWindow& current, std::span<const HistoryWindow> previous) {
    const int h = current.history();
    if (static_cast<int>(previous.size()) < h)
        throw InsufficientHistory("consistency_score: need h previous windows");
    double gamma_c = 0.0;
    for (int k = 1; k <= h; ++k) {
        const HistoryWindow& prev = previous[k - 1];
        if (prev.history() != h) throw ShapeMismatch("consistency_score: history length mismatch");
        // current.states[m] holds x^{t-h+m}; prev.states[k+m] holds the same
        // timestep as received at t-k.
        for (int m = 0; m + k <= h; ++m) {
            const FlowState& a = current.states[m];
            const FlowState& b = prev.states[m + k];
            if (!a.inflow.same_shape(b.inflow)) throw ShapeMismatch("consistency_score: grid shape mismatch");
            for (size_t i = 0; i < a.inflow.size(); ++i) gamma_c += std::abs(a.inflow[i] - b.inflow[i]);
            for (size_t i = 0; i < a.outflow.size(); ++i) gamma_c += std::abs(a.outflow[i] - b.outflow[i]);
        }
    }
    return gamma_c;
}

/// True when the transformed state passes the validity check exactly.
/// T preserves validity of integer states, so generator output always passes.
inline bool valid_under_transform(const IntegerFlowState& n_state, const GridShape& shape) {
    return invalidity(transform(n_state), shape) == 0.0;
}

}  // namespace crowdflow
