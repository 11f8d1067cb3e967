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
#include "crowdflow/flowgrid.hpp"
#include "crowdflow/gradnet.hpp"

namespace crowdflow {

enum class PerturbMode : std::uint8_t {
    digital,   // l-inf ball: -eps <= delta <= eps
    physical,  // realizable by added devices only: 0 <= delta <= eps
};

struct AttackConfig {
    double epsilon = 0.05;
    int steps = 10;
    double alpha = 0.0;    // PGD step; 0 selects 2.5 * epsilon / steps
    double lambda = 1e10;  // Lagrange multiplier for detector-aware objectives
    PerturbMode mode = PerturbMode::digital;
    FlowState target;      // y_target the attacker steers the output towards

    double pgd_step() const { return alpha > 0.0 ? alpha : 2.5 * epsilon / std::max(steps, 1); }
};

/// The attacker's default goal: push every predicted entry up as far as
/// it goes.
inline FlowState ones_target(const GridShape& shape, std::int64_t timestamp = 0) {
    FlowState t(shape, timestamp);
    std::fill(t.inflow.begin(), t.inflow.end(), 1.0);
    std::fill(t.outflow.begin(), t.outflow.end(), 1.0);
    return t;
}

/// Per-state additive perturbations aligned with a history window.
struct PerturbationSet {
    std::vector<FlowDelta> deltas;

    double linf() const {
        double m = 0.0;
        for (const FlowDelta& d : deltas) {
            for (double v : d.inflow) m = std::max(m, std::abs(v));
            for (double v : d.outflow) m = std::max(m, std::abs(v));
        }
        return m;
    }
};

/// Perturbed window: states are clip01(x + delta), timestamps and target kept.
inline HistoryWindow apply_perturbation(const HistoryWindow& window, const PerturbationSet& pert) {
    if (pert.deltas.size() != window.states.size())
        throw ShapeMismatch("apply_perturbation: slice count mismatch");
    HistoryWindow out = window;
    for (size_t m = 0; m < out.states.size(); ++m) {
        FlowState& s = out.states[m];
        const FlowDelta& d = pert.deltas[m];
        for (size_t i = 0; i < s.inflow.size(); ++i)
            s.inflow[i] = std::clamp(s.inflow[i] + d.inflow[i], 0.0, 1.0);
        for (size_t i = 0; i < s.outflow.size(); ++i)
            s.outflow[i] = std::clamp(s.outflow[i] + d.outflow[i], 0.0, 1.0);
    }
    return out;
}

/// Replicate one per-timestep perturbation across all h+1 slices.
inline PerturbationSet replicate(const FlowDelta& delta, int history) {
    PerturbationSet p;
    p.deltas.assign(static_cast<size_t>(history) + 1, delta);
    return p;
}

namespace detail {

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

inline void clip_ball(std::vector<double>& delta, double eps, PerturbMode mode) {
    const double lo = mode == PerturbMode::physical ? 0.0 : -eps;
    for (double& v : delta) v = std::clamp(v, lo, eps);
}

/// Masked loss gradient of sum((F(clip01(x+delta)) - target)^2) w.r.t. delta.
/// Returns the loss. The clip uses a pass-through convention: entries pushed
/// outside [0,1] stop contributing gradient.
inline double adv_loss_grad(const MlpModel& m, const std::vector<double>& x,
                            const std::vector<double>& delta, const std::vector<double>& target,
                            MlpWorkspace& ws, std::vector<double>& xp, std::vector<double>& gx) {
    xp.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) xp[i] = std::clamp(x[i] + delta[i], 0.0, 1.0);
    const std::vector<double>& y = forward_ws(m, xp, ws);
    double loss = 0.0;
    std::vector<double> dy(y.size());
    for (size_t o = 0; o < y.size(); ++o) {
        const double r = y[o] - target[o];
        loss += r * r;
        dy[o] = 2.0 * r;
    }
    backward_ws(m, ws, dy, nullptr, nullptr, &gx);
    for (size_t i = 0; i < x.size(); ++i) {
        const double raw = x[i] + delta[i];
        if (raw < 0.0 || raw > 1.0) gx[i] = 0.0;
    }
    return loss;
}

/// d(sum_p relu(gamma_vi + gamma_vo))/d(entry) is the same matrix for the
/// inflow and the outflow of the state: active - active (*) (1 - f).
inline GridD invalidity_grad(const FlowState& state, const GridShape& shape) {
    const ValidityScores s = validity_scores(state, shape);
    GridD active(s.gamma_vi.rows(), s.gamma_vi.cols());
    for (size_t i = 0; i < active.size(); ++i)
        active[i] = (s.gamma_vi[i] + s.gamma_vo[i] > 0.0) ? 1.0 : 0.0;
    GridD nbh = convolve_same(active, neighborhood_filter(shape.n));
    for (size_t i = 0; i < active.size(); ++i) active[i] -= nbh[i];
    return active;
}

inline FlowState state_from_flat(const GridShape& shape, const double* p, std::int64_t timestamp) {
    FlowState s(shape, timestamp);
    const size_t cells = s.inflow.size();
    std::copy(p, p + cells, s.inflow.begin());
    std::copy(p + cells, p + 2 * cells, s.outflow.begin());
    return s;
}

inline PerturbationSet unflatten_deltas(const GridShape& shape, int history, const std::vector<double>& flat) {
    PerturbationSet out;
    const size_t cells = static_cast<size_t>(shape.cells());
    size_t off = 0;
    for (int m = 0; m <= history; ++m) {
        FlowDelta d(shape);
        std::copy(flat.begin() + off, flat.begin() + off + cells, d.inflow.begin());
        std::copy(flat.begin() + off + cells, flat.begin() + off + 2 * cells, d.outflow.begin());
        out.deltas.push_back(std::move(d));
        off += 2 * cells;
    }
    return out;
}

/// Shared iterative core of FGSM / i-FGSM / PGD: signed gradient steps of a
/// fixed size, projected onto the perturbation ball after every step.
/// `previous` enables the detector-aware Lagrangian penalty when lambda > 0.
inline PerturbationSet signed_window_attack(const MlpModel& model, const HistoryWindow& window,
                                            const AttackConfig& config, int steps, double step_size,
                                            double lambda, std::span<const HistoryWindow> previous,
                                            std::vector<double>* trace) {
    check_window(model, window, "attack");
    if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
    const GridShape& shape = model.shape;
    const int h = model.history;
    const size_t cells = static_cast<size_t>(shape.cells());
    const std::vector<double> x = flatten_window(window);
    const std::vector<double> target = flatten_state(config.target);
    if (target.size() != static_cast<size_t>(model.output_dim()))
        throw ShapeMismatch("attack: target shape mismatch");

    MlpWorkspace ws;
    ws.resize(model);
    std::vector<double> delta(x.size(), 0.0), xp, gx;
    const double out_dim = static_cast<double>(model.output_dim());

    for (int it = 0; it < steps; ++it) {
        const double loss = adv_loss_grad(model, x, delta, target, ws, xp, gx);
        if (trace) trace->push_back(loss / out_dim);

        if (lambda > 0.0) {
            // Consistency term: stored inputs are constants of the attacker.
            const int avail = std::min<int>(h, static_cast<int>(previous.size()));
            for (int k = 1; k <= avail; ++k) {
                const HistoryWindow& prev = previous[k - 1];
                if (prev.history() != h) throw ShapeMismatch("attack: stored window history mismatch");
                for (int m = 0; m + k <= h; ++m) {
                    const double* cur = xp.data() + static_cast<size_t>(m) * 2 * cells;
                    const std::vector<double> ref = flatten_state(prev.states[m + k]);
                    double* g = gx.data() + static_cast<size_t>(m) * 2 * cells;
                    for (size_t i = 0; i < 2 * cells; ++i) {
                        const double raw = x[static_cast<size_t>(m) * 2 * cells + i] +
                                           delta[static_cast<size_t>(m) * 2 * cells + i];
                        if (raw < 0.0 || raw > 1.0) continue;
                        g[i] += lambda * sign(cur[i] - ref[i]);
                    }
                }
            }
            // Validity term, one rectified score per state.
            for (int m = 0; m <= h; ++m) {
                const size_t off = static_cast<size_t>(m) * 2 * cells;
                const FlowState ps = state_from_flat(shape, xp.data() + off, window.states[m].timestamp);
                const GridD vg = invalidity_grad(ps, shape);
                for (size_t i = 0; i < cells; ++i) {
                    const double raw_in = x[off + i] + delta[off + i];
                    if (raw_in >= 0.0 && raw_in <= 1.0) gx[off + i] += lambda * vg[i];
                    const double raw_out = x[off + cells + i] + delta[off + cells + i];
                    if (raw_out >= 0.0 && raw_out <= 1.0) gx[off + cells + i] += lambda * vg[i];
                }
            }
        }

        for (size_t i = 0; i < delta.size(); ++i) delta[i] -= step_size * sign(gx[i]);
        clip_ball(delta, config.epsilon, config.mode);
    }
    if (trace) {
        xp.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) xp[i] = std::clamp(x[i] + delta[i], 0.0, 1.0);
        const std::vector<double>& y = forward_ws(model, xp, ws);
        double loss = 0.0;
        for (size_t o = 0; o < y.size(); ++o) loss += (y[o] - target[o]) * (y[o] - target[o]);
        trace->push_back(loss / out_dim);
    }
    return unflatten_deltas(shape, h, delta);
}

}  // namespace detail

/// Single signed-gradient step of size epsilon.
inline PerturbationSet fgsm(const MlpModel& model, const HistoryWindow& window, const AttackConfig& config,
                            std::vector<double>* trace = nullptr) {
    return detail::signed_window_attack(model, window, config, 1, config.epsilon, 0.0, {}, trace);
}

/// N signed steps of size epsilon / N, clipped to the ball after each step.
inline PerturbationSet ifgsm(const MlpModel& model, const HistoryWindow& window, const AttackConfig& config,
                             std::vector<double>* trace = nullptr) {
    return detail::signed_window_attack(model, window, config, config.steps,
                                        config.epsilon / std::max(config.steps, 1), 0.0, {}, trace);
}

/// N signed steps of size alpha, projected onto the epsilon ball after each.
inline PerturbationSet pgd(const MlpModel& model, const HistoryWindow& window, const AttackConfig& config,
                           std::vector<double>* trace = nullptr) {
    return detail::signed_window_attack(model, window, config, config.steps, config.pgd_step(), 0.0, {},
                                        trace);
}

enum class BaseAttack { fgsm, ifgsm, pgd };

/// Detector-aware Lagrangian variant: descends the gradient of
/// L_adv + lambda * (gamma_c + gamma_v) with the base attack's step rule.
/// `previous` holds the (attacker-visible) inputs the detector has stored,
/// newest first.
inline PerturbationSet aware_variant(BaseAttack base, const MlpModel& model, const HistoryWindow& window,
                                     const AttackConfig& config, std::span<const HistoryWindow> previous,
                                     std::vector<double>* trace = nullptr) {
    switch (base) {
        case BaseAttack::fgsm:
            return detail::signed_window_attack(model, window, config, 1, config.epsilon, config.lambda,
                                                previous, trace);
        case BaseAttack::ifgsm:
            return detail::signed_window_attack(model, window, config, config.steps,
                                                config.epsilon / std::max(config.steps, 1), config.lambda,
                                                previous, trace);
        case BaseAttack::pgd:
            return detail::signed_window_attack(model, window, config, config.steps, config.pgd_step(),
                                                config.lambda, previous, trace);
    }
    throw std::invalid_argument("aware_variant: unknown base attack");
}

/// Adaptive universal attack: one per-timestep perturbation (inflow and
/// outflow matrices) learned over the whole dataset and replicated across
/// every slice of every window, which makes the perturbed stream consistent
/// by construction. The objective penalizes invalidity with lambda.
/// The gradient is averaged over full passes in fixed order, then applied as
/// a signed step per the base attack's rule.
inline FlowDelta adaptive_universal(BaseAttack base, const MlpModel& model,
                                    std::span<const HistoryWindow> windows, const AttackConfig& config,
                                    std::vector<double>* trace = nullptr) {
    if (windows.empty()) throw EmptyDataset("adaptive_universal: no windows");
    for (const HistoryWindow& w : windows) detail::check_window(model, w, "adaptive_universal");
    const GridShape& shape = model.shape;
    const int h = model.history;
    const size_t cells = static_cast<size_t>(shape.cells());
    const size_t state_dim = 2 * cells;

    int steps;
    double step_size;
    switch (base) {
        case BaseAttack::fgsm: steps = 1; step_size = config.epsilon; break;
        case BaseAttack::ifgsm: steps = config.steps; step_size = config.epsilon / std::max(config.steps, 1); break;
        case BaseAttack::pgd: steps = config.steps; step_size = config.pgd_step(); break;
        default: throw std::invalid_argument("adaptive_universal: unknown base attack");
    }
    if (steps < 1) throw std::invalid_argument("adaptive_universal: steps must be >= 1");

    std::vector<std::vector<double>> xs;
    xs.reserve(windows.size());
    for (const HistoryWindow& w : windows) xs.push_back(detail::flatten_window(w));
    const std::vector<double> target = detail::flatten_state(config.target);
    if (target.size() != static_cast<size_t>(model.output_dim()))
        throw ShapeMismatch("adaptive_universal: target shape mismatch");

    detail::MlpWorkspace ws;
    ws.resize(model);
    std::vector<double> du(state_dim, 0.0);
    std::vector<double> xp(xs.front().size()), gx, dy(static_cast<size_t>(model.output_dim()));
    std::vector<double> g_adv(state_dim), g_val(state_dim);
    const double out_dim = static_cast<double>(model.output_dim());

    for (int it = 0; it < steps; ++it) {
        std::fill(g_adv.begin(), g_adv.end(), 0.0);
        std::fill(g_val.begin(), g_val.end(), 0.0);
        double loss_sum = 0.0;
        for (const std::vector<double>& x : xs) {
            for (size_t i = 0; i < x.size(); ++i)
                xp[i] = std::clamp(x[i] + du[i % state_dim], 0.0, 1.0);
            const std::vector<double>& y = detail::forward_ws(model, xp, ws);
            for (size_t o = 0; o < y.size(); ++o) {
                const double r = y[o] - target[o];
                loss_sum += r * r;
                dy[o] = 2.0 * r;
            }
            detail::backward_ws(model, ws, dy, nullptr, nullptr, &gx);
            for (int m = 0; m <= h; ++m) {
                const size_t off = static_cast<size_t>(m) * state_dim;
                for (size_t i = 0; i < state_dim; ++i) {
                    const double raw = x[off + i] + du[i];
                    if (raw >= 0.0 && raw <= 1.0) g_adv[i] += gx[off + i];
                }
                if (config.lambda > 0.0) {
                    const FlowState ps = detail::state_from_flat(shape, xp.data() + off, 0);
                    const GridD vg = detail::invalidity_grad(ps, shape);
                    for (size_t i = 0; i < cells; ++i) {
                        const double raw_in = x[off + i] + du[i];
                        if (raw_in >= 0.0 && raw_in <= 1.0) g_val[i] += vg[i];
                        const double raw_out = x[off + cells + i] + du[cells + i];
                        if (raw_out >= 0.0 && raw_out <= 1.0) g_val[cells + i] += vg[i];
                    }
                }
            }
        }
        if (trace) trace->push_back(loss_sum / (out_dim * static_cast<double>(xs.size())));
        const double inv_n = 1.0 / static_cast<double>(xs.size());
        for (size_t i = 0; i < state_dim; ++i) {
            const double g = g_adv[i] * inv_n + config.lambda * g_val[i] * inv_n;
            du[i] -= step_size * detail::sign(g);
        }
        detail::clip_ball(du, config.epsilon, config.mode);
    }
    if (trace) {
        double loss_sum = 0.0;
        for (const std::vector<double>& x : xs) {
            for (size_t i = 0; i < x.size(); ++i)
                xp[i] = std::clamp(x[i] + du[i % state_dim], 0.0, 1.0);
            const std::vector<double>& y = detail::forward_ws(model, xp, ws);
            for (size_t o = 0; o < y.size(); ++o) loss_sum += (y[o] - target[o]) * (y[o] - target[o]);
        }
        trace->push_back(loss_sum / (out_dim * static_cast<double>(xs.size())));
    }

    FlowDelta delta(shape);
    std::copy(du.begin(), du.begin() + cells, delta.inflow.begin());
    std::copy(du.begin() + cells, du.end(), delta.outflow.begin());
    return delta;
}

// ---------------------------------------------------------------------------
// CVPR attack: jointly optimized inflow perturbation and distribution matrix.
// ---------------------------------------------------------------------------

/// Distribution logits: per cell, one slice per neighborhood offset.
struct WeightTensor {
    int rows = 0;
    int cols = 0;
    int slices = 0;
    std::vector<double> values;

    WeightTensor() = default;
    WeightTensor(const GridShape& shape, double fill)
        : rows(shape.l1), cols(shape.l2), slices(shape.neighbor_slots()),
          values(static_cast<size_t>(rows) * cols * slices, fill) {}

    double& at(int r, int c, int k) {
        return values[(static_cast<size_t>(r) * cols + c) * slices + k];
    }
    double at(int r, int c, int k) const {
        return values[(static_cast<size_t>(r) * cols + c) * slices + k];
    }
};

/// Bijection from neighborhood offsets (i, j) != (0, 0), |i|,|j| <= n onto
/// slice indices [0 .. (2n+1)^2 - 2]: row-major position with the center
/// cell skipped.
inline int slice_index(int i, int j, int n) {
    const int m = (2 * n + 1) * (i + n) + (j + n);
    const int center = 2 * n * (n + 1);
    if (m == center) throw std::invalid_argument("slice_index: (0,0) is not a neighbor");
    return m < center ? m : m - 1;
}

/// Inverse of slice_index.
inline std::pair<int, int> slice_offset(int k, int n) {
    const int center = 2 * n * (n + 1);
    const int m = k < center ? k : k + 1;
    return {m / (2 * n + 1) - n, m % (2 * n + 1) - n};
}

/// Per-cell normalized distribution weights sigma(W) / sum_slices sigma(W).
inline WeightTensor normalized_weights(const WeightTensor& w) {
    WeightTensor out = w;
    const size_t cells = static_cast<size_t>(w.rows) * w.cols;
    for (size_t c = 0; c < cells; ++c) {
        double total = 0.0;
        for (int k = 0; k < w.slices; ++k) {
            const double s = detail::logistic(w.values[c * w.slices + k]);
            out.values[c * w.slices + k] = s;
            total += s;
        }
        for (int k = 0; k < w.slices; ++k) out.values[c * w.slices + k] /= total;
    }
    return out;
}

struct DistributeResult {
    WeightTensor delta_star_out;  // per-cell distributed outflow slices
    GridD delta_out;              // accumulated outflow perturbation
};

/// Apportion each cell's inflow perturbation among its neighbors' outflows:
/// slice k(i,j) of cell q lands on cell q+(i,j); out-of-grid slices are
/// dropped. For interior cells the distributed mass sums exactly to the
/// injected inflow perturbation, which is what keeps the result valid.
inline DistributeResult distribute(const GridD& delta_in, const WeightTensor& w, const GridShape& shape) {
    if (delta_in.rows() != shape.l1 || delta_in.cols() != shape.l2 || w.rows != shape.l1 ||
        w.cols != shape.l2 || w.slices != shape.neighbor_slots())
        throw ShapeMismatch("distribute: shapes disagree");
    DistributeResult res;
    res.delta_star_out = normalized_weights(w);
    for (size_t i = 0; i < res.delta_star_out.values.size(); ++i)
        res.delta_star_out.values[i] *= delta_in[i / w.slices];
    res.delta_out = GridD(shape.l1, shape.l2, 0.0);
    for (int r = 0; r < shape.l1; ++r) {
        for (int c = 0; c < shape.l2; ++c) {
            for (int k = 0; k < w.slices; ++k) {
                const auto [i, j] = slice_offset(k, shape.n);
                const int rr = r + i;
                const int cc = c + j;
                if (shape.contains(rr, cc)) res.delta_out(rr, cc) += res.delta_star_out.at(r, c, k);
            }
        }
    }
    return res;
}

/// Universal perturbation with its distribution matrix; delta_out is always
/// the value derived from (delta_in, W).
struct UniversalPerturbation {
    GridD delta_in;
    WeightTensor w;
    GridD delta_out;

    FlowDelta to_flow_delta() const {
        FlowDelta d;
        d.inflow = delta_in;
        d.outflow = delta_out;
        return d;
    }
};

struct PhysicalBudget {
    std::int64_t b_d = 5000;  // adversarial devices available
    int query_limit = 20;     // full model passes the attacker may spend
};

/// Consistent-valid-physically-realizable attack. Starts from delta_in = 0
/// and W = -5, steps both with signed gradients of size eta = 5*eps/N, clips
/// delta_in to the ball ([0, eps] in physical mode) and re-derives delta_out
/// every iteration. In physical mode the query limit caps the iterations,
/// one full pass over the dataset counting as one query.
inline UniversalPerturbation cvpr(const MlpModel& model, std::span<const HistoryWindow> windows,
                                  const AttackConfig& config, const PhysicalBudget* budget = nullptr,
                                  std::vector<double>* trace = nullptr) {
    if (windows.empty()) throw EmptyDataset("cvpr: no windows");
    for (const HistoryWindow& w : windows) detail::check_window(model, w, "cvpr");
    if (config.steps < 0) throw std::invalid_argument("cvpr: steps must be >= 0");
    const GridShape& shape = model.shape;
    const int h = model.history;
    const size_t cells = static_cast<size_t>(shape.cells());
    const size_t state_dim = 2 * cells;

    int iters = config.steps;
    if (config.mode == PerturbMode::physical && budget != nullptr)
        iters = std::min(iters, budget->query_limit);
    const double eta = iters > 0 ? 5.0 * config.epsilon / iters : 0.0;

    UniversalPerturbation up;
    up.delta_in = GridD(shape.l1, shape.l2, 0.0);
    up.w = WeightTensor(shape, -5.0);
    up.delta_out = GridD(shape.l1, shape.l2, 0.0);

    std::vector<std::vector<double>> xs;
    xs.reserve(windows.size());
    for (const HistoryWindow& w : windows) xs.push_back(detail::flatten_window(w));
    const std::vector<double> target = detail::flatten_state(config.target);
    if (target.size() != static_cast<size_t>(model.output_dim()))
        throw ShapeMismatch("cvpr: target shape mismatch");

    detail::MlpWorkspace ws;
    ws.resize(model);
    std::vector<double> xp(xs.front().size()), gx, dy(static_cast<size_t>(model.output_dim()));
    GridD g_in_fold(shape.l1, shape.l2), g_out_fold(shape.l1, shape.l2);
    WeightTensor gw_raw(shape, 0.0), g_w(shape, 0.0);
    const double out_dim = static_cast<double>(model.output_dim());

    auto pass_loss = [&](bool with_grad) {
        std::fill(g_in_fold.begin(), g_in_fold.end(), 0.0);
        std::fill(g_out_fold.begin(), g_out_fold.end(), 0.0);
        double loss_sum = 0.0;
        for (const std::vector<double>& x : xs) {
            for (size_t off = 0; off < x.size(); off += state_dim) {
                for (size_t i = 0; i < cells; ++i) {
                    xp[off + i] = std::clamp(x[off + i] + up.delta_in[i], 0.0, 1.0);
                    xp[off + cells + i] = std::clamp(x[off + cells + i] + up.delta_out[i], 0.0, 1.0);
                }
            }
            const std::vector<double>& y = detail::forward_ws(model, xp, ws);
            for (size_t o = 0; o < y.size(); ++o) {
                const double r = y[o] - target[o];
                loss_sum += r * r;
                dy[o] = 2.0 * r;
            }
            if (!with_grad) continue;
            detail::backward_ws(model, ws, dy, nullptr, nullptr, &gx);
            for (int m = 0; m <= h; ++m) {
                const size_t off = static_cast<size_t>(m) * state_dim;
                for (size_t i = 0; i < cells; ++i) {
                    const double raw_in = x[off + i] + up.delta_in[i];
                    if (raw_in >= 0.0 && raw_in <= 1.0) g_in_fold[i] += gx[off + i];
                    const double raw_out = x[off + cells + i] + up.delta_out[i];
                    if (raw_out >= 0.0 && raw_out <= 1.0) g_out_fold[i] += gx[off + cells + i];
                }
            }
        }
        return loss_sum / (out_dim * static_cast<double>(xs.size()));
    };

    for (int it = 0; it < iters; ++it) {
        const DistributeResult dist = distribute(up.delta_in, up.w, shape);
        up.delta_out = dist.delta_out;
        const double mean_loss = pass_loss(true);
        if (trace) trace->push_back(mean_loss);

        const double inv_n = 1.0 / static_cast<double>(xs.size());
        const WeightTensor weights = normalized_weights(up.w);

        // Chain delta_out's gradient back onto delta_in and W.
        GridD g_din = g_in_fold;  // direct inflow route
        for (auto& v : g_din) v *= inv_n;
        std::fill(gw_raw.values.begin(), gw_raw.values.end(), 0.0);
        for (int r = 0; r < shape.l1; ++r) {
            for (int c = 0; c < shape.l2; ++c) {
                for (int k = 0; k < weights.slices; ++k) {
                    const auto [i, j] = slice_offset(k, shape.n);
                    const int rr = r + i;
                    const int cc = c + j;
                    if (!shape.contains(rr, cc)) continue;
                    const double go = g_out_fold(rr, cc) * inv_n;
                    g_din(r, c) += go * weights.at(r, c, k);
                    gw_raw.at(r, c, k) = go * up.delta_in(r, c);
                }
            }
        }
        // Through the per-cell softmax-style normalization.
        for (int r = 0; r < shape.l1; ++r) {
            for (int c = 0; c < shape.l2; ++c) {
                double total_s = 0.0, dot = 0.0;
                for (int k = 0; k < weights.slices; ++k) {
                    total_s += detail::logistic(up.w.at(r, c, k));
                    dot += gw_raw.at(r, c, k) * weights.at(r, c, k);
                }
                for (int k = 0; k < weights.slices; ++k) {
                    const double s = detail::logistic(up.w.at(r, c, k));
                    g_w.at(r, c, k) = s * (1.0 - s) / total_s * (gw_raw.at(r, c, k) - dot);
                }
            }
        }

        for (size_t i = 0; i < up.delta_in.size(); ++i)
            up.delta_in[i] -= eta * detail::sign(g_din[i]);
        for (size_t i = 0; i < up.w.values.size(); ++i)
            up.w.values[i] -= eta * detail::sign(g_w.values[i]);
        const double lo = config.mode == PerturbMode::physical ? 0.0 : -config.epsilon;
        for (double& v : up.delta_in) v = std::clamp(v, lo, config.epsilon);
    }
    up.delta_out = distribute(up.delta_in, up.w, shape).delta_out;
    if (trace) trace->push_back(pass_loss(false));
    return up;
}

// ---------------------------------------------------------------------------
// Physical realization
// ---------------------------------------------------------------------------

struct PhysicalRealization {
    GridI delta_in;    // devices added per cell, inflow side
    GridI delta_out;   // devices added per cell, outflow side
    std::vector<FlowState> realized;  // transform(base + delta) per base state
    std::int64_t devices_used = 0;
    bool saturation_warning = false;  // some base + delta crossed the clamp
};

namespace detail {

/// Round non-negative reals to integers summing exactly to `total`
/// (floor + largest fractional remainders, ties resolved by index).
inline std::vector<std::int64_t> largest_remainder_round(const std::vector<double>& values,
                                                         std::int64_t total) {
    std::vector<std::int64_t> out(values.size());
    std::vector<std::pair<double, size_t>> fracs(values.size());
    std::int64_t assigned = 0;
    for (size_t i = 0; i < values.size(); ++i) {
        const double f = std::floor(values[i]);
        out[i] = static_cast<std::int64_t>(f);
        assigned += out[i];
        fracs[i] = {values[i] - f, i};
    }
    std::int64_t rest = total - assigned;
    std::sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (size_t i = 0; i < fracs.size() && rest > 0; ++i, --rest) out[fracs[i].second] += 1;
    return out;
}

}  // namespace detail

/// Quantize a non-negative perturbation to whole devices under the budget and
/// realize it on the integer series. When the rounded perturbation exceeds
/// b_d it is scaled down and re-rounded so the device total hits b_d exactly.
/// The realized flow states are re-derived from the integer counts.
inline PhysicalRealization physical_project(const FlowDelta& delta,
                                            std::span<const IntegerFlowState> base,
                                            const PhysicalBudget& budget) {
    if (base.empty()) throw EmptyDataset("physical_project: no base states");
    for (double v : delta.inflow)
        if (v < 0.0) throw std::invalid_argument("physical_project: negative inflow perturbation");
    for (double v : delta.outflow)
        if (v < 0.0) throw std::invalid_argument("physical_project: negative outflow perturbation");
    if (budget.b_d < 0) throw std::invalid_argument("physical_project: negative device budget");

    PhysicalRealization res;
    res.delta_in = GridI(delta.inflow.rows(), delta.inflow.cols(), 0);
    res.delta_out = GridI(delta.outflow.rows(), delta.outflow.cols(), 0);

    const size_t cells = delta.inflow.size();
    if (budget.b_d > 0) {
        std::vector<std::int64_t> devices(2 * cells, 0);
        std::int64_t total = 0;
        for (size_t i = 0; i < cells; ++i) {
            devices[i] = std::llround(1000.0 * delta.inflow[i]);
            devices[cells + i] = std::llround(1000.0 * delta.outflow[i]);
            total += devices[i] + devices[cells + i];
        }
        if (total > budget.b_d) {
            const double scale = static_cast<double>(budget.b_d) / static_cast<double>(total);
            std::vector<double> scaled(2 * cells);
            for (size_t i = 0; i < 2 * cells; ++i) scaled[i] = static_cast<double>(devices[i]) * scale;
            devices = detail::largest_remainder_round(scaled, budget.b_d);
        }
        for (size_t i = 0; i < cells; ++i) {
            res.delta_in[i] = devices[i];
            res.delta_out[i] = devices[cells + i];
            res.devices_used += devices[i] + devices[cells + i];
        }
    }

    res.realized.reserve(base.size());
    for (const IntegerFlowState& s : base) {
        if (!s.inflow.same_shape(res.delta_in))
            throw ShapeMismatch("physical_project: base shape mismatch");
        IntegerFlowState pert(s);
        for (size_t i = 0; i < cells; ++i) {
            if (res.delta_in[i] > 0 && pert.inflow[i] + res.delta_in[i] >= 1000)
                res.saturation_warning = true;
            if (res.delta_out[i] > 0 && pert.outflow[i] + res.delta_out[i] >= 1000)
                res.saturation_warning = true;
            pert.inflow[i] += res.delta_in[i];
            pert.outflow[i] += res.delta_out[i];
        }
        res.realized.push_back(transform(pert));
    }
    return res;
}

// ---------------------------------------------------------------------------
// FLOWPERT v1: magic "CFPP", version u16, mode u8, kind u8, eps f64,
// steps u32, l1 u16, l2 u16, n u16, then delta_in, W, delta_out as
// little-endian f64. kind 0 = cvpr (W meaningful), 1 = adaptive universal
// (free delta pair, W stored as zeros).
// ---------------------------------------------------------------------------

struct PerturbationFile {
    UniversalPerturbation pert;
    GridShape shape;
    PerturbMode mode = PerturbMode::digital;
    std::uint8_t kind = 0;
    double epsilon = 0.0;
    std::uint32_t steps = 0;
};

inline void save(const PerturbationFile& pf, std::ostream& os) {
    binio::write_magic(os, "CFPP");
    binio::write_le<std::uint16_t>(os, 1);
    binio::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(pf.mode));
    binio::write_le<std::uint8_t>(os, pf.kind);
    binio::write_le<double>(os, pf.epsilon);
    binio::write_le<std::uint32_t>(os, pf.steps);
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(pf.shape.l1));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(pf.shape.l2));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(pf.shape.n));
    for (double v : pf.pert.delta_in) binio::write_le<double>(os, v);
    for (double v : pf.pert.w.values) binio::write_le<double>(os, v);
    for (double v : pf.pert.delta_out) binio::write_le<double>(os, v);
    if (!os) throw FormatError("FLOWPERT: write failed");
}

inline void save(const PerturbationFile& pf, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("FLOWPERT: cannot open for writing: " + path);
    save(pf, os);
}

inline PerturbationFile load_perturbation(std::istream& is) {
    binio::expect_magic(is, "CFPP", "FLOWPERT");
    const auto version = binio::read_le<std::uint16_t>(is, "version");
    if (version != 1) throw FormatError("FLOWPERT: unsupported version " + std::to_string(version));
    PerturbationFile pf;
    pf.mode = static_cast<PerturbMode>(binio::read_le<std::uint8_t>(is, "mode"));
    pf.kind = binio::read_le<std::uint8_t>(is, "kind");
    pf.epsilon = binio::read_le<double>(is, "epsilon");
    pf.steps = binio::read_le<std::uint32_t>(is, "steps");
    pf.shape.l1 = binio::read_le<std::uint16_t>(is, "l1");
    pf.shape.l2 = binio::read_le<std::uint16_t>(is, "l2");
    pf.shape.n = binio::read_le<std::uint16_t>(is, "n");
    pf.shape.validate();
    pf.pert.delta_in = GridD(pf.shape.l1, pf.shape.l2);
    pf.pert.w = WeightTensor(pf.shape, 0.0);
    pf.pert.delta_out = GridD(pf.shape.l1, pf.shape.l2);
    for (double& v : pf.pert.delta_in) v = binio::read_le<double>(is, "delta_in");
    for (double& v : pf.pert.w.values) v = binio::read_le<double>(is, "W");
    for (double& v : pf.pert.delta_out) v = binio::read_le<double>(is, "delta_out");
    return pf;
}

inline PerturbationFile load_perturbation(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("FLOWPERT: cannot open: " + path);
    return load_perturbation(is);
}

}  // namespace crowdflow
