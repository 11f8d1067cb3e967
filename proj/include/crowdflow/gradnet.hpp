#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdflow/binio.hpp"
#include "crowdflow/flowgrid.hpp"
#include "crowdflow/rng.hpp"

namespace crowdflow {

struct EmptyDataset : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Reference predictor: fully connected net with rectifier hidden layers and
/// a logistic output layer, so every output entry lies in (0, 1) like a
/// transformed crowd-flow state. Input is the flattened history window
/// (2*(h+1)*l1*l2 values, states oldest first, inflow before outflow);
/// output is the flattened predicted next state (2*l1*l2 values).
struct MlpModel {
    GridShape shape;
    int history = 0;
    std::vector<int> layer_dims;                 // input, hidden..., output
    std::vector<std::vector<double>> weights;    // per layer, out x in row-major
    std::vector<std::vector<double>> biases;     // per layer, out

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    size_t layer_count() const { return weights.size(); }

    size_t parameter_count() const {
        size_t n = 0;
        for (size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }
};

/// Glorot-style uniform initialization, deterministic per seed.
inline MlpModel make_mlp(const GridShape& shape, int history, const std::vector<int>& hidden_dims,
                         std::uint64_t seed) {
    shape.validate();
    if (history < 1) throw std::invalid_argument("make_mlp: history must be >= 1");
    MlpModel m;
    m.shape = shape;
    m.history = history;
    m.layer_dims.push_back(2 * (history + 1) * shape.cells());
    for (int d : hidden_dims) {
        if (d < 1) throw std::invalid_argument("make_mlp: hidden width must be >= 1");
        m.layer_dims.push_back(d);
    }
    m.layer_dims.push_back(2 * shape.cells());

    Rng rng(seed);
    for (size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        const int fan_in = m.layer_dims[l];
        const int fan_out = m.layer_dims[l + 1];
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::vector<double> w(static_cast<size_t>(fan_in) * fan_out);
        for (double& v : w) v = rng.next_double(-bound, bound);
        m.weights.push_back(std::move(w));
        m.biases.emplace_back(static_cast<size_t>(fan_out), 0.0);
    }
    return m;
}

namespace detail {

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Reused activation/delta buffers for repeated passes over one model.
struct MlpWorkspace {
    std::vector<std::vector<double>> acts;    // acts[0] = input copy, acts[L] = output
    std::vector<std::vector<double>> deltas;  // per layer dL/dz

    void resize(const MlpModel& m) {
        acts.resize(m.layer_dims.size());
        deltas.resize(m.layer_dims.size());
        for (size_t l = 0; l < m.layer_dims.size(); ++l) {
            acts[l].resize(static_cast<size_t>(m.layer_dims[l]));
            deltas[l].resize(static_cast<size_t>(m.layer_dims[l]));
        }
    }
};

inline const std::vector<double>& forward_ws(const MlpModel& m, const std::vector<double>& x,
                                             MlpWorkspace& ws) {
    ws.acts[0] = x;
    const size_t L = m.layer_count();
    for (size_t l = 0; l < L; ++l) {
        const int in_dim = m.layer_dims[l];
        const int out_dim = m.layer_dims[l + 1];
        const double* w = m.weights[l].data();
        const double* a = ws.acts[l].data();
        std::vector<double>& out = ws.acts[l + 1];
        for (int o = 0; o < out_dim; ++o) {
            const double* row = w + static_cast<size_t>(o) * in_dim;
            double z = m.biases[l][o];
            for (int i = 0; i < in_dim; ++i) z += row[i] * a[i];
            out[o] = (l + 1 == L) ? logistic(z) : std::max(z, 0.0);
        }
    }
    return ws.acts[L];
}

/// Backward pass from an already-populated workspace. output_grad is dL/dy.
/// Fills ws.deltas and, when grads/bias_grads are non-null, accumulates
/// parameter gradients into them. Returns dL/dx in input_grad if non-null.
inline void backward_ws(const MlpModel& m, MlpWorkspace& ws, const std::vector<double>& output_grad,
                        std::vector<std::vector<double>>* weight_grads,
                        std::vector<std::vector<double>>* bias_grads, std::vector<double>* input_grad) {
    const size_t L = m.layer_count();
    // dL/dz at the output: logistic derivative y(1-y).
    {
        std::vector<double>& dz = ws.deltas[L];
        const std::vector<double>& y = ws.acts[L];
        for (size_t o = 0; o < y.size(); ++o) dz[o] = output_grad[o] * y[o] * (1.0 - y[o]);
    }
    for (size_t l = L; l-- > 0;) {
        const int in_dim = m.layer_dims[l];
        const int out_dim = m.layer_dims[l + 1];
        const double* w = m.weights[l].data();
        const std::vector<double>& dz = ws.deltas[l + 1];
        if (weight_grads) {
            double* gw = (*weight_grads)[l].data();
            const double* a = ws.acts[l].data();
            for (int o = 0; o < out_dim; ++o) {
                double* row = gw + static_cast<size_t>(o) * in_dim;
                const double g = dz[o];
                for (int i = 0; i < in_dim; ++i) row[i] += g * a[i];
            }
        }
        if (bias_grads)
            for (int o = 0; o < out_dim; ++o) (*bias_grads)[l][o] += dz[o];

        const bool need_below = l > 0 || input_grad != nullptr;
        if (!need_below) continue;
        std::vector<double>& da = ws.deltas[l];
        std::fill(da.begin(), da.end(), 0.0);
        for (int o = 0; o < out_dim; ++o) {
            const double* row = w + static_cast<size_t>(o) * in_dim;
            const double g = dz[o];
            for (int i = 0; i < in_dim; ++i) da[i] += g * row[i];
        }
        if (l > 0) {
            // Rectifier gate of the layer below.
            const std::vector<double>& a = ws.acts[l];
            for (int i = 0; i < in_dim; ++i)
                if (a[i] <= 0.0) da[i] = 0.0;
        } else if (input_grad != nullptr) {
            *input_grad = da;
        }
    }
}

inline void flatten_state(const FlowState& s, std::vector<double>& out) {
    out.insert(out.end(), s.inflow.begin(), s.inflow.end());
    out.insert(out.end(), s.outflow.begin(), s.outflow.end());
}

inline std::vector<double> flatten_window(const HistoryWindow& w) {
    std::vector<double> x;
    x.reserve(2 * w.states.size() * w.states.front().inflow.size());
    for (const FlowState& s : w.states) flatten_state(s, x);
    return x;
}

inline std::vector<double> flatten_state(const FlowState& s) {
    std::vector<double> x;
    x.reserve(2 * s.inflow.size());
    flatten_state(s, x);
    return x;
}

inline void check_window(const MlpModel& m, const HistoryWindow& w, const char* who) {
    if (w.history() != m.history) throw ShapeMismatch(std::string(who) + ": window history mismatch");
    for (const FlowState& s : w.states)
        if (s.inflow.rows() != m.shape.l1 || s.inflow.cols() != m.shape.l2)
            throw ShapeMismatch(std::string(who) + ": grid shape mismatch");
}

}  // namespace detail

/// Predict the next crowd-flow state.
inline FlowState forward(const MlpModel& model, const HistoryWindow& input) {
    detail::check_window(model, input, "forward");
    detail::MlpWorkspace ws;
    ws.resize(model);
    const std::vector<double>& y = detail::forward_ws(model, detail::flatten_window(input), ws);
    FlowState out(model.shape, input.time() + 1);
    const size_t cells = out.inflow.size();
    std::copy(y.begin(), y.begin() + cells, out.inflow.begin());
    std::copy(y.begin() + cells, y.end(), out.outflow.begin());
    return out;
}

/// Exact reverse-mode gradient of sum((F(x) - target)^2) with respect to
/// every input entry, shaped like the window.
inline std::vector<FlowDelta> input_gradient(const MlpModel& model, const HistoryWindow& input,
                                             const FlowState& target) {
    detail::check_window(model, input, "input_gradient");
    if (target.inflow.rows() != model.shape.l1 || target.inflow.cols() != model.shape.l2)
        throw ShapeMismatch("input_gradient: target shape mismatch");
    detail::MlpWorkspace ws;
    ws.resize(model);
    const std::vector<double>& y = detail::forward_ws(model, detail::flatten_window(input), ws);
    const std::vector<double> t = detail::flatten_state(target);
    std::vector<double> dy(y.size());
    for (size_t i = 0; i < y.size(); ++i) dy[i] = 2.0 * (y[i] - t[i]);
    std::vector<double> gx;
    detail::backward_ws(model, ws, dy, nullptr, nullptr, &gx);

    std::vector<FlowDelta> grad;
    grad.reserve(input.states.size());
    const size_t cells = static_cast<size_t>(model.shape.cells());
    size_t off = 0;
    for (size_t s = 0; s < input.states.size(); ++s) {
        FlowDelta d(model.shape);
        std::copy(gx.begin() + off, gx.begin() + off + cells, d.inflow.begin());
        std::copy(gx.begin() + off + cells, gx.begin() + off + 2 * cells, d.outflow.begin());
        grad.push_back(std::move(d));
        off += 2 * cells;
    }
    return grad;
}

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 7;
    double split_fraction = 0.8;  // chronological train/test split
    std::vector<int> hidden_dims{256};
    int neighborhood = 2;  // adjacency radius recorded in the model's shape

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
        if (split_fraction <= 0.0 || split_fraction >= 1.0)
            throw std::invalid_argument("TrainConfig: split fraction must be in (0,1)");
    }
};

struct TrainResult {
    MlpModel model;
    double test_loss = 0.0;               // held-out mean-per-element MSE
    std::vector<double> epoch_losses;     // mean training loss per epoch
};

/// Mini-batch gradient descent with momentum 0.9 on the mean squared error.
/// The split is chronological (no shuffling across the boundary) so that
/// time-series leakage cannot contaminate downstream experiments.
inline TrainResult train(const std::vector<HistoryWindow>& data, const TrainConfig& config) {
    config.validate();
    if (data.empty()) throw EmptyDataset("train: no windows");
    for (const HistoryWindow& w : data)
        if (w.history() != data.front().history() ||
            !w.states.front().inflow.same_shape(data.front().states.front().inflow))
            throw ShapeMismatch("train: windows are not homogeneous");

    GridShape shape{data.front().states.front().inflow.rows(),
                    data.front().states.front().inflow.cols(), config.neighborhood};
    const int h = data.front().history();

    size_t n_train = static_cast<size_t>(static_cast<double>(data.size()) * config.split_fraction);
    n_train = std::clamp<size_t>(n_train, 1, data.size() - 1);

    TrainResult res;
    res.model = make_mlp(shape, h, config.hidden_dims, config.seed);
    MlpModel& m = res.model;

    std::vector<std::vector<double>> inputs, targets;
    inputs.reserve(data.size());
    targets.reserve(data.size());
    for (const HistoryWindow& w : data) {
        inputs.push_back(detail::flatten_window(w));
        targets.push_back(detail::flatten_state(w.target));
    }

    std::vector<std::vector<double>> gw(m.layer_count()), gb(m.layer_count());
    std::vector<std::vector<double>> vw(m.layer_count()), vb(m.layer_count());
    for (size_t l = 0; l < m.layer_count(); ++l) {
        gw[l].assign(m.weights[l].size(), 0.0);
        gb[l].assign(m.biases[l].size(), 0.0);
        vw[l].assign(m.weights[l].size(), 0.0);
        vb[l].assign(m.biases[l].size(), 0.0);
    }

    detail::MlpWorkspace ws;
    ws.resize(m);
    std::vector<double> dy(static_cast<size_t>(m.output_dim()));
    std::vector<size_t> order(n_train);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(config.seed ^ 0x5eedf00dULL);
    const double momentum = 0.9;
    const double out_dim = static_cast<double>(m.output_dim());

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // Fisher-Yates with the deterministic generator.
        for (size_t i = n_train; i > 1; --i) {
            const size_t j = shuffle_rng.next_index(i);
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        for (size_t start = 0; start < n_train; start += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(start + static_cast<size_t>(config.batch_size), n_train);
            const double scale = 1.0 / (out_dim * static_cast<double>(end - start));
            for (size_t l = 0; l < m.layer_count(); ++l) {
                std::fill(gw[l].begin(), gw[l].end(), 0.0);
                std::fill(gb[l].begin(), gb[l].end(), 0.0);
            }
            for (size_t bi = start; bi < end; ++bi) {
                const size_t idx = order[bi];
                const std::vector<double>& y = detail::forward_ws(m, inputs[idx], ws);
                const std::vector<double>& t = targets[idx];
                for (size_t o = 0; o < y.size(); ++o) {
                    const double r = y[o] - t[o];
                    epoch_loss += r * r / out_dim;
                    dy[o] = 2.0 * r * scale;
                }
                detail::backward_ws(m, ws, dy, &gw, &gb, nullptr);
            }
            for (size_t l = 0; l < m.layer_count(); ++l) {
                for (size_t i = 0; i < m.weights[l].size(); ++i) {
                    vw[l][i] = momentum * vw[l][i] - config.learning_rate * gw[l][i];
                    m.weights[l][i] += vw[l][i];
                }
                for (size_t i = 0; i < m.biases[l].size(); ++i) {
                    vb[l][i] = momentum * vb[l][i] - config.learning_rate * gb[l][i];
                    m.biases[l][i] += vb[l][i];
                }
            }
        }
        res.epoch_losses.push_back(epoch_loss / static_cast<double>(n_train));
    }

    double test_loss = 0.0;
    for (size_t i = n_train; i < data.size(); ++i) {
        const std::vector<double>& y = detail::forward_ws(m, inputs[i], ws);
        double sample = 0.0;
        for (size_t o = 0; o < y.size(); ++o) {
            const double r = y[o] - targets[i][o];
            sample += r * r;
        }
        test_loss += sample / out_dim;
    }
    res.test_loss = test_loss / static_cast<double>(data.size() - n_train);
    return res;
}

// ---------------------------------------------------------------------------
// FLOWNET v1: magic "CFPN", version u16, h u16, l1 u16, l2 u16, n u16,
// layer count u16, layer dims u32 each, then per layer weights (out x in
// row-major) and biases as little-endian f64.
// ---------------------------------------------------------------------------

inline void save(const MlpModel& model, std::ostream& os) {
    binio::write_magic(os, "CFPN");
    binio::write_le<std::uint16_t>(os, 1);
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(model.history));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(model.shape.l1));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(model.shape.l2));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(model.shape.n));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(model.layer_dims.size()));
    for (int d : model.layer_dims) binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (size_t l = 0; l < model.layer_count(); ++l) {
        for (double w : model.weights[l]) binio::write_le<double>(os, w);
        for (double b : model.biases[l]) binio::write_le<double>(os, b);
    }
    if (!os) throw FormatError("FLOWNET: write failed");
}

inline void save(const MlpModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("FLOWNET: cannot open for writing: " + path);
    save(model, os);
}

inline MlpModel load_model(std::istream& is) {
    binio::expect_magic(is, "CFPN", "FLOWNET");
    const auto version = binio::read_le<std::uint16_t>(is, "version");
    if (version != 1) throw FormatError("FLOWNET: unsupported version " + std::to_string(version));
    MlpModel m;
    m.history = binio::read_le<std::uint16_t>(is, "history");
    m.shape.l1 = binio::read_le<std::uint16_t>(is, "l1");
    m.shape.l2 = binio::read_le<std::uint16_t>(is, "l2");
    m.shape.n = binio::read_le<std::uint16_t>(is, "n");
    m.shape.validate();
    const auto layers = binio::read_le<std::uint16_t>(is, "layer count");
    if (layers < 2) throw FormatError("FLOWNET: need at least input and output layers");
    for (int l = 0; l < layers; ++l)
        m.layer_dims.push_back(static_cast<int>(binio::read_le<std::uint32_t>(is, "layer dim")));
    if (m.layer_dims.front() != 2 * (m.history + 1) * m.shape.cells() ||
        m.layer_dims.back() != 2 * m.shape.cells())
        throw FormatError("FLOWNET: layer dims inconsistent with grid shape and history");
    for (int l = 0; l + 1 < layers; ++l) {
        std::vector<double> w(static_cast<size_t>(m.layer_dims[l]) * m.layer_dims[l + 1]);
        for (double& v : w) v = binio::read_le<double>(is, "weight");
        std::vector<double> b(static_cast<size_t>(m.layer_dims[l + 1]));
        for (double& v : b) v = binio::read_le<double>(is, "bias");
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    return m;
}

inline MlpModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("FLOWNET: cannot open: " + path);
    return load_model(is);
}

}  // namespace crowdflow
