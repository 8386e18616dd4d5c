#pragma once

// Dense classifier: [Dense -> ReLU -> BatchNorm (-> Dropout on the first
// block)]* -> Dense -> Softmax, trained with Adam on sparse categorical
// cross-entropy plus L2 and an optional FedProx proximal term.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedp3e/datakit.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

using Tensor = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct HiddenSpec {
    std::size_t units = 0;
    double l2 = 0.0;

    bool operator==(const HiddenSpec&) const = default;
};

struct ModelSpec {
    std::size_t input_dim = 0;
    std::vector<HiddenSpec> hidden;
    double dropout_p = 0.0;  // applied after the first hidden block only
    std::size_t output_classes = 0;
    double bn_momentum = 0.99;
    double bn_epsilon = 1e-3;

    bool operator==(const ModelSpec&) const = default;

    /// The 115 -> 128 -> 64 -> 3 network with L2 = 0.001 and dropout 0.5.
    static ModelSpec reference(std::size_t input_dim = 115, std::size_t classes = 3) {
        return {input_dim, {{128, 0.001}, {64, 0.001}}, 0.5, classes};
    }

    void validate() const {
        require(input_dim >= 1, "model spec: input_dim must be >= 1");
        require(output_classes >= 1, "model spec: output_classes must be >= 1");
        require(dropout_p >= 0.0 && dropout_p < 1.0, "model spec: dropout_p must be in [0,1)");
        require(bn_momentum >= 0.0 && bn_momentum <= 1.0, "model spec: bn_momentum must be in [0,1]");
        require(bn_epsilon > 0.0, "model spec: bn_epsilon must be > 0");
        for (const auto& h : hidden) {
            require(h.units >= 1, "model spec: hidden units must be >= 1");
            require(h.l2 >= 0.0, "model spec: l2 coefficient must be >= 0");
        }
    }

    /// Closed form: sum(in*out + out) over dense layers + 2*units per batch norm.
    std::size_t trainable_count() const {
        std::size_t n = 0;
        std::size_t in = input_dim;
        for (const auto& h : hidden) {
            n += in * h.units + h.units + 2 * h.units;
            in = h.units;
        }
        return n + in * output_classes + output_classes;
    }
};

struct HiddenLayer {
    Tensor weight;  // in x out
    RowVector bias;
    RowVector gamma;
    RowVector beta;
    RowVector running_mean;
    RowVector running_var;
};

struct ConstTensorView {
    std::string name;
    std::span<const double> data;
    Eigen::Index rows;
    Eigen::Index cols;
    bool trainable;
};

/// View over one parameter tensor as a flat span (column-major storage).
struct TensorView {
    std::string name;
    std::span<double> data;
    Eigen::Index rows;
    Eigen::Index cols;
    bool trainable;

    operator ConstTensorView() const { return {name, data, rows, cols, trainable}; }
};

struct ModelParams {
    ModelSpec spec;
    std::vector<HiddenLayer> hidden;
    Tensor out_weight;
    RowVector out_bias;

    /// Visits tensors in canonical order: per block W, b, gamma, beta; then the
    /// output W, b; then the non-trainable running mean/variance per block.
    template <class F>
    void for_each_tensor(F&& f) {
        visit(*this, std::forward<F>(f));
    }
    template <class F>
    void for_each_tensor(F&& f) const {
        visit(*this, std::forward<F>(f));
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for_each_tensor([&](const ConstTensorView& t) { n += t.trainable ? t.data.size() : 0; });
        return n;
    }

    std::size_t state_count() const {
        std::size_t n = 0;
        for_each_tensor([&](const ConstTensorView& t) { n += t.trainable ? 0 : t.data.size(); });
        return n;
    }

    /// Parameters with every tensor zeroed (same shapes).
    ModelParams zeros_like() const {
        ModelParams z = *this;
        z.for_each_tensor([](const TensorView& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
        return z;
    }

    bool same_shape(const ModelParams& other) const {
        std::vector<std::pair<Eigen::Index, Eigen::Index>> a;
        std::vector<std::pair<Eigen::Index, Eigen::Index>> b;
        for_each_tensor([&](const ConstTensorView& t) { a.emplace_back(t.rows, t.cols); });
        other.for_each_tensor([&](const ConstTensorView& t) { b.emplace_back(t.rows, t.cols); });
        return a == b;
    }

    /// Trainable tensors flattened in canonical order.
    std::vector<double> flat_trainable() const {
        std::vector<double> out;
        out.reserve(trainable_count());
        for_each_tensor([&](const ConstTensorView& t) {
            if (t.trainable) {
                out.insert(out.end(), t.data.begin(), t.data.end());
            }
        });
        return out;
    }

private:
    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        using View = std::conditional_t<std::is_const_v<Self>, ConstTensorView, TensorView>;
        auto emit = [&](const std::string& name, auto& m, bool trainable) {
            f(View{name, {m.data(), static_cast<std::size_t>(m.size())}, m.rows(), m.cols(), trainable});
        };
        for (std::size_t i = 0; i < self.hidden.size(); ++i) {
            const std::string n = std::to_string(i + 1);
            emit("dense_" + n + "/kernel", self.hidden[i].weight, true);
            emit("dense_" + n + "/bias", self.hidden[i].bias, true);
            emit("batch_norm_" + n + "/gamma", self.hidden[i].gamma, true);
            emit("batch_norm_" + n + "/beta", self.hidden[i].beta, true);
        }
        emit("output/kernel", self.out_weight, true);
        emit("output/bias", self.out_bias, true);
        for (std::size_t i = 0; i < self.hidden.size(); ++i) {
            const std::string n = std::to_string(i + 1);
            emit("batch_norm_" + n + "/moving_mean", self.hidden[i].running_mean, false);
            emit("batch_norm_" + n + "/moving_variance", self.hidden[i].running_var, false);
        }
    }
};

/// Seeded Glorot-uniform kernels, zero biases, gamma = 1, beta = 0, running
/// statistics (0, 1).
inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng = make_rng(seed, Stream::init);
    auto glorot = [&](std::size_t in, std::size_t out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Tensor w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            for (Eigen::Index i = 0; i < w.rows(); ++i) {
                w(i, j) = dist(rng);
            }
        }
        return w;
    };
    ModelParams p;
    p.spec = spec;
    std::size_t in = spec.input_dim;
    for (const auto& h : spec.hidden) {
        const auto u = static_cast<Eigen::Index>(h.units);
        HiddenLayer layer;
        layer.weight = glorot(in, h.units);
        layer.bias = RowVector::Zero(u);
        layer.gamma = RowVector::Ones(u);
        layer.beta = RowVector::Zero(u);
        layer.running_mean = RowVector::Zero(u);
        layer.running_var = RowVector::Ones(u);
        p.hidden.push_back(std::move(layer));
        in = h.units;
    }
    p.out_weight = glorot(in, spec.output_classes);
    p.out_bias = RowVector::Zero(static_cast<Eigen::Index>(spec.output_classes));
    return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { train, eval };

struct LayerCache {
    Tensor input;
    Tensor pre_activation;  // x W + b
    Tensor xhat;            // normalized ReLU output
    RowVector mean;         // statistics actually used for normalization
    RowVector var;
    RowVector inv_std;
    Tensor dropout_mask;    // empty when dropout is inactive; already scaled by 1/(1-p)
    Tensor output;
};

struct ForwardPass {
    Mode mode = Mode::eval;
    std::vector<LayerCache> layers;
    Tensor logits;
    Tensor probs;
};

/// Pure: batch-norm running statistics are not touched (see update_running_stats).
inline ForwardPass forward(const ModelParams& params, const Matrix& batch, Mode mode, std::uint64_t seed = 0) {
    require(static_cast<std::size_t>(batch.cols()) == params.spec.input_dim,
            "forward: dimension mismatch: batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                std::to_string(params.spec.input_dim));
    require(batch.rows() >= 1, "forward: empty batch");
    const double eps = params.spec.bn_epsilon;
    const auto n = static_cast<double>(batch.rows());
    ForwardPass pass;
    pass.mode = mode;
    Tensor h = batch;
    for (std::size_t i = 0; i < params.hidden.size(); ++i) {
        const auto& layer = params.hidden[i];
        LayerCache c;
        c.input = h;
        c.pre_activation = (h * layer.weight).rowwise() + layer.bias;
        Tensor relu = c.pre_activation.cwiseMax(0.0);
        if (mode == Mode::train) {
            c.mean = relu.colwise().mean();
            c.var = (relu.rowwise() - c.mean).array().square().colwise().sum() / n;
        } else {
            c.mean = layer.running_mean;
            c.var = layer.running_var;
        }
        c.inv_std = (c.var.array() + eps).rsqrt();
        c.xhat = ((relu.rowwise() - c.mean).array().rowwise() * c.inv_std.array()).matrix();
        c.output = ((c.xhat.array().rowwise() * layer.gamma.array()).rowwise() + layer.beta.array()).matrix();
        if (mode == Mode::train && i == 0 && params.spec.dropout_p > 0.0) {
            Rng rng = make_rng(seed, Stream::dropout);
            std::uniform_real_distribution<double> unit(0.0, 1.0);
            const double keep = 1.0 - params.spec.dropout_p;
            c.dropout_mask.resize(c.output.rows(), c.output.cols());
            for (Eigen::Index j = 0; j < c.dropout_mask.cols(); ++j) {
                for (Eigen::Index r = 0; r < c.dropout_mask.rows(); ++r) {
                    c.dropout_mask(r, j) = unit(rng) < params.spec.dropout_p ? 0.0 : 1.0 / keep;
                }
            }
            c.output = c.output.cwiseProduct(c.dropout_mask);
        }
        h = c.output;
        pass.layers.push_back(std::move(c));
    }
    pass.logits = (h * params.out_weight).rowwise() + params.out_bias;
    pass.probs.resize(pass.logits.rows(), pass.logits.cols());
    for (Eigen::Index r = 0; r < pass.logits.rows(); ++r) {
        const double mx = pass.logits.row(r).maxCoeff();
        auto e = (pass.logits.row(r).array() - mx).exp();
        pass.probs.row(r) = (e / e.sum()).matrix();
    }
    return pass;
}

/// Exponential moving average of the batch statistics of a train-mode pass.
inline void update_running_stats(ModelParams& params, const ForwardPass& pass) {
    if (pass.mode != Mode::train) {
        return;
    }
    const double m = params.spec.bn_momentum;
    for (std::size_t i = 0; i < params.hidden.size(); ++i) {
        auto& layer = params.hidden[i];
        layer.running_mean = m * layer.running_mean + (1.0 - m) * pass.layers[i].mean;
        layer.running_var = m * layer.running_var + (1.0 - m) * pass.layers[i].var;
    }
}

struct LossTerms {
    double cross_entropy = 0.0;
    double l2 = 0.0;
    double proximal = 0.0;
    double total() const { return cross_entropy + l2 + proximal; }
};

struct LossGrad {
    LossTerms loss;
    ModelParams grads;  // running-statistics slots are zero
    ForwardPass pass;
};

inline double mean_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    double sum = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        sum += lse - logits(r, labels[static_cast<std::size_t>(r)]);
    }
    return sum / static_cast<double>(logits.rows());
}

/// loss = mean CE + sum_l l2_l * ||W_l||^2 + (mu/2) * ||theta - theta_global||^2
/// over trainable tensors, with exact analytic gradients.
inline LossGrad loss_and_grads(const ModelParams& params, const Matrix& batch, std::span<const int> labels,
                               double prox_mu = 0.0, const ModelParams* global = nullptr, Mode mode = Mode::train,
                               std::uint64_t seed = 0) {
    require(prox_mu >= 0.0, "loss_and_grads: prox_mu must be >= 0");
    require(prox_mu == 0.0 || global != nullptr, "loss_and_grads: prox_mu > 0 requires the global parameters");
    require(labels.size() == static_cast<std::size_t>(batch.rows()), "loss_and_grads: labels/batch length mismatch");
    for (int y : labels) {
        require(y >= 0 && static_cast<std::size_t>(y) < params.spec.output_classes,
                "loss_and_grads: label " + std::to_string(y) + " out of range");
    }
    if (global != nullptr) {
        require(params.same_shape(*global), "loss_and_grads: global parameters have a different shape");
    }

    LossGrad out;
    out.pass = forward(params, batch, mode, seed);
    const auto& pass = out.pass;
    out.loss.cross_entropy = mean_cross_entropy(pass.logits, labels);
    out.grads = params.zeros_like();
    auto& g = out.grads;

    const auto n = static_cast<double>(batch.rows());
    Tensor d = pass.probs;
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        d(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    }
    d /= n;

    const Tensor& last = pass.layers.empty() ? Tensor(batch) : pass.layers.back().output;
    g.out_weight = last.transpose() * d;
    g.out_bias = d.colwise().sum();
    Tensor dh = d * params.out_weight.transpose();

    for (std::size_t ii = params.hidden.size(); ii-- > 0;) {
        const auto& layer = params.hidden[ii];
        const auto& c = pass.layers[ii];
        auto& gl = g.hidden[ii];
        Tensor dout = c.dropout_mask.size() > 0 ? Tensor(dh.cwiseProduct(c.dropout_mask)) : dh;
        gl.gamma = dout.cwiseProduct(c.xhat).colwise().sum();
        gl.beta = dout.colwise().sum();
        Tensor dxhat = (dout.array().rowwise() * layer.gamma.array()).matrix();
        Tensor drelu;
        if (pass.mode == Mode::train) {
            RowVector sum_dxhat = dxhat.colwise().sum();
            RowVector sum_dxhat_xhat = dxhat.cwiseProduct(c.xhat).colwise().sum();
            Tensor centered = (n * dxhat).rowwise() - sum_dxhat;
            centered -= (c.xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
            drelu = ((centered.array().rowwise() * c.inv_std.array()) / n).matrix();
        } else {
            drelu = (dxhat.array().rowwise() * c.inv_std.array()).matrix();
        }
        Tensor dz = (c.pre_activation.array() > 0.0).select(drelu, 0.0);
        gl.weight = c.input.transpose() * dz;
        gl.bias = dz.colwise().sum();
        if (layer.weight.size() > 0 && params.spec.hidden[ii].l2 > 0.0) {
            const double l2 = params.spec.hidden[ii].l2;
            out.loss.l2 += l2 * layer.weight.squaredNorm();
            gl.weight += 2.0 * l2 * layer.weight;
        }
        if (ii > 0) {
            dh = dz * layer.weight.transpose();
        }
    }

    if (prox_mu > 0.0) {
        std::vector<std::span<const double>> theta;
        std::vector<std::span<const double>> anchor;
        params.for_each_tensor([&](const ConstTensorView& t) {
            if (t.trainable) theta.push_back(t.data);
        });
        global->for_each_tensor([&](const ConstTensorView& t) {
            if (t.trainable) anchor.push_back(t.data);
        });
        std::size_t k = 0;
        double sq = 0.0;
        g.for_each_tensor([&](const TensorView& t) {
            if (!t.trainable) return;
            for (std::size_t j = 0; j < t.data.size(); ++j) {
                const double diff = theta[k][j] - anchor[k][j];
                sq += diff * diff;
                t.data[j] += prox_mu * diff;
            }
            ++k;
        });
        out.loss.proximal = 0.5 * prox_mu * sq;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;

    bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;

    static AdamState for_params(const ModelParams& params) {
        AdamState s;
        params.for_each_tensor([&](const ConstTensorView& t) {
            if (t.trainable) {
                s.m.emplace_back(t.data.size(), 0.0);
                s.v.emplace_back(t.data.size(), 0.0);
            }
        });
        return s;
    }
};

/// One bias-corrected Adam update of every trainable tensor.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg) {
    require(params.same_shape(grads), "adam_step: shape mismatch between parameters and gradients");
    if (state.m.empty() && state.step == 0) {
        state = AdamState::for_params(params);
    }
    std::vector<std::span<const double>> gs;
    grads.for_each_tensor([&](const ConstTensorView& t) {
        if (t.trainable) gs.push_back(t.data);
    });
    require(state.m.size() == gs.size() && state.v.size() == gs.size(), "adam_step: shape mismatch with optimizer state");
    for (std::size_t k = 0; k < gs.size(); ++k) {
        require(state.m[k].size() == gs[k].size() && state.v[k].size() == gs[k].size(),
                "adam_step: shape mismatch with optimizer state");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::size_t k = 0;
    params.for_each_tensor([&](const TensorView& t) {
        if (!t.trainable) return;
        auto& m = state.m[k];
        auto& v = state.v[k];
        const auto& g = gs[k];
        for (std::size_t j = 0; j < t.data.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            t.data[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
        ++k;
    });
}

// ---------------------------------------------------------------------------
// Training and evaluation

struct TrainConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    AdamConfig adam;
    double prox_mu = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        require(epochs >= 1, "train config: epochs must be >= 1");
        require(batch_size >= 1, "train config: batch_size must be >= 1");
        require(adam.learning_rate > 0.0, "train config: learning_rate must be > 0");
        require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0,
                "train config: adam betas must be in [0,1)");
        require(adam.epsilon > 0.0, "train config: adam epsilon must be > 0");
        require(prox_mu >= 0.0, "train config: prox_mu must be >= 0");
    }
};

struct LocalTrainResult {
    ModelParams params;
    std::vector<double> epoch_losses;  // sample-weighted mean total loss per epoch
    std::size_t steps = 0;
};

/// E epochs of seeded-shuffled mini-batches. `state` carries Adam moments
/// across calls when provided; otherwise a fresh state is used.
inline LocalTrainResult train_local(const ModelParams& start, const Dataset& ds, const TrainConfig& tc,
                                    const ModelParams* global = nullptr, AdamState* state = nullptr) {
    require(!ds.empty(), "train_local: empty dataset");
    tc.validate();
    require(tc.prox_mu == 0.0 || global != nullptr, "train_local: prox_mu > 0 requires the global parameters");
    AdamState local_state;
    AdamState& opt = state != nullptr ? *state : local_state;

    LocalTrainResult out{start, {}, 0};
    std::vector<std::size_t> order(ds.size());
    Matrix xb;
    std::vector<int> yb;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_rng(tc.seed, Stream::train, {epoch});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t begin = 0, b = 0; begin < order.size(); begin += tc.batch_size, ++b) {
            const std::size_t end = std::min(order.size(), begin + tc.batch_size);
            xb.resize(static_cast<Eigen::Index>(end - begin), ds.features.cols());
            yb.resize(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                xb.row(static_cast<Eigen::Index>(i - begin)) = ds.features.row(static_cast<Eigen::Index>(order[i]));
                yb[i - begin] = ds.labels[order[i]];
            }
            auto lg = loss_and_grads(out.params, xb, yb, tc.prox_mu, global, Mode::train,
                                     derive_seed(tc.seed, Stream::dropout, {epoch, b}));
            adam_step(out.params, lg.grads, opt, tc.adam);
            update_running_stats(out.params, lg.pass);
            loss_sum += lg.loss.total() * static_cast<double>(end - begin);
            ++out.steps;
        }
        out.epoch_losses.push_back(loss_sum / static_cast<double>(ds.size()));
    }
    return out;
}

struct EvalReport {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double mean_loss = 0.0;
    std::size_t n_samples = 0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

    bool operator==(const EvalReport&) const = default;
};

/// Macro metrics over the classes that occur as a true or predicted label;
/// undefined per-class ratios count as 0.
inline EvalReport report_from_confusion(const std::vector<std::vector<std::size_t>>& confusion, double loss_sum) {
    EvalReport r;
    r.confusion = confusion;
    const std::size_t c = confusion.size();
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<std::size_t> row_sum(c, 0);
    std::vector<std::size_t> col_sum(c, 0);
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            row_sum[i] += confusion[i][j];
            col_sum[j] += confusion[i][j];
            total += confusion[i][j];
        }
        correct += confusion[i][i];
    }
    require(total >= 1, "evaluate: no samples");
    r.n_samples = total;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    r.mean_loss = loss_sum / static_cast<double>(total);
    std::size_t active = 0;
    for (std::size_t k = 0; k < c; ++k) {
        if (row_sum[k] == 0 && col_sum[k] == 0) {
            continue;
        }
        ++active;
        const double tp = static_cast<double>(confusion[k][k]);
        const double p = col_sum[k] > 0 ? tp / static_cast<double>(col_sum[k]) : 0.0;
        const double rc = row_sum[k] > 0 ? tp / static_cast<double>(row_sum[k]) : 0.0;
        r.macro_precision += p;
        r.macro_recall += rc;
        r.macro_f1 += (p + rc) > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0;
    }
    r.macro_precision /= static_cast<double>(active);
    r.macro_recall /= static_cast<double>(active);
    r.macro_f1 /= static_cast<double>(active);
    return r;
}

inline EvalReport evaluate(const ModelParams& params, const Dataset& ds) {
    require(!ds.empty(), "evaluate: empty dataset");
    const std::size_t c = params.spec.output_classes;
    auto pass = forward(params, ds.features, Mode::eval);
    std::vector<std::vector<std::size_t>> confusion(c, std::vector<std::size_t>(c, 0));
    for (Eigen::Index r = 0; r < pass.probs.rows(); ++r) {
        Eigen::Index pred = 0;
        pass.probs.row(r).maxCoeff(&pred);
        const auto y = static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(r)]);
        require(y < c, "evaluate: label outside model output space");
        ++confusion[y][static_cast<std::size_t>(pred)];
    }
    const double loss_sum = mean_cross_entropy(pass.logits, ds.labels) * static_cast<double>(ds.size());
    return report_from_confusion(confusion, loss_sum);
}

// ---------------------------------------------------------------------------
// Snapshot record: 8-byte magic, u64 LE header length, JSON header, then
// every tensor in canonical order as row-major little-endian float64.

namespace detail {

inline constexpr char kParamsMagic[8] = {'F', 'P', '3', 'E', 'P', 'R', 'M', '1'};

inline std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) {
            r = (r << 8) | ((v >> (8 * i)) & 0xffu);
        }
        return r;
    }
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    v = to_little(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    require(static_cast<bool>(in), "params record: truncated");
    return to_little(v);
}

}  // namespace detail

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    nlohmann::json hidden = nlohmann::json::array();
    for (const auto& h : s.hidden) {
        hidden.push_back({{"units", h.units}, {"l2", h.l2}});
    }
    return {{"input_dim", s.input_dim},     {"hidden", hidden},         {"dropout", s.dropout_p},
            {"output_classes", s.output_classes}, {"bn_momentum", s.bn_momentum}, {"bn_epsilon", s.bn_epsilon}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.input_dim = j.at("input_dim").get<std::size_t>();
    for (const auto& h : j.at("hidden")) {
        s.hidden.push_back({h.at("units").get<std::size_t>(), h.at("l2").get<double>()});
    }
    s.dropout_p = j.at("dropout").get<double>();
    s.output_classes = j.at("output_classes").get<std::size_t>();
    s.bn_momentum = j.at("bn_momentum").get<double>();
    s.bn_epsilon = j.at("bn_epsilon").get<double>();
    return s;
}

inline void write_params(std::ostream& out, const ModelParams& p) {
    nlohmann::json tensors = nlohmann::json::array();
    p.for_each_tensor([&](const ConstTensorView& t) {
        tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"trainable", t.trainable}});
    });
    const std::string header =
        nlohmann::json{{"format", "fedp3e-params"}, {"version", 1}, {"dtype", "float64-le"},
                       {"spec", spec_to_json(p.spec)}, {"tensors", tensors}}
            .dump();
    out.write(detail::kParamsMagic, sizeof detail::kParamsMagic);
    detail::write_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    p.for_each_tensor([&](const ConstTensorView& t) {
        for (Eigen::Index r = 0; r < t.rows; ++r) {
            for (Eigen::Index c = 0; c < t.cols; ++c) {
                detail::write_u64(out, std::bit_cast<std::uint64_t>(t.data[static_cast<std::size_t>(c * t.rows + r)]));
            }
        }
    });
}

inline ModelParams read_params(std::istream& in) {
    char magic[8] = {};
    in.read(magic, sizeof magic);
    require(static_cast<bool>(in) && std::memcmp(magic, detail::kParamsMagic, sizeof magic) == 0,
            "params record: bad magic");
    const auto len = detail::read_u64(in);
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    require(static_cast<bool>(in), "params record: truncated header");
    const auto j = nlohmann::json::parse(header);
    ModelParams p = build_model(spec_from_json(j.at("spec")), 0);
    std::size_t idx = 0;
    const auto& tensors = j.at("tensors");
    p.for_each_tensor([&](const TensorView& t) {
        require(idx < tensors.size() && tensors[idx].at("name") == t.name &&
                    tensors[idx].at("shape")[0].get<Eigen::Index>() == t.rows &&
                    tensors[idx].at("shape")[1].get<Eigen::Index>() == t.cols,
                "params record: tensor layout does not match spec at '" + t.name + "'");
        for (Eigen::Index r = 0; r < t.rows; ++r) {
            for (Eigen::Index c = 0; c < t.cols; ++c) {
                t.data[static_cast<std::size_t>(c * t.rows + r)] = std::bit_cast<double>(detail::read_u64(in));
            }
        }
        ++idx;
    });
    return p;
}

inline void save_params(const std::filesystem::path& path, const ModelParams& p) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "save_params: cannot open '" + path.string() + "'");
    write_params(out, p);
}

inline ModelParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "load_params: cannot open '" + path.string() + "'");
    return read_params(in);
}

}  // namespace fedp3e
