#pragma once

#include "cctlab/data.hpp"
#include "cctlab/errors.hpp"
#include "cctlab/model.hpp"
#include "cctlab/rng.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace cctlab {

enum class ScheduleKind { cosine, linear };

/// Decay schedule for both the learning rate and the weight decay.
/// cosine: base * (1 + cos(pi * epoch / total)) / 2.
/// linear(q, dt): base * q^floor(epoch / dt) — piecewise constant plateaus.
struct Schedule {
    ScheduleKind kind = ScheduleKind::cosine;
    double q = 1.0;
    int dt = 1;

    static Schedule cosine() { return {ScheduleKind::cosine, 1.0, 1}; }
    static Schedule linear(double q, int dt) { return {ScheduleKind::linear, q, dt}; }

    void validate() const {
        if (kind == ScheduleKind::linear) {
            if (q <= 0.0 || q > 1.0) throw ConfigError("schedule q must be in (0, 1]");
            if (dt < 1) throw ConfigError("schedule dt must be >= 1");
        }
    }
};

inline double schedule_value(const Schedule& s, int epoch, int total_epochs, double base) {
    if (epoch < 0 || epoch > total_epochs) throw InputError("schedule epoch out of range");
    if (s.kind == ScheduleKind::cosine)
        return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
    double factor = 1.0;
    for (int k = epoch / s.dt; k > 0; --k) factor *= s.q;
    return base * factor;
}

struct OptimizerConfig {
    double lr = 6e-4;
    double weight_decay = 6e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 128;
    int epochs = 100;
    Schedule schedule = Schedule::cosine();
    double grad_clip = 0.0; ///< 0 disables clipping

    void validate() const {
        if (lr <= 0.0) throw ConfigError("learning rate must be > 0");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        schedule.validate();
    }
};

/// Hyperparameter presets.
inline OptimizerConfig main_training_config() {
    OptimizerConfig c;
    c.lr = 6e-4;
    c.weight_decay = 6e-2;
    c.batch_size = 128;
    c.epochs = 1000;
    c.schedule = Schedule::cosine();
    return c;
}

inline OptimizerConfig probe_head_config() {
    OptimizerConfig c;
    c.lr = 1e-3;
    c.weight_decay = 6e-2;
    c.batch_size = 128;
    c.epochs = 100;
    c.schedule = Schedule::linear(0.78, 10);
    return c;
}

/// First and second moments per trainable tensor, plus the global step count.
struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam step over the named gradients. Parameters
/// are first scaled by (1 - lr_t * wd_t), then moved by the bias-corrected
/// moment estimate. Tensors in `frozen` (or flagged non-trainable) are
/// untouched. `sched` multiplies both lr and weight decay.
inline void adamw_step(ModelState& model, const std::unordered_map<std::string, Tensor>& grads,
                       const OptimizerConfig& cfg, AdamState& adam, double sched,
                       const std::set<std::string>* frozen = nullptr) {
    adam.step += 1;
    const double lr_t = cfg.lr * sched;
    const double wd_t = cfg.weight_decay * sched;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
    for (auto& e : model.params) {
        if (!e.trainable) continue;
        if (frozen && frozen->count(e.name)) continue;
        auto git = grads.find(e.name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!all_finite(g)) throw NumericError("non-finite gradient for tensor " + e.name);
        double clip_scale = 1.0;
        if (cfg.grad_clip > 0.0) {
            double norm = 0.0;
            for (std::size_t i = 0; i < g.numel(); ++i) norm += g[i] * g[i];
            norm = std::sqrt(norm);
            if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
        }
        Tensor& m = adam.m.try_emplace(e.name, Tensor(e.tensor.shape())).first->second;
        Tensor& v = adam.v.try_emplace(e.name, Tensor(e.tensor.shape())).first->second;
        for (std::size_t i = 0; i < e.tensor.numel(); ++i) {
            const double gi = g[i] * clip_scale;
            e.tensor[i] *= 1.0 - lr_t * wd_t;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            e.tensor[i] -= lr_t * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

/// Mean soft-target cross-entropy, log-sum-exp stabilized (evaluation form).
inline double soft_target_cross_entropy(const Tensor& logits, const Tensor& targets) {
    ad::Graph g;
    ad::Var l = g.leaf(logits);
    return g.value(ad::soft_ce_mean(l, targets))[0];
}

inline std::vector<int> top1_labels(const Tensor& logits) {
    std::vector<int> out(logits.dim(0));
    for (std::size_t b = 0; b < logits.dim(0); ++b) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.dim(1); ++j)
            if (logits.at(b, j) > logits.at(b, best)) best = j;
        out[b] = static_cast<int>(best);
    }
    return out;
}

inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const auto pred = top1_labels(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Batched evaluation helpers (chunked so graphs stay small).
inline Tensor eval_logits(const ModelState& model, const ArchitectureSpec& spec, const Tensor& images,
                          std::size_t chunk = 32) {
    const std::size_t N = images.dim(0);
    const std::size_t px = images.numel() / N;
    Tensor logits({N, static_cast<std::size_t>(spec.num_labels)});
    for (std::size_t start = 0; start < N; start += chunk) {
        const std::size_t n = std::min(chunk, N - start);
        Tensor part({n, images.dim(1), images.dim(2), images.dim(3)});
        for (std::size_t i = 0; i < n * px; ++i) part[i] = images[start * px + i];
        ForwardResult r = forward(model, spec, part);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < logits.dim(1); ++j)
                logits.at(start + i, j) = r.logits.at(i, j);
    }
    return logits;
}

inline double evaluate_accuracy(const ModelState& model, const ArchitectureSpec& spec, const Dataset& d) {
    return accuracy(eval_logits(model, spec, d.images), d.labels);
}

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_acc = std::numeric_limits<double>::quiet_NaN();
};

/// Single-writer training session. All randomness (shuffling, augmentation)
/// flows through one serializable RNG, so a checkpointed session resumes
/// step-for-step identically.
struct Trainer {
    ModelState model;
    ArchitectureSpec spec;
    OptimizerConfig cfg;
    AugmentConfig aug;
    std::set<std::string> freeze;
    AdamState adam;
    Rng rng{1};
    int epoch = 0;
    std::vector<EpochStats> history;

    Trainer(ModelState m, ArchitectureSpec s, OptimizerConfig c, std::uint64_t seed)
        : model(std::move(m)), spec(std::move(s)), cfg(c), rng(seed) {}

    /// Gradients of the mean batch loss with respect to every trainable tensor.
    std::unordered_map<std::string, Tensor> batch_gradients(const Batch& batch, double* loss_out) {
        ad::Graph g;
        ModelVars mv = make_leaves(g, model);
        ad::Var images = g.leaf(batch.inputs);
        ad::Var logits = graph_ops::forward(g, mv, spec, images);
        ad::Var loss = ad::soft_ce_mean(logits, batch.targets);
        if (loss_out) *loss_out = g.value(loss)[0];
        g.backward(loss);
        std::unordered_map<std::string, Tensor> grads;
        for (const auto& e : model.params) {
            if (!e.trainable || freeze.count(e.name)) continue;
            grads.emplace(e.name, g.grad(mv(e.name)));
        }
        return grads;
    }

    /// Runs epochs [epoch, cfg.epochs). `on_epoch` (if set) fires after each
    /// epoch with the session in a checkpointable state.
    void run(const Dataset& train_ds, const Dataset* val_ds,
             const std::function<void(const Trainer&, const EpochStats&)>& on_epoch = {}) {
        cfg.validate();
        validate_freeze_mask();
        const std::size_t N = train_ds.size();
        std::vector<std::size_t> order(N);
        for (std::size_t i = 0; i < N; ++i) order[i] = i;
        while (epoch < cfg.epochs) {
            const double sched = schedule_value(cfg.schedule, epoch, cfg.epochs, 1.0);
            // Fisher-Yates from the session RNG
            for (std::size_t i = N; i > 1; --i) {
                const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
                std::swap(order[i - 1], order[j]);
            }
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), N - start);
                std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                              order.begin() + static_cast<long>(start + n));
                Batch batch = make_batch(train_ds, rows);
                if (aug.enabled) batch = augment_batch(batch, aug, rng);
                double loss = 0.0;
                auto grads = batch_gradients(batch, &loss);
                adamw_step(model, grads, cfg, adam, sched, &freeze);
                loss_sum += loss;
                ++batches;
            }
            EpochStats st;
            st.epoch = epoch;
            st.lr = cfg.lr * sched;
            st.train_loss = loss_sum / static_cast<double>(batches);
            if (val_ds) st.val_acc = evaluate_accuracy(model, spec, *val_ds);
            history.push_back(st);
            ++epoch; // advance before the callback so checkpoints resume here
            if (on_epoch) on_epoch(*this, st);
        }
    }

private:
    void validate_freeze_mask() const {
        for (const auto& name : freeze)
            if (!model.has(name)) throw ConfigError("freeze mask names unknown tensor: " + name);
        bool any = false;
        for (const auto& e : model.params)
            if (e.trainable && !freeze.count(e.name)) any = true;
        if (!any) throw ConfigError("freeze mask leaves no trainable tensors");
    }
};

} // namespace cctlab
