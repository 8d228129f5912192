#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/model.hpp"
#include "cctlab/trainer.hpp"

#include <cmath>
#include <cstdint>
#include <future>
#include <string>
#include <utility>
#include <vector>

namespace cctlab {

/// Classifier head used for probing: sequence pooling over the tap features
/// followed by one fully connected layer to the label outputs.
struct ProbeHead {
    Tensor pool_w; ///< dim x 1
    Tensor fc_w;   ///< dim x L
    Tensor fc_b;   ///< L (all-zero and frozen when bias-free)
    bool has_bias = true;
    int dim = 0;
    int num_labels = 0;
};

inline ProbeHead init_probe_head(int dim, int num_labels, std::uint64_t seed, bool bias = true) {
    Rng rng(seed);
    ProbeHead h;
    h.dim = dim;
    h.num_labels = num_labels;
    h.has_bias = bias;
    h.pool_w = init::trunc_normal({static_cast<std::size_t>(dim), 1}, rng);
    h.fc_w = init::trunc_normal({static_cast<std::size_t>(dim), static_cast<std::size_t>(num_labels)}, rng);
    h.fc_b = Tensor({static_cast<std::size_t>(num_labels)});
    return h;
}

/// A probe attachment: the frozen extractor is (model, spec, point) — probing
/// never mutates the model — and the head is the only trainable part.
struct ProbeSetup {
    ProbePoint point;
    ProbeHead head;
};

inline ProbeSetup attach_probe_head(const ModelState& model, const ArchitectureSpec& spec,
                                    ProbePoint point, std::uint64_t seed, bool bias = true) {
    point.validate(spec);
    return {point, init_probe_head(spec.dim, spec.num_labels, seed, bias)};
}

namespace detail {

inline Tensor probe_logits_one(const ProbeHead& h, const Tensor& features) {
    // softmax-weighted pooling, then FC
    const std::size_t T = features.dim(0), D = features.dim(1);
    std::vector<double> scores(T);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < T; ++t) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += features.at(t, d) * h.pool_w[d];
        scores[t] = s;
        mx = std::max(mx, s);
    }
    double sum = 0.0;
    for (auto& s : scores) {
        s = std::exp(s - mx);
        sum += s;
    }
    Tensor pooled({D});
    for (std::size_t t = 0; t < T; ++t) {
        const double w = scores[t] / sum;
        for (std::size_t d = 0; d < D; ++d) pooled[d] += w * features.at(t, d);
    }
    Tensor out({static_cast<std::size_t>(h.num_labels)});
    for (std::size_t j = 0; j < out.numel(); ++j) {
        double s = h.fc_b[j];
        for (std::size_t d = 0; d < D; ++d) s += pooled[d] * h.fc_w.at(d, j);
        out[j] = s;
    }
    return out;
}

} // namespace detail

/// Trains the head on precomputed tap features with AdamW under the probe
/// hyperparameters. The extractor is untouched by construction.
inline ProbeHead train_probe_head(const std::vector<Tensor>& features, const std::vector<int>& labels,
                                  ProbeHead head, const OptimizerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t N = features.size();
    if (N == 0) throw InputError("train_probe_head: empty feature set");
    const auto L = static_cast<std::size_t>(head.num_labels);
    Rng rng(seed);
    AdamState adam;
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double sched = schedule_value(cfg.schedule, epoch, cfg.epochs, 1.0);
        for (std::size_t i = N; i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), N - start);
            ad::Graph g;
            ad::Var pw = g.leaf(head.pool_w);
            ad::Var fw = g.leaf(head.fc_w);
            ad::Var fb = g.leaf(head.fc_b);
            Tensor targets({n, L});
            std::vector<ad::Var> rows;
            rows.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r = order[start + i];
                targets.at(i, static_cast<std::size_t>(labels[r])) = 1.0;
                ad::Var feat = g.leaf(features[r]);
                ad::Var pooled = graph_ops::sequence_pool(g, feat, pw);
                ad::Var logits = ad::matmul(pooled, fw);
                if (head.has_bias) logits = ad::add_rowvec(logits, fb);
                rows.push_back(logits);
            }
            ad::Var loss = ad::soft_ce_mean(n == 1 ? rows[0] : ad::stack_rows(rows), targets);
            g.backward(loss);
            // tiny dedicated model so adamw_step applies uniformly
            ModelState tmp;
            tmp.add("pool.w", head.pool_w);
            tmp.add("fc.w", head.fc_w);
            if (head.has_bias) tmp.add("fc.b", head.fc_b);
            std::unordered_map<std::string, Tensor> grads;
            grads.emplace("pool.w", g.grad(pw));
            grads.emplace("fc.w", g.grad(fw));
            if (head.has_bias) grads.emplace("fc.b", g.grad(fb));
            adamw_step(tmp, grads, cfg, adam, sched);
            head.pool_w = tmp.at("pool.w");
            head.fc_w = tmp.at("fc.w");
            if (head.has_bias) head.fc_b = tmp.at("fc.b");
        }
    }
    return head;
}

/// Top-1 accuracy of the head over tap features.
inline double probe_accuracy(const std::vector<Tensor>& features, const std::vector<int>& labels,
                             const ProbeHead& head) {
    if (features.empty()) throw InputError("probe_accuracy: empty validation set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        const Tensor fields = detail::probe_logits_one(head, features[i]);
        std::size_t best = 0;
        for (std::size_t j = 1; j < fields.numel(); ++j)
            if (fields[j] > fields[best]) best = j;
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(features.size());
}

/// L x L matrix of label-averaged output fields, divided by its maximum
/// element (which is then exactly 1).
struct FieldMatrix {
    Tensor values;       ///< L x L, normalized
    double norm_max = 0; ///< maximum element before scaling
    std::string subject; ///< "tap", "head", or "node"
    int subject_index = -1;
    int head_count = 0; ///< H of the probed block (head subjects)

    Tensor pre_normalization() const {
        Tensor t = values;
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= norm_max;
        return t;
    }
};

enum class Silence { none, head, node };

/// Core measurement. Silencing zeroes the head's FC input weights outside
/// the selected coordinate slice; the silenced copy never touches the trained
/// head. By default sequence pooling still sees the full (unsilenced)
/// features; `silence_before_sp` switches the pooling scores to the silenced
/// view as well.
inline FieldMatrix field_matrix(const std::vector<Tensor>& features, const std::vector<int>& labels,
                                int num_labels, const ProbeHead& head, Silence mode, int index,
                                int head_count, bool silence_before_sp = false) {
    const auto L = static_cast<std::size_t>(num_labels);
    const auto D = static_cast<std::size_t>(head.dim);
    std::size_t c0 = 0, c1 = D;
    if (mode == Silence::head) {
        if (head_count < 1 || static_cast<std::size_t>(head.dim) % static_cast<std::size_t>(head_count) != 0)
            throw InputError("field_matrix: invalid head count");
        const std::size_t hs = D / static_cast<std::size_t>(head_count);
        if (index < 0 || index >= head_count) throw InputError("field_matrix: head index out of range");
        c0 = static_cast<std::size_t>(index) * hs;
        c1 = c0 + hs;
    } else if (mode == Silence::node) {
        if (index < 0 || index >= head.dim) throw InputError("field_matrix: node index out of range");
        c0 = static_cast<std::size_t>(index);
        c1 = c0 + 1;
    }

    ProbeHead silenced = head;
    if (mode != Silence::none) {
        for (std::size_t d = 0; d < D; ++d) {
            if (d >= c0 && d < c1) continue;
            for (std::size_t j = 0; j < L; ++j) silenced.fc_w.at(d, j) = 0.0;
        }
    }

    Tensor sums({L, L});
    std::vector<std::size_t> counts(L, 0);
    for (std::size_t i = 0; i < features.size(); ++i) {
        Tensor fields;
        if (silence_before_sp && mode != Silence::none) {
            Tensor masked = features[i];
            for (std::size_t t = 0; t < masked.dim(0); ++t)
                for (std::size_t d = 0; d < D; ++d)
                    if (d < c0 || d >= c1) masked.at(t, d) = 0.0;
            fields = detail::probe_logits_one(silenced, masked);
        } else {
            fields = detail::probe_logits_one(silenced, features[i]);
        }
        const auto lab = static_cast<std::size_t>(labels[i]);
        for (std::size_t j = 0; j < L; ++j) sums.at(lab, j) += fields[j];
        counts[lab] += 1;
    }
    for (std::size_t l = 0; l < L; ++l)
        if (counts[l] == 0)
            throw InputError("field_matrix: no validation inputs for label " + std::to_string(l));
    FieldMatrix out;
    out.values = Tensor({L, L});
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            out.values.at(i, j) = sums.at(i, j) / static_cast<double>(counts[i]);
    out.norm_max = max_element(out.values);
    if (!(out.norm_max > 0.0))
        throw NumericError("field_matrix: non-positive maximum element (degenerate head)");
    for (std::size_t i = 0; i < out.values.numel(); ++i) out.values[i] /= out.norm_max;
    out.subject = mode == Silence::none ? "tap" : mode == Silence::head ? "head" : "node";
    out.subject_index = mode == Silence::none ? -1 : index;
    out.head_count = head_count;
    return out;
}

inline FieldMatrix head_field_matrix(const std::vector<Tensor>& features, const std::vector<int>& labels,
                                     int num_labels, const ProbeHead& head, int head_index,
                                     int head_count, bool silence_before_sp = false) {
    return field_matrix(features, labels, num_labels, head, Silence::head, head_index, head_count,
                        silence_before_sp);
}

inline FieldMatrix node_field_matrix(const std::vector<Tensor>& features, const std::vector<int>& labels,
                                     int num_labels, const ProbeHead& head, int node_index,
                                     int head_count, bool silence_before_sp = false) {
    return field_matrix(features, labels, num_labels, head, Silence::node, node_index, head_count,
                        silence_before_sp);
}

inline FieldMatrix whole_tap_field_matrix(const std::vector<Tensor>& features,
                                          const std::vector<int>& labels, int num_labels,
                                          const ProbeHead& head) {
    return field_matrix(features, labels, num_labels, head, Silence::none, -1, 0);
}

/// Head performance reconstructed from its nodes: element-wise mean of the
/// pre-normalization node matrices, then max-normalized.
inline FieldMatrix hp_from_snp(const std::vector<FieldMatrix>& snps) {
    if (snps.empty()) throw InputError("hp_from_snp: empty matrix list");
    const auto& shape = snps.front().values.shape();
    Tensor mean(shape);
    for (const auto& m : snps) {
        if (m.subject != "node") throw InputError("hp_from_snp: mixed subjects (expected node matrices)");
        if (!(m.values.shape() == shape)) throw InputError("hp_from_snp: shape mismatch");
        for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += m.values[i] * m.norm_max;
    }
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] /= static_cast<double>(snps.size());
    FieldMatrix out;
    out.norm_max = max_element(mean);
    if (!(out.norm_max > 0.0)) throw NumericError("hp_from_snp: non-positive maximum element");
    out.values = mean;
    for (std::size_t i = 0; i < out.values.numel(); ++i) out.values[i] /= out.norm_max;
    out.subject = "head";
    out.subject_index = snps.front().subject_index;
    out.head_count = snps.front().head_count;
    return out;
}

/// All head matrices of one probed block. Subjects are independent, so the
/// optional thread fan-out cannot change any result.
inline std::vector<FieldMatrix> all_head_matrices(const std::vector<Tensor>& features,
                                                  const std::vector<int>& labels, int num_labels,
                                                  const ProbeHead& head, int head_count,
                                                  bool silence_before_sp = false, int threads = 1) {
    std::vector<FieldMatrix> out(static_cast<std::size_t>(head_count));
    if (threads <= 1) {
        for (int h = 0; h < head_count; ++h)
            out[static_cast<std::size_t>(h)] =
                head_field_matrix(features, labels, num_labels, head, h, head_count, silence_before_sp);
        return out;
    }
    std::vector<std::future<void>> jobs;
    for (int h = 0; h < head_count; ++h)
        jobs.push_back(std::async(std::launch::async, [&, h] {
            out[static_cast<std::size_t>(h)] =
                head_field_matrix(features, labels, num_labels, head, h, head_count, silence_before_sp);
        }));
    for (auto& j : jobs) j.get();
    return out;
}

} // namespace cctlab
