#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/tensor.hpp"

#include <string>
#include <vector>

namespace cctlab {

/// Raw output fields of one model over a shared evaluation set.
struct PredictionSet {
    std::string member;
    Tensor fields; ///< N x L, raw (no softmax or normalization)

    std::size_t inputs() const { return fields.dim(0); }
    std::size_t labels() const { return fields.dim(1); }

    /// Top-1 labels; argmax ties break to the lowest index.
    std::vector<int> top1() const {
        std::vector<int> out(inputs());
        for (std::size_t i = 0; i < inputs(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < labels(); ++j)
                if (fields.at(i, j) > fields.at(i, best)) best = j;
            out[i] = static_cast<int>(best);
        }
        return out;
    }
};

namespace detail {

inline void check_aligned(const std::vector<PredictionSet>& members) {
    if (members.empty()) throw InputError("committee: no members");
    for (const auto& m : members)
        if (m.inputs() != members.front().inputs() || m.labels() != members.front().labels())
            throw InputError("committee: member '" + m.member + "' is misaligned with the evaluation set");
}

} // namespace detail

/// Soft-committee decision: per input, argmax of the element-wise sum of the
/// members' raw fields. No softmax, activation, or normalization; ties break
/// to the lowest label index.
inline std::vector<int> committee_decide(const std::vector<PredictionSet>& members) {
    detail::check_aligned(members);
    const std::size_t N = members.front().inputs(), L = members.front().labels();
    std::vector<int> out(N);
    for (std::size_t i = 0; i < N; ++i) {
        std::size_t best = 0;
        double best_v = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            double s = 0.0;
            for (const auto& m : members) s += m.fields.at(i, j);
            if (j == 0 || s > best_v) {
                best_v = s;
                best = j;
            }
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

inline double prediction_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) throw InputError("accuracy: prediction/truth length mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Fraction of inputs where both members are simultaneously correct or
/// simultaneously incorrect.
inline double agreement(const PredictionSet& a, const PredictionSet& b, const std::vector<int>& truth) {
    if (a.inputs() != b.inputs() || a.inputs() != truth.size())
        throw InputError("agreement: misaligned prediction sets");
    const auto pa = a.top1();
    const auto pb = b.top1();
    std::size_t same = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if ((pa[i] == truth[i]) == (pb[i] == truth[i])) ++same;
    return static_cast<double>(same) / static_cast<double>(truth.size());
}

/// Expected agreement of two independent predictors of accuracy p.
inline double uncorrelated_baseline(double p) {
    if (p < 0.0 || p > 1.0) throw InputError("uncorrelated_baseline: p outside [0,1]");
    return p * p + (1.0 - p) * (1.0 - p);
}

struct CommitteeReport {
    std::vector<double> individual_accuracy;
    double mean_individual = 0.0;
    double committee_accuracy = 0.0;
    Tensor agreement_matrix; ///< N_members x N_members, diagonal 1
    double mean_agreement = 0.0; ///< mean over unordered member pairs
};

inline CommitteeReport committee_report(const std::vector<PredictionSet>& members,
                                        const std::vector<int>& truth) {
    detail::check_aligned(members);
    if (members.front().inputs() != truth.size())
        throw InputError("committee_report: truth length mismatch");
    CommitteeReport r;
    const std::size_t n = members.size();
    for (const auto& m : members) r.individual_accuracy.push_back(prediction_accuracy(m.top1(), truth));
    for (double a : r.individual_accuracy) r.mean_individual += a;
    r.mean_individual /= static_cast<double>(n);
    r.committee_accuracy = prediction_accuracy(committee_decide(members), truth);
    r.agreement_matrix = Tensor({n, n});
    double pair_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        r.agreement_matrix.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double a = agreement(members[i], members[j], truth);
            r.agreement_matrix.at(i, j) = a;
            r.agreement_matrix.at(j, i) = a;
            pair_sum += a;
            ++pairs;
        }
    }
    r.mean_agreement = pairs ? pair_sum / static_cast<double>(pairs) : 1.0;
    return r;
}

} // namespace cctlab
