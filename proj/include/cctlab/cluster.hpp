#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/probe.hpp"
#include "cctlab/tensor.hpp"

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

namespace cctlab {

/// Boolean thresholding of a normalized field matrix: B[i][j] = value >= theta.
struct ClippedMatrix {
    std::vector<std::uint8_t> bits; ///< row-major L x L
    std::size_t side = 0;
    double theta = 0.0;

    bool get(std::size_t i, std::size_t j) const { return bits[i * side + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { bits[i * side + j] = v ? 1 : 0; }

    std::size_t count_true() const {
        std::size_t n = 0;
        for (auto b : bits) n += b;
        return n;
    }
};

inline ClippedMatrix clip(const FieldMatrix& m, double theta) {
    if (!(theta > 0.0 && theta <= 1.0)) throw InputError("clip: threshold must be in (0, 1]");
    const std::size_t L = m.values.dim(0);
    ClippedMatrix out;
    out.side = L;
    out.theta = theta;
    out.bits.assign(L * L, 0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            out.set(i, j, m.values.at(i, j) >= theta);
    return out;
}

/// Diagonal clusters plus off-cluster noise extracted from a clipped matrix.
///
/// Rule: labels i and j are mutually linked iff B[i][j] and B[j][i] (i != j);
/// a label is active iff its diagonal element is set or it has a mutual link.
/// Clusters are the connected components of active labels (singletons whose
/// diagonal is unset are dropped). Everything set outside the union of
/// cluster-by-cluster blocks counts as noise.
struct ClusterReport {
    std::vector<std::vector<int>> clusters; ///< member labels, each sorted
    std::size_t diag = 0;                   ///< |{i : B[i][i]}|
    std::size_t noise = 0;                  ///< set elements outside all cluster blocks
    std::vector<int> permutation;           ///< label order making clusters contiguous
    std::vector<std::pair<int, int>> noise_coordinates;

    std::size_t membership() const {
        std::size_t n = 0;
        for (const auto& c : clusters) n += c.size();
        return n;
    }
};

inline ClusterReport extract_clusters(const ClippedMatrix& b) {
    const std::size_t L = b.side;
    std::vector<std::vector<int>> adj(L);
    std::vector<bool> active(L, false);
    for (std::size_t i = 0; i < L; ++i) {
        if (b.get(i, i)) active[i] = true;
        for (std::size_t j = i + 1; j < L; ++j)
            if (b.get(i, j) && b.get(j, i)) {
                adj[i].push_back(static_cast<int>(j));
                adj[j].push_back(static_cast<int>(i));
                active[i] = active[j] = true;
            }
    }
    ClusterReport report;
    std::vector<bool> seen(L, false);
    for (std::size_t i = 0; i < L; ++i) {
        if (!active[i] || seen[i]) continue;
        std::vector<int> component;
        std::vector<int> stack{static_cast<int>(i)};
        seen[i] = true;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            component.push_back(u);
            for (int v : adj[static_cast<std::size_t>(u)])
                if (!seen[static_cast<std::size_t>(v)]) {
                    seen[static_cast<std::size_t>(v)] = true;
                    stack.push_back(v);
                }
        }
        std::sort(component.begin(), component.end());
        if (component.size() == 1 && !b.get(i, i)) continue;
        report.clusters.push_back(std::move(component));
    }
    std::sort(report.clusters.begin(), report.clusters.end(),
              [](const auto& a, const auto& c) { return a.front() < c.front(); });

    for (std::size_t i = 0; i < L; ++i)
        if (b.get(i, i)) ++report.diag;

    std::vector<int> cluster_of(L, -1);
    for (std::size_t c = 0; c < report.clusters.size(); ++c)
        for (int m : report.clusters[c]) cluster_of[static_cast<std::size_t>(m)] = static_cast<int>(c);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            if (b.get(i, j) && (cluster_of[i] < 0 || cluster_of[i] != cluster_of[j])) {
                ++report.noise;
                report.noise_coordinates.emplace_back(static_cast<int>(i), static_cast<int>(j));
            }

    report.permutation.reserve(L);
    std::vector<bool> placed(L, false);
    for (const auto& c : report.clusters)
        for (int m : c) {
            report.permutation.push_back(m);
            placed[static_cast<std::size_t>(m)] = true;
        }
    for (std::size_t i = 0; i < L; ++i)
        if (!placed[i]) report.permutation.push_back(static_cast<int>(i));
    return report;
}

/// One row of per-block aggregate statistics over the H head matrices.
struct StatsRow {
    int block = 0;
    double theta = 0.0;
    double attn_acc = 0.0;
    double n_c = 0.0;    ///< mean cluster count per matrix
    double c_s = 0.0;    ///< total membership / total cluster count
    double diag = 0.0;   ///< mean diagonal count
    double n = 0.0;      ///< mean noise per matrix
    double n_label = 0.0; ///< total membership / L
    double n_noise = 0.0; ///< total noise / L^2
    double n_inter = 0.0; ///< n_label * (c_s - 1) / L
    double snr = 0.0;     ///< n_label / (n_noise + n_inter)
};

inline StatsRow block_statistics(const std::vector<ClusterReport>& reports, int num_labels,
                                 double attn_acc) {
    if (reports.empty()) throw InputError("block_statistics: need at least one report");
    const double H = static_cast<double>(reports.size());
    const double L = static_cast<double>(num_labels);
    double clusters_total = 0.0, membership_total = 0.0, diag_total = 0.0, noise_total = 0.0;
    for (const auto& r : reports) {
        clusters_total += static_cast<double>(r.clusters.size());
        membership_total += static_cast<double>(r.membership());
        diag_total += static_cast<double>(r.diag);
        noise_total += static_cast<double>(r.noise);
    }
    if (clusters_total == 0.0)
        throw NumericError("block_statistics: no clusters in any head (cluster size undefined)");
    StatsRow s;
    s.attn_acc = attn_acc;
    s.n_c = clusters_total / H;
    s.c_s = membership_total / clusters_total;
    s.diag = diag_total / H;
    s.n = noise_total / H;
    s.n_label = membership_total / L;
    s.n_noise = noise_total / (L * L);
    s.n_inter = s.n_label * (s.c_s - 1.0) / L;
    s.snr = s.n_label / (s.n_noise + s.n_inter);
    return s;
}

/// count[i] = number of (head, cluster) pairs containing label i.
inline std::vector<std::size_t> label_coverage(const std::vector<ClusterReport>& reports,
                                               int num_labels) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_labels), 0);
    for (const auto& r : reports)
        for (const auto& c : r.clusters)
            for (int m : c) counts[static_cast<std::size_t>(m)] += 1;
    return counts;
}

} // namespace cctlab
