#pragma once

#include "cctlab/cluster.hpp"
#include "cctlab/committee.hpp"
#include "cctlab/errors.hpp"
#include "cctlab/probe.hpp"
#include "cctlab/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace cctlab::io {

inline std::string format_full(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path.string());
    return out;
}

/// Full-precision L x L CSV of the normalized field values.
inline void write_field_matrix_csv(const FieldMatrix& m, const std::filesystem::path& path) {
    auto out = open_out(path);
    const std::size_t L = m.values.dim(0);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j)
            out << (j ? "," : "") << format_full(m.values.at(i, j));
        out << "\n";
    }
}

/// Sidecar with the measurement context.
inline void write_field_matrix_json(const FieldMatrix& m, int block, const std::string& tap,
                                    std::uint64_t model_hash, std::uint64_t config_hash,
                                    const std::filesystem::path& path) {
    nlohmann::json j;
    j["subject"] = m.subject;
    j["subject_index"] = m.subject_index;
    j["head_count"] = m.head_count;
    j["block"] = block;
    j["tap"] = tap;
    j["normalization_max"] = m.norm_max;
    j["model_hash"] = model_hash;
    j["config_hash"] = config_hash;
    open_out(path) << j.dump(2) << "\n";
}

/// 8-bit grayscale PGM heatmap; values are clamped to [0, 1].
inline void write_field_matrix_pgm(const FieldMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path.string());
    const std::size_t L = m.values.dim(0);
    out << "P5\n" << L << " " << L << "\n255\n";
    for (std::size_t i = 0; i < L * L; ++i) {
        const double v = std::clamp(m.values[i], 0.0, 1.0);
        out.put(static_cast<char>(std::lround(v * 255.0)));
    }
}

inline void write_cluster_report_json(const ClusterReport& r, double theta,
                                      const std::filesystem::path& path) {
    nlohmann::json j;
    j["theta"] = theta;
    j["clusters"] = r.clusters;
    j["diag"] = r.diag;
    j["noise"] = r.noise;
    j["permutation"] = r.permutation;
    auto& coords = j["noise_coordinates"] = nlohmann::json::array();
    for (const auto& [a, b] : r.noise_coordinates) coords.push_back({a, b});
    open_out(path) << j.dump(2) << "\n";
}

/// Stats CSV in the table column order.
inline void write_stats_csv(const std::vector<StatsRow>& rows, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "Block,Attn.Acc.,N_c,C_s,Diag,n,N_label,N_noise,N_inter,SNR\n";
    for (const auto& r : rows) {
        out << r.block << "," << format_full(r.attn_acc) << "," << format_full(r.n_c) << ","
            << format_full(r.c_s) << "," << format_full(r.diag) << "," << format_full(r.n) << ","
            << format_full(r.n_label) << "," << format_full(r.n_noise) << ","
            << format_full(r.n_inter) << "," << format_full(r.snr) << "\n";
    }
}

inline void write_history_csv(const std::vector<EpochStats>& history,
                              const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "epoch,lr,loss,val_acc\n";
    for (const auto& h : history)
        out << h.epoch << "," << format_full(h.lr) << "," << format_full(h.train_loss) << ","
            << format_full(h.val_acc) << "\n";
}

/// Field dump: '#' metadata lines, then one "index,f0,...,f{L-1}" row per input.
inline void write_prediction_dump(const PredictionSet& p, std::uint64_t truth_hash,
                                  std::uint64_t config_hash, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "# member=" << p.member << "\n";
    out << "# inputs=" << p.inputs() << " labels=" << p.labels() << "\n";
    out << "# truth_hash=" << truth_hash << " config_hash=" << config_hash << "\n";
    for (std::size_t i = 0; i < p.inputs(); ++i) {
        out << i;
        for (std::size_t j = 0; j < p.labels(); ++j) out << "," << format_full(p.fields.at(i, j));
        out << "\n";
    }
}

struct PredictionDump {
    PredictionSet set;
    std::uint64_t truth_hash = 0;
    std::uint64_t config_hash = 0;
};

inline PredictionDump read_prediction_dump(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open prediction dump: " + path.string());
    PredictionDump d;
    std::string line;
    std::vector<std::vector<double>> rows;
    std::size_t labels = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto grab = [&](const std::string& key) -> std::string {
                const auto pos = line.find(key + "=");
                if (pos == std::string::npos) return "";
                const auto start = pos + key.size() + 1;
                const auto end = line.find(' ', start);
                return line.substr(start, end == std::string::npos ? std::string::npos : end - start);
            };
            if (auto v = grab("member"); !v.empty()) d.set.member = v;
            if (auto v = grab("labels"); !v.empty()) labels = std::stoul(v);
            if (auto v = grab("truth_hash"); !v.empty()) d.truth_hash = std::stoull(v);
            if (auto v = grab("config_hash"); !v.empty()) d.config_hash = std::stoull(v);
            continue;
        }
        std::vector<double> row;
        std::size_t pos = line.find(','); // skip the index column
        while (pos != std::string::npos) {
            const auto next = line.find(',', pos + 1);
            row.push_back(std::stod(line.substr(pos + 1, next - pos - 1)));
            pos = next;
        }
        if (labels != 0 && row.size() != labels)
            throw IoError("prediction dump row width mismatch in " + path.string());
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError("empty prediction dump: " + path.string());
    d.set.fields = Tensor({rows.size(), rows.front().size()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) d.set.fields.at(i, j) = rows[i][j];
    return d;
}

inline void write_labels_csv(const std::vector<int>& labels, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "index,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) out << i << "," << labels[i] << "\n";
}

inline std::vector<int> read_labels_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open labels file: " + path.string());
    std::vector<int> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("index", 0) == 0) continue;
        const auto pos = line.find(',');
        out.push_back(std::stoi(pos == std::string::npos ? line : line.substr(pos + 1)));
    }
    return out;
}

inline std::uint64_t labels_hash(const std::vector<int>& labels) {
    std::uint64_t h = 1469598103934665603ull;
    for (int l : labels) h = fnv1a(&l, sizeof l, h);
    return h;
}

inline void write_committee_report_json(const CommitteeReport& r,
                                        const std::vector<std::string>& member_names,
                                        const std::filesystem::path& path) {
    nlohmann::json j;
    j["members"] = member_names;
    j["individual_accuracy"] = r.individual_accuracy;
    j["mean_individual_accuracy"] = r.mean_individual;
    j["committee_accuracy"] = r.committee_accuracy;
    j["mean_agreement"] = r.mean_agreement;
    auto& m = j["agreement_matrix"] = nlohmann::json::array();
    const std::size_t n = r.agreement_matrix.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < n; ++k) row.push_back(r.agreement_matrix.at(i, k));
        m.push_back(std::move(row));
    }
    open_out(path) << j.dump(2) << "\n";
}

} // namespace cctlab::io
