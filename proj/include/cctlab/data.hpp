#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/rng.hpp"
#include "cctlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace cctlab {

struct Dataset {
    Tensor images; ///< N x C x S x S
    std::vector<int> labels;
    int num_labels = 0;
    std::string split;

    std::size_t size() const { return labels.size(); }
};

/// A training batch: inputs plus soft-target rows (one distribution per row).
struct Batch {
    Tensor inputs;  ///< B x C x S x S
    Tensor targets; ///< B x L, each row sums to 1
};

enum class CifarVariant { cifar100, cifar10 };

namespace detail {

inline Dataset read_cifar_file(const std::filesystem::path& file, CifarVariant variant,
                               const std::string& split, Dataset accum = {}) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IngestionError("cannot open dataset file: " + file.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    const std::size_t label_bytes = variant == CifarVariant::cifar100 ? 2 : 1;
    const std::size_t record = label_bytes + 3072;
    if (bytes.empty()) throw IngestionError("empty dataset file: " + file.string());
    if (bytes.size() % record != 0)
        throw IngestionError("truncated dataset file " + file.string() + ": " +
                             std::to_string(bytes.size()) + " bytes, first bad record at byte offset " +
                             std::to_string((bytes.size() / record) * record));
    const std::size_t n_new = bytes.size() / record;
    const std::size_t n_old = accum.labels.size();
    Tensor images({n_old + n_new, 3, 32, 32});
    for (std::size_t i = 0; i < accum.images.numel(); ++i) images[i] = accum.images[i];
    accum.labels.resize(n_old + n_new);
    for (std::size_t r = 0; r < n_new; ++r) {
        const unsigned char* rec = bytes.data() + r * record;
        // CIFAR-100 records carry coarse then fine label; the fine label is used.
        accum.labels[n_old + r] = rec[label_bytes - 1];
        const unsigned char* px = rec + label_bytes;
        for (std::size_t i = 0; i < 3072; ++i)
            images[(n_old + r) * 3072 + i] = static_cast<double>(px[i]) / 255.0;
    }
    accum.images = std::move(images);
    accum.num_labels = variant == CifarVariant::cifar100 ? 100 : 10;
    accum.split = split;
    return accum;
}

} // namespace detail

/// Loads a CIFAR split from the standard binary layout. `path` may be the
/// dataset directory (standard file names) or a single record file.
inline Dataset load_cifar(const std::filesystem::path& path, CifarVariant variant,
                          const std::string& split) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(path)) return detail::read_cifar_file(path, variant, split);
    if (!fs::is_directory(path)) throw IngestionError("dataset path does not exist: " + path.string());
    if (variant == CifarVariant::cifar100) {
        const fs::path file = path / (split == "train" ? "train.bin" : "test.bin");
        return detail::read_cifar_file(file, variant, split);
    }
    Dataset d;
    if (split == "train") {
        for (int i = 1; i <= 5; ++i)
            d = detail::read_cifar_file(path / ("data_batch_" + std::to_string(i) + ".bin"),
                                        variant, split, std::move(d));
        return d;
    }
    return detail::read_cifar_file(path / "test_batch.bin", variant, split);
}

/// Zero-mean unit-variance normalization over all pixels and channels of one
/// image. Rejects zero-variance images.
inline Tensor normalize_per_image(const Tensor& image) {
    if (image.numel() < 2) throw InputError("normalize_per_image: image has too few pixels");
    double mean = 0.0;
    for (std::size_t i = 0; i < image.numel(); ++i) mean += image[i];
    mean /= static_cast<double>(image.numel());
    double var = 0.0;
    for (std::size_t i = 0; i < image.numel(); ++i) {
        const double d = image[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(image.numel());
    if (var == 0.0) throw NumericError("normalize_per_image: zero-variance image");
    const double inv_sd = 1.0 / std::sqrt(var);
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.numel(); ++i) out[i] = (image[i] - mean) * inv_sd;
    return out;
}

inline void normalize_per_image_inplace(Dataset& d) {
    const std::size_t px = d.images.numel() / d.size();
    for (std::size_t n = 0; n < d.size(); ++n) {
        Tensor img({px});
        for (std::size_t i = 0; i < px; ++i) img[i] = d.images[n * px + i];
        Tensor norm = normalize_per_image(img);
        for (std::size_t i = 0; i < px; ++i) d.images[n * px + i] = norm[i];
    }
}

/// Keeps only the given labels and remaps them to 0..k-1 in list order.
inline Dataset filter_labels(const Dataset& d, const std::vector<int>& keep) {
    std::vector<int> remap(static_cast<std::size_t>(d.num_labels), -1);
    for (std::size_t i = 0; i < keep.size(); ++i) remap[static_cast<std::size_t>(keep[i])] = static_cast<int>(i);
    std::vector<std::size_t> rows;
    for (std::size_t n = 0; n < d.size(); ++n)
        if (remap[static_cast<std::size_t>(d.labels[n])] >= 0) rows.push_back(n);
    const std::size_t px = d.images.numel() / d.size();
    Dataset out;
    out.images = Tensor({rows.size(), d.images.dim(1), d.images.dim(2), d.images.dim(3)});
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < px; ++j) out.images[i * px + j] = d.images[rows[i] * px + j];
        out.labels[i] = remap[static_cast<std::size_t>(d.labels[rows[i]])];
    }
    out.num_labels = static_cast<int>(keep.size());
    out.split = d.split;
    return out;
}

/// Box-average downscale by an integer factor (32 -> 16 at factor 2).
inline Dataset downscale(const Dataset& d, int factor) {
    if (factor <= 1) return d;
    const std::size_t N = d.size(), C = d.images.dim(1), S = d.images.dim(2);
    if (S % static_cast<std::size_t>(factor) != 0)
        throw InputError("downscale: image side not divisible by factor");
    const std::size_t So = S / static_cast<std::size_t>(factor);
    Dataset out = d;
    out.images = Tensor({N, C, So, So});
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < So; ++i)
                for (std::size_t j = 0; j < So; ++j) {
                    double s = 0.0;
                    for (int u = 0; u < factor; ++u)
                        for (int v = 0; v < factor; ++v)
                            s += d.images.at(n, c, i * factor + u, j * factor + v);
                    out.images.at(n, c, i, j) = s * inv;
                }
    return out;
}

/// Assembles a batch with one-hot targets from dataset rows.
inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& rows) {
    const std::size_t px = d.images.numel() / d.size();
    Batch b;
    b.inputs = Tensor({rows.size(), d.images.dim(1), d.images.dim(2), d.images.dim(3)});
    b.targets = Tensor({rows.size(), static_cast<std::size_t>(d.num_labels)});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < px; ++j) b.inputs[i * px + j] = d.images[rows[i] * px + j];
        b.targets.at(i, static_cast<std::size_t>(d.labels[rows[i]])) = 1.0;
    }
    return b;
}

/// inputs and targets both mixed as lambda * a + (1 - lambda) * b.
inline Batch mixup(const Batch& a, const Batch& b, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw InputError("mixup: lambda outside [0,1]");
    if (!a.inputs.same_shape(b.inputs) || !a.targets.same_shape(b.targets))
        throw InputError("mixup: batch shape mismatch");
    Batch out;
    out.inputs = Tensor(a.inputs.shape());
    out.targets = Tensor(a.targets.shape());
    for (std::size_t i = 0; i < out.inputs.numel(); ++i)
        out.inputs[i] = lambda * a.inputs[i] + (1.0 - lambda) * b.inputs[i];
    for (std::size_t i = 0; i < out.targets.numel(); ++i)
        out.targets[i] = lambda * a.targets[i] + (1.0 - lambda) * b.targets[i];
    return out;
}

struct CutBox {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0; ///< half-open pixel bounds
    double realized_lambda = 1.0;               ///< 1 - box_area / image_area
};

/// Pastes one rectangle of b into a (area ratio ~ 1 - lambda, same box for
/// the whole batch) and mixes targets by the realized pixel ratio, which
/// differs from the requested lambda whenever the box is clipped.
inline Batch cutmix(const Batch& a, const Batch& b, double lambda, Rng& rng, CutBox* box_out = nullptr) {
    if (lambda < 0.0 || lambda > 1.0) throw InputError("cutmix: lambda outside [0,1]");
    if (!a.inputs.same_shape(b.inputs) || !a.targets.same_shape(b.targets))
        throw InputError("cutmix: batch shape mismatch");
    const std::size_t H = a.inputs.dim(2), W = a.inputs.dim(3);
    const double cut = std::sqrt(1.0 - lambda);
    const auto rh = static_cast<std::size_t>(static_cast<double>(H) * cut);
    const auto rw = static_cast<std::size_t>(static_cast<double>(W) * cut);
    CutBox box;
    if (rh > 0 && rw > 0) {
        const auto cy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(H) - 1));
        const auto cx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(W) - 1));
        box.y0 = cy >= rh / 2 ? cy - rh / 2 : 0;
        box.x0 = cx >= rw / 2 ? cx - rw / 2 : 0;
        box.y1 = std::min(H, cy + (rh + 1) / 2);
        box.x1 = std::min(W, cx + (rw + 1) / 2);
    }
    const double area = static_cast<double>((box.y1 - box.y0) * (box.x1 - box.x0));
    box.realized_lambda = 1.0 - area / static_cast<double>(H * W);
    Batch out = a;
    const std::size_t B = a.inputs.dim(0), C = a.inputs.dim(1);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = box.y0; i < box.y1; ++i)
                for (std::size_t j = box.x0; j < box.x1; ++j)
                    out.inputs.at(n, c, i, j) = b.inputs.at(n, c, i, j);
    for (std::size_t i = 0; i < out.targets.numel(); ++i)
        out.targets[i] = box.realized_lambda * a.targets[i] + (1.0 - box.realized_lambda) * b.targets[i];
    if (box_out) *box_out = box;
    return out;
}

/// With probability p replaces one random rectangle (area and aspect drawn
/// from the given ranges) with per-pixel unit normal noise.
inline Tensor random_erase(const Tensor& image, double p, std::pair<double, double> area_range,
                           std::pair<double, double> aspect_range, Rng& rng) {
    if (area_range.first <= 0.0 || area_range.second < area_range.first ||
        aspect_range.first <= 0.0 || aspect_range.second < aspect_range.first)
        throw InputError("random_erase: invalid ranges");
    if (rng.uniform() >= p) return image;
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    const double total = static_cast<double>(H * W);
    const auto lo = static_cast<std::size_t>(std::ceil(area_range.first * total));
    const auto hi = static_cast<std::size_t>(std::floor(area_range.second * total));
    std::size_t eh = 0, ew = 0;
    for (int attempt = 0; attempt < 100 && eh == 0; ++attempt) {
        const double target = rng.uniform(area_range.first, area_range.second) * total;
        const double aspect =
            std::exp(rng.uniform(std::log(aspect_range.first), std::log(aspect_range.second)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
        if (h >= 1 && w >= 1 && h <= H && w <= W && h * w >= lo && h * w <= hi) {
            eh = h;
            ew = w;
        }
    }
    if (eh == 0) { // extremely unlikely; smallest admissible square
        eh = ew = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(lo))));
    }
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(H - eh)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(W - ew)));
    Tensor out = image;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = y0; i < y0 + eh; ++i)
            for (std::size_t j = x0; j < x0 + ew; ++j)
                out.at(c, i, j) = rng.normal();
    return out;
}

/// Augmentation policy applied by the trainer: a coin flip between Mixup and
/// CutMix per batch, then Random Erasing per image.
struct AugmentConfig {
    bool enabled = false;
    double mixup_alpha = 1.0;
    double cutmix_alpha = 1.0;
    double erase_probability = 0.25;
    std::pair<double, double> erase_area = {0.02, 0.33};
    std::pair<double, double> erase_aspect = {0.3, 3.3};
    std::vector<std::string> extra; ///< unsupported entries fail loudly
};

inline void validate_augmentations(const AugmentConfig& cfg) {
    for (const auto& name : cfg.extra)
        throw ConfigError("unsupported augmentation: " + name);
}

inline Batch augment_batch(const Batch& batch, const AugmentConfig& cfg, Rng& rng) {
    validate_augmentations(cfg);
    const std::size_t B = batch.inputs.dim(0);
    // partner batch: rows rotated by a random nonzero shift
    std::vector<std::size_t> rows(B);
    const auto shift = B > 1 ? static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(B) - 1)) : 0;
    for (std::size_t i = 0; i < B; ++i) rows[i] = (i + shift) % B;
    Batch partner;
    partner.inputs = Tensor(batch.inputs.shape());
    partner.targets = Tensor(batch.targets.shape());
    const std::size_t px = batch.inputs.numel() / B;
    const std::size_t tl = batch.targets.dim(1);
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < px; ++j) partner.inputs[i * px + j] = batch.inputs[rows[i] * px + j];
        for (std::size_t j = 0; j < tl; ++j) partner.targets.at(i, j) = batch.targets.at(rows[i], j);
    }
    Batch out;
    if (rng.uniform() < 0.5) {
        out = mixup(batch, partner, rng.beta(cfg.mixup_alpha, cfg.mixup_alpha));
    } else {
        out = cutmix(batch, partner, rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha), rng);
    }
    const std::size_t C = out.inputs.dim(1), S = out.inputs.dim(2);
    for (std::size_t n = 0; n < B; ++n) {
        Tensor img({C, S, S});
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] = out.inputs[n * img.numel() + i];
        Tensor erased = random_erase(img, cfg.erase_probability, cfg.erase_area, cfg.erase_aspect, rng);
        for (std::size_t i = 0; i < img.numel(); ++i) out.inputs[n * img.numel() + i] = erased[i];
    }
    return out;
}

} // namespace cctlab
