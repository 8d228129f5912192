#pragma once

#include "cctlab/architecture.hpp"
#include "cctlab/errors.hpp"
#include "cctlab/model.hpp"
#include "cctlab/trainer.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace cctlab {

/// Everything needed to resume training exactly: architecture, parameters,
/// optimizer moments, epoch counter, and the session RNG state.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    ArchitectureSpec spec;
    ModelState model;
    AdamState adam;
    int epoch = 0;
    std::string rng_state;
};

namespace detail {

// Little-endian binary writer/reader with a running FNV-1a checksum.
struct ByteWriter {
    std::vector<unsigned char> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i64(std::int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u8(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) u64(d);
        raw(t.data(), t.numel() * sizeof(double));
    }
};

struct ByteReader {
    const unsigned char* p;
    const unsigned char* end;

    void raw(void* out, std::size_t n) {
        if (p + n > end) throw IoError("checkpoint truncated");
        std::memcpy(out, p, n);
        p += n;
    }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
    std::string str() {
        const std::uint64_t n = u64();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    Tensor tensor() {
        const std::uint8_t rank = u8();
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = u64();
        Tensor t(shape);
        raw(t.data(), t.numel() * sizeof(double));
        return t;
    }
};

} // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    detail::ByteWriter w;
    w.raw("CCTLCKPT", 8);
    w.u32(Checkpoint::kVersion);
    const std::string spec_text = ck.spec.to_config_text();
    w.str(spec_text);
    w.u64(fnv1a(spec_text));
    w.i64(ck.epoch);
    w.i64(ck.adam.step);
    w.str(ck.rng_state);
    w.u64(ck.model.init_seed);
    w.u64(ck.model.params.size());
    for (const auto& e : ck.model.params) {
        w.str(e.name);
        w.u8(e.trainable ? 1 : 0);
        w.tensor(e.tensor);
    }
    w.u64(ck.adam.m.size());
    for (const auto& [name, t] : ck.adam.m) {
        w.str(name);
        w.tensor(t);
        w.tensor(ck.adam.v.at(name));
    }
    w.u64(fnv1a(w.bytes.data(), w.bytes.size()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 16) throw IoError("checkpoint too small: " + path.string());
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (fnv1a(bytes.data(), bytes.size() - 8) != stored)
        throw IoError("checkpoint checksum mismatch: " + path.string());

    detail::ByteReader r{bytes.data(), bytes.data() + bytes.size() - 8};
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, "CCTLCKPT", 8) != 0) throw IoError("not a checkpoint file: " + path.string());
    const std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
    Checkpoint ck;
    const std::string spec_text = r.str();
    const std::uint64_t spec_hash = r.u64();
    if (fnv1a(spec_text) != spec_hash) throw IoError("checkpoint spec hash mismatch");
    ck.spec = ArchitectureSpec::from_config_text(spec_text);
    ck.epoch = static_cast<int>(r.i64());
    ck.adam.step = r.i64();
    ck.rng_state = r.str();
    ck.model.init_seed = r.u64();
    const std::uint64_t n_params = r.u64();
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        const bool trainable = r.u8() != 0;
        ck.model.add(std::move(name), r.tensor(), trainable);
    }
    const std::uint64_t n_moments = r.u64();
    for (std::uint64_t i = 0; i < n_moments; ++i) {
        std::string name = r.str();
        Tensor m = r.tensor();
        Tensor v = r.tensor();
        ck.adam.m.emplace(name, std::move(m));
        ck.adam.v.emplace(std::move(name), std::move(v));
    }
    return ck;
}

inline Checkpoint make_checkpoint(const Trainer& t) {
    Checkpoint ck;
    ck.spec = t.spec;
    ck.model = t.model;
    ck.adam = t.adam;
    ck.epoch = t.epoch;
    ck.rng_state = t.rng.serialize();
    return ck;
}

/// Rebuilds a training session from a checkpoint. The architecture must
/// match the checkpointed one shape-for-shape.
inline Trainer resume_trainer(const Checkpoint& ck, const ArchitectureSpec& spec,
                              const OptimizerConfig& cfg) {
    if (!(spec == ck.spec))
        throw ConfigError("architecture mismatch between checkpoint and requested spec");
    Trainer t(ck.model, ck.spec, cfg, 0);
    t.adam = ck.adam;
    t.epoch = ck.epoch;
    t.rng.deserialize(ck.rng_state);
    return t;
}

} // namespace cctlab
