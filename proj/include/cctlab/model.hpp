#pragma once

#include "cctlab/architecture.hpp"
#include "cctlab/autodiff.hpp"
#include "cctlab/errors.hpp"
#include "cctlab/rng.hpp"
#include "cctlab/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cctlab {

/// All learnable parameters of one model, in a fixed creation order so that
/// initialization, checkpointing, and hashing are deterministic.
struct ModelState {
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable = true;
    };

    std::vector<Entry> params;
    std::unordered_map<std::string, std::size_t> index;
    std::uint64_t init_seed = 0;

    void add(std::string name, Tensor t, bool trainable = true) {
        index[name] = params.size();
        params.push_back({std::move(name), std::move(t), trainable});
    }

    bool has(const std::string& name) const { return index.count(name) > 0; }

    Tensor& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw InputError("unknown parameter: " + name);
        return params[it->second].tensor;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw InputError("unknown parameter: " + name);
        return params[it->second].tensor;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : params) n += e.tensor.numel();
        return n;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& e : params) {
            h = fnv1a(e.name, h);
            h = tensor_hash(e.tensor, h);
        }
        return h;
    }
};

namespace init {

inline Tensor trunc_normal(std::vector<std::size_t> shape, Rng& rng, double sd = 0.02) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.truncated_normal(sd, 2.0 * sd);
    return t;
}

} // namespace init

/// Builds an initialized model. Identical (spec, seed) pairs produce
/// bit-identical parameters: weights are truncated-normal (sd 0.02), biases
/// zero, norm affines identity, drawn in fixed parameter order.
inline ModelState build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelState m;
    m.init_seed = seed;
    Rng rng(seed);

    const auto C = static_cast<std::size_t>(spec.channels());
    const auto K = static_cast<std::size_t>(spec.conv_kernel);
    const auto D = static_cast<std::size_t>(spec.dim);
    const auto T = static_cast<std::size_t>(spec.tokens());
    const auto L = static_cast<std::size_t>(spec.num_labels);
    const auto F = static_cast<std::size_t>(spec.ff_dim());

    for (int i = 0; i < spec.num_conv_layers; ++i) {
        const std::size_t in_ch = i == 0 ? static_cast<std::size_t>(spec.input_channels) : C;
        const std::string p = "tok.conv" + std::to_string(i);
        m.add(p + ".w", init::trunc_normal({C, in_ch, K, K}, rng));
        m.add(p + ".b", Tensor({C}));
    }
    if (spec.num_blocks > 0) m.add("pos", init::trunc_normal({T, D}, rng));
    for (int b = 0; b < spec.num_blocks; ++b) {
        const std::string p = "blk" + std::to_string(b);
        m.add(p + ".ln1.g", Tensor({D}, 1.0));
        m.add(p + ".ln1.b", Tensor({D}));
        m.add(p + ".q.w", init::trunc_normal({D, D}, rng));
        m.add(p + ".q.b", Tensor({D}));
        m.add(p + ".k.w", init::trunc_normal({D, D}, rng));
        m.add(p + ".k.b", Tensor({D}));
        m.add(p + ".v.w", init::trunc_normal({D, D}, rng));
        m.add(p + ".v.b", Tensor({D}));
        m.add(p + ".proj.w", init::trunc_normal({D, D}, rng));
        m.add(p + ".proj.b", Tensor({D}));
        m.add(p + ".ln2.g", Tensor({D}, 1.0));
        m.add(p + ".ln2.b", Tensor({D}));
        m.add(p + ".ff1.w", init::trunc_normal({D, F}, rng));
        m.add(p + ".ff1.b", Tensor({F}));
        m.add(p + ".ff2.w", init::trunc_normal({F, D}, rng));
        m.add(p + ".ff2.b", Tensor({D}));
    }
    const std::size_t W = static_cast<std::size_t>(spec.num_blocks > 0 ? spec.dim : spec.channels());
    m.add("pool.w", init::trunc_normal({W, 1}, rng));
    m.add("cls.w", init::trunc_normal({W, L}, rng));
    m.add("cls.b", Tensor({L}));
    return m;
}

/// Per-image taps captured during a traced forward pass.
struct ForwardTrace {
    // indexed [image][block]
    std::vector<std::vector<Tensor>> post_attention; ///< pre-projection head concatenation, tokens x dim
    std::vector<std::vector<Tensor>> post_block;     ///< block output, tokens x dim
};

struct ForwardResult {
    Tensor logits; ///< batch x num_labels
    std::optional<ForwardTrace> trace;
};

/// Graph-side handles for one model's parameters.
struct ModelVars {
    std::unordered_map<std::string, ad::Var> vars;
    ad::Var operator()(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw InputError("unknown parameter var: " + name);
        return it->second;
    }
};

inline ModelVars make_leaves(ad::Graph& g, const ModelState& m) {
    ModelVars mv;
    for (const auto& e : m.params) mv.vars[e.name] = g.leaf(e.tensor);
    return mv;
}

namespace graph_ops {

/// Conv tokenizer: conv(k, stride 1, same pad) -> ReLU -> optional 3x3/s2 max
/// pool per layer, then flatten to tokens. images [B,C,S,S] -> [B,T,channels].
inline ad::Var tokenizer(ad::Graph& g, const ModelVars& mv, const ArchitectureSpec& spec, ad::Var images) {
    ad::Var x = images;
    const int pad = spec.conv_kernel / 2;
    for (int i = 0; i < spec.num_conv_layers; ++i) {
        const std::string p = "tok.conv" + std::to_string(i);
        x = ad::conv2d(x, mv(p + ".w"), mv(p + ".b"), 1, pad);
        x = ad::relu(x);
        if (spec.pool_after.count(i + 1)) x = ad::maxpool2d(x, 3, 2, 1);
    }
    return ad::images_to_tokens(x);
}

/// Multi-head QKV attention + projection on one image's tokens [T,dim].
/// Returns {concat_heads, projected}; head h owns concat columns
/// [h*dim/H, (h+1)*dim/H). Optionally copies out each head's row-stochastic
/// attention matrix.
inline std::pair<ad::Var, ad::Var> attention(ad::Graph& g, ad::Var tokens, ad::Var wq, ad::Var bq,
                                             ad::Var wk, ad::Var bk, ad::Var wv, ad::Var bv,
                                             ad::Var wp, ad::Var bp, int H,
                                             std::vector<Tensor>* attention_out = nullptr) {
    const std::size_t dim = g.value(wq).dim(1);
    if (dim % static_cast<std::size_t>(H) != 0) throw InputError("attention: dim not divisible by heads");
    const std::size_t hs = dim / static_cast<std::size_t>(H);
    ad::Var q = ad::add_rowvec(ad::matmul(tokens, wq), bq);
    ad::Var k = ad::add_rowvec(ad::matmul(tokens, wk), bk);
    ad::Var v = ad::add_rowvec(ad::matmul(tokens, wv), bv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hs));
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * hs;
        ad::Var qh = ad::slice_cols(q, c0, c0 + hs);
        ad::Var kh = ad::slice_cols(k, c0, c0 + hs);
        ad::Var vh = ad::slice_cols(v, c0, c0 + hs);
        ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        ad::Var attn = ad::softmax_rows(scores);
        if (attention_out) attention_out->push_back(g.value(attn));
        heads.push_back(ad::matmul(attn, vh));
    }
    ad::Var concat = H == 1 ? heads[0] : ad::concat_cols(heads);
    ad::Var projected = ad::add_rowvec(ad::matmul(concat, wp), bp);
    return {concat, projected};
}

/// Pre-norm encoder block. Returns the block output; *concat_out (if given)
/// receives the pre-projection attention tap.
inline ad::Var encoder_block(ad::Graph& g, const ModelVars& mv, const std::string& p, ad::Var x,
                             int H, ad::Var* concat_out = nullptr) {
    ad::Var n1 = ad::layer_norm(x, mv(p + ".ln1.g"), mv(p + ".ln1.b"));
    auto [concat, projected] =
        attention(g, n1, mv(p + ".q.w"), mv(p + ".q.b"), mv(p + ".k.w"), mv(p + ".k.b"),
                  mv(p + ".v.w"), mv(p + ".v.b"), mv(p + ".proj.w"), mv(p + ".proj.b"), H);
    if (concat_out) *concat_out = concat;
    x = ad::add(x, projected);
    ad::Var n2 = ad::layer_norm(x, mv(p + ".ln2.g"), mv(p + ".ln2.b"));
    ad::Var ff = ad::add_rowvec(ad::matmul(n2, mv(p + ".ff1.w")), mv(p + ".ff1.b"));
    ff = ad::gelu(ff);
    ff = ad::add_rowvec(ad::matmul(ff, mv(p + ".ff2.w")), mv(p + ".ff2.b"));
    return ad::add(x, ff);
}

/// Softmax-weighted sequence pooling: tokens [T,d] -> [1,d].
inline ad::Var sequence_pool(ad::Graph& g, ad::Var tokens, ad::Var pool_w) {
    ad::Var scores = ad::matmul(tokens, pool_w);            // [T,1]
    ad::Var weights = ad::softmax_rows(ad::transpose(scores)); // [1,T]
    return ad::matmul(weights, tokens);                     // [1,d]
}

inline ad::Var classifier(ad::Graph& g, const ModelVars& mv, ad::Var tokens) {
    ad::Var pooled = sequence_pool(g, tokens, mv("pool.w"));
    return ad::add_rowvec(ad::matmul(pooled, mv("cls.w")), mv("cls.b"));
}

/// Full forward over a batch: logits Var [B,L]. Positional embedding is added
/// only when transformer blocks exist; with zero blocks the classifier runs
/// directly on the tokenizer output.
inline ad::Var forward(ad::Graph& g, const ModelVars& mv, const ArchitectureSpec& spec,
                       ad::Var images, ForwardTrace* trace = nullptr) {
    const Tensor& iv = g.value(images);
    if (iv.rank() != 4 || iv.dim(1) != static_cast<std::size_t>(spec.input_channels) ||
        iv.dim(2) != static_cast<std::size_t>(spec.input_size) ||
        iv.dim(3) != static_cast<std::size_t>(spec.input_size))
        throw InputError("forward: batch shape " + iv.shape_string() + " does not match the architecture");
    const std::size_t B = iv.dim(0);
    ad::Var tok = tokenizer(g, mv, spec, images);
    std::vector<ad::Var> logit_rows;
    logit_rows.reserve(B);
    if (trace) {
        trace->post_attention.assign(B, {});
        trace->post_block.assign(B, {});
    }
    for (std::size_t b = 0; b < B; ++b) {
        ad::Var x = ad::batch_item(tok, b);
        if (spec.num_blocks > 0) x = ad::add(x, mv("pos"));
        for (int blk = 0; blk < spec.num_blocks; ++blk) {
            ad::Var concat;
            x = encoder_block(g, mv, "blk" + std::to_string(blk), x, spec.heads(blk),
                              trace ? &concat : nullptr);
            if (trace) {
                trace->post_attention[b].push_back(g.value(concat));
                trace->post_block[b].push_back(g.value(x));
            }
        }
        logit_rows.push_back(classifier(g, mv, x));
    }
    return B == 1 ? logit_rows[0] : ad::stack_rows(logit_rows);
}

} // namespace graph_ops

/// Evaluation-mode forward pass (no gradients kept).
inline ForwardResult forward(const ModelState& model, const ArchitectureSpec& spec,
                             const Tensor& batch, bool want_trace = false) {
    ad::Graph g;
    ModelVars mv = make_leaves(g, model);
    ad::Var images = g.leaf(batch);
    ForwardResult out;
    ForwardTrace trace;
    ad::Var logits = graph_ops::forward(g, mv, spec, images, want_trace ? &trace : nullptr);
    out.logits = g.value(logits);
    if (want_trace) out.trace = std::move(trace);
    return out;
}

/// Parameters of one attention sub-block (tensor-level entry point).
struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wp, bp;
};

/// QKV attention + projection on tokens [T,dim]; returns {concat, projected}.
inline std::pair<Tensor, Tensor> attention_subblock(const Tensor& tokens, const AttentionParams& p,
                                                    int H, std::vector<Tensor>* attention_out = nullptr) {
    ad::Graph g;
    ad::Var t = g.leaf(tokens);
    auto [concat, projected] = graph_ops::attention(
        g, t, g.leaf(p.wq), g.leaf(p.bq), g.leaf(p.wk), g.leaf(p.bk), g.leaf(p.wv), g.leaf(p.bv),
        g.leaf(p.wp), g.leaf(p.bp), H, attention_out);
    return {g.value(concat), g.value(projected)};
}

/// Softmax-weighted pooling of token rows (tensor-level entry point).
inline Tensor sequence_pool(const Tensor& tokens, const Tensor& pool_w) {
    if (tokens.dim(0) == 0) throw InputError("sequence_pool: empty token set");
    ad::Graph g;
    ad::Var pooled = graph_ops::sequence_pool(g, g.leaf(tokens), g.leaf(pool_w));
    return g.value(pooled).reshaped({tokens.dim(1)});
}

/// Where a probe taps the model.
struct ProbePoint {
    enum class Tap { post_block, post_attention };
    int block = 1; ///< 1-based block index m
    Tap tap = Tap::post_block;

    void validate(const ArchitectureSpec& spec) const {
        if (block < 1 || block > spec.num_blocks)
            throw InputError("probe block index " + std::to_string(block) + " out of range [1, " +
                             std::to_string(spec.num_blocks) + "]");
    }
};

/// Runs the frozen prefix up to the tap for every image; returns one
/// tokens x dim feature tensor per image. For post_attention the tap is the
/// pre-projection concatenation of block m's heads.
inline std::vector<Tensor> extract_features(const ModelState& model, const ArchitectureSpec& spec,
                                            const Tensor& images, ProbePoint point,
                                            std::size_t chunk = 16) {
    point.validate(spec);
    const std::size_t N = images.dim(0);
    const std::size_t C = images.dim(1), S = images.dim(2);
    std::vector<Tensor> features;
    features.reserve(N);
    for (std::size_t start = 0; start < N; start += chunk) {
        const std::size_t n = std::min(chunk, N - start);
        Tensor part({n, C, S, S});
        for (std::size_t i = 0; i < part.numel(); ++i)
            part[i] = images[start * C * S * S + i];
        ad::Graph g;
        ModelVars mv = make_leaves(g, model);
        ad::Var tok = graph_ops::tokenizer(g, mv, spec, g.leaf(part));
        for (std::size_t b = 0; b < n; ++b) {
            ad::Var x = ad::batch_item(tok, b);
            x = ad::add(x, mv("pos"));
            ad::Var tap;
            for (int blk = 0; blk < point.block; ++blk) {
                const std::string p = "blk" + std::to_string(blk);
                const bool last = blk == point.block - 1;
                if (last && point.tap == ProbePoint::Tap::post_attention) {
                    ad::Var n1 = ad::layer_norm(x, mv(p + ".ln1.g"), mv(p + ".ln1.b"));
                    auto [concat, projected] = graph_ops::attention(
                        g, n1, mv(p + ".q.w"), mv(p + ".q.b"), mv(p + ".k.w"), mv(p + ".k.b"),
                        mv(p + ".v.w"), mv(p + ".v.b"), mv(p + ".proj.w"), mv(p + ".proj.b"),
                        spec.heads(blk));
                    tap = concat;
                } else {
                    x = graph_ops::encoder_block(g, mv, p, x, spec.heads(blk));
                    if (last) tap = x;
                }
            }
            features.push_back(g.value(tap));
        }
    }
    return features;
}

} // namespace cctlab
