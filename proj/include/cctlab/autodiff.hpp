#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

namespace cctlab::ad {

struct Graph;

/// Handle into a Graph node. Cheap to copy; valid for the graph's lifetime.
struct Var {
    Graph* graph = nullptr;
    int id = -1;
};

/// Reverse-mode tape. Nodes are appended in topological order, so the
/// backward sweep is a single reverse pass over node indices. One graph per
/// optimization step; build, backward, read leaf gradients, discard.
struct Graph {
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> parents;
        // Pulls this node's grad and accumulates into the parents' grads.
        std::function<void(Graph&, int)> back;
    };

    std::vector<Node> nodes;

    Var leaf(Tensor v) {
        Node n;
        n.value = std::move(v);
        nodes.push_back(std::move(n));
        return {this, static_cast<int>(nodes.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes[v.id].value; }
    const Tensor& grad(Var v) const { return nodes[v.id].grad; }

    /// Seeds d(root)/d(root) = 1 and sweeps the tape. root must be scalar.
    void backward(Var root) {
        if (nodes[root.id].value.numel() != 1)
            throw InputError("backward: root must be a scalar");
        for (int i = 0; i <= root.id; ++i) {
            nodes[i].grad = Tensor(nodes[i].value.shape());
        }
        nodes[root.id].grad[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            if (nodes[i].back) nodes[i].back(*this, i);
        }
    }
};

namespace detail {

// C (+)= op(A) * op(B) with optional transposes. i-k-j order on the hot path.
inline void gemm(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c, bool accumulate) {
    const std::size_t m = ta ? a.dim(1) : a.dim(0);
    const std::size_t k = ta ? a.dim(0) : a.dim(1);
    const std::size_t n = tb ? b.dim(0) : b.dim(1);
    if (!accumulate) c.fill(0.0);
    double* cd = c.data();
    const double* ad = a.data();
    const double* bd = b.data();
    if (!ta && !tb) {
        const std::size_t lda = a.dim(1), ldb = b.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ad[i * lda + p];
                if (av == 0.0) continue;
                const double* brow = bd + p * ldb;
                double* crow = cd + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else if (ta && !tb) {
        const std::size_t lda = a.dim(1), ldb = b.dim(1);
        for (std::size_t p = 0; p < k; ++p) {
            const double* arow = ad + p * lda;
            const double* brow = bd + p * ldb;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = cd + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        const std::size_t lda = a.dim(1), ldb = b.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double* arow = ad + i * lda;
                const double* brow = bd + j * ldb;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                cd[i * n + j] += s;
            }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a.at(p, i) * b.at(j, p);
                cd[i * n + j] += s;
            }
    }
}

inline void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

} // namespace detail

/// a [m,k] * b [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw InputError("matmul: incompatible shapes " + av.shape_string() + " * " + bv.shape_string());
    Tensor out({av.dim(0), bv.dim(1)});
    detail::gemm(av, false, bv, false, out, false);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id, b.id};
    node.back = [ai = a.id, bi = b.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        detail::gemm(go, false, gr.nodes[bi].value, true, gr.nodes[ai].grad, true);
        detail::gemm(gr.nodes[ai].value, true, go, false, gr.nodes[bi].grad, true);
    };
    return r;
}

inline Var transpose(Var a) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    Tensor out({av.dim(1), av.dim(0)});
    for (std::size_t i = 0; i < av.dim(0); ++i)
        for (std::size_t j = 0; j < av.dim(1); ++j)
            out.at(j, i) = av.at(i, j);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id};
    node.back = [ai = a.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& ga = gr.nodes[ai].grad;
        for (std::size_t i = 0; i < go.dim(0); ++i)
            for (std::size_t j = 0; j < go.dim(1); ++j)
                ga.at(j, i) += go.at(i, j);
    };
    return r;
}

inline Var add(Var a, Var b) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (!av.same_shape(bv))
        throw InputError("add: shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
    Tensor out = av;
    detail::add_into(out, bv);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id, b.id};
    node.back = [ai = a.id, bi = b.id](Graph& gr, int self) {
        detail::add_into(gr.nodes[ai].grad, gr.nodes[self].grad);
        detail::add_into(gr.nodes[bi].grad, gr.nodes[self].grad);
    };
    return r;
}

/// x [m,n] + bias [n] broadcast over rows.
inline Var add_rowvec(Var x, Var bias) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const Tensor& bv = g.value(bias);
    if (xv.rank() != 2 || bv.numel() != xv.dim(1))
        throw InputError("add_rowvec: shape mismatch " + xv.shape_string() + " + " + bv.shape_string());
    Tensor out = xv;
    for (std::size_t i = 0; i < xv.dim(0); ++i)
        for (std::size_t j = 0; j < xv.dim(1); ++j)
            out.at(i, j) += bv[j];
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id, bias.id};
    node.back = [xi = x.id, bi = bias.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        detail::add_into(gr.nodes[xi].grad, go);
        Tensor& gb = gr.nodes[bi].grad;
        for (std::size_t i = 0; i < go.dim(0); ++i)
            for (std::size_t j = 0; j < go.dim(1); ++j)
                gb[j] += go.at(i, j);
    };
    return r;
}

inline Var scale(Var a, double s) {
    Graph& g = *a.graph;
    Tensor out = g.value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id};
    node.back = [ai = a.id, s](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& ga = gr.nodes[ai].grad;
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += s * go[i];
    };
    return r;
}

inline Var relu(Var a) {
    Graph& g = *a.graph;
    Tensor out = g.value(a);
    for (std::size_t i = 0; i < out.numel(); ++i)
        if (out[i] < 0.0) out[i] = 0.0;
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id};
    node.back = [ai = a.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        const Tensor& av = gr.nodes[ai].value;
        Tensor& ga = gr.nodes[ai].grad;
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (av[i] > 0.0) ga[i] += go[i];
    };
    return r;
}

/// Exact GELU: x * Phi(x).
inline Var gelu(Var a) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const double x = av[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id};
    node.back = [ai = a.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        const Tensor& av2 = gr.nodes[ai].value;
        Tensor& ga = gr.nodes[ai].grad;
        constexpr double inv_sqrt2pi = 0.3989422804014326779; // 1/sqrt(2*pi)
        for (std::size_t i = 0; i < go.numel(); ++i) {
            const double x = av2[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] += go[i] * (cdf + x * pdf);
        }
    };
    return r;
}

/// Row-wise softmax of a 2D tensor, max-shifted.
inline Var softmax_rows(Var a) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    Tensor out(av.shape());
    const std::size_t m = av.dim(0), n = av.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(av.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {a.id};
    node.back = [ai = a.id](Graph& gr, int self) {
        const Tensor& s = gr.nodes[self].value;
        const Tensor& go = gr.nodes[self].grad;
        Tensor& ga = gr.nodes[ai].grad;
        const std::size_t m2 = s.dim(0), n2 = s.dim(1);
        for (std::size_t i = 0; i < m2; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n2; ++j) dot += go.at(i, j) * s.at(i, j);
            for (std::size_t j = 0; j < n2; ++j)
                ga.at(i, j) += s.at(i, j) * (go.at(i, j) - dot);
        }
    };
    return r;
}

/// Row-wise layer norm with affine parameters gamma/beta of width n.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const Tensor& gv = g.value(gamma);
    const Tensor& bv = g.value(beta);
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    if (gv.numel() != n || bv.numel() != n)
        throw InputError("layer_norm: affine width mismatch");
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    Tensor inv_sigma({m});
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xv.at(i, j);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xv.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xv.at(i, j) - mu) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = gv[j] * h + bv[j];
        }
    }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id, gamma.id, beta.id};
    node.back = [xi = x.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        const Tensor& gv2 = gr.nodes[gi].value;
        Tensor& gx = gr.nodes[xi].grad;
        Tensor& gg = gr.nodes[gi].grad;
        Tensor& gb = gr.nodes[bi].grad;
        const std::size_t m2 = go.dim(0), n2 = go.dim(1);
        for (std::size_t i = 0; i < m2; ++i) {
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (std::size_t j = 0; j < n2; ++j) {
                const double gh = go.at(i, j) * gv2[j];
                mean_gh += gh;
                mean_ghx += gh * xhat.at(i, j);
                gg[j] += go.at(i, j) * xhat.at(i, j);
                gb[j] += go.at(i, j);
            }
            mean_gh /= static_cast<double>(n2);
            mean_ghx /= static_cast<double>(n2);
            for (std::size_t j = 0; j < n2; ++j) {
                const double gh = go.at(i, j) * gv2[j];
                gx.at(i, j) += inv_sigma[i] * (gh - mean_gh - xhat.at(i, j) * mean_ghx);
            }
        }
    };
    return r;
}

/// 2D convolution, x [B,C,H,W] * w [O,C,k,k] + b [O], arbitrary stride/pad.
inline Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    const Tensor& bv = g.value(b);
    const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != C) throw InputError("conv2d: channel mismatch");
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
    Tensor out({B, O, Ho, Wo});
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double s = bv[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t u = 0; u < k; ++u) {
                            const long long ii = static_cast<long long>(i) * stride + u - pad;
                            if (ii < 0 || ii >= static_cast<long long>(H)) continue;
                            for (std::size_t v = 0; v < k; ++v) {
                                const long long jj = static_cast<long long>(j) * stride + v - pad;
                                if (jj < 0 || jj >= static_cast<long long>(W)) continue;
                                s += xv.at(bi, c, ii, jj) * wv.at(o, c, u, v);
                            }
                        }
                    out.at(bi, o, i, j) = s;
                }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id, w.id, b.id};
    node.back = [xi = x.id, wi = w.id, bi2 = b.id, stride, pad](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        const Tensor& xv2 = gr.nodes[xi].value;
        const Tensor& wv2 = gr.nodes[wi].value;
        Tensor& gx = gr.nodes[xi].grad;
        Tensor& gw = gr.nodes[wi].grad;
        Tensor& gb = gr.nodes[bi2].grad;
        const std::size_t B2 = xv2.dim(0), C2 = xv2.dim(1), H2 = xv2.dim(2), W2 = xv2.dim(3);
        const std::size_t O2 = wv2.dim(0), k2 = wv2.dim(2);
        const std::size_t Ho2 = go.dim(2), Wo2 = go.dim(3);
        for (std::size_t bb = 0; bb < B2; ++bb)
            for (std::size_t o = 0; o < O2; ++o)
                for (std::size_t i = 0; i < Ho2; ++i)
                    for (std::size_t j = 0; j < Wo2; ++j) {
                        const double gval = go.at(bb, o, i, j);
                        if (gval == 0.0) continue;
                        gb[o] += gval;
                        for (std::size_t c = 0; c < C2; ++c)
                            for (std::size_t u = 0; u < k2; ++u) {
                                const long long ii = static_cast<long long>(i) * stride + u - pad;
                                if (ii < 0 || ii >= static_cast<long long>(H2)) continue;
                                for (std::size_t v = 0; v < k2; ++v) {
                                    const long long jj = static_cast<long long>(j) * stride + v - pad;
                                    if (jj < 0 || jj >= static_cast<long long>(W2)) continue;
                                    gw.at(o, c, u, v) += gval * xv2.at(bb, c, ii, jj);
                                    gx.at(bb, c, ii, jj) += gval * wv2.at(o, c, u, v);
                                }
                            }
                    }
    };
    return r;
}

/// Max pooling over x [B,C,H,W]; padded cells never win.
inline Var maxpool2d(Var x, int k, int stride, int pad) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
    Tensor out({B, C, Ho, Wo});
    std::vector<std::size_t> argmax(out.numel());
    std::size_t idx = 0;
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j, ++idx) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_at = 0;
                    for (int u = 0; u < k; ++u) {
                        const long long ii = static_cast<long long>(i) * stride + u - pad;
                        if (ii < 0 || ii >= static_cast<long long>(H)) continue;
                        for (int v = 0; v < k; ++v) {
                            const long long jj = static_cast<long long>(j) * stride + v - pad;
                            if (jj < 0 || jj >= static_cast<long long>(W)) continue;
                            const double val = xv.at(bi, c, ii, jj);
                            if (val > best) {
                                best = val;
                                best_at = ((bi * C + c) * H + ii) * W + jj;
                            }
                        }
                    }
                    out[idx] = best;
                    argmax[idx] = best_at;
                }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id};
    node.back = [xi = x.id, argmax = std::move(argmax)](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& gx = gr.nodes[xi].grad;
        for (std::size_t i = 0; i < go.numel(); ++i) gx[argmax[i]] += go[i];
    };
    return r;
}

/// [B,C,H,W] -> [B, H*W, C]: one token per spatial position.
inline Var images_to_tokens(Var x) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({B, H * W, C});
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out.at(bi, i * W + j, c) = xv.at(bi, c, i, j);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id};
    node.back = [xi = x.id](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& gx = gr.nodes[xi].grad;
        const std::size_t B2 = gx.dim(0), C2 = gx.dim(1), H2 = gx.dim(2), W2 = gx.dim(3);
        for (std::size_t bi = 0; bi < B2; ++bi)
            for (std::size_t c = 0; c < C2; ++c)
                for (std::size_t i = 0; i < H2; ++i)
                    for (std::size_t j = 0; j < W2; ++j)
                        gx.at(bi, c, i, j) += go.at(bi, i * W2 + j, c);
    };
    return r;
}

/// Select item b of a 3D tensor: [B,T,C] -> [T,C].
inline Var batch_item(Var x, std::size_t b) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const std::size_t T = xv.dim(1), C = xv.dim(2);
    Tensor out({T, C});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            out.at(t, c) = xv.at(b, t, c);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id};
    node.back = [xi = x.id, b](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& gx = gr.nodes[xi].grad;
        for (std::size_t t = 0; t < go.dim(0); ++t)
            for (std::size_t c = 0; c < go.dim(1); ++c)
                gx.at(b, t, c) += go.at(t, c);
    };
    return r;
}

/// Columns [c0, c1) of a 2D tensor.
inline Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
    Graph& g = *x.graph;
    const Tensor& xv = g.value(x);
    const std::size_t m = xv.dim(0);
    Tensor out({m, c1 - c0});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = c0; j < c1; ++j)
            out.at(i, j - c0) = xv.at(i, j);
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = {x.id};
    node.back = [xi = x.id, c0](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        Tensor& gx = gr.nodes[xi].grad;
        for (std::size_t i = 0; i < go.dim(0); ++i)
            for (std::size_t j = 0; j < go.dim(1); ++j)
                gx.at(i, c0 + j) += go.at(i, j);
    };
    return r;
}

/// Horizontal concatenation of 2D tensors with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
    Graph& g = *parts.front().graph;
    const std::size_t m = g.value(parts.front()).dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) n += g.value(p).dim(1);
    Tensor out({m, n});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const Tensor& pv = g.value(p);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pv.dim(1); ++j)
                out.at(i, off + j) = pv.at(i, j);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += pv.dim(1);
    }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = ids;
    node.back = [ids, offsets](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor& gp = gr.nodes[ids[p]].grad;
            for (std::size_t i = 0; i < gp.dim(0); ++i)
                for (std::size_t j = 0; j < gp.dim(1); ++j)
                    gp.at(i, j) += go.at(i, offsets[p] + j);
        }
    };
    return r;
}

/// Stack k row vectors [1,n] into [k,n].
inline Var stack_rows(const std::vector<Var>& rows) {
    Graph& g = *rows.front().graph;
    const std::size_t n = g.value(rows.front()).dim(1);
    Tensor out({rows.size(), n});
    std::vector<int> ids;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Tensor& rv = g.value(rows[i]);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = rv.at(0, j);
        ids.push_back(rows[i].id);
    }
    Var r = g.leaf(std::move(out));
    auto& node = g.nodes[r.id];
    node.parents = ids;
    node.back = [ids](Graph& gr, int self) {
        const Tensor& go = gr.nodes[self].grad;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            Tensor& gi = gr.nodes[ids[i]].grad;
            for (std::size_t j = 0; j < go.dim(1); ++j) gi.at(0, j) += go.at(i, j);
        }
    };
    return r;
}

/// Mean soft-target cross-entropy over a batch: logits [B,L], targets [B,L].
/// Log-sum-exp stabilized; gradient d/dlogit = (softmax * sum(t) - t) / B.
inline Var soft_ce_mean(Var logits, const Tensor& targets) {
    Graph& g = *logits.graph;
    const Tensor& lv = g.value(logits);
    if (!lv.same_shape(targets))
        throw InputError("soft_ce_mean: logits/targets shape mismatch");
    if (!all_finite(lv)) throw NumericError("soft_ce_mean: non-finite logits");
    const std::size_t B = lv.dim(0), L = lv.dim(1);
    Tensor softmax({B, L});
    Tensor tsum({B});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) mx = std::max(mx, lv.at(b, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) sum += std::exp(lv.at(b, j) - mx);
        const double lse = mx + std::log(sum);
        double ts = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            loss -= targets.at(b, j) * (lv.at(b, j) - lse);
            softmax.at(b, j) = std::exp(lv.at(b, j) - lse);
            ts += targets.at(b, j);
        }
        tsum[b] = ts;
    }
    loss /= static_cast<double>(B);
    Var r = g.leaf(Tensor::scalar(loss));
    auto& node = g.nodes[r.id];
    node.parents = {logits.id};
    node.back = [li = logits.id, softmax = std::move(softmax), tsum = std::move(tsum),
                 targets](Graph& gr, int self) {
        const double go = gr.nodes[self].grad[0];
        Tensor& gl = gr.nodes[li].grad;
        const std::size_t B2 = gl.dim(0), L2 = gl.dim(1);
        const double inv_b = 1.0 / static_cast<double>(B2);
        for (std::size_t b = 0; b < B2; ++b)
            for (std::size_t j = 0; j < L2; ++j)
                gl.at(b, j) += go * inv_b * (softmax.at(b, j) * tsum[b] - targets.at(b, j));
    };
    return r;
}

} // namespace cctlab::ad
