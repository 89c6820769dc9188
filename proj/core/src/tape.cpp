#include "masqlab/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

#include "masqlab/errors.hpp"
#include "masqlab/threads.hpp"

namespace masqlab {

namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

inline CMap cmap(const Tensor& t, std::int64_t rows, std::int64_t cols) {
    return CMap(t.data(), rows, cols);
}
inline Map mmap(Tensor& t, std::int64_t rows, std::int64_t cols) {
    return Map(t.data(), rows, cols);
}

inline real sigmoid(real x) { return 1.0 / (1.0 + std::exp(-x)); }

// im2col for kernel (kh,kw), stride s, zero padding p.
// col is [C*kh*kw, Ho*Wo], row-major.
void im2col(const real* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, real* col) {
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                real* dst = col + (static_cast<std::int64_t>(c) * kh * kw + i * kw + j) *
                                      (static_cast<std::int64_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho) {
                    const int hi = ho * stride - pad + i;
                    if (hi < 0 || hi >= H) {
                        std::memset(dst, 0, sizeof(real) * static_cast<std::size_t>(Wo));
                        dst += Wo;
                        continue;
                    }
                    const real* src = x + (static_cast<std::int64_t>(c) * H + hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int wi = wo * stride - pad + j;
                        *dst++ = (wi >= 0 && wi < W) ? src[wi] : 0.0;
                    }
                }
            }
        }
    }
}

// transpose of im2col: accumulates col gradients back into gx
void col2im_acc(const real* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, real* gx) {
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const real* src = col + (static_cast<std::int64_t>(c) * kh * kw + i * kw + j) *
                                            (static_cast<std::int64_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho, src += Wo) {
                    const int hi = ho * stride - pad + i;
                    if (hi < 0 || hi >= H) continue;
                    real* dst = gx + (static_cast<std::int64_t>(c) * H + hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int wi = wo * stride - pad + j;
                        if (wi >= 0 && wi < W) dst[wi] += src[wo];
                    }
                }
            }
        }
    }
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop,
               std::vector<Tensor> aux) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    n.aux = std::move(aux);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

Tensor& Tape::grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (!n.grad_live) {
        n.grad = Tensor::zeros(n.value.shape());
        n.grad_live = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) {
    Node& n = nodes_[v.id];
    if (!n.grad_live) {
        n.grad = Tensor::zeros(n.value.shape());
        n.grad_live = true;
    }
    return n.grad;
}

void Tape::backward(Var root) {
    if (value(root).size() != 1) {
        throw NumericError("backward() requires a scalar root");
    }
    grad_ref(root)[0] = 1.0;
    for (std::int32_t i = root.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.grad_live || !n.backprop) continue;
        n.backprop(*this);
    }
}

// ---------------- elementwise ----------------

Var Tape::add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw NumericError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw NumericError("sub: shape mismatch");
    Tensor out = ta;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw NumericError("mul: shape mismatch");
    Tensor out = ta;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

Var Tape::square(Var a) {
    Tensor out = value(a);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& va = t.value(a);
        if (!t.requires_grad(a)) return;
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * va[i] * g[i];
    });
}

Var Tape::scale(Var a, real c) {
    Tensor out = value(a);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, c, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

Var Tape::add_scalar(Var a, real c) {
    Tensor out = value(a);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += c;
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var Tape::silu(Var a) {
    Tensor out = value(a);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= sigmoid(out[i]);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& va = t.value(a);
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const real s = sigmoid(va[i]);
            ga[i] += g[i] * (s + va[i] * s * (1.0 - s));
        }
    });
}

// ---------------- linear algebra ----------------

Var Tape::matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    if (tb.dim(0) != k) throw NumericError("matmul: inner dim mismatch");
    Tensor out({m, n});
    mmap(out, m, n).noalias() = cmap(ta, m, k) * cmap(tb, k, n);
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, m, k, n, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(a)) {
            mmap(t.grad_ref(a), m, k).noalias() += cmap(g, m, n) * cmap(t.value(b), k, n).transpose();
        }
        if (t.requires_grad(b)) {
            mmap(t.grad_ref(b), k, n).noalias() += cmap(t.value(a), m, k).transpose() * cmap(g, m, n);
        }
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
    if (tb.dim(1) != k) throw NumericError("matmul_nt: inner dim mismatch");
    Tensor out({m, n});
    mmap(out, m, n).noalias() = cmap(ta, m, k) * cmap(tb, n, k).transpose();
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, m, k, n, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(a)) {
            mmap(t.grad_ref(a), m, k).noalias() += cmap(g, m, n) * cmap(t.value(b), n, k);
        }
        if (t.requires_grad(b)) {
            mmap(t.grad_ref(b), n, k).noalias() += cmap(g, m, n).transpose() * cmap(t.value(a), m, k);
        }
    });
}

Var Tape::bmm(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(2);
    if (tb.dim(0) != B || tb.dim(1) != k) throw NumericError("bmm: shape mismatch");
    Tensor out({B, m, n});
    const std::int64_t sa = static_cast<std::int64_t>(m) * k;
    const std::int64_t sb = static_cast<std::int64_t>(k) * n;
    const std::int64_t so = static_cast<std::int64_t>(m) * n;
    for (int i = 0; i < B; ++i) {
        Map(out.data() + i * so, m, n).noalias() =
            CMap(ta.data() + i * sa, m, k) * CMap(tb.data() + i * sb, k, n);
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, B, m, k, n, sa, sb, so, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_ref(a);
            for (int i = 0; i < B; ++i) {
                Map(ga.data() + i * sa, m, k).noalias() +=
                    CMap(g.data() + i * so, m, n) * CMap(vb.data() + i * sb, k, n).transpose();
            }
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (int i = 0; i < B; ++i) {
                Map(gb.data() + i * sb, k, n).noalias() +=
                    CMap(va.data() + i * sa, m, k).transpose() * CMap(g.data() + i * so, m, n);
            }
        }
    });
}

Var Tape::bmm_nt(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(1);
    if (tb.dim(0) != B || tb.dim(2) != k) throw NumericError("bmm_nt: shape mismatch");
    Tensor out({B, m, n});
    const std::int64_t sa = static_cast<std::int64_t>(m) * k;
    const std::int64_t sb = static_cast<std::int64_t>(n) * k;
    const std::int64_t so = static_cast<std::int64_t>(m) * n;
    for (int i = 0; i < B; ++i) {
        Map(out.data() + i * so, m, n).noalias() =
            CMap(ta.data() + i * sa, m, k) * CMap(tb.data() + i * sb, n, k).transpose();
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [a, b, B, m, k, n, sa, sb, so, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_ref(a);
            for (int i = 0; i < B; ++i) {
                Map(ga.data() + i * sa, m, k).noalias() +=
                    CMap(g.data() + i * so, m, n) * CMap(vb.data() + i * sb, n, k);
            }
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (int i = 0; i < B; ++i) {
                Map(gb.data() + i * sb, n, k).noalias() +=
                    CMap(g.data() + i * so, m, n).transpose() * CMap(va.data() + i * sa, m, k);
            }
        }
    });
}

// ---------------- shape ----------------

Var Tape::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = value(a);
    if (Tensor::count(shape) != ta.size()) throw NumericError("reshape: element count mismatch");
    Tensor out(std::move(shape), ta.vec());
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var Tape::transpose12(Var a) {
    const Tensor& ta = value(a);
    const int B = ta.dim(0), m = ta.dim(1), n = ta.dim(2);
    Tensor out({B, n, m});
    for (int b = 0; b < B; ++b) {
        const real* src = ta.data() + static_cast<std::int64_t>(b) * m * n;
        real* dst = out.data() + static_cast<std::int64_t>(b) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                dst[static_cast<std::int64_t>(j) * m + i] = src[static_cast<std::int64_t>(i) * n + j];
            }
        }
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, B, m, n, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (int b = 0; b < B; ++b) {
            const real* src = g.data() + static_cast<std::int64_t>(b) * m * n;
            real* dst = ga.data() + static_cast<std::int64_t>(b) * m * n;
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) {
                    dst[static_cast<std::int64_t>(i) * n + j] +=
                        src[static_cast<std::int64_t>(j) * m + i];
                }
            }
        }
    });
}

Var Tape::split_heads(Var a, int heads) {
    const Tensor& ta = value(a);
    const int B = ta.dim(0), L = ta.dim(1), D = ta.dim(2);
    const int dh = D / heads;
    if (D % heads != 0) throw NumericError("split_heads: D not divisible by heads");
    Tensor out({B * heads, L, dh});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int l = 0; l < L; ++l) {
                const real* src = ta.data() + (static_cast<std::int64_t>(b) * L + l) * D + h * dh;
                real* dst = out.data() +
                            ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                std::memcpy(dst, src, sizeof(real) * static_cast<std::size_t>(dh));
            }
        }
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, B, L, D, heads, dh, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < heads; ++h) {
                for (int l = 0; l < L; ++l) {
                    const real* src = g.data() +
                                      ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                    real* dst = ga.data() + (static_cast<std::int64_t>(b) * L + l) * D + h * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
            }
        }
    });
}

Var Tape::merge_heads(Var a, int heads) {
    const Tensor& ta = value(a);
    const int Bh = ta.dim(0), L = ta.dim(1), dh = ta.dim(2);
    const int B = Bh / heads;
    if (Bh % heads != 0) throw NumericError("merge_heads: batch not divisible by heads");
    const int D = heads * dh;
    Tensor out({B, L, D});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int l = 0; l < L; ++l) {
                const real* src = ta.data() +
                                  ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                real* dst = out.data() + (static_cast<std::int64_t>(b) * L + l) * D + h * dh;
                std::memcpy(dst, src, sizeof(real) * static_cast<std::size_t>(dh));
            }
        }
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, B, L, D, heads, dh, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < heads; ++h) {
                for (int l = 0; l < L; ++l) {
                    const real* src = g.data() + (static_cast<std::int64_t>(b) * L + l) * D + h * dh;
                    real* dst = ga.data() +
                                ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
            }
        }
    });
}

Var Tape::broadcast_batch(Var a, int batch) {
    const Tensor& ta = value(a);
    if (ta.dim(0) != 1) throw NumericError("broadcast_batch: leading dim must be 1");
    std::vector<int> shape = ta.shape();
    shape[0] = batch;
    const std::int64_t item = ta.size();
    Tensor out(shape);
    for (int b = 0; b < batch; ++b) {
        std::memcpy(out.data() + b * item, ta.data(), sizeof(real) * static_cast<std::size_t>(item));
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, batch, item, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& ga = t.grad_ref(a);
        for (int b = 0; b < batch; ++b) {
            const real* src = g.data() + b * item;
            for (std::int64_t i = 0; i < item; ++i) ga[i] += src[i];
        }
    });
}

// ---------------- neural net ----------------

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    const int O = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
    if (tw.dim(1) != C) throw NumericError("conv2d: channel mismatch");
    if (tb.size() != O) throw NumericError("conv2d: bias size mismatch");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int ckk = C * kh * kw;
    const std::int64_t hw_out = static_cast<std::int64_t>(Ho) * Wo;
    const std::int64_t x_item = static_cast<std::int64_t>(C) * H * W;
    const std::int64_t o_item = static_cast<std::int64_t>(O) * hw_out;

    Tensor out({B, O, Ho, Wo});
    parallel_for(B, [&](std::int64_t b0, std::int64_t b1) {
        Tensor col({ckk, static_cast<int>(hw_out)});
        for (std::int64_t i = b0; i < b1; ++i) {
            im2col(tx.data() + i * x_item, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
            Map om(out.data() + i * o_item, O, hw_out);
            om.noalias() = cmap(tw, O, ckk) * cmap(col, ckk, hw_out);
            for (int o = 0; o < O; ++o) om.row(o).array() += tb[o];
        }
    });

    const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg,
                [x, w, b, stride, pad, B, C, H, W, O, kh, kw, Ho, Wo, ckk, hw_out, x_item,
                 o_item, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& vx = t.value(x);
        const Tensor& vw = t.value(w);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(w);
        const bool need_b = t.requires_grad(b);

        // per-item weight-gradient scratch keeps the reduction order
        // independent of the worker count
        Tensor gw_scratch;
        if (need_w) gw_scratch = Tensor({B, O, ckk});

        Tensor* gx = need_x ? &t.grad_ref(x) : nullptr;
        parallel_for(B, [&](std::int64_t b0, std::int64_t b1) {
            Tensor col({ckk, static_cast<int>(hw_out)});
            Tensor gcol({ckk, static_cast<int>(hw_out)});
            for (std::int64_t i = b0; i < b1; ++i) {
                CMap gm(g.data() + i * o_item, O, hw_out);
                if (need_w) {
                    im2col(vx.data() + i * x_item, C, H, W, kh, kw, stride, pad, Ho, Wo,
                           col.data());
                    Map(gw_scratch.data() + i * static_cast<std::int64_t>(O) * ckk, O, ckk)
                        .noalias() = gm * cmap(col, ckk, hw_out).transpose();
                }
                if (need_x) {
                    mmap(gcol, ckk, hw_out).noalias() = cmap(vw, O, ckk).transpose() * gm;
                    col2im_acc(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               gx->data() + i * x_item);
                }
            }
        });
        if (need_w) {
            Map gwm = mmap(t.grad_ref(w), O, ckk);
            for (int i = 0; i < B; ++i) {
                gwm.noalias() += CMap(gw_scratch.data() + static_cast<std::int64_t>(i) * O * ckk,
                                      O, ckk);
            }
        }
        if (need_b) {
            Tensor& gb = t.grad_ref(b);
            for (int i = 0; i < B; ++i) {
                CMap gm(g.data() + i * o_item, O, hw_out);
                for (int o = 0; o < O; ++o) gb[o] += gm.row(o).sum();
            }
        }
    });
}

Var Tape::upsample2x(Var x) {
    const Tensor& tx = value(x);
    const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    Tensor out({B, C, 2 * H, 2 * W});
    const std::int64_t planes = static_cast<std::int64_t>(B) * C;
    for (std::int64_t p = 0; p < planes; ++p) {
        const real* src = tx.data() + p * H * W;
        real* dst = out.data() + p * 4 * H * W;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                const real v = src[i * W + j];
                dst[(2 * i) * 2 * W + 2 * j] = v;
                dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
            }
        }
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(x), [x, B, C, H, W, planes, result](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& gx = t.grad_ref(x);
        for (std::int64_t p = 0; p < planes; ++p) {
            const real* src = g.data() + p * 4 * H * W;
            real* dst = gx.data() + p * H * W;
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < W; ++j) {
                    dst[i * W + j] += src[(2 * i) * 2 * W + 2 * j] +
                                      src[(2 * i) * 2 * W + 2 * j + 1] +
                                      src[(2 * i + 1) * 2 * W + 2 * j] +
                                      src[(2 * i + 1) * 2 * W + 2 * j + 1];
                }
            }
        }
    });
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups, real eps) {
    const Tensor& tx = value(x);
    const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    if (C % groups != 0) throw NumericError("group_norm: C not divisible by groups");
    const int cg = C / groups;
    const std::int64_t m = static_cast<std::int64_t>(cg) * H * W;
    const Tensor& tgm = value(gamma);
    const Tensor& tbt = value(beta);

    Tensor out(tx.shape());
    Tensor mean({B, groups});
    Tensor invstd({B, groups});
    for (int b = 0; b < B; ++b) {
        for (int g = 0; g < groups; ++g) {
            const real* src = tx.data() + (static_cast<std::int64_t>(b) * C + g * cg) * H * W;
            real mu = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mu += src[i];
            mu /= static_cast<real>(m);
            real var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const real d = src[i] - mu;
                var += d * d;
            }
            var /= static_cast<real>(m);
            const real inv = 1.0 / std::sqrt(var + eps);
            mean.at(b, g) = mu;
            invstd.at(b, g) = inv;
            real* dst = out.data() + (static_cast<std::int64_t>(b) * C + g * cg) * H * W;
            for (int c = 0; c < cg; ++c) {
                const real ga = tgm[g * cg + c];
                const real be = tbt[g * cg + c];
                const real* s = src + static_cast<std::int64_t>(c) * H * W;
                real* d = dst + static_cast<std::int64_t>(c) * H * W;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                    d[i] = ga * (s[i] - mu) * inv + be;
                }
            }
        }
    }

    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg,
                [x, gamma, beta, B, C, H, W, groups, cg, m, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& vx = t.value(x);
        const Tensor& vgm = t.value(gamma);
        const Tensor& mean = t.aux_of(result, 0);
        const Tensor& invstd = t.aux_of(result, 1);
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;

        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
            Tensor* ggm = t.requires_grad(gamma) ? &t.grad_ref(gamma) : nullptr;
            Tensor* gbt = t.requires_grad(beta) ? &t.grad_ref(beta) : nullptr;
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    const int grp = c / cg;
                    const real mu = mean.at(b, grp);
                    const real inv = invstd.at(b, grp);
                    const real* gs = g.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                    const real* xs = vx.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                    real sg = 0.0, sb = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        sg += gs[i] * (xs[i] - mu) * inv;
                        sb += gs[i];
                    }
                    if (ggm) (*ggm)[c] += sg;
                    if (gbt) (*gbt)[c] += sb;
                }
            }
        }
        if (t.requires_grad(x)) {
            Tensor& gx = t.grad_ref(x);
            parallel_for(static_cast<std::int64_t>(B) * groups,
                         [&](std::int64_t p0, std::int64_t p1) {
                for (std::int64_t p = p0; p < p1; ++p) {
                    const int b = static_cast<int>(p / groups);
                    const int grp = static_cast<int>(p % groups);
                    const real mu = mean.at(b, grp);
                    const real inv = invstd.at(b, grp);
                    const std::int64_t base =
                        (static_cast<std::int64_t>(b) * C + grp * cg) * hw;
                    const real* xs = vx.data() + base;
                    const real* gs = g.data() + base;
                    // dxhat = g * gamma; reduce over the group
                    real sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < cg; ++c) {
                        const real ga = vgm[grp * cg + c];
                        const real* xc = xs + static_cast<std::int64_t>(c) * hw;
                        const real* gc = gs + static_cast<std::int64_t>(c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const real dxh = gc[i] * ga;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * (xc[i] - mu) * inv;
                        }
                    }
                    const real inv_m = 1.0 / static_cast<real>(m);
                    real* gxp = gx.data() + base;
                    for (int c = 0; c < cg; ++c) {
                        const real ga = vgm[grp * cg + c];
                        const real* xc = xs + static_cast<std::int64_t>(c) * hw;
                        const real* gc = gs + static_cast<std::int64_t>(c) * hw;
                        real* gd = gxp + static_cast<std::int64_t>(c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const real xhat = (xc[i] - mu) * inv;
                            const real dxh = gc[i] * ga;
                            gd[i] += inv * (dxh - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
            });
        }
    },
                {std::move(mean), std::move(invstd)});
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, real eps) {
    const Tensor& tx = value(x);
    const int D = tx.dim(tx.ndim() - 1);
    const std::int64_t N = tx.size() / D;
    const Tensor& tgm = value(gamma);
    const Tensor& tbt = value(beta);

    Tensor out(tx.shape());
    Tensor mean({static_cast<int>(N)});
    Tensor invstd({static_cast<int>(N)});
    for (std::int64_t r = 0; r < N; ++r) {
        const real* src = tx.data() + r * D;
        real mu = 0.0;
        for (int i = 0; i < D; ++i) mu += src[i];
        mu /= D;
        real var = 0.0;
        for (int i = 0; i < D; ++i) {
            const real d = src[i] - mu;
            var += d * d;
        }
        var /= D;
        const real inv = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        invstd[r] = inv;
        real* dst = out.data() + r * D;
        for (int i = 0; i < D; ++i) dst[i] = tgm[i] * (src[i] - mu) * inv + tbt[i];
    }

    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [x, gamma, beta, D, N, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& vx = t.value(x);
        const Tensor& vgm = t.value(gamma);
        const Tensor& mean = t.aux_of(result, 0);
        const Tensor& invstd = t.aux_of(result, 1);
        Tensor* ggm = t.requires_grad(gamma) ? &t.grad_ref(gamma) : nullptr;
        Tensor* gbt = t.requires_grad(beta) ? &t.grad_ref(beta) : nullptr;
        Tensor* gx = t.requires_grad(x) ? &t.grad_ref(x) : nullptr;
        for (std::int64_t r = 0; r < N; ++r) {
            const real* xs = vx.data() + r * D;
            const real* gs = g.data() + r * D;
            const real mu = mean[r];
            const real inv = invstd[r];
            real sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int i = 0; i < D; ++i) {
                const real xhat = (xs[i] - mu) * inv;
                const real dxh = gs[i] * vgm[i];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat;
                if (ggm) (*ggm)[i] += gs[i] * xhat;
                if (gbt) (*gbt)[i] += gs[i];
            }
            if (gx) {
                real* gd = gx->data() + r * D;
                for (int i = 0; i < D; ++i) {
                    const real xhat = (xs[i] - mu) * inv;
                    const real dxh = gs[i] * vgm[i];
                    gd[i] += inv * (dxh - sum_dxhat / D - xhat * sum_dxhat_xhat / D);
                }
            }
        }
    },
                {std::move(mean), std::move(invstd)});
}

namespace {
void softmax_rows(const real* in, real* out, std::int64_t rows, int n,
                  const real* addmask_rowstride_n) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const real* src = in + r * n;
        real* dst = out + r * n;
        real mx = -1e300;
        for (int i = 0; i < n; ++i) {
            const real v = src[i] + (addmask_rowstride_n ? addmask_rowstride_n[r * n + i] : 0.0);
            if (v > mx) mx = v;
        }
        real sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const real v = src[i] + (addmask_rowstride_n ? addmask_rowstride_n[r * n + i] : 0.0);
            dst[i] = std::exp(v - mx);
            sum += dst[i];
        }
        const real inv = 1.0 / sum;
        for (int i = 0; i < n; ++i) dst[i] *= inv;
    }
}

void softmax_backward_rows(const real* y, const real* g, real* gx, std::int64_t rows, int n) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const real* ys = y + r * n;
        const real* gs = g + r * n;
        real* gd = gx + r * n;
        real dotv = 0.0;
        for (int i = 0; i < n; ++i) dotv += gs[i] * ys[i];
        for (int i = 0; i < n; ++i) gd[i] += ys[i] * (gs[i] - dotv);
    }
}
}  // namespace

Var Tape::softmax_lastdim(Var a) {
    const Tensor& ta = value(a);
    const int n = ta.dim(ta.ndim() - 1);
    const std::int64_t rows = ta.size() / n;
    Tensor out(ta.shape());
    softmax_rows(ta.data(), out.data(), rows, n, nullptr);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, rows, n, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& y = t.value(result);
        softmax_backward_rows(y.data(), g.data(), t.grad_ref(a).data(), rows, n);
    });
}

Var Tape::masked_softmax(Var scores, const Tensor& key_mask, int heads) {
    const Tensor& ts = value(scores);
    const int Bh = ts.dim(0), Lq = ts.dim(1), Lk = ts.dim(2);
    const int B = Bh / heads;
    if (key_mask.dim(0) != B || key_mask.dim(1) != Lk) {
        throw NumericError("masked_softmax: mask shape mismatch");
    }
    // additive mask expanded to score rows
    Tensor addmask({Bh, Lq, Lk});
    for (int bh = 0; bh < Bh; ++bh) {
        const int b = bh / heads;
        for (int q = 0; q < Lq; ++q) {
            real* dst = addmask.data() + (static_cast<std::int64_t>(bh) * Lq + q) * Lk;
            for (int k = 0; k < Lk; ++k) {
                dst[k] = key_mask.at(b, k) > 0.5 ? 0.0 : -1e30;
            }
        }
    }
    const std::int64_t rows = static_cast<std::int64_t>(Bh) * Lq;
    Tensor out(ts.shape());
    softmax_rows(ts.data(), out.data(), rows, Lk, addmask.data());
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(scores), [scores, rows, Lk, result](Tape& t) {
        if (!t.requires_grad(scores)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& y = t.value(result);
        softmax_backward_rows(y.data(), g.data(), t.grad_ref(scores).data(), rows, Lk);
    });
}

Var Tape::embed(Var table, const std::vector<int>& ids) {
    const Tensor& tt = value(table);
    const int V = tt.dim(0), D = tt.dim(1);
    const int N = static_cast<int>(ids.size());
    Tensor out({N, D});
    for (int i = 0; i < N; ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw NumericError("embed: id out of range");
        std::memcpy(out.data() + static_cast<std::int64_t>(i) * D,
                    tt.data() + static_cast<std::int64_t>(ids[i]) * D,
                    sizeof(real) * static_cast<std::size_t>(D));
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(table), [table, ids, D, N, result](Tape& t) {
        if (!t.requires_grad(table)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& gt = t.grad_ref(table);
        for (int i = 0; i < N; ++i) {
            real* dst = gt.data() + static_cast<std::int64_t>(ids[i]) * D;
            const real* src = g.data() + static_cast<std::int64_t>(i) * D;
            for (int d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
}

Var Tape::add_bias_rows(Var x, Var b) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(b);
    const int D = tb.dim(0);
    const std::int64_t N = tx.size() / D;
    Tensor out = tx;
    for (std::int64_t r = 0; r < N; ++r) {
        real* dst = out.data() + r * D;
        for (int i = 0; i < D; ++i) dst[i] += tb[i];
    }
    const bool rg = requires_grad(x) || requires_grad(b);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [x, b, D, N, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(x)) {
            Tensor& gx = t.grad_ref(x);
            for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_ref(b);
            for (std::int64_t r = 0; r < N; ++r) {
                const real* src = g.data() + r * D;
                for (int i = 0; i < D; ++i) gb[i] += src[i];
            }
        }
    });
}

Var Tape::add_rows_tile(Var x, Var tvar) {
    const Tensor& tx = value(x);
    const Tensor& tt = value(tvar);
    const int B = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
    if (tt.dim(0) != L || tt.dim(1) != D) throw NumericError("add_rows_tile: shape mismatch");
    Tensor out = tx;
    for (int b = 0; b < B; ++b) {
        real* dst = out.data() + static_cast<std::int64_t>(b) * L * D;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(L) * D; ++i) dst[i] += tt[i];
    }
    const bool rg = requires_grad(x) || requires_grad(tvar);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [x, tvar, B, L, D, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(x)) {
            Tensor& gx = t.grad_ref(x);
            for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(tvar)) {
            Tensor& gt = t.grad_ref(tvar);
            for (int b = 0; b < B; ++b) {
                const real* src = g.data() + static_cast<std::int64_t>(b) * L * D;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(L) * D; ++i) gt[i] += src[i];
            }
        }
    });
}

Var Tape::add_channels(Var x, Var tvar) {
    const Tensor& tx = value(x);
    const Tensor& tt = value(tvar);
    const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    if (tt.dim(0) != B || tt.dim(1) != C) throw NumericError("add_channels: shape mismatch");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out = tx;
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            real* dst = out.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            const real v = tt.at(b, c);
            for (std::int64_t i = 0; i < hw; ++i) dst[i] += v;
        }
    }
    const bool rg = requires_grad(x) || requires_grad(tvar);
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), rg, [x, tvar, B, C, hw, result](Tape& t) {
        const Tensor& g = t.nodes_[result.id].grad;
        if (t.requires_grad(x)) {
            Tensor& gx = t.grad_ref(x);
            for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(tvar)) {
            Tensor& gt = t.grad_ref(tvar);
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    const real* src = g.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                    real s = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) s += src[i];
                    gt.at(b, c) += s;
                }
            }
        }
    });
}

Var Tape::masked_mean_rows(Var x, const Tensor& mask) {
    const Tensor& tx = value(x);
    const int B = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
    if (mask.dim(0) != B || mask.dim(1) != L) throw NumericError("masked_mean_rows: mask mismatch");
    Tensor out({B, D});
    Tensor counts({B});
    for (int b = 0; b < B; ++b) {
        real cnt = 0.0;
        for (int l = 0; l < L; ++l) cnt += mask.at(b, l) > 0.5 ? 1.0 : 0.0;
        if (cnt == 0.0) throw NumericError("masked_mean_rows: empty mask row");
        counts[b] = cnt;
        real* dst = out.data() + static_cast<std::int64_t>(b) * D;
        for (int l = 0; l < L; ++l) {
            if (mask.at(b, l) <= 0.5) continue;
            const real* src = tx.data() + (static_cast<std::int64_t>(b) * L + l) * D;
            for (int d = 0; d < D; ++d) dst[d] += src[d];
        }
        for (int d = 0; d < D; ++d) dst[d] /= cnt;
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(x), [x, mask, B, L, D, result](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& counts = t.aux_of(result, 0);
        Tensor& gx = t.grad_ref(x);
        for (int b = 0; b < B; ++b) {
            const real inv = 1.0 / counts[b];
            const real* gs = g.data() + static_cast<std::int64_t>(b) * D;
            for (int l = 0; l < L; ++l) {
                if (mask.at(b, l) <= 0.5) continue;
                real* dst = gx.data() + (static_cast<std::int64_t>(b) * L + l) * D;
                for (int d = 0; d < D; ++d) dst[d] += gs[d] * inv;
            }
        }
    },
                {std::move(counts)});
}

Var Tape::gather_rows3(Var x, const std::vector<std::pair<int, int>>& idx) {
    const Tensor& tx = value(x);
    const int L = tx.dim(1), D = tx.dim(2);
    const int k = static_cast<int>(idx.size());
    Tensor out({k, D});
    for (int i = 0; i < k; ++i) {
        const auto [b, l] = idx[static_cast<std::size_t>(i)];
        std::memcpy(out.data() + static_cast<std::int64_t>(i) * D,
                    tx.data() + (static_cast<std::int64_t>(b) * L + l) * D,
                    sizeof(real) * static_cast<std::size_t>(D));
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(x), [x, idx, L, D, k, result](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        Tensor& gx = t.grad_ref(x);
        for (int i = 0; i < k; ++i) {
            const auto [b, l] = idx[static_cast<std::size_t>(i)];
            real* dst = gx.data() + (static_cast<std::int64_t>(b) * L + l) * D;
            const real* src = g.data() + static_cast<std::int64_t>(i) * D;
            for (int d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
}

// ---------------- losses ----------------

Var Tape::cos_rows_const(Var x, const Tensor& y) {
    const Tensor& tx = value(x);
    const int k = tx.dim(0), D = tx.dim(1);
    if (y.size() != D) throw NumericError("cos_rows_const: dim mismatch");
    real ny = 0.0;
    for (int d = 0; d < D; ++d) ny += y[d] * y[d];
    ny = std::sqrt(ny);
    if (ny == 0.0) throw NumericError("cosine undefined for zero-norm reference vector");
    Tensor out({k});
    Tensor norms({k});
    for (int i = 0; i < k; ++i) {
        const real* xs = tx.data() + static_cast<std::int64_t>(i) * D;
        real nx = 0.0, d = 0.0;
        for (int j = 0; j < D; ++j) {
            nx += xs[j] * xs[j];
            d += xs[j] * y[j];
        }
        nx = std::sqrt(nx);
        if (nx == 0.0) throw NumericError("cosine undefined for zero-norm vector");
        norms[i] = nx;
        out[i] = d / (nx * ny);
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(x), [x, y, ny, k, D, result](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& c = t.value(result);
        const Tensor& norms = t.aux_of(result, 0);
        const Tensor& vx = t.value(x);
        Tensor& gx = t.grad_ref(x);
        for (int i = 0; i < k; ++i) {
            const real* xs = vx.data() + static_cast<std::int64_t>(i) * D;
            real* gd = gx.data() + static_cast<std::int64_t>(i) * D;
            const real nx = norms[i];
            for (int j = 0; j < D; ++j) {
                gd[j] += g[i] * (y[j] / (nx * ny) - c[i] * xs[j] / (nx * nx));
            }
        }
    },
                {std::move(norms)});
}

Var Tape::mse_per_sample(Var pred, const Tensor& target) {
    const Tensor& tp = value(pred);
    if (!tp.same_shape(target)) throw NumericError("mse_per_sample: shape mismatch");
    const int B = tp.dim(0);
    const std::int64_t M = tp.size() / B;
    Tensor out({B});
    for (int b = 0; b < B; ++b) {
        const real* p = tp.data() + b * M;
        const real* t = target.data() + b * M;
        real s = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
            const real d = p[i] - t[i];
            s += d * d;
        }
        out[b] = s / static_cast<real>(M);
    }
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(pred), [pred, target, B, M, result](Tape& t) {
        if (!t.requires_grad(pred)) return;
        const Tensor& g = t.nodes_[result.id].grad;
        const Tensor& vp = t.value(pred);
        Tensor& gp = t.grad_ref(pred);
        for (int b = 0; b < B; ++b) {
            const real scale = 2.0 * g[b] / static_cast<real>(M);
            const real* p = vp.data() + b * M;
            const real* tt = target.data() + b * M;
            real* gd = gp.data() + b * M;
            for (std::int64_t i = 0; i < M; ++i) gd[i] += scale * (p[i] - tt[i]);
        }
    });
}

Var Tape::weighted_mean(Var v, const Tensor& w) {
    const Tensor& tv = value(v);
    const int B = tv.dim(0);
    if (w.size() != B) throw NumericError("weighted_mean: weight size mismatch");
    real s = 0.0;
    for (int b = 0; b < B; ++b) s += w[b] * tv[b];
    Tensor out = Tensor::scalar(s / static_cast<real>(B));
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(v), [v, w, B, result](Tape& t) {
        if (!t.requires_grad(v)) return;
        const real g = t.nodes_[result.id].grad[0];
        Tensor& gv = t.grad_ref(v);
        for (int b = 0; b < B; ++b) gv[b] += g * w[b] / static_cast<real>(B);
    });
}

Var Tape::mean_all(Var a) {
    const Tensor& ta = value(a);
    real s = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
    const std::int64_t n = ta.size();
    Tensor out = Tensor::scalar(s / static_cast<real>(n));
    Var result{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), requires_grad(a), [a, n, result](Tape& t) {
        if (!t.requires_grad(a)) return;
        const real g = t.nodes_[result.id].grad[0] / static_cast<real>(n);
        Tensor& ga = t.grad_ref(a);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
}

}  // namespace masqlab
