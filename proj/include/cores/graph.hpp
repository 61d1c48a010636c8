#pragma once

// Reverse-mode autodiff tape over Tensor. A Graph owns a flat list of nodes;
// ops append nodes with backward closures that accumulate into parent grads.
// Graphs are built per forward pass and discarded. Single-threaded by design:
// one graph per call site, parameters enter as leaves.

#include "cores/tensor.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace cores {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {

// C[M,N] (+)= op(A) * op(B). Plain loops ordered so gcc vectorizes the inner
// dimension; A/B/C must not alias.
inline void mm_nn(Scalar* C, const Scalar* A, const Scalar* B, int M, int N, int K) {
    for (int m = 0; m < M; ++m) {
        Scalar* c = C + static_cast<std::size_t>(m) * N;
        const Scalar* a = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const Scalar av = a[k];
            const Scalar* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}
inline void mm_nt(Scalar* C, const Scalar* A, const Scalar* B, int M, int N, int K) {
    // B stored [N, K]
    for (int m = 0; m < M; ++m) {
        const Scalar* a = A + static_cast<std::size_t>(m) * K;
        Scalar* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const Scalar* b = B + static_cast<std::size_t>(n) * K;
            Scalar acc = 0;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[n] += acc;
        }
    }
}
inline void mm_tn(Scalar* C, const Scalar* A, const Scalar* B, int M, int N, int K) {
    // A stored [K, M]
    for (int k = 0; k < K; ++k) {
        const Scalar* a = A + static_cast<std::size_t>(k) * M;
        const Scalar* b = B + static_cast<std::size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const Scalar av = a[m];
            Scalar* c = C + static_cast<std::size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}
inline void mm_tt(Scalar* C, const Scalar* A, const Scalar* B, int M, int N, int K) {
    // A stored [K, M], B stored [N, K]
    for (int m = 0; m < M; ++m) {
        Scalar* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const Scalar* b = B + static_cast<std::size_t>(n) * K;
            Scalar acc = 0;
            for (int k = 0; k < K; ++k) acc += A[static_cast<std::size_t>(k) * M + m] * b[k];
            c[n] += acc;
        }
    }
}

inline void mm(Scalar* C, const Scalar* A, const Scalar* B, int M, int N, int K, bool ta, bool tb) {
    if (!ta && !tb) mm_nn(C, A, B, M, N, K);
    else if (!ta && tb) mm_nt(C, A, B, M, N, K);
    else if (ta && !tb) mm_tn(C, A, B, M, N, K);
    else mm_tt(C, A, B, M, N, K);
}

inline Scalar gelu_fwd(Scalar x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline Scalar gelu_grad(Scalar x) {
    const Scalar cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const Scalar pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}
inline Scalar sigmoid_fwd(Scalar x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Bilinear sampling table for one output axis (align_corners = false).
struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<Scalar> w0, w1;
};
inline LerpAxis lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.w0.resize(out);
    ax.w1.resize(out);
    const Scalar scale = static_cast<Scalar>(in) / out;
    for (int o = 0; o < out; ++o) {
        Scalar src = (o + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = in - 1;
        int lo = static_cast<int>(std::floor(src));
        int hi = std::min(lo + 1, in - 1);
        Scalar f = src - lo;
        ax.i0[o] = lo;
        ax.i1[o] = hi;
        ax.w0[o] = 1.0 - f;
        ax.w1[o] = f;
    }
    return ax;
}

} // namespace detail

class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    Tensor& grad(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].rg; }
    Scalar scalar(Var v) const {
        const Tensor& t = val(v);
        if (t.size() != 1) throw std::invalid_argument("graph: scalar() on non-scalar var");
        return t.data[0];
    }

    Var leaf(const Tensor& t, bool requires_grad) { return push(t, requires_grad, {}); }
    Var constant(Tensor t) { return push(std::move(t), false, {}); }

    // -- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor out = val(a);
        out.add_(val(b));
        Var y = push(std::move(out), rg(a) || rg(b), {});
        set_back(y, [this, a, b, y] {
            accum(a, grad(y));
            accum(b, grad(y));
        });
        return y;
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor out = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] -= val(b).data[i];
        Var y = push(std::move(out), rg(a) || rg(b), {});
        set_back(y, [this, a, b, y] {
            accum(a, grad(y));
            if (rg(b)) {
                Tensor neg = grad(y);
                neg.scale_(-1.0);
                accum(b, neg);
            }
        });
        return y;
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor out = val(a);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] *= val(b).data[i];
        Var y = push(std::move(out), rg(a) || rg(b), {});
        set_back(y, [this, a, b, y] {
            if (rg(a)) {
                Tensor g = grad(y);
                for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= val(b).data[i];
                accum(a, g);
            }
            if (rg(b)) {
                Tensor g = grad(y);
                for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= val(a).data[i];
                accum(b, g);
            }
        });
        return y;
    }

    Var scale(Var a, Scalar c) {
        Tensor out = val(a);
        out.scale_(c);
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y, c] {
            if (rg(a)) {
                Tensor g = grad(y);
                g.scale_(c);
                accum(a, g);
            }
        });
        return y;
    }

    Var add_const(Var a, Scalar c) {
        Tensor out = val(a);
        for (auto& v : out.data) v += c;
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y] { accum(a, grad(y)); });
        return y;
    }

    Var recip(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = 1.0 / v;
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y] {
            if (!rg(a)) return;
            Tensor g = grad(y);
            const Tensor& o = val(y);
            for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= -o.data[i] * o.data[i];
            accum(a, g);
        });
        return y;
    }

    Var gelu(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = detail::gelu_fwd(v);
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y] {
            if (!rg(a)) return;
            Tensor g = grad(y);
            const Tensor& x = val(a);
            for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= detail::gelu_grad(x.data[i]);
            accum(a, g);
        });
        return y;
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = detail::sigmoid_fwd(v);
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y] {
            if (!rg(a)) return;
            Tensor g = grad(y);
            const Tensor& o = val(y);
            for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= o.data[i] * (1.0 - o.data[i]);
            accum(a, g);
        });
        return y;
    }

    Var tanh_op(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = std::tanh(v);
        Var y = push(std::move(out), rg(a), {});
        set_back(y, [this, a, y] {
            if (!rg(a)) return;
            Tensor g = grad(y);
            const Tensor& o = val(y);
            for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= 1.0 - o.data[i] * o.data[i];
            accum(a, g);
        });
        return y;
    }

    // -- broadcast helpers ---------------------------------------------------

    // y[r,c] = x[r,c] + v[c]
    Var add_rowvec(Var x, Var v) {
        const Tensor& xt = val(x);
        const Tensor& vt = val(v);
        const int R = xt.rows(), C = xt.cols();
        if (vt.size() != C) throw std::invalid_argument("add_rowvec: vector length mismatch");
        Tensor out = xt;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(r) * C + c] += vt.data[static_cast<std::size_t>(c)];
        Var y = push(std::move(out), rg(x) || rg(v), {});
        set_back(y, [this, x, v, y, R, C] {
            accum(x, grad(y));
            if (rg(v)) {
                Tensor gv({C});
                const Tensor& g = grad(y);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gv.data[static_cast<std::size_t>(c)] += g.data[static_cast<std::size_t>(r) * C + c];
                accum_raw(v, gv);
            }
        });
        return y;
    }

    Var add_scalarvar(Var x, Var s) {
        if (val(s).size() != 1) throw std::invalid_argument("add_scalarvar: s must be scalar");
        Tensor out = val(x);
        const Scalar sv = val(s).data[0];
        for (auto& v : out.data) v += sv;
        Var y = push(std::move(out), rg(x) || rg(s), {});
        set_back(y, [this, x, s, y] {
            accum(x, grad(y));
            if (rg(s)) accum_raw(s, Tensor::scalar(grad(y).sum()));
        });
        return y;
    }

    Var mul_scalarvar(Var x, Var s) {
        if (val(s).size() != 1) throw std::invalid_argument("mul_scalarvar: s must be scalar");
        Tensor out = val(x);
        out.scale_(val(s).data[0]);
        Var y = push(std::move(out), rg(x) || rg(s), {});
        set_back(y, [this, x, s, y] {
            if (rg(x)) {
                Tensor g = grad(y);
                g.scale_(val(s).data[0]);
                accum(x, g);
            }
            if (rg(s)) {
                const Tensor& g = grad(y);
                const Tensor& xv = val(x);
                Scalar acc = 0;
                for (std::int64_t i = 0; i < g.size(); ++i) acc += g.data[i] * xv.data[i];
                accum_raw(s, Tensor::scalar(acc));
            }
        });
        return y;
    }

    // -- shape ops -----------------------------------------------------------

    Var reshape(Var x, std::vector<int> shape) {
        Tensor out = val(x).reshaped(shape);
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y] {
            if (!rg(x)) return;
            Tensor g = grad(y).reshaped(val(x).shape);
            accum_raw(x, g);
        });
        return y;
    }

    Var transpose(Var x) {
        const Tensor& xt = val(x);
        const int R = xt.rows(), C = xt.cols();
        Tensor out({C, R});
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(c) * R + r] = xt.data[static_cast<std::size_t>(r) * C + c];
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y, R, C] {
            if (!rg(x)) return;
            const Tensor& g = grad(y);
            Tensor gx({R, C});
            for (int c = 0; c < C; ++c)
                for (int r = 0; r < R; ++r) gx.data[static_cast<std::size_t>(r) * C + c] = g.data[static_cast<std::size_t>(c) * R + r];
            accum_raw(x, gx);
        });
        return y;
    }

    Var slice_rows(Var x, int r0, int r1) {
        const Tensor& xt = val(x);
        const int R = xt.rows(), C = xt.cols();
        if (r0 < 0 || r1 > R || r0 >= r1) throw std::out_of_range("slice_rows: bad range");
        Tensor out({r1 - r0, C});
        std::copy(xt.data.begin() + static_cast<std::size_t>(r0) * C, xt.data.begin() + static_cast<std::size_t>(r1) * C, out.data.begin());
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y, r0, C] {
            if (!rg(x)) return;
            const Tensor& g = grad(y);
            Tensor& gx = grad(x);
            std::size_t off = static_cast<std::size_t>(r0) * C;
            for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[off + i] += g.data[i];
        });
        return y;
    }

    Var row(Var x, int r) { return slice_rows(x, r, r + 1); }

    Var slice_cols(Var x, int c0, int c1) {
        const Tensor& xt = val(x);
        const int R = xt.rows(), C = xt.cols();
        if (c0 < 0 || c1 > C || c0 >= c1) throw std::out_of_range("slice_cols: bad range");
        const int W = c1 - c0;
        Tensor out({R, W});
        for (int r = 0; r < R; ++r)
            std::copy(xt.data.begin() + static_cast<std::size_t>(r) * C + c0, xt.data.begin() + static_cast<std::size_t>(r) * C + c1,
                      out.data.begin() + static_cast<std::size_t>(r) * W);
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y, c0, C, W] {
            if (!rg(x)) return;
            const Tensor& g = grad(y);
            Tensor& gx = grad(x);
            const int R2 = g.rows();
            for (int r = 0; r < R2; ++r)
                for (int c = 0; c < W; ++c) gx.data[static_cast<std::size_t>(r) * C + c0 + c] += g.data[static_cast<std::size_t>(r) * W + c];
        });
        return y;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
        const int C = val(parts[0]).cols();
        int R = 0;
        bool any = false;
        for (Var p : parts) {
            if (val(p).cols() != C) throw std::invalid_argument("concat_rows: col mismatch");
            R += val(p).rows();
            any = any || rg(p);
        }
        Tensor out({R, C});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& t = val(p);
            std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
            off += t.data.size();
        }
        Var y = push(std::move(out), any, {});
        std::vector<Var> ps = parts;
        set_back(y, [this, ps, y] {
            const Tensor& g = grad(y);
            std::size_t off2 = 0;
            for (Var p : ps) {
                const std::size_t n = val(p).data.size();
                if (rg(p)) {
                    Tensor& gp = grad(p);
                    for (std::size_t i = 0; i < n; ++i) gp.data[i] += g.data[off2 + i];
                }
                off2 += n;
            }
        });
        return y;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
        const int R = val(parts[0]).rows();
        int C = 0;
        bool any = false;
        for (Var p : parts) {
            if (val(p).rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
            C += val(p).cols();
            any = any || rg(p);
        }
        Tensor out({R, C});
        int coff = 0;
        for (Var p : parts) {
            const Tensor& t = val(p);
            const int W = t.cols();
            for (int r = 0; r < R; ++r)
                std::copy(t.data.begin() + static_cast<std::size_t>(r) * W, t.data.begin() + static_cast<std::size_t>(r + 1) * W,
                          out.data.begin() + static_cast<std::size_t>(r) * C + coff);
            coff += W;
        }
        Var y = push(std::move(out), any, {});
        std::vector<Var> ps = parts;
        set_back(y, [this, ps, y, R, C] {
            const Tensor& g = grad(y);
            int coff2 = 0;
            for (Var p : ps) {
                const int W = val(p).cols();
                if (rg(p)) {
                    Tensor& gp = grad(p);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < W; ++c) gp.data[static_cast<std::size_t>(r) * W + c] += g.data[static_cast<std::size_t>(r) * C + coff2 + c];
                }
                coff2 += W;
            }
        });
        return y;
    }

    Var gather_rows(Var table, std::vector<int> ids) {
        const Tensor& t = val(table);
        const int V = t.rows(), D = t.cols();
        Tensor out({static_cast<int>(ids.size()), D});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= V) throw std::out_of_range("gather_rows: id out of range");
            std::copy(t.data.begin() + static_cast<std::size_t>(ids[i]) * D, t.data.begin() + static_cast<std::size_t>(ids[i] + 1) * D,
                      out.data.begin() + i * D);
        }
        Var y = push(std::move(out), rg(table), {});
        set_back(y, [this, table, y, ids, D] {
            if (!rg(table)) return;
            const Tensor& g = grad(y);
            Tensor& gt = grad(table);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (int d = 0; d < D; ++d) gt.data[static_cast<std::size_t>(ids[i]) * D + d] += g.data[i * D + d];
        });
        return y;
    }

    // -- linear algebra ------------------------------------------------------

    Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        const int M = ta ? at.cols() : at.rows();
        const int K = ta ? at.rows() : at.cols();
        const int Kb = tb ? bt.cols() : bt.rows();
        const int N = tb ? bt.rows() : bt.cols();
        if (K != Kb) throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(at.shape) + " x " + shape_str(bt.shape));
        Tensor out({M, N});
        detail::mm(out.ptr(), at.ptr(), bt.ptr(), M, N, K, ta, tb);
        Var y = push(std::move(out), rg(a) || rg(b), {});
        set_back(y, [this, a, b, y, M, N, K, ta, tb] {
            const Tensor& g = grad(y);
            if (rg(a)) {
                Tensor ga(val(a).shape);
                // dA' = dC * B'^T with A' = op(A); map back through ta.
                if (!ta) {
                    // ga [M,K] += g [M,N] * (B')^T [N,K]
                    detail::mm(ga.ptr(), g.ptr(), val(b).ptr(), M, K, N, false, !tb);
                } else {
                    // ga [K,M] += B' [K,N] * g^T [N,M]
                    detail::mm(ga.ptr(), val(b).ptr(), g.ptr(), K, M, N, tb, true);
                }
                accum_raw(a, ga);
            }
            if (rg(b)) {
                Tensor gb(val(b).shape);
                if (!tb) {
                    // gb [K,N] += (A')^T [K,M] * g [M,N]
                    detail::mm(gb.ptr(), val(a).ptr(), g.ptr(), K, N, M, !ta, false);
                } else {
                    // gb [N,K] += g^T [N,M] * A' [M,K]
                    detail::mm(gb.ptr(), g.ptr(), val(a).ptr(), N, K, M, true, ta);
                }
                accum_raw(b, gb);
            }
        });
        return y;
    }

    // -- normalization / softmax ----------------------------------------------

    Var layernorm(Var x, Var gamma, Var beta, Scalar eps = 1e-5) {
        const Tensor& xt = val(x);
        const int R = xt.rows(), D = xt.cols();
        if (val(gamma).size() != D || val(beta).size() != D) throw std::invalid_argument("layernorm: param size mismatch");
        Tensor out({R, D});
        Tensor xhat({R, D});
        Tensor inv_std({R});
        for (int r = 0; r < R; ++r) {
            const Scalar* xr = xt.ptr() + static_cast<std::size_t>(r) * D;
            Scalar mu = 0;
            for (int d = 0; d < D; ++d) mu += xr[d];
            mu /= D;
            Scalar var = 0;
            for (int d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
            var /= D;
            const Scalar is = 1.0 / std::sqrt(var + eps);
            inv_std.data[static_cast<std::size_t>(r)] = is;
            for (int d = 0; d < D; ++d) {
                const Scalar xh = (xr[d] - mu) * is;
                xhat.data[static_cast<std::size_t>(r) * D + d] = xh;
                out.data[static_cast<std::size_t>(r) * D + d] = xh * val(gamma).data[static_cast<std::size_t>(d)] + val(beta).data[static_cast<std::size_t>(d)];
            }
        }
        Var y = push(std::move(out), rg(x) || rg(gamma) || rg(beta), {});
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto is = std::make_shared<Tensor>(std::move(inv_std));
        set_back(y, [this, x, gamma, beta, y, R, D, xh, is] {
            const Tensor& g = grad(y);
            if (rg(gamma)) {
                Tensor gg({D});
                for (int r = 0; r < R; ++r)
                    for (int d = 0; d < D; ++d) gg.data[static_cast<std::size_t>(d)] += g.data[static_cast<std::size_t>(r) * D + d] * xh->data[static_cast<std::size_t>(r) * D + d];
                accum_raw(gamma, gg);
            }
            if (rg(beta)) {
                Tensor gb({D});
                for (int r = 0; r < R; ++r)
                    for (int d = 0; d < D; ++d) gb.data[static_cast<std::size_t>(d)] += g.data[static_cast<std::size_t>(r) * D + d];
                accum_raw(beta, gb);
            }
            if (rg(x)) {
                Tensor gx({R, D});
                for (int r = 0; r < R; ++r) {
                    // dxhat = dy * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                    Scalar m1 = 0, m2 = 0;
                    std::vector<Scalar> dxh(static_cast<std::size_t>(D));
                    for (int d = 0; d < D; ++d) {
                        dxh[static_cast<std::size_t>(d)] = g.data[static_cast<std::size_t>(r) * D + d] * val(gamma).data[static_cast<std::size_t>(d)];
                        m1 += dxh[static_cast<std::size_t>(d)];
                        m2 += dxh[static_cast<std::size_t>(d)] * xh->data[static_cast<std::size_t>(r) * D + d];
                    }
                    m1 /= D;
                    m2 /= D;
                    const Scalar isr = is->data[static_cast<std::size_t>(r)];
                    for (int d = 0; d < D; ++d)
                        gx.data[static_cast<std::size_t>(r) * D + d] =
                            (dxh[static_cast<std::size_t>(d)] - m1 - xh->data[static_cast<std::size_t>(r) * D + d] * m2) * isr;
                }
                accum_raw(x, gx);
            }
        });
        return y;
    }

    // Row-wise softmax of (x + additive_mask). Mask entries of -1e30 knock
    // positions out; the mask is consumed at forward time only.
    Var softmax_rows(Var x, const Tensor* additive_mask = nullptr) {
        const Tensor& xt = val(x);
        const int R = xt.rows(), C = xt.cols();
        if (additive_mask && (additive_mask->rows() != R || additive_mask->cols() != C))
            throw std::invalid_argument("softmax_rows: mask shape mismatch");
        Tensor out({R, C});
        for (int r = 0; r < R; ++r) {
            Scalar mx = -1e300;
            for (int c = 0; c < C; ++c) {
                Scalar v = xt.data[static_cast<std::size_t>(r) * C + c];
                if (additive_mask) v += additive_mask->data[static_cast<std::size_t>(r) * C + c];
                out.data[static_cast<std::size_t>(r) * C + c] = v;
                mx = std::max(mx, v);
            }
            Scalar z = 0;
            for (int c = 0; c < C; ++c) {
                Scalar e = std::exp(out.data[static_cast<std::size_t>(r) * C + c] - mx);
                out.data[static_cast<std::size_t>(r) * C + c] = e;
                z += e;
            }
            for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(r) * C + c] /= z;
        }
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y, R, C] {
            if (!rg(x)) return;
            const Tensor& g = grad(y);
            const Tensor& p = val(y);
            Tensor gx({R, C});
            for (int r = 0; r < R; ++r) {
                Scalar dot = 0;
                for (int c = 0; c < C; ++c) dot += g.data[static_cast<std::size_t>(r) * C + c] * p.data[static_cast<std::size_t>(r) * C + c];
                for (int c = 0; c < C; ++c)
                    gx.data[static_cast<std::size_t>(r) * C + c] =
                        p.data[static_cast<std::size_t>(r) * C + c] * (g.data[static_cast<std::size_t>(r) * C + c] - dot);
            }
            accum_raw(x, gx);
        });
        return y;
    }

    // -- reductions -----------------------------------------------------------

    Var sum_all(Var x) {
        Var y = push(Tensor::scalar(val(x).sum()), rg(x), {});
        set_back(y, [this, x, y] {
            if (!rg(x)) return;
            const Scalar g = grad(y).data[0];
            Tensor& gx = grad(x);
            for (auto& v : gx.data) v += g;
        });
        return y;
    }

    Var mean_all(Var x) {
        const Scalar n = static_cast<Scalar>(val(x).size());
        Var y = push(Tensor::scalar(val(x).sum() / n), rg(x), {});
        set_back(y, [this, x, y, n] {
            if (!rg(x)) return;
            const Scalar g = grad(y).data[0] / n;
            Tensor& gx = grad(x);
            for (auto& v : gx.data) v += g;
        });
        return y;
    }

    // -- losses ---------------------------------------------------------------

    // Weighted mean token cross-entropy over rows of logits [T, V].
    // loss = sum_i w_i * (logsumexp(row_i) - row_i[target_i]) / sum_i w_i
    Var softmax_ce(Var logits, const std::vector<int>& targets, const std::vector<Scalar>& weights) {
        const Tensor& lt = val(logits);
        const int T = lt.rows(), V = lt.cols();
        if (static_cast<int>(targets.size()) != T || static_cast<int>(weights.size()) != T)
            throw std::invalid_argument("softmax_ce: logits length must equal target length");
        Scalar wsum = 0;
        for (Scalar w : weights) wsum += w;
        if (wsum <= 0) throw std::invalid_argument("softmax_ce: no unmasked positions");
        auto probs = std::make_shared<Tensor>(std::vector<int>{T, V});
        Scalar loss = 0;
        for (int t = 0; t < T; ++t) {
            if (targets[static_cast<std::size_t>(t)] < 0 || targets[static_cast<std::size_t>(t)] >= V)
                throw std::out_of_range("softmax_ce: target id out of range");
            const Scalar* r = lt.ptr() + static_cast<std::size_t>(t) * V;
            Scalar mx = r[0];
            for (int v = 1; v < V; ++v) mx = std::max(mx, r[v]);
            Scalar z = 0;
            for (int v = 0; v < V; ++v) z += std::exp(r[v] - mx);
            const Scalar lse = mx + std::log(z);
            for (int v = 0; v < V; ++v) probs->data[static_cast<std::size_t>(t) * V + v] = std::exp(r[v] - lse);
            loss += weights[static_cast<std::size_t>(t)] * (lse - r[targets[static_cast<std::size_t>(t)]]);
        }
        loss /= wsum;
        Var y = push(Tensor::scalar(loss), rg(logits), {});
        auto tgt = std::make_shared<std::vector<int>>(targets);
        auto wts = std::make_shared<std::vector<Scalar>>(weights);
        set_back(y, [this, logits, y, probs, tgt, wts, wsum, T, V] {
            if (!rg(logits)) return;
            const Scalar g = grad(y).data[0];
            Tensor gx({T, V});
            for (int t = 0; t < T; ++t) {
                const Scalar w = (*wts)[static_cast<std::size_t>(t)] / wsum * g;
                for (int v = 0; v < V; ++v) gx.data[static_cast<std::size_t>(t) * V + v] = w * probs->data[static_cast<std::size_t>(t) * V + v];
                gx.data[static_cast<std::size_t>(t) * V + (*tgt)[static_cast<std::size_t>(t)]] -= w;
            }
            accum_raw(logits, gx);
        });
        return y;
    }

    // Mean per-element binary cross-entropy with logits (numerically stable).
    Var bce_with_logits_mean(Var x, const Tensor& target) {
        const Tensor& xt = val(x);
        if (!xt.same_shape(target)) throw std::invalid_argument("bce_with_logits: shape mismatch");
        const std::int64_t n = xt.size();
        Scalar loss = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const Scalar v = xt.data[i], t = target.data[i];
            loss += std::max(v, 0.0) - v * t + std::log1p(std::exp(-std::abs(v)));
        }
        loss /= static_cast<Scalar>(n);
        Var y = push(Tensor::scalar(loss), rg(x), {});
        auto tgt = std::make_shared<Tensor>(target);
        set_back(y, [this, x, y, tgt, n] {
            if (!rg(x)) return;
            const Scalar g = grad(y).data[0] / static_cast<Scalar>(n);
            const Tensor& xv = val(x);
            Tensor gx(xv.shape);
            for (std::int64_t i = 0; i < n; ++i) gx.data[i] = g * (detail::sigmoid_fwd(xv.data[i]) - tgt->data[i]);
            accum_raw(x, gx);
        });
        return y;
    }

    // Smooth dice loss on logits: 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s), p = sigmoid(x).
    Var dice_with_logits(Var x, const Tensor& target, Scalar smooth = 1.0) {
        const Tensor& xt = val(x);
        if (!xt.same_shape(target)) throw std::invalid_argument("dice_with_logits: shape mismatch");
        const std::int64_t n = xt.size();
        auto p = std::make_shared<Tensor>(xt.shape);
        Scalar inter = 0, psum = 0, tsum = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const Scalar pi = detail::sigmoid_fwd(xt.data[i]);
            p->data[i] = pi;
            inter += pi * target.data[i];
            psum += pi;
            tsum += target.data[i];
        }
        const Scalar num = 2.0 * inter + smooth;
        const Scalar den = psum + tsum + smooth;
        Var y = push(Tensor::scalar(1.0 - num / den), rg(x), {});
        auto tgt = std::make_shared<Tensor>(target);
        set_back(y, [this, x, y, p, tgt, num, den, n] {
            if (!rg(x)) return;
            const Scalar g = grad(y).data[0];
            Tensor gx(val(x).shape);
            for (std::int64_t i = 0; i < n; ++i) {
                // d(1-num/den)/dp_i = -(2*t_i*den - num) / den^2
                const Scalar dp = -(2.0 * tgt->data[i] * den - num) / (den * den);
                gx.data[i] = g * dp * p->data[i] * (1.0 - p->data[i]);
            }
            accum_raw(x, gx);
        });
        return y;
    }

    // -- spatial ops ------------------------------------------------------------

    // Bilinear interpolation resize of a [H, W] map (align_corners = false).
    Var bilinear_resize(Var x, int oh, int ow) {
        const Tensor& xt = val(x);
        if (xt.ndim() != 2) throw std::invalid_argument("bilinear_resize: expected [H, W]");
        const int H = xt.dim(0), W = xt.dim(1);
        auto ay = std::make_shared<detail::LerpAxis>(detail::lerp_axis(H, oh));
        auto ax = std::make_shared<detail::LerpAxis>(detail::lerp_axis(W, ow));
        Tensor out({oh, ow});
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                const Scalar v00 = xt.data[static_cast<std::size_t>(ay->i0[i]) * W + ax->i0[j]];
                const Scalar v01 = xt.data[static_cast<std::size_t>(ay->i0[i]) * W + ax->i1[j]];
                const Scalar v10 = xt.data[static_cast<std::size_t>(ay->i1[i]) * W + ax->i0[j]];
                const Scalar v11 = xt.data[static_cast<std::size_t>(ay->i1[i]) * W + ax->i1[j]];
                out.data[static_cast<std::size_t>(i) * ow + j] = ay->w0[i] * (ax->w0[j] * v00 + ax->w1[j] * v01) +
                                                                 ay->w1[i] * (ax->w0[j] * v10 + ax->w1[j] * v11);
            }
        Var y = push(std::move(out), rg(x), {});
        set_back(y, [this, x, y, ay, ax, W, oh, ow] {
            if (!rg(x)) return;
            const Tensor& g = grad(y);
            Tensor& gx = grad(x);
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    const Scalar gv = g.data[static_cast<std::size_t>(i) * ow + j];
                    gx.data[static_cast<std::size_t>(ay->i0[i]) * W + ax->i0[j]] += gv * ay->w0[i] * ax->w0[j];
                    gx.data[static_cast<std::size_t>(ay->i0[i]) * W + ax->i1[j]] += gv * ay->w0[i] * ax->w1[j];
                    gx.data[static_cast<std::size_t>(ay->i1[i]) * W + ax->i0[j]] += gv * ay->w1[i] * ax->w0[j];
                    gx.data[static_cast<std::size_t>(ay->i1[i]) * W + ax->i1[j]] += gv * ay->w1[i] * ax->w1[j];
                }
        });
        return y;
    }

    // Transposed conv: x [Cin, H, W], w [Cin, Cout, k, k], b [Cout], stride s,
    // no padding. Output [Cout, (H-1)*s + k, (W-1)*s + k].
    Var tconv2d(Var x, Var w, Var b, int stride) {
        const Tensor& xt = val(x);
        const Tensor& wt = val(w);
        if (xt.ndim() != 3 || wt.ndim() != 4) throw std::invalid_argument("tconv2d: bad ranks");
        const int Cin = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
        const int Cout = wt.dim(1), K = wt.dim(2);
        if (wt.dim(0) != Cin || wt.dim(3) != K) throw std::invalid_argument("tconv2d: weight shape mismatch");
        if (val(b).size() != Cout) throw std::invalid_argument("tconv2d: bias size mismatch");
        const int OH = (H - 1) * stride + K, OW = (W - 1) * stride + K;
        Tensor out({Cout, OH, OW});
        for (int co = 0; co < Cout; ++co) {
            const Scalar bv = val(b).data[static_cast<std::size_t>(co)];
            Scalar* o = out.ptr() + static_cast<std::size_t>(co) * OH * OW;
            for (int i = 0; i < OH * OW; ++i) o[i] = bv;
        }
        for (int ci = 0; ci < Cin; ++ci)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const Scalar xv = xt.data[(static_cast<std::size_t>(ci) * H + i) * W + j];
                    for (int co = 0; co < Cout; ++co) {
                        const Scalar* wk = wt.ptr() + ((static_cast<std::size_t>(ci) * Cout + co) * K) * K;
                        Scalar* o = out.ptr() + ((static_cast<std::size_t>(co) * OH + i * stride) * OW + j * stride);
                        for (int ki = 0; ki < K; ++ki)
                            for (int kj = 0; kj < K; ++kj) o[static_cast<std::size_t>(ki) * OW + kj] += xv * wk[static_cast<std::size_t>(ki) * K + kj];
                    }
                }
        Var y = push(std::move(out), rg(x) || rg(w) || rg(b), {});
        set_back(y, [this, x, w, b, y, Cin, H, W, Cout, K, stride, OH, OW] {
            const Tensor& g = grad(y);
            if (rg(b)) {
                Tensor gb({Cout});
                for (int co = 0; co < Cout; ++co) {
                    Scalar acc = 0;
                    const Scalar* go = g.ptr() + static_cast<std::size_t>(co) * OH * OW;
                    for (int i = 0; i < OH * OW; ++i) acc += go[i];
                    gb.data[static_cast<std::size_t>(co)] = acc;
                }
                accum_raw(b, gb);
            }
            if (rg(x) || rg(w)) {
                Tensor gx({Cin, H, W});
                Tensor gw({Cin, Cout, K, K});
                for (int ci = 0; ci < Cin; ++ci)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            const Scalar xv = val(x).data[(static_cast<std::size_t>(ci) * H + i) * W + j];
                            Scalar gxv = 0;
                            for (int co = 0; co < Cout; ++co) {
                                const Scalar* wk = val(w).ptr() + ((static_cast<std::size_t>(ci) * Cout + co) * K) * K;
                                Scalar* gwk = gw.ptr() + ((static_cast<std::size_t>(ci) * Cout + co) * K) * K;
                                const Scalar* go = g.ptr() + ((static_cast<std::size_t>(co) * OH + i * stride) * OW + j * stride);
                                for (int ki = 0; ki < K; ++ki)
                                    for (int kj = 0; kj < K; ++kj) {
                                        const Scalar gv = go[static_cast<std::size_t>(ki) * OW + kj];
                                        gxv += gv * wk[static_cast<std::size_t>(ki) * K + kj];
                                        gwk[static_cast<std::size_t>(ki) * K + kj] += gv * xv;
                                    }
                            }
                            gx.data[(static_cast<std::size_t>(ci) * H + i) * W + j] = gxv;
                        }
                if (rg(x)) accum_raw(x, gx);
                if (rg(w)) accum_raw(w, gw);
            }
        });
        return y;
    }

    // -- engine ----------------------------------------------------------------

    void backward(Var loss) {
        if (val(loss).size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_)
            if (n.rg) n.grad.fill_(0.0);
        nodes_[static_cast<std::size_t>(loss.id)].grad.data[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.rg && n.back) n.back();
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool rg = false;
        std::function<void()> back;
    };

    bool rg(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].rg; }

    Var push(Tensor value, bool requires_grad, std::function<void()> back) {
        Node n;
        n.value = std::move(value);
        n.rg = requires_grad;
        if (requires_grad) n.grad = Tensor(n.value.shape);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var v, std::function<void()> f) {
        if (nodes_[static_cast<std::size_t>(v.id)].rg) nodes_[static_cast<std::size_t>(v.id)].back = std::move(f);
    }

    void accum(Var v, const Tensor& g) {
        if (rg(v)) grad(v).add_(g);
    }
    // Accumulate without shape check (g built to match).
    void accum_raw(Var v, const Tensor& g) {
        if (!rg(v)) return;
        Tensor& gv = grad(v);
        for (std::size_t i = 0; i < gv.data.size(); ++i) gv.data[i] += g.data[i];
    }

    void check_same(Var a, Var b, const char* op) const {
        if (!val(a).same_shape(val(b)))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
    }

    std::vector<Node> nodes_;
};

} // namespace cores
