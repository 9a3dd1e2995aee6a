#pragma once

#include <cmath>
#include <vector>

#include "tandem/core/tape.hpp"

namespace tandem {
namespace detail {

enum class Trans { N, T };

/// C (m x n) += or = op(A) * op(B). Loop orders chosen so the inner loop
/// always streams contiguous rows.
inline void gemm(double* c, const double* a, const double* b, int64_t m, int64_t n, int64_t k,
                 Trans ta, Trans tb, bool accumulate) {
    if (!accumulate)
        for (int64_t i = 0; i < m * n; ++i) c[i] = 0.0;
    if (ta == Trans::N && tb == Trans::N) {
        for (int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (ta == Trans::N && tb == Trans::T) {
        // b is (n x k)
        for (int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += s;
            }
        }
    } else if (ta == Trans::T && tb == Trans::N) {
        // a is (k x m)
        for (int64_t p = 0; p < k; ++p) {
            const double* arow = a + p * m;
            const double* brow = b + p * n;
            for (int64_t i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = c + i * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        throw std::invalid_argument("gemm: T/T unsupported");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return t.apply(std::move(out), {a, b}, [a, b](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        for (Var p : {a, b}) {
            if (!tp.wants_grad(p)) continue;
            Array& pg = tp.grad_buf(p);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
        }
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.same_shape(bv), "sub: shape mismatch");
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
    return t.apply(std::move(out), {a, b}, [a, b](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (tp.wants_grad(a)) {
            Array& pg = tp.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
        }
        if (tp.wants_grad(b)) {
            Array& pg = tp.grad_buf(b);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] -= g[i];
        }
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.same_shape(bv), "mul: shape mismatch");
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return t.apply(std::move(out), {a, b}, [a, b](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& av = tp.val(a);
        const Array& bv = tp.val(b);
        if (tp.wants_grad(a)) {
            Array& pg = tp.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * bv[i];
        }
        if (tp.wants_grad(b)) {
            Array& pg = tp.grad_buf(b);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * av[i];
        }
    });
}

inline Var scale(Tape& t, Var a, double c) {
    const Array& av = t.val(a);
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * c;
    return t.apply(std::move(out), {a}, [a, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * c;
    });
}

inline Var exp_op(Tape& t, Var a) {
    const Array& av = t.val(a);
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(av[i]);
    return t.apply(std::move(out), {a}, [a](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& y = tp.val(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * y[i];
    });
}

inline Var clamp(Tape& t, Var a, double lo, double hi) {
    const Array& av = t.val(a);
    Array out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    return t.apply(std::move(out), {a}, [a, lo, hi](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& x = tp.val(a);
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > lo && x[i] < hi) pg[i] += g[i];
    });
}

inline Var gelu(Tape& t, Var a) {
    const Array& av = t.val(a);
    Array out(av.shape());
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    return t.apply(std::move(out), {a}, [a](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& x = tp.val(a);
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
            pg[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

inline Var reshape(Tape& t, Var a, std::vector<int64_t> shape) {
    Array out = t.val(a).reshaped(std::move(shape));
    return t.apply(std::move(out), {a}, [a](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0),
            "matmul: incompatible " + av.shape_str() + " x " + bv.shape_str());
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Array out({m, n});
    detail::gemm(out.data(), av.data(), bv.data(), m, n, k, detail::Trans::N, detail::Trans::N, false);
    return t.apply(std::move(out), {a, b}, [a, b, m, n, k](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (tp.wants_grad(a))
            detail::gemm(tp.grad_buf(a).data(), g.data(), tp.val(b).data(), m, k, n,
                         detail::Trans::N, detail::Trans::T, true);
        if (tp.wants_grad(b))
            detail::gemm(tp.grad_buf(b).data(), tp.val(a).data(), g.data(), k, n, m,
                         detail::Trans::T, detail::Trans::N, true);
    });
}

/// a (m x k) times b-transposed where b is (n x k).
inline Var matmul_nt(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1), "matmul_nt: incompatible");
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Array out({m, n});
    detail::gemm(out.data(), av.data(), bv.data(), m, n, k, detail::Trans::N, detail::Trans::T, false);
    return t.apply(std::move(out), {a, b}, [a, b, m, n, k](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (tp.wants_grad(a))
            detail::gemm(tp.grad_buf(a).data(), g.data(), tp.val(b).data(), m, k, n,
                         detail::Trans::N, detail::Trans::N, true);
        if (tp.wants_grad(b))
            detail::gemm(tp.grad_buf(b).data(), g.data(), tp.val(a).data(), n, k, m,
                         detail::Trans::T, detail::Trans::N, true);
    });
}

/// Rows [r0, r1) of a.
inline Var slice_rows(Tape& t, Var a, int64_t r0, int64_t r1) {
    const Array& av = t.val(a);
    require(av.ndim() == 2 && r0 >= 0 && r1 <= av.dim(0) && r0 < r1, "slice_rows: bad range");
    const int64_t c = av.dim(1);
    Array out({r1 - r0, c});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[r0 * c + i];
    return t.apply(std::move(out), {a}, [a, r0, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) pg[r0 * c + i] += g[i];
    });
}

/// Columns [c0, c1) of a.
inline Var slice_cols(Tape& t, Var a, int64_t c0, int64_t c1) {
    const Array& av = t.val(a);
    require(av.ndim() == 2 && c0 >= 0 && c1 <= av.dim(1) && c0 < c1, "slice_cols: bad range");
    const int64_t r = av.dim(0), c = av.dim(1), w = c1 - c0;
    Array out({r, w});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + c0 + j];
    return t.apply(std::move(out), {a}, [a, r, c, c0, w](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) pg[i * c + c0 + j] += g[i * w + j];
    });
}

inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    const int64_t c = t.val(parts[0]).dim(1);
    int64_t rows = 0;
    for (Var p : parts) {
        require(t.val(p).ndim() == 2 && t.val(p).dim(1) == c, "concat_rows: column mismatch");
        rows += t.val(p).dim(0);
    }
    Array out({rows, c});
    int64_t off = 0;
    for (Var p : parts) {
        const Array& pv = t.val(p);
        for (int64_t i = 0; i < pv.numel(); ++i) out[off + i] = pv[i];
        off += pv.numel();
    }
    std::vector<Var> ps = parts;
    return t.apply(std::move(out), ps, [ps](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        int64_t off = 0;
        for (Var p : ps) {
            const int64_t n = tp.val(p).numel();
            if (tp.wants_grad(p)) {
                Array& pg = tp.grad_buf(p);
                for (int64_t i = 0; i < n; ++i) pg[i] += g[off + i];
            }
            off += n;
        }
    });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    const int64_t r = t.val(parts[0]).dim(0);
    int64_t cols = 0;
    for (Var p : parts) {
        require(t.val(p).ndim() == 2 && t.val(p).dim(0) == r, "concat_cols: row mismatch");
        cols += t.val(p).dim(1);
    }
    Array out({r, cols});
    int64_t off = 0;
    for (Var p : parts) {
        const Array& pv = t.val(p);
        const int64_t w = pv.dim(1);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) out[i * cols + off + j] = pv[i * w + j];
        off += w;
    }
    std::vector<Var> ps = parts;
    const int64_t total = cols;
    return t.apply(std::move(out), ps, [ps, r, total](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        int64_t off = 0;
        for (Var p : ps) {
            const int64_t w = tp.val(p).dim(1);
            if (tp.wants_grad(p)) {
                Array& pg = tp.grad_buf(p);
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < w; ++j) pg[i * w + j] += g[i * total + off + j];
            }
            off += w;
        }
    });
}

/// Broadcast-add a length-c row vector to every row of a (r x c).
inline Var add_rowvec(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.ndim() == 2 && bv.numel() == av.dim(1), "add_rowvec: shape mismatch");
    const int64_t r = av.dim(0), c = av.dim(1);
    Array out({r, c});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[j];
    return t.apply(std::move(out), {a, b}, [a, b, r, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (tp.wants_grad(a)) {
            Array& pg = tp.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
        }
        if (tp.wants_grad(b)) {
            Array& pg = tp.grad_buf(b);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) pg[j] += g[i * c + j];
        }
    });
}

/// Scale row i of a by s[i].
inline Var row_scale(Tape& t, Var a, Var s) {
    const Array& av = t.val(a);
    const Array& sv = t.val(s);
    require(av.ndim() == 2 && sv.numel() == av.dim(0), "row_scale: shape mismatch");
    const int64_t r = av.dim(0), c = av.dim(1);
    Array out({r, c});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] * sv[i];
    return t.apply(std::move(out), {a, s}, [a, s, r, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& av = tp.val(a);
        const Array& sv = tp.val(s);
        if (tp.wants_grad(a)) {
            Array& pg = tp.grad_buf(a);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) pg[i * c + j] += g[i * c + j] * sv[i];
        }
        if (tp.wants_grad(s)) {
            Array& pg = tp.grad_buf(s);
            for (int64_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * av[i * c + j];
                pg[i] += acc;
            }
        }
    });
}

/// Add b[i] to every entry of row i.
inline Var row_bias(Tape& t, Var a, Var b) {
    const Array& av = t.val(a);
    const Array& bv = t.val(b);
    require(av.ndim() == 2 && bv.numel() == av.dim(0), "row_bias: shape mismatch");
    const int64_t r = av.dim(0), c = av.dim(1);
    Array out({r, c});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[i];
    return t.apply(std::move(out), {a, b}, [a, b, r, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (tp.wants_grad(a)) {
            Array& pg = tp.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
        }
        if (tp.wants_grad(b)) {
            Array& pg = tp.grad_buf(b);
            for (int64_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < c; ++j) acc += g[i * c + j];
                pg[i] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization, attention pieces, reductions
// ---------------------------------------------------------------------------

inline Var softmax_rows(Tape& t, Var a) {
    const Array& av = t.val(a);
    require(av.ndim() == 2, "softmax_rows: need 2-d");
    const int64_t r = av.dim(0), c = av.dim(1);
    Array out({r, c});
    for (int64_t i = 0; i < r; ++i) {
        double mx = av[i * c];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, av[i * c + j]);
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double e = std::exp(av[i * c + j] - mx);
            out[i * c + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < c; ++j) out[i * c + j] *= inv;
    }
    return t.apply(std::move(out), {a}, [a, r, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& y = tp.val(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
            for (int64_t j = 0; j < c; ++j)
                pg[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
    });
}

/// Per-row standardization followed by a learned affine map.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
    const Array& xv = t.val(x);
    require(xv.ndim() == 2, "layer_norm: need 2-d");
    const int64_t r = xv.dim(0), c = xv.dim(1);
    require(t.val(gain).numel() == c && t.val(bias).numel() == c, "layer_norm: affine size");
    Array out({r, c});
    Array xhat({r, c});
    Array inv_std({r});
    const Array& gv = t.val(gain);
    const Array& bv = t.val(bias);
    for (int64_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += xv[i * c + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = xv[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (int64_t j = 0; j < c; ++j) {
            const double xh = (xv[i * c + j] - mean) * istd;
            xhat[i * c + j] = xh;
            out[i * c + j] = xh * gv[j] + bv[j];
        }
    }
    auto xh_shared = std::make_shared<Array>(std::move(xhat));
    auto istd_shared = std::make_shared<Array>(std::move(inv_std));
    return t.apply(std::move(out), {x, gain, bias},
                   [x, gain, bias, r, c, xh_shared, istd_shared](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& gv = tp.val(gain);
        const Array& xh = *xh_shared;
        if (tp.wants_grad(gain)) {
            Array& gg = tp.grad_buf(gain);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xh[i * c + j];
        }
        if (tp.wants_grad(bias)) {
            Array& gb = tp.grad_buf(bias);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (tp.wants_grad(x)) {
            Array& gx = tp.grad_buf(x);
            const Array& istd = *istd_shared;
            for (int64_t i = 0; i < r; ++i) {
                double sum_gy = 0.0, sum_gy_xh = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    const double gy = g[i * c + j] * gv[j];
                    sum_gy += gy;
                    sum_gy_xh += gy * xh[i * c + j];
                }
                const double ic = 1.0 / static_cast<double>(c);
                for (int64_t j = 0; j < c; ++j) {
                    const double gy = g[i * c + j] * gv[j];
                    gx[i * c + j] +=
                        istd[i] * (gy - ic * sum_gy - xh[i * c + j] * ic * sum_gy_xh);
                }
            }
        }
    });
}

inline Var sum_all(Tape& t, Var a) {
    const Array& av = t.val(a);
    double s = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
    return t.apply(Array::scalar(s), {a}, [a](Tape& tp, int32_t self) {
        const double g = tp.grad_buf(Var{self})[0];
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += g;
    });
}

/// Column means of a (r x c) -> (1 x c). Used for mean-pooled token embeddings.
inline Var mean_rows(Tape& t, Var a) {
    const Array& av = t.val(a);
    require(av.ndim() == 2, "mean_rows: need 2-d");
    const int64_t r = av.dim(0), c = av.dim(1);
    Array out({1, c});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[j] += av[i * c + j];
    for (int64_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
    return t.apply(std::move(out), {a}, [a, r, c](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(a)) return;
        Array& pg = tp.grad_buf(a);
        const double ir = 1.0 / static_cast<double>(r);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) pg[i * c + j] += g[j] * ir;
    });
}

/// Mean absolute difference against a constant target.
inline Var mean_abs_error(Tape& t, Var pred, const Array& target) {
    const Array& pv = t.val(pred);
    require(pv.same_shape(target), "mean_abs_error: shape mismatch " + pv.shape_str() +
                                       " vs " + target.shape_str());
    const int64_t n = pv.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::abs(pv[i] - target[i]);
    s /= static_cast<double>(n);
    auto tgt = std::make_shared<Array>(target);
    return t.apply(Array::scalar(s), {pred}, [pred, tgt, n](Tape& tp, int32_t self) {
        const double g = tp.grad_buf(Var{self})[0];
        if (!tp.wants_grad(pred)) return;
        Array& pg = tp.grad_buf(pred);
        const Array& pv = tp.val(pred);
        const double in = g / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            const double d = pv[i] - (*tgt)[i];
            pg[i] += (d > 0.0 ? in : (d < 0.0 ? -in : 0.0));
        }
    });
}

/// KL(N(mu, e^logvar) || N(0,1)) summed over dimensions.
inline Var kl_standard_normal(Tape& t, Var mu, Var logvar) {
    const Array& mv = t.val(mu);
    const Array& lv = t.val(logvar);
    require(mv.numel() == lv.numel(), "kl: dim mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < mv.numel(); ++i)
        s += -0.5 * (1.0 + lv[i] - mv[i] * mv[i] - std::exp(lv[i]));
    return t.apply(Array::scalar(s), {mu, logvar}, [mu, logvar](Tape& tp, int32_t self) {
        const double g = tp.grad_buf(Var{self})[0];
        const Array& mv = tp.val(mu);
        const Array& lv = tp.val(logvar);
        if (tp.wants_grad(mu)) {
            Array& pg = tp.grad_buf(mu);
            for (int64_t i = 0; i < mv.numel(); ++i) pg[i] += g * mv[i];
        }
        if (tp.wants_grad(logvar)) {
            Array& pg = tp.grad_buf(logvar);
            for (int64_t i = 0; i < lv.numel(); ++i)
                pg[i] += g * 0.5 * (std::exp(lv[i]) - 1.0);
        }
    });
}

/// Rows of an embedding table selected by index; scatter-add on the way back.
inline Var gather_rows(Tape& t, Var table, const std::vector<int64_t>& idx) {
    const Array& tv = t.val(table);
    require(tv.ndim() == 2, "gather_rows: need 2-d table");
    const int64_t v = tv.dim(0), d = tv.dim(1);
    Array out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < v, "gather_rows: index out of range");
        for (int64_t j = 0; j < d; ++j) out[static_cast<int64_t>(i) * d + j] = tv[idx[i] * d + j];
    }
    auto ids = std::make_shared<std::vector<int64_t>>(idx);
    return t.apply(std::move(out), {table}, [table, ids, d](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        if (!tp.wants_grad(table)) return;
        Array& pg = tp.grad_buf(table);
        for (size_t i = 0; i < ids->size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                pg[(*ids)[i] * d + j] += g[static_cast<int64_t>(i) * d + j];
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution, NCHW single image: x (C,H,W), w (OC,C,KH,KW), b (OC).
inline Var conv2d(Tape& t, Var x, Var w, Var b, int64_t stride, int64_t pad) {
    const Array& xv = t.val(x);
    const Array& wv = t.val(w);
    const Array& bv = t.val(b);
    require(xv.ndim() == 3 && wv.ndim() == 4, "conv2d: need (C,H,W) and (OC,C,KH,KW)");
    require(stride >= 1, "conv2d: stride must be >= 1");
    const int64_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const int64_t OC = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
    require(wv.dim(1) == C, "conv2d: channel mismatch");
    require(bv.numel() == OC, "conv2d: bias size");
    const int64_t OH = (H + 2 * pad - KH) / stride + 1;
    const int64_t OW = (W + 2 * pad - KW) / stride + 1;
    require(OH > 0 && OW > 0, "conv2d: empty output");
    Array out({OC, OH, OW});
    for (int64_t oc = 0; oc < OC; ++oc) {
        for (int64_t oy = 0; oy < OH; ++oy) {
            for (int64_t ox = 0; ox < OW; ++ox) {
                double acc = bv[oc];
                const int64_t iy0 = oy * stride - pad;
                const int64_t ix0 = ox * stride - pad;
                for (int64_t c = 0; c < C; ++c) {
                    for (int64_t ky = 0; ky < KH; ++ky) {
                        const int64_t iy = iy0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < KW; ++kx) {
                            const int64_t ix = ix0 + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += xv[(c * H + iy) * W + ix] *
                                   wv[((oc * C + c) * KH + ky) * KW + kx];
                        }
                    }
                }
                out[(oc * OH + oy) * OW + ox] = acc;
            }
        }
    }
    return t.apply(std::move(out), {x, w, b},
                   [x, w, b, C, H, W, OC, KH, KW, OH, OW, stride, pad](Tape& tp, int32_t self) {
        const Array& g = tp.grad_buf(Var{self});
        const Array& xv = tp.val(x);
        const Array& wv = tp.val(w);
        const bool gx = tp.wants_grad(x);
        const bool gw = tp.wants_grad(w);
        const bool gb = tp.wants_grad(b);
        Array* xg = gx ? &tp.grad_buf(x) : nullptr;
        Array* wg = gw ? &tp.grad_buf(w) : nullptr;
        Array* bg = gb ? &tp.grad_buf(b) : nullptr;
        for (int64_t oc = 0; oc < OC; ++oc) {
            for (int64_t oy = 0; oy < OH; ++oy) {
                for (int64_t ox = 0; ox < OW; ++ox) {
                    const double go = g[(oc * OH + oy) * OW + ox];
                    if (go == 0.0) continue;
                    if (bg) (*bg)[oc] += go;
                    const int64_t iy0 = oy * stride - pad;
                    const int64_t ix0 = ox * stride - pad;
                    for (int64_t c = 0; c < C; ++c) {
                        for (int64_t ky = 0; ky < KH; ++ky) {
                            const int64_t iy = iy0 + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = 0; kx < KW; ++kx) {
                                const int64_t ix = ix0 + kx;
                                if (ix < 0 || ix >= W) continue;
                                const int64_t xi = (c * H + iy) * W + ix;
                                const int64_t wi = ((oc * C + c) * KH + ky) * KW + kx;
                                if (wg) (*wg)[wi] += go * xv[xi];
                                if (xg) (*xg)[xi] += go * wv[wi];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Fixed sinusoidal position table (rows = positions, cols = model dim).
inline Array sinusoid_table(int64_t positions, int64_t dim) {
    Array out({positions, dim});
    for (int64_t p = 0; p < positions; ++p) {
        for (int64_t j = 0; j < dim; ++j) {
            const double rate =
                std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(dim));
            const double angle = static_cast<double>(p) * rate;
            out[p * dim + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return out;
}

/// y = x W + b with x (n x in), W (in x out), b (out).
inline Var linear(Tape& t, Var x, Var W, Var b) { return add_rowvec(t, matmul(t, x, W), b); }

}  // namespace tandem


}  // namespace tandem
