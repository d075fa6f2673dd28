#include "unipool/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>

namespace unipool::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
// Strided views for per-head blocks embedded in wider activation rows.
using CSMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MSMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

void want_2d(const char* op, const Tensor& t) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(op) + ": want 2-D tensor, got " +
                         shape_str(t.shape()));
}

void want_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double sigmoid_1(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

// ---------------------------------------------------------------------------
// arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
    want_same_shape("add", a, b);
    OpCtx ctx("add", {a, b});
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return ctx.make(a.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i) {
                            p[0]->grad[i] += o->grad[i];
                            p[1]->grad[i] += o->grad[i];
                        }
                    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    want_same_shape("mul", a, b);
    OpCtx ctx("mul", {a, b});
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    return ctx.make(a.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i) {
                            p[0]->grad[i] += o->grad[i] * p[1]->data[i];
                            p[1]->grad[i] += o->grad[i] * p[0]->data[i];
                        }
                    });
}

Tensor scale(const Tensor& a, double c) {
    OpCtx ctx("scale", {a});
    std::vector<double> out(a.data());
    for (double& v : out) v *= c;
    return ctx.make(a.shape(), std::move(out),
                    [c](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[i] += c * o->grad[i];
                    });
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1)
        throw ShapeError("mul_scalar_t: scalar operand has shape " +
                         shape_str(s.shape()));
    OpCtx ctx("mul_scalar_t", {x, s});
    const double sv = s.data()[0];
    std::vector<double> out(x.data());
    for (double& v : out) v *= sv;
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        const double sv = p[1]->data[0];
                        double ds = 0.0;
                        for (size_t i = 0; i < o->grad.size(); ++i) {
                            p[0]->grad[i] += sv * o->grad[i];
                            ds += o->grad[i] * p[0]->data[i];
                        }
                        p[1]->grad[0] += ds;
                    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    want_2d("matmul", a);
    want_2d("matmul", b);
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + " inner dims differ");
    OpCtx ctx("matmul", {a, b});
    std::vector<double> out(static_cast<size_t>(m) * n);
    {
        CMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        MMap O(out.data(), m, n);
        O.noalias() = A * B;
    }
    return ctx.make({m, n}, std::move(out),
                    [m, k, n](detail::Node* o, const std::vector<detail::Node*>& p) {
                        CMap G(o->grad.data(), m, n);
                        CMap A(p[0]->data.data(), m, k);
                        CMap B(p[1]->data.data(), k, n);
                        MMap dA(p[0]->grad.data(), m, k);
                        MMap dB(p[1]->grad.data(), k, n);
                        dA.noalias() += G * B.transpose();
                        dB.noalias() += A.transpose() * G;
                    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    want_2d("matmul_nt", a);
    want_2d("matmul_nt", b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1))
        throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T inner dims differ");
    OpCtx ctx("matmul_nt", {a, b});
    std::vector<double> out(static_cast<size_t>(m) * n);
    {
        CMap A(a.data().data(), m, k), B(b.data().data(), n, k);
        MMap O(out.data(), m, n);
        O.noalias() = A * B.transpose();
    }
    return ctx.make({m, n}, std::move(out),
                    [m, k, n](detail::Node* o, const std::vector<detail::Node*>& p) {
                        CMap G(o->grad.data(), m, n);
                        CMap A(p[0]->data.data(), m, k);
                        CMap B(p[1]->data.data(), n, k);
                        MMap dA(p[0]->grad.data(), m, k);
                        MMap dB(p[1]->grad.data(), n, k);
                        dA.noalias() += G * B;
                        dB.noalias() += G.transpose() * A;
                    });
}

// ---------------------------------------------------------------------------
// activations

Tensor relu(const Tensor& x) {
    OpCtx ctx("relu", {x});
    std::vector<double> out(x.data());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            if (p[0]->data[i] > 0.0) p[0]->grad[i] += o->grad[i];
                    });
}

Tensor silu(const Tensor& x) {
    OpCtx ctx("silu", {x});
    std::vector<double> out(x.data());
    for (double& v : out) v *= sigmoid_1(v);
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i) {
                            const double xv = p[0]->data[i];
                            const double s = sigmoid_1(xv);
                            p[0]->grad[i] += o->grad[i] * s * (1.0 + xv * (1.0 - s));
                        }
                    });
}

Tensor sigmoid(const Tensor& x) {
    OpCtx ctx("sigmoid", {x});
    std::vector<double> out(x.data());
    for (double& v : out) v = sigmoid_1(v);
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i) {
                            const double s = o->data[i];
                            p[0]->grad[i] += o->grad[i] * s * (1.0 - s);
                        }
                    });
}

Tensor exp(const Tensor& x) {
    OpCtx ctx("exp", {x});
    std::vector<double> out(x.data());
    for (double& v : out) v = std::exp(v);
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[i] += o->grad[i] * o->data[i];
                    });
}

Tensor log(const Tensor& x) {
    OpCtx ctx("log", {x});
    std::vector<double> out(x.data());
    for (double& v : out) v = std::log(v);
    return ctx.make(x.shape(), std::move(out),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[i] += o->grad[i] / p[0]->data[i];
                    });
}

Tensor softmax(const Tensor& x) {
    want_2d("softmax", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("softmax", {x});
    std::vector<double> out(x.data());
    for (int r = 0; r < n; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * m;
        const double mx = *std::max_element(row, row + m);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < m; ++j) row[j] /= sum;
    }
    return ctx.make({n, m}, std::move(out),
                    [n, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (int r = 0; r < n; ++r) {
                            const size_t off = static_cast<size_t>(r) * m;
                            const double* pr = o->data.data() + off;
                            const double* g = o->grad.data() + off;
                            double dot = 0.0;
                            for (int j = 0; j < m; ++j) dot += g[j] * pr[j];
                            for (int j = 0; j < m; ++j)
                                p[0]->grad[off + j] += pr[j] * (g[j] - dot);
                        }
                    });
}

// ---------------------------------------------------------------------------
// norms

Tensor l2_norm_rows(const Tensor& x) {
    want_2d("l2_norm_rows", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("l2_norm_rows", {x});
    std::vector<double> out(static_cast<size_t>(n));
    const auto& xd = x.data();
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int j = 0; j < m; ++j) {
            const double v = xd[static_cast<size_t>(r) * m + j];
            s += v * v;
        }
        out[r] = std::sqrt(s);
    }
    return ctx.make({n, 1}, std::move(out),
                    [n, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (int r = 0; r < n; ++r) {
                            const double nr = o->data[r];
                            if (nr == 0.0) continue;  // subgradient at the kink
                            const double g = o->grad[r] / nr;
                            const size_t off = static_cast<size_t>(r) * m;
                            for (int j = 0; j < m; ++j)
                                p[0]->grad[off + j] += g * p[0]->data[off + j];
                        }
                    });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    want_2d("l2_normalize_rows", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("l2_normalize_rows", {x});
    std::vector<double> out(x.data());
    std::vector<double> norms(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        double* row = out.data() + static_cast<size_t>(r) * m;
        for (int j = 0; j < m; ++j) s += row[j] * row[j];
        norms[r] = std::sqrt(s);
        const double d = norms[r] + eps;
        for (int j = 0; j < m; ++j) row[j] /= d;
    }
    return ctx.make(
        {n, m}, std::move(out),
        [n, m, eps, norms = std::move(norms)](detail::Node* o,
                                              const std::vector<detail::Node*>& p) {
            // y_i = x_i/(r+eps): dx_j = g_j/(r+eps) - x_j * (g.x) / (r (r+eps)^2)
            for (int r = 0; r < n; ++r) {
                const size_t off = static_cast<size_t>(r) * m;
                const double nr = norms[r];
                const double d = nr + eps;
                const double* g = o->grad.data() + off;
                const double* xv = p[0]->data.data() + off;
                double gx = 0.0;
                for (int j = 0; j < m; ++j) gx += g[j] * xv[j];
                const double c2 = nr > 0.0 ? gx / (nr * d * d) : 0.0;
                for (int j = 0; j < m; ++j)
                    p[0]->grad[off + j] += g[j] / d - xv[j] * c2;
            }
        });
}

Tensor rmsnorm(const Tensor& x, const Tensor& w, double eps) {
    want_2d("rmsnorm", x);
    const int n = x.dim(0), m = x.dim(1);
    if (w.shape() != Shape{m})
        throw ShapeError("rmsnorm: weight " + shape_str(w.shape()) +
                         " does not match feature dim " + std::to_string(m));
    OpCtx ctx("rmsnorm", {x, w});
    std::vector<double> out(x.data());
    std::vector<double> inv_rms(static_cast<size_t>(n));
    const auto& wd = w.data();
    for (int r = 0; r < n; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(s / m + eps);
        inv_rms[r] = inv;
        for (int j = 0; j < m; ++j) row[j] *= inv * wd[j];
    }
    return ctx.make(
        {n, m}, std::move(out),
        [n, m, inv_rms = std::move(inv_rms)](detail::Node* o,
                                             const std::vector<detail::Node*>& p) {
            // y_j = w_j x_j s,  s = (mean x^2 + eps)^-1/2
            // dx_j = s (w_j g_j - x_j s^2 / m * sum_i g_i w_i x_i)
            for (int r = 0; r < n; ++r) {
                const size_t off = static_cast<size_t>(r) * m;
                const double s = inv_rms[r];
                const double* g = o->grad.data() + off;
                const double* xv = p[0]->data.data() + off;
                const double* wv = p[1]->data.data();
                double acc = 0.0;
                for (int j = 0; j < m; ++j) acc += g[j] * wv[j] * xv[j];
                const double c = acc * s * s / m;
                for (int j = 0; j < m; ++j) {
                    p[0]->grad[off + j] += s * (g[j] * wv[j] - xv[j] * c);
                    p[1]->grad[j] += g[j] * xv[j] * s;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum_all(const Tensor& x) {
    OpCtx ctx("sum_all", {x});
    double s = 0.0;
    for (double v : x.data()) s += v;
    return ctx.make({1}, {s},
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        const double g = o->grad[0];
                        for (double& d : p[0]->grad) d += g;
                    });
}

Tensor mean_over_rows(const Tensor& x) {
    want_2d("mean_over_rows", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("mean_over_rows", {x});
    std::vector<double> out(static_cast<size_t>(m), 0.0);
    const auto& xd = x.data();
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < m; ++j) out[j] += xd[static_cast<size_t>(r) * m + j];
    for (double& v : out) v /= n;
    return ctx.make({1, m}, std::move(out),
                    [n, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (int r = 0; r < n; ++r)
                            for (int j = 0; j < m; ++j)
                                p[0]->grad[static_cast<size_t>(r) * m + j] +=
                                    o->grad[j] / n;
                    });
}

Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
    if (static_cast<int64_t>(w.size()) != x.numel())
        throw ShapeError("weighted_sum: " + std::to_string(w.size()) +
                         " weights vs tensor " + shape_str(x.shape()));
    OpCtx ctx("weighted_sum", {x});
    double s = 0.0;
    const auto& xd = x.data();
    for (size_t i = 0; i < w.size(); ++i) s += w[i] * xd[i];
    return ctx.make({1}, {s},
                    [w](detail::Node* o, const std::vector<detail::Node*>& p) {
                        const double g = o->grad[0];
                        for (size_t i = 0; i < w.size(); ++i)
                            p[0]->grad[i] += g * w[i];
                    });
}

Tensor normalize_rows_sum(const Tensor& x) {
    want_2d("normalize_rows_sum", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("normalize_rows_sum", {x});
    std::vector<double> out(x.data());
    std::vector<double> sums(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += row[j];
        if (s == 0.0)
            throw NumericError("normalize_rows_sum: row " + std::to_string(r) +
                               " sums to zero");
        sums[r] = s;
        for (int j = 0; j < m; ++j) row[j] /= s;
    }
    return ctx.make(
        {n, m}, std::move(out),
        [n, m, sums = std::move(sums)](detail::Node* o,
                                       const std::vector<detail::Node*>& p) {
            for (int r = 0; r < n; ++r) {
                const size_t off = static_cast<size_t>(r) * m;
                const double* g = o->grad.data() + off;
                const double* y = o->data.data() + off;
                double gy = 0.0;
                for (int j = 0; j < m; ++j) gy += g[j] * y[j];
                for (int j = 0; j < m; ++j)
                    p[0]->grad[off + j] += (g[j] - gy) / sums[r];
            }
        });
}

// ---------------------------------------------------------------------------
// shape surgery

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
    OpCtx ctx("reshape", {x});
    return ctx.make(std::move(shape), x.data(),
                    [](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[i] += o->grad[i];
                    });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    want_2d("slice_rows", x);
    const int n = x.dim(0), m = x.dim(1);
    if (r0 < 0 || r1 > n || r0 >= r1)
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") on " + shape_str(x.shape()));
    OpCtx ctx("slice_rows", {x});
    std::vector<double> out(x.data().begin() + static_cast<size_t>(r0) * m,
                            x.data().begin() + static_cast<size_t>(r1) * m);
    return ctx.make({r1 - r0, m}, std::move(out),
                    [r0, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        const size_t base = static_cast<size_t>(r0) * m;
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[base + i] += o->grad[i];
                    });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    want_2d("slice_cols", x);
    const int n = x.dim(0), m = x.dim(1);
    if (c0 < 0 || c1 > m || c0 >= c1)
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") on " + shape_str(x.shape()));
    OpCtx ctx("slice_cols", {x});
    const int w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(n) * w);
    const auto& xd = x.data();
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(r) * w + j] =
                xd[static_cast<size_t>(r) * m + c0 + j];
    return ctx.make({n, w}, std::move(out),
                    [n, m, c0, w](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (int r = 0; r < n; ++r)
                            for (int j = 0; j < w; ++j)
                                p[0]->grad[static_cast<size_t>(r) * m + c0 + j] +=
                                    o->grad[static_cast<size_t>(r) * w + j];
                    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    want_2d("concat_rows", a);
    want_2d("concat_rows", b);
    if (a.dim(1) != b.dim(1))
        throw ShapeError("concat_rows: col mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    OpCtx ctx("concat_rows", {a, b});
    std::vector<double> out(a.data());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const size_t na = a.data().size();
    return ctx.make({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out),
                    [na](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < na; ++i) p[0]->grad[i] += o->grad[i];
                        for (size_t i = na; i < o->grad.size(); ++i)
                            p[1]->grad[i - na] += o->grad[i];
                    });
}

// ---------------------------------------------------------------------------
// indexed

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    want_2d("gather_rows", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("gather_rows", {x});
    std::vector<double> out(idx.size() * static_cast<size_t>(m));
    const auto& xd = x.data();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n)
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) +
                             " outside " + shape_str(x.shape()));
        std::copy_n(xd.data() + static_cast<size_t>(idx[i]) * m, m,
                    out.data() + i * m);
    }
    return ctx.make({static_cast<int>(idx.size()), m}, std::move(out),
                    [idx, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < idx.size(); ++i) {
                            const size_t src = i * static_cast<size_t>(m);
                            const size_t dst = static_cast<size_t>(idx[i]) * m;
                            for (int j = 0; j < m; ++j)
                                p[0]->grad[dst + j] += o->grad[src + j];
                        }
                    });
}

Tensor scatter_add_rows(const Tensor& base, const std::vector<int>& idx,
                        const Tensor& rows) {
    want_2d("scatter_add_rows", base);
    want_2d("scatter_add_rows", rows);
    const int n = base.dim(0), m = base.dim(1);
    if (rows.dim(1) != m || rows.dim(0) != static_cast<int>(idx.size()))
        throw ShapeError("scatter_add_rows: rows " + shape_str(rows.shape()) +
                         " vs " + std::to_string(idx.size()) + " indices into " +
                         shape_str(base.shape()));
    OpCtx ctx("scatter_add_rows", {base, rows});
    std::vector<double> out(base.data());
    const auto& rd = rows.data();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n)
            throw ShapeError("scatter_add_rows: index " + std::to_string(idx[i]) +
                             " outside " + shape_str(base.shape()));
        double* dst = out.data() + static_cast<size_t>(idx[i]) * m;
        const double* src = rd.data() + i * static_cast<size_t>(m);
        for (int j = 0; j < m; ++j) dst[j] += src[j];
    }
    return ctx.make({n, m}, std::move(out),
                    [idx, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < o->grad.size(); ++i)
                            p[0]->grad[i] += o->grad[i];
                        for (size_t i = 0; i < idx.size(); ++i) {
                            const size_t src = static_cast<size_t>(idx[i]) * m;
                            const size_t dst = i * static_cast<size_t>(m);
                            for (int j = 0; j < m; ++j)
                                p[1]->grad[dst + j] += o->grad[src + j];
                        }
                    });
}

Tensor gather_elements(const Tensor& x,
                       const std::vector<std::pair<int, int>>& pairs) {
    want_2d("gather_elements", x);
    const int n = x.dim(0), m = x.dim(1);
    OpCtx ctx("gather_elements", {x});
    std::vector<double> out(pairs.size());
    const auto& xd = x.data();
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto [r, c] = pairs[i];
        if (r < 0 || r >= n || c < 0 || c >= m)
            throw ShapeError("gather_elements: (" + std::to_string(r) + "," +
                             std::to_string(c) + ") outside " +
                             shape_str(x.shape()));
        out[i] = xd[static_cast<size_t>(r) * m + c];
    }
    return ctx.make({static_cast<int>(pairs.size()), 1}, std::move(out),
                    [pairs, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < pairs.size(); ++i)
                            p[0]->grad[static_cast<size_t>(pairs[i].first) * m +
                                       pairs[i].second] += o->grad[i];
                    });
}

Tensor mul_col_broadcast(const Tensor& x, const Tensor& col) {
    want_2d("mul_col_broadcast", x);
    const int n = x.dim(0), m = x.dim(1);
    if (col.shape() != Shape{n, 1})
        throw ShapeError("mul_col_broadcast: column " + shape_str(col.shape()) +
                         " vs rows of " + shape_str(x.shape()));
    OpCtx ctx("mul_col_broadcast", {x, col});
    std::vector<double> out(x.data());
    const auto& cd = col.data();
    for (int r = 0; r < n; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * m;
        for (int j = 0; j < m; ++j) row[j] *= cd[r];
    }
    return ctx.make({n, m}, std::move(out),
                    [n, m](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (int r = 0; r < n; ++r) {
                            const size_t off = static_cast<size_t>(r) * m;
                            const double c = p[1]->data[r];
                            double dc = 0.0;
                            for (int j = 0; j < m; ++j) {
                                p[0]->grad[off + j] += o->grad[off + j] * c;
                                dc += o->grad[off + j] * p[0]->data[off + j];
                            }
                            p[1]->grad[r] += dc;
                        }
                    });
}

// ---------------------------------------------------------------------------
// model-specific

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    want_2d("embedding", table);
    const int v = table.dim(0), h = table.dim(1);
    OpCtx ctx("embedding", {table});
    std::vector<double> out(ids.size() * static_cast<size_t>(h));
    const auto& td = table.data();
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw ShapeError("embedding: id " + std::to_string(ids[i]) +
                             " outside vocab " + std::to_string(v));
        std::copy_n(td.data() + static_cast<size_t>(ids[i]) * h, h,
                    out.data() + i * h);
    }
    return ctx.make({static_cast<int>(ids.size()), h}, std::move(out),
                    [ids, h](detail::Node* o, const std::vector<detail::Node*>& p) {
                        for (size_t i = 0; i < ids.size(); ++i) {
                            const size_t dst = static_cast<size_t>(ids[i]) * h;
                            const size_t src = i * static_cast<size_t>(h);
                            for (int j = 0; j < h; ++j)
                                p[0]->grad[dst + j] += o->grad[src + j];
                        }
                    });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
    want_2d("cross_entropy_mean", logits);
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                         " targets vs logits " + shape_str(logits.shape()));
    OpCtx ctx("cross_entropy_mean", {logits});
    // Save softmax probabilities for the backward pass.
    std::vector<double> probs(logits.data());
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        if (targets[r] < 0 || targets[r] >= v)
            throw ShapeError("cross_entropy_mean: target " +
                             std::to_string(targets[r]) + " outside vocab " +
                             std::to_string(v));
        double* row = probs.data() + static_cast<size_t>(r) * v;
        const double mx = *std::max_element(row, row + v);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const double lse = mx + std::log(sum);
        total += lse - logits.data()[static_cast<size_t>(r) * v + targets[r]];
        for (int j = 0; j < v; ++j) row[j] /= sum;
    }
    return ctx.make(
        {1}, {total / n},
        [n, v, targets, probs = std::move(probs)](
            detail::Node* o, const std::vector<detail::Node*>& p) {
            const double g = o->grad[0] / n;
            for (int r = 0; r < n; ++r) {
                const size_t off = static_cast<size_t>(r) * v;
                for (int j = 0; j < v; ++j)
                    p[0]->grad[off + j] += g * probs[off + j];
                p[0]->grad[off + targets[r]] -= g;
            }
        });
}

Tensor rope(const Tensor& x, int batch, int seq, int heads, int head_dim,
            double base) {
    want_2d("rope", x);
    if (head_dim % 2 != 0)
        throw ShapeError("rope: head_dim must be even, got " +
                         std::to_string(head_dim));
    if (x.dim(0) != batch * seq || x.dim(1) != heads * head_dim)
        throw ShapeError("rope: input " + shape_str(x.shape()) + " vs layout (" +
                         std::to_string(batch * seq) + "," +
                         std::to_string(heads * head_dim) + ")");
    OpCtx ctx("rope", {x});
    const int half = head_dim / 2;
    std::vector<double> freqs(static_cast<size_t>(half));
    for (int j = 0; j < half; ++j)
        freqs[j] = std::pow(base, -2.0 * j / head_dim);
    std::vector<double> out(x.data());
    const int width = heads * head_dim;
    // Captures by value: the backward closure outlives this stack frame.
    auto rotate = [batch, seq, heads, head_dim, half, width,
                   freqs](std::vector<double>& buf, double sign) {
        for (int r = 0; r < batch * seq; ++r) {
            const int t = r % seq;  // positions restart per window
            double* row = buf.data() + static_cast<size_t>(r) * width;
            for (int h = 0; h < heads; ++h) {
                double* hp = row + h * head_dim;
                for (int j = 0; j < half; ++j) {
                    const double a = t * freqs[j];
                    const double c = std::cos(a), s = sign * std::sin(a);
                    const double x1 = hp[j], x2 = hp[half + j];
                    hp[j] = x1 * c - x2 * s;
                    hp[half + j] = x2 * c + x1 * s;
                }
            }
        }
    };
    rotate(out, 1.0);
    return ctx.make({batch * seq, width}, std::move(out),
                    [rotate](detail::Node* o, const std::vector<detail::Node*>& p) {
                        // The rotation is orthogonal: gradient rotates back.
                        std::vector<double> g(o->grad);
                        rotate(g, -1.0);
                        for (size_t i = 0; i < g.size(); ++i) p[0]->grad[i] += g[i];
                    });
}

Tensor mha_causal(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                  int seq, int heads, int kv_heads) {
    want_2d("mha_causal", q);
    want_2d("mha_causal", k);
    want_2d("mha_causal", v);
    if (heads % kv_heads != 0)
        throw ShapeError("mha_causal: heads " + std::to_string(heads) +
                         " not a multiple of kv_heads " + std::to_string(kv_heads));
    if (q.dim(1) % heads != 0)
        throw ShapeError("mha_causal: q width " + std::to_string(q.dim(1)) +
                         " not divisible by heads " + std::to_string(heads));
    const int d = q.dim(1) / heads;
    const int rows = batch * seq;
    if (q.dim(0) != rows || k.dim(0) != rows || v.dim(0) != rows ||
        k.dim(1) != kv_heads * d || v.dim(1) != kv_heads * d)
        throw ShapeError("mha_causal: q " + shape_str(q.shape()) + " k " +
                         shape_str(k.shape()) + " v " + shape_str(v.shape()) +
                         " inconsistent with B=" + std::to_string(batch) +
                         " T=" + std::to_string(seq));
    OpCtx ctx("mha_causal", {q, k, v});

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const int group = heads / kv_heads;
    const size_t probs_per_bh = static_cast<size_t>(seq) * seq;
    // Lower-triangular softmax probabilities, kept for the backward pass.
    std::vector<double> probs(static_cast<size_t>(batch) * heads * probs_per_bh, 0.0);
    std::vector<double> out(static_cast<size_t>(rows) * heads * d, 0.0);

    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    const int qw = heads * d, kw = kv_heads * d;

    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const int hk = h / group;
            CSMap Q(qd + static_cast<size_t>(b) * seq * qw + h * d, seq, d,
                    Eigen::OuterStride<>(qw));
            CSMap K(kd + static_cast<size_t>(b) * seq * kw + hk * d, seq, d,
                    Eigen::OuterStride<>(kw));
            CSMap V(vd + static_cast<size_t>(b) * seq * kw + hk * d, seq, d,
                    Eigen::OuterStride<>(kw));
            double* pp = probs.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh;
            MMap P(pp, seq, seq);
            P.noalias() = Q * K.transpose() * inv_sqrt_d;
            // causal mask + row softmax over the valid prefix
            for (int i = 0; i < seq; ++i) {
                double* row = pp + static_cast<size_t>(i) * seq;
                double mx = row[0];
                for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                for (int j = 0; j <= i; ++j) row[j] /= sum;
                for (int j = i + 1; j < seq; ++j) row[j] = 0.0;
            }
            MSMap O(out.data() + static_cast<size_t>(b) * seq * qw + h * d, seq, d,
                    Eigen::OuterStride<>(qw));
            O.noalias() = Eigen::Map<const RowMat>(pp, seq, seq) * V;
        }
    }

    return ctx.make(
        {rows, heads * d}, std::move(out),
        [batch, seq, heads, kv_heads, d, group, inv_sqrt_d, probs_per_bh,
         probs = std::move(probs)](detail::Node* o,
                                   const std::vector<detail::Node*>& p) {
            const int qw = heads * d, kw = kv_heads * d;
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const int hk = h / group;
                    const double* pp =
                        probs.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh;
                    CMap P(pp, seq, seq);
                    CSMap Q(p[0]->data.data() + static_cast<size_t>(b) * seq * qw + h * d,
                            seq, d, Eigen::OuterStride<>(qw));
                    CSMap K(p[1]->data.data() + static_cast<size_t>(b) * seq * kw + hk * d,
                            seq, d, Eigen::OuterStride<>(kw));
                    CSMap V(p[2]->data.data() + static_cast<size_t>(b) * seq * kw + hk * d,
                            seq, d, Eigen::OuterStride<>(kw));
                    CSMap dO(o->grad.data() + static_cast<size_t>(b) * seq * qw + h * d,
                             seq, d, Eigen::OuterStride<>(qw));
                    MSMap dQ(p[0]->grad.data() + static_cast<size_t>(b) * seq * qw + h * d,
                             seq, d, Eigen::OuterStride<>(qw));
                    MSMap dK(p[1]->grad.data() + static_cast<size_t>(b) * seq * kw + hk * d,
                             seq, d, Eigen::OuterStride<>(kw));
                    MSMap dV(p[2]->grad.data() + static_cast<size_t>(b) * seq * kw + hk * d,
                             seq, d, Eigen::OuterStride<>(kw));

                    dV.noalias() += P.transpose() * dO;
                    RowMat dP = dO * V.transpose();           // (T,T)
                    // softmax backward per row; entries beyond the diagonal
                    // carry P=0 so they drop out automatically.
                    RowMat dS(seq, seq);
                    for (int i = 0; i < seq; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
                        for (int j = 0; j < seq; ++j)
                            dS(i, j) = P(i, j) * (dP(i, j) - dot);
                    }
                    dQ.noalias() += dS * K * inv_sqrt_d;
                    dK.noalias() += dS.transpose() * Q * inv_sqrt_d;
                }
            }
        });
}

}  // namespace unipool::ops
