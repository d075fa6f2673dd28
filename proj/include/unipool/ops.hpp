#pragma once

// Primitive differentiable kernels. All activations are 2-D row-major
// (rows = tokens, cols = features); attention handles its own head layout
// inside a fused op. Every kernel validates shapes and raises ShapeError
// naming the op; in checked mode inputs are scanned for non-finite values.

#include <cstdint>
#include <vector>

#include "unipool/tensor.hpp"

namespace unipool::ops {

// --- arithmetic ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);                // constant multiple
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);  // s: 1-element tensor

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)x(k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (m,k)x(n,k)^T -> (m,n)

// --- activations -----------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softmax(const Tensor& x);  // over last axis, max-subtracted

// --- norms -----------------------------------------------------------------
Tensor l2_norm_rows(const Tensor& x);                    // (n,m) -> (n,1)
Tensor l2_normalize_rows(const Tensor& x, double eps);   // x / (||row|| + eps)
Tensor rmsnorm(const Tensor& x, const Tensor& w, double eps);

// --- reductions ------------------------------------------------------------
Tensor sum_all(const Tensor& x);                         // -> (1)
Tensor mean_over_rows(const Tensor& x);                  // (n,m) -> (1,m)
// sum_i w_i * x_i over the flattened tensor; w is a plain constant.
Tensor weighted_sum(const Tensor& x, const std::vector<double>& w);
// y_ij = x_ij / sum_j x_ij (row-stochastic renormalization)
Tensor normalize_rows_sum(const Tensor& x);

// --- shape surgery (always copies; no views) --------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// --- indexed ---------------------------------------------------------------
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
// out = base with rows[i] added at row idx[i]; duplicate indices accumulate.
Tensor scatter_add_rows(const Tensor& base, const std::vector<int>& idx,
                        const Tensor& rows);
// out[i] = x(pairs[i].first, pairs[i].second), shape (n,1)
Tensor gather_elements(const Tensor& x,
                       const std::vector<std::pair<int, int>>& pairs);
Tensor mul_col_broadcast(const Tensor& x, const Tensor& col);  // (n,m)*(n,1)

// --- model-specific --------------------------------------------------------
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);
// Rotary embedding over per-head pairs (j, j+d/2), position = index in window.
Tensor rope(const Tensor& x, int batch, int seq, int heads, int head_dim,
            double base);
// Fused causal multi-head attention with grouped KV heads.
// q: (B*T, heads*d)   k,v: (B*T, kv_heads*d)   out: (B*T, heads*d)
Tensor mha_causal(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                  int seq, int heads, int kv_heads);

}  // namespace unipool::ops
