#pragma once

// Per-layer routers: scoring (softmax / sigmoid / normalized-ReLU), top-k
// selection with lowest-index tie-break, gate construction, and the Monte
// Carlo calibration of the normalized router's fixed rescaling constant.

#include <cstdint>
#include <vector>

#include "unipool/common.hpp"
#include "unipool/tensor.hpp"

namespace unipool {

enum class RouterKind { softmax, sigmoid, norm_router };

RouterKind router_kind_from(const std::string& name);
const char* router_kind_name(RouterKind k);

struct RouterParams {
    RouterKind kind = RouterKind::softmax;
    Tensor weight;        // (num_choices, hidden)
    Tensor sigma;         // 1-element learnable scale, norm_router only
    double c = 1.0;       // fixed Monte Carlo rescale, norm_router only
    double eps = 1e-6;    // norm_router denominator epsilon

    int num_choices() const { return weight.dim(0); }
};

struct RouterDecision {
    Tensor logits;  // (tokens, num_choices)
    Tensor scores;  // same shape, after the kind's scoring map
    Tensor gates;   // (tokens, k)
    // Selected expert IDs in the global pool frame, row-major (tokens, k),
    // distinct per token, ordered by descending score (ties: lower ID).
    std::vector<int> topk;
    int tokens = 0;
    int k = 0;
    int num_choices = 0;
    int slice_offset = 0;  // global ID of this router's first choice
};

// Scoring map applied to precomputed logits (tokens, num_choices).
Tensor scores_from_logits(const Tensor& z, const RouterParams& params);

// Logits + scoring in one go (used for the detached balancing path too).
Tensor router_scores(const Tensor& h, const RouterParams& params);

// Pure routing function: no hidden state, deterministic. `h` is
// (tokens, hidden); k must not exceed the router's choice count. In checked
// mode non-finite inputs raise NumericError.
RouterDecision route(const Tensor& h, const RouterParams& params, int k,
                     int slice_offset = 0);

// Top-k over one row of scores: highest first, ties to the lowest index.
std::vector<int> topk_select(const double* scores, int n, int k);

// Monte Carlo estimate of the rescaling constant: draw z ~ N(0, I_E),
// y = ReLU(z / ||z||), sort descending, average 1 / ||top-k(y)||; draws whose
// top-k mass is exactly zero are rejected and redrawn. Deterministic per
// (seed, build).
double monte_carlo_c(int experts, int k, int64_t samples, uint64_t seed);

// One sample of the quantity averaged above, from an explicit draw. Exposed
// so the all-positive k=E control can be pinned exactly.
double monte_carlo_sample(const std::vector<double>& z, int k);

// True when scaling z by lambda leaves scores unchanged at eps = 0 (within
// 1e-9) and leaves the top-k selection unchanged at the params' own eps.
bool norm_router_scale_invariance_check(const RouterParams& params,
                                        const Tensor& z_rows, double lambda,
                                        int k);

}  // namespace unipool
