#include "unipool/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unipool/ops.hpp"

namespace unipool {

RouterKind router_kind_from(const std::string& name) {
    if (name == "softmax") return RouterKind::softmax;
    if (name == "sigmoid") return RouterKind::sigmoid;
    if (name == "norm_router") return RouterKind::norm_router;
    throw ConfigError("router: unknown kind '" + name +
                      "' (want softmax | sigmoid | norm_router)");
}

const char* router_kind_name(RouterKind k) {
    switch (k) {
        case RouterKind::softmax: return "softmax";
        case RouterKind::sigmoid: return "sigmoid";
        case RouterKind::norm_router: return "norm_router";
    }
    return "?";
}

Tensor scores_from_logits(const Tensor& z, const RouterParams& params) {
    switch (params.kind) {
        case RouterKind::softmax:
            return ops::softmax(z);
        case RouterKind::sigmoid:
            return ops::sigmoid(z);
        case RouterKind::norm_router: {
            // s = sigma * c * max(0, z / (||z|| + eps))
            Tensor y = ops::relu(ops::l2_normalize_rows(z, params.eps));
            if (!params.sigma.defined())
                throw ConfigError("router: norm_router without sigma parameter");
            return ops::scale(ops::mul_scalar_t(y, params.sigma), params.c);
        }
    }
    throw Error("router: unreachable kind");
}

Tensor router_scores(const Tensor& h, const RouterParams& params) {
    return scores_from_logits(ops::matmul_nt(h, params.weight), params);
}

std::vector<int> topk_select(const double* scores, int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // Full ordering by (score desc, index asc); k << n would justify a
    // partial sort but choice counts here are small.
    std::sort(idx.begin(), idx.end(), [scores](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

RouterDecision route(const Tensor& h, const RouterParams& params, int k,
                     int slice_offset) {
    const int choices = params.num_choices();
    if (k < 1 || k > choices)
        throw ConfigError("route: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(choices) + "]");
    if (checked_mode()) OpCtx::check_finite("route", h);

    RouterDecision d;
    d.logits = ops::matmul_nt(h, params.weight);
    d.scores = scores_from_logits(d.logits, params);
    d.tokens = h.dim(0);
    d.k = k;
    d.num_choices = choices;
    d.slice_offset = slice_offset;

    const auto& sd = d.scores.data();
    d.topk.resize(static_cast<size_t>(d.tokens) * k);
    std::vector<std::pair<int, int>> sel;  // (token row, local choice)
    sel.reserve(d.topk.size());
    for (int t = 0; t < d.tokens; ++t) {
        auto ids = topk_select(sd.data() + static_cast<size_t>(t) * choices,
                               choices, k);
        for (int j = 0; j < k; ++j) {
            d.topk[static_cast<size_t>(t) * k + j] = slice_offset + ids[j];
            sel.emplace_back(t, ids[j]);
        }
    }

    // Gates: k=1 takes the raw selected score for every kind; for k>1 the
    // strictly-positive scoring maps renormalize over the selected set while
    // the normalized router keeps raw scores (they may be exactly zero).
    Tensor raw = ops::reshape(ops::gather_elements(d.scores, sel), {d.tokens, k});
    if (k > 1 && params.kind != RouterKind::norm_router)
        d.gates = ops::normalize_rows_sum(raw);
    else
        d.gates = raw;
    return d;
}

double monte_carlo_sample(const std::vector<double>& z, int k) {
    const int n = static_cast<int>(z.size());
    if (k < 1 || k > n)
        throw ConfigError("monte_carlo_sample: k outside [1, E]");
    // Pair (relu(z)^2, z^2), sorted by the first component descending. Both
    // norms are then accumulated over the *same* order, so the all-positive
    // k=E control divides two bitwise-identical sums and yields exactly 1.
    std::vector<std::pair<double, double>> sq(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
        const double zz = z[i] * z[i];
        sq[i] = {z[i] > 0.0 ? zz : 0.0, zz};
    }
    std::stable_sort(sq.begin(), sq.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    double topk = 0.0, all = 0.0;
    for (int i = 0; i < n; ++i) {
        if (i < k) topk += sq[i].first;
        all += sq[i].second;
    }
    if (topk == 0.0) return 0.0;  // caller rejects and redraws
    return std::sqrt(all) / std::sqrt(topk);
}

double monte_carlo_c(int experts, int k, int64_t samples, uint64_t seed) {
    if (experts < 1) throw ConfigError("monte_carlo_c: experts must be >= 1");
    if (k < 1 || k > experts)
        throw ConfigError("monte_carlo_c: k=" + std::to_string(k) +
                          " outside [1, " + std::to_string(experts) + "]");
    if (samples < 1) throw ConfigError("monte_carlo_c: samples must be >= 1");
    Rng rng(seed);
    std::vector<double> z(static_cast<size_t>(experts));
    double sum = 0.0;
    for (int64_t i = 0; i < samples; ++i) {
        double val = 0.0;
        do {  // reject draws with zero top-k mass (all coordinates <= 0)
            for (double& v : z) v = rng.gaussian();
            val = monte_carlo_sample(z, k);
        } while (val == 0.0);
        sum += val;
    }
    return sum / static_cast<double>(samples);
}

bool norm_router_scale_invariance_check(const RouterParams& params,
                                        const Tensor& z_rows, double lambda,
                                        int k) {
    if (params.kind != RouterKind::norm_router)
        throw ConfigError("scale_invariance_check: router kind must be norm_router");
    if (lambda <= 0.0)
        throw ConfigError("scale_invariance_check: lambda must be positive");
    NoGradGuard ng;
    RouterParams at_zero = params;
    at_zero.eps = 0.0;
    const Tensor scaled = ops::scale(z_rows, lambda);

    const Tensor a = scores_from_logits(z_rows, at_zero);
    const Tensor b = scores_from_logits(scaled, at_zero);
    for (size_t i = 0; i < a.data().size(); ++i)
        if (std::abs(a.data()[i] - b.data()[i]) > 1e-9) return false;

    const Tensor sa = scores_from_logits(z_rows, params);
    const Tensor sb = scores_from_logits(scaled, params);
    const int n = z_rows.dim(0), m = z_rows.dim(1);
    for (int r = 0; r < n; ++r) {
        auto ta = topk_select(sa.data().data() + static_cast<size_t>(r) * m, m, k);
        auto tb = topk_select(sb.data().data() + static_cast<size_t>(r) * m, m, k);
        if (ta != tb) return false;
    }
    return true;
}

}  // namespace unipool
