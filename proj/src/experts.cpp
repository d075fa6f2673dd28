#include "unipool/experts.hpp"

#include <cmath>

#include "unipool/ops.hpp"

namespace unipool {

ExpertBank::ExpertBank(int layers, int groups, int pool_size, int hidden,
                       int ffn_dim)
    : layers_(layers),
      groups_(groups),
      pool_size_(pool_size),
      hidden_(hidden),
      ffn_dim_(ffn_dim) {
    experts_.resize(static_cast<size_t>(pool_size));
}

int ExpertBank::group_of_layer(int layer) const {
    if (layer < 0 || layer >= layers_)
        throw ConfigError("expert bank: layer " + std::to_string(layer) +
                          " outside [0, " + std::to_string(layers_) + ")");
    return layer / (layers_ / groups_);
}

int ExpertBank::slice_offset(int layer) const {
    return group_of_layer(layer) * group_size();
}

Expert& ExpertBank::expert(int id) {
    if (id < 0 || id >= pool_size_)
        throw ConfigError("expert bank: id " + std::to_string(id) +
                          " outside pool of " + std::to_string(pool_size_));
    return experts_[static_cast<size_t>(id)];
}

const Expert& ExpertBank::expert(int id) const {
    return const_cast<ExpertBank*>(this)->expert(id);
}

namespace {
Tensor init_matrix(int rows, int cols, double std, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(rows) * cols);
    for (double& v : w) v = std * rng.gaussian();
    return Tensor::param({rows, cols}, std::move(w));
}
}  // namespace

ExpertBank build_bank(int layers, int groups, int pool_size, int k, int hidden,
                      int ffn_dim, double init_std, Rng& rng) {
    if (layers < 1) throw ConfigError("build_bank: layers must be >= 1");
    if (groups < 1 || groups > layers)
        throw ConfigError("build_bank: groups=" + std::to_string(groups) +
                          " outside [1, layers=" + std::to_string(layers) + "]");
    if (layers % groups != 0)
        throw ConfigError("build_bank: groups=" + std::to_string(groups) +
                          " does not divide layers=" + std::to_string(layers));
    if (pool_size < 1 || pool_size % groups != 0)
        throw ConfigError("build_bank: pool_size=" + std::to_string(pool_size) +
                          " not a positive multiple of groups=" +
                          std::to_string(groups));
    if (pool_size / groups < k)
        throw ConfigError("build_bank: per-group pool " +
                          std::to_string(pool_size / groups) + " smaller than k=" +
                          std::to_string(k));
    ExpertBank bank(layers, groups, pool_size, hidden, ffn_dim);
    for (int e = 0; e < pool_size; ++e) {
        bank.expert(e).gate = init_matrix(hidden, ffn_dim, init_std, rng);
        bank.expert(e).up = init_matrix(hidden, ffn_dim, init_std, rng);
        bank.expert(e).down = init_matrix(ffn_dim, hidden, init_std, rng);
    }
    return bank;
}

Tensor expert_forward(const ExpertBank& bank, int id, const Tensor& x) {
    const Expert& e = bank.expert(id);
    Tensor a = ops::silu(ops::matmul(x, e.gate));
    Tensor b = ops::matmul(x, e.up);
    return ops::matmul(ops::mul(a, b), e.down);
}

DispatchPlan build_dispatch_plan(const RouterDecision& d) {
    DispatchPlan plan;
    plan.buckets.resize(static_cast<size_t>(d.num_choices));
    for (int t = 0; t < d.tokens; ++t) {
        for (int j = 0; j < d.k; ++j) {
            const int global = d.topk[static_cast<size_t>(t) * d.k + j];
            const int local = global - d.slice_offset;
            if (local < 0 || local >= d.num_choices)
                throw ConfigError("dispatch: expert " + std::to_string(global) +
                                  " outside slice [" +
                                  std::to_string(d.slice_offset) + ", " +
                                  std::to_string(d.slice_offset + d.num_choices) +
                                  ")");
            plan.buckets[static_cast<size_t>(local)].emplace_back(t, j);
        }
    }
    plan.inverse.assign(static_cast<size_t>(d.tokens) * d.k, -1);
    int pos = 0;
    for (const auto& bucket : plan.buckets)
        for (const auto& [t, j] : bucket)
            plan.inverse[static_cast<size_t>(t) * d.k + j] = pos++;
    return plan;
}

Tensor dispatch_combine(ExpertBank& bank, const Tensor& x,
                        const RouterDecision& d) {
    if (x.dim(0) != d.tokens)
        throw ShapeError("dispatch_combine: " + std::to_string(d.tokens) +
                         "-token decision vs input " + shape_str(x.shape()));
    const DispatchPlan plan = build_dispatch_plan(d);
    Tensor acc = Tensor::zeros({d.tokens, bank.hidden()});
    for (int local = 0; local < d.num_choices; ++local) {
        const auto& bucket = plan.buckets[static_cast<size_t>(local)];
        if (bucket.empty()) continue;
        std::vector<int> rows;
        rows.reserve(bucket.size());
        for (const auto& [t, j] : bucket) rows.push_back(t);
        Tensor xs = ops::gather_rows(x, rows);
        Tensor ys = expert_forward(bank, d.slice_offset + local, xs);
        Tensor g = ops::gather_elements(d.gates, bucket);
        acc = ops::scatter_add_rows(acc, rows, ops::mul_col_broadcast(ys, g));
        bank.note_evals(static_cast<int64_t>(bucket.size()));
    }
    return acc;
}

int64_t expert_param_count(int hidden, int ffn_dim) {
    return 3ll * hidden * ffn_dim;
}

int64_t bank_param_count(const ExpertBank& bank) {
    return expert_param_count(bank.hidden(), bank.ffn_dim()) * bank.pool_size();
}

int matched_pool_size(int experts_per_layer, int layers) {
    if (experts_per_layer < 1 || layers < 1)
        throw ConfigError("matched_pool_size: counts must be positive");
    return experts_per_layer * layers;
}

int reduced_pool_size(int matched, double fraction, int min_experts) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ConfigError("reduced_pool_size: fraction outside (0, 1]");
    if (min_experts < 1)
        throw ConfigError("reduced_pool_size: min_experts must be positive");
    const long r = std::lround(matched * fraction);
    return static_cast<int>(r < min_experts ? min_experts : r);
}

}  // namespace unipool
