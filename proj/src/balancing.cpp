#include "unipool/balancing.hpp"

#include <cmath>

#include "unipool/ops.hpp"

namespace unipool {

LayerRoutingStats layer_stats(const RouterDecision& d, int pool_size) {
    if (pool_size != d.num_choices)
        throw ConfigError("layer_stats: pool_size " + std::to_string(pool_size) +
                          " vs decision over " + std::to_string(d.num_choices) +
                          " choices");
    LayerRoutingStats s;
    s.num_choices = d.num_choices;
    s.slice_offset = d.slice_offset;
    s.f.assign(static_cast<size_t>(d.num_choices), 0.0);
    const double w = 1.0 / (static_cast<double>(d.tokens) * d.k);
    for (int id : d.topk) {
        const int local = id - d.slice_offset;
        if (local < 0 || local >= d.num_choices)
            throw ConfigError("layer_stats: expert " + std::to_string(id) +
                              " outside slice");
        s.f[static_cast<size_t>(local)] += w;
    }
    s.P = ops::mean_over_rows(d.scores);
    return s;
}

std::vector<double> global_f(const LayerRoutingStats& stats, int M) {
    if (stats.slice_offset + stats.num_choices > M)
        throw ConfigError("global_f: slice exceeds pool of " + std::to_string(M));
    std::vector<double> g(static_cast<size_t>(M), 0.0);
    for (int i = 0; i < stats.num_choices; ++i)
        g[static_cast<size_t>(stats.slice_offset + i)] = stats.f[static_cast<size_t>(i)];
    return g;
}

Tensor per_layer_aux(const LayerRoutingStats& stats, double alpha) {
    return ops::scale(ops::weighted_sum(stats.P, stats.f),
                      alpha * stats.num_choices);
}

Tensor pool_aux(const std::vector<LayerRoutingStats>& per_layer,
                const std::vector<double>& f_bar, double alpha_pool, int M) {
    if (per_layer.empty()) throw ConfigError("pool_aux: no layer stats");
    if (static_cast<int>(f_bar.size()) != M)
        throw ConfigError("pool_aux: f_bar length " + std::to_string(f_bar.size()) +
                          " vs pool " + std::to_string(M));
    const double coeff = alpha_pool * M / static_cast<double>(per_layer.size());
    Tensor total;
    for (const auto& s : per_layer) {
        // <fbar restricted to this layer's slice, P_l>; aligns with the
        // global inner product since P is zero off-slice by construction.
        std::vector<double> w(s.f.size());
        for (int i = 0; i < s.num_choices; ++i)
            w[static_cast<size_t>(i)] = f_bar[static_cast<size_t>(s.slice_offset + i)];
        Tensor term = ops::weighted_sum(s.P, w);
        total = total.defined() ? ops::add(total, term) : term;
    }
    return ops::scale(total, coeff);
}

PoolStatsAccumulator::PoolStatsAccumulator(int pool_size) {
    if (pool_size < 1)
        throw ConfigError("PoolStatsAccumulator: pool_size must be >= 1");
    f_bar_.assign(static_cast<size_t>(pool_size),
                  1.0 / static_cast<double>(pool_size));
}

const std::vector<double>& PoolStatsAccumulator::f_bar() const {
    if (log_events_) events_.push_back('r');
    return f_bar_;
}

void PoolStatsAccumulator::step(
    const std::vector<std::vector<double>>& per_layer_global_f) {
    if (per_layer_global_f.empty())
        throw ConfigError("PoolStatsAccumulator::step: no layer fractions");
    std::vector<double> next(f_bar_.size(), 0.0);
    for (const auto& f : per_layer_global_f) {
        if (f.size() != f_bar_.size())
            throw ConfigError("PoolStatsAccumulator::step: layer f length " +
                              std::to_string(f.size()) + " vs pool " +
                              std::to_string(f_bar_.size()));
        for (size_t i = 0; i < f.size(); ++i) next[i] += f[i];
    }
    const double inv = 1.0 / static_cast<double>(per_layer_global_f.size());
    for (double& v : next) v *= inv;
    f_bar_ = std::move(next);
    if (log_events_) events_.push_back('w');
}

double PoolStatsAccumulator::f_min() const {
    double m = f_bar_[0];
    for (double v : f_bar_) m = std::min(m, v);
    return m;
}

double PoolStatsAccumulator::f_max() const {
    double m = f_bar_[0];
    for (double v : f_bar_) m = std::max(m, v);
    return m;
}

double PoolStatsAccumulator::f_cv() const {
    const double n = static_cast<double>(f_bar_.size());
    double mean = 0.0;
    for (double v : f_bar_) mean += v;
    mean /= n;
    if (mean == 0.0) return 0.0;
    double var = 0.0;
    for (double v : f_bar_) var += (v - mean) * (v - mean);
    var /= n;
    return std::sqrt(var) / mean;
}

}  // namespace unipool
