#pragma once

// Load-balancing losses and the pool statistics accumulator.
//
// Per-layer loss (Switch form):  alpha * E * sum_i f_i * P_i
//   f_i: fraction of (token, slot) assignments landing on expert i, each
//        slot weighted 1/k so f sums to 1; discrete, gradient-free.
//   P_i: mean over tokens of the i-th score; carries gradient.
// Pool loss: alpha_pool * M * sum_i fbar_i * P_i^(l), averaged over layers,
//   where fbar is the layer-averaged dispatch fraction from the *previous*
//   micro-batch (one-step-behind, gradient-free, initialized uniform).

#include <cstdint>
#include <vector>

#include "unipool/common.hpp"
#include "unipool/router.hpp"
#include "unipool/tensor.hpp"

namespace unipool {

struct LayerRoutingStats {
    std::vector<double> f;  // length num_choices, sums to 1
    Tensor P;               // (1, num_choices), graph-attached mean score
    int num_choices = 0;
    int slice_offset = 0;
};

// pool_size must equal the decision's choice count: stats live in the
// decision's own (slice-local) frame.
LayerRoutingStats layer_stats(const RouterDecision& decision, int pool_size);

// The layer's f embedded into the global pool frame of length M.
std::vector<double> global_f(const LayerRoutingStats& stats, int M);

Tensor per_layer_aux(const LayerRoutingStats& stats, double alpha);

// Decomposed pool loss: (1/L) * sum_l alpha_pool * M * <fbar[slice_l], P_l>.
// fbar is treated as a constant (detached); gradient flows through P only.
Tensor pool_aux(const std::vector<LayerRoutingStats>& per_layer,
                const std::vector<double>& f_bar, double alpha_pool, int M);

// Holds fbar across micro-batches. Reads during a micro-batch observe the
// value produced by the previous one; step() must run exactly once per
// micro-batch, after every layer's forward. The event log (enabled in tests)
// records the read/write order so the one-step-behind scheme is assertable.
class PoolStatsAccumulator {
public:
    explicit PoolStatsAccumulator(int pool_size);

    const std::vector<double>& f_bar() const;
    int pool_size() const { return static_cast<int>(f_bar_.size()); }

    // Replace fbar with the mean of this micro-batch's per-layer global f.
    void step(const std::vector<std::vector<double>>& per_layer_global_f);

    // min / max / coefficient of variation of fbar, for the metrics log.
    double f_min() const;
    double f_max() const;
    double f_cv() const;

    void enable_event_log(bool on) { log_events_ = on; events_.clear(); }
    const std::string& events() const { return events_; }

    // Serialization access for checkpoints.
    std::vector<double>& raw() { return f_bar_; }

private:
    std::vector<double> f_bar_;
    bool log_events_ = false;
    mutable std::string events_;
};

}  // namespace unipool
