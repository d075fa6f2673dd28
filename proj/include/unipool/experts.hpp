#pragma once

// The expert bank: one flat pool of SwiGLU FFN experts partitioned into G
// ownership groups over L layers. G = L gives layer-private experts (the
// vanilla baseline), G = 1 a single globally shared pool, intermediate G a
// blockwise-shared pool. Layer l belongs to group l / (L/G) and routes over
// the contiguous ID slice [g*M/G, (g+1)*M/G).

#include <cstdint>
#include <vector>

#include "unipool/common.hpp"
#include "unipool/router.hpp"
#include "unipool/tensor.hpp"

namespace unipool {

struct Expert {
    Tensor gate;  // (hidden, ffn)
    Tensor up;    // (hidden, ffn)
    Tensor down;  // (ffn, hidden)
};

class ExpertBank {
public:
    ExpertBank(int layers, int groups, int pool_size, int hidden, int ffn_dim);

    int layers() const { return layers_; }
    int groups() const { return groups_; }
    int pool_size() const { return pool_size_; }
    int group_size() const { return pool_size_ / groups_; }
    int hidden() const { return hidden_; }
    int ffn_dim() const { return ffn_dim_; }

    int group_of_layer(int layer) const;
    int slice_offset(int layer) const;  // first global expert ID for a layer

    Expert& expert(int id);
    const Expert& expert(int id) const;

    // Token-row evaluation counter: +1 per (token, slot) dispatched. Lets
    // tests assert the matched-active-compute property (L*k per token).
    int64_t eval_count() const { return eval_count_; }
    void reset_eval_count() { eval_count_ = 0; }
    void note_evals(int64_t n) { eval_count_ += n; }

private:
    int layers_, groups_, pool_size_, hidden_, ffn_dim_;
    std::vector<Expert> experts_;
    int64_t eval_count_ = 0;
};

// Validates the partition (G divides L, G divides M, per-group pool >= k)
// and initializes every expert matrix from N(0, init_std^2).
ExpertBank build_bank(int layers, int groups, int pool_size, int k, int hidden,
                      int ffn_dim, double init_std, Rng& rng);

// y = (SiLU(x Wg) ⊙ (x Wu)) Wd
Tensor expert_forward(const ExpertBank& bank, int id, const Tensor& x);

// Expert-major dispatch: gathers each expert's token rows, runs the expert
// once on the block, scales by gates, scatter-adds into token order.
// Equivalent to the per-token loop over Eq-style sums.
Tensor dispatch_combine(ExpertBank& bank, const Tensor& x,
                        const RouterDecision& decision);

// The grouping built inside dispatch_combine, exposed for its round-trip
// invariant: every (token, slot) appears in exactly one expert bucket.
struct DispatchPlan {
    // bucket[e] = (token, slot) pairs, ascending token then slot; e is local
    // to the decision's slice.
    std::vector<std::vector<std::pair<int, int>>> buckets;
    // Position of each (token, slot) in expert-major traversal order; a
    // permutation of 0..tokens*k-1 (the "unpermute" map back to token order).
    std::vector<int> inverse;
};
DispatchPlan build_dispatch_plan(const RouterDecision& decision);

int64_t expert_param_count(int hidden, int ffn_dim);      // one expert
int64_t bank_param_count(const ExpertBank& bank);         // whole pool

// Pool sizing: matched keeps total expert parameters equal to the private
// baseline; reduced scales it down, rounding to the nearest integer but never
// below min_experts (keep at least top_k experts selectable).
int matched_pool_size(int experts_per_layer, int layers);
int reduced_pool_size(int matched, double fraction, int min_experts = 1);

}  // namespace unipool
