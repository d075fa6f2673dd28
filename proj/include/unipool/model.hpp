#pragma once

// Decoder-only transformer with a per-layer choice of dense SwiGLU FFN or
// mixture-of-experts FFN over a (possibly shared) expert bank. Pre-norm
// blocks: RMSNorm -> rotary causal attention (grouped KV) -> residual ->
// RMSNorm -> FFN -> residual; final RMSNorm and an output projection that is
// either its own matrix or, with tied_embeddings, the embedding reused.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unipool/balancing.hpp"
#include "unipool/experts.hpp"
#include "unipool/optim.hpp"
#include "unipool/router.hpp"
#include "unipool/tensor.hpp"

namespace unipool {

struct ModelConfig {
    int layers = 4;
    int hidden = 64;
    int heads = 4;
    int kv_heads = 2;
    int ffn_dim = 0;  // 0 -> 4 * hidden
    int vocab_size = 259;
    int seq_len = 128;

    enum class Mode { dense, moe };
    Mode mode = Mode::moe;

    int groups = 1;     // expert ownership groups; layers -> layer-private
    int pool_size = 0;  // total experts M (groups * experts-per-group)
    int top_k = 1;
    RouterKind router = RouterKind::norm_router;
    double alpha = 0.0;       // per-layer balancing coefficient
    double alpha_pool = 0.0;  // pool balancing coefficient
    double router_eps = 1e-6;

    double rope_base = 1e6;
    double init_std = 0.01;
    bool tied_embeddings = false;  // reuse the embedding as the output projection

    int group_size() const { return pool_size / groups; }
    int resolved_ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden; }

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Strict JSON (unknown keys rejected). Accepts either "pool_size" or
    // "experts_per_group" (exactly one) in moe mode.
    static ModelConfig from_json_text(const std::string& text);
    std::string to_json_text() const;  // canonical, key-sorted
};

struct AttentionBlock {
    Tensor attn_norm;  // (hidden)
    Tensor wq, wk, wv, wo;
    Tensor ffn_norm;  // (hidden)
};

struct ForwardArtifacts {
    Tensor logits;  // (batch*seq, vocab)
    // One entry per MoE layer, in layer order; empty in dense mode.
    std::vector<RouterDecision> decisions;
    std::vector<LayerRoutingStats> stats;
};

// Per-layer routing replacement for probes and equivalence oracles.
struct RoutingIntervention {
    enum class Kind {
        self,             // run the normal path (probe control)
        restrict_domain,  // learned routing over a contiguous ID range
        random_choice,    // uniform k-distinct draw from an ID set, gates 1/k
    };
    Kind kind = Kind::self;
    // Target layer. For restrict_domain, -1 applies the restriction at every
    // MoE layer with the domain shifted by layer*(dom_end-dom_begin): layer l
    // routes over [l*W, (l+1)*W), the private-slice constraint that relabels
    // a shared pool into per-layer blocks.
    int layer = -1;
    int dom_begin = 0, dom_end = 0;  // restrict_domain range (global IDs)
    std::vector<int> choice_set;     // random_choice candidates (global IDs)
    uint64_t seed = 0;
};

class Model {
public:
    ModelConfig config;
    Tensor embed;     // (vocab, hidden)
    Tensor out_norm;  // (hidden)
    Tensor out_proj;  // (hidden, vocab); empty when tied_embeddings
    std::vector<AttentionBlock> blocks;
    std::vector<RouterParams> routers;  // moe mode
    std::optional<ExpertBank> bank;     // moe mode
    std::vector<Expert> dense_ffn;      // dense mode

    // Stable-ordered trainable registry; asserts no storage is listed twice
    // (a shared expert must appear exactly once). The Monte Carlo constant c
    // is not a parameter and never appears here.
    std::vector<NamedParam> parameters() const;

    Model clone() const;  // deep parameter copy, same config
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// tokens: batch windows flattened row-major, tokens.size() = batch * T.
ForwardArtifacts forward(Model& m, const std::vector<int>& tokens, int batch,
                         const RoutingIntervention* iv = nullptr);

struct LossBreakdown {
    Tensor total;      // graph scalar: ce + active balancing term
    double ce = 0.0;
    double aux = 0.0;   // per-layer loss, averaged over layers
    double pool = 0.0;  // pool loss
};

// targets: batch * (T-1) next-token IDs (within-window shift). f_bar must be
// supplied when alpha_pool > 0 and is read as a detached constant.
LossBreakdown total_loss(const ForwardArtifacts& art,
                         const std::vector<int>& targets,
                         const ModelConfig& cfg, int batch,
                         const std::vector<double>* f_bar = nullptr);

struct ParamCounts {
    int64_t embedding = 0;
    int64_t attention = 0;
    int64_t expert = 0;
    int64_t router = 0;
    int64_t norms = 0;
    int64_t total = 0;
};
ParamCounts count_params(const Model& m);

}  // namespace unipool
