#include "unipool/model.hpp"

#include <json.hpp>

#include <cmath>
#include <unordered_set>

#include "unipool/ops.hpp"

namespace unipool {

namespace {

constexpr double kNormEps = 1e-5;
// Fixed calibration seed: the rescaling constant depends only on (E, k) and
// the build, never on the experiment seed.
constexpr uint64_t kCalibrationSeed = 0xCA11B8A7Eull;
constexpr int64_t kCalibrationSamples = 100000;

using nlohmann::json;

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
    throw ConfigError("model config: field '" + field + "' " + why);
}

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok)
            throw ConfigError("config: unknown field '" + scope + it.key() + "'");
    }
}

template <typename T>
T take(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("model config: field '") + key +
                          "' has the wrong type");
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) bad_field("layers", "must be >= 1");
    if (hidden < 1) bad_field("hidden", "must be >= 1");
    if (heads < 1) bad_field("heads", "must be >= 1");
    if (hidden % heads != 0) bad_field("heads", "must divide hidden");
    if (kv_heads < 1) bad_field("kv_heads", "must be >= 1");
    if (heads % kv_heads != 0) bad_field("kv_heads", "must divide heads");
    if ((hidden / heads) % 2 != 0)
        bad_field("heads", "must give an even head dim for rotary pairs");
    if (ffn_dim < 0) bad_field("ffn_dim", "must be positive (or 0 for 4*hidden)");
    if (vocab_size < 2) bad_field("vocab_size", "must be >= 2");
    if (seq_len < 2) bad_field("seq_len", "must be >= 2");
    if (rope_base <= 0.0) bad_field("rope_base", "must be positive");
    if (init_std <= 0.0) bad_field("init_std", "must be positive");
    if (mode == Mode::dense) return;

    if (groups < 1 || groups > layers)
        bad_field("groups", "must lie in [1, layers]");
    if (layers % groups != 0) bad_field("groups", "must divide layers");
    if (pool_size < 1) bad_field("pool_size", "must be set and positive in moe mode");
    if (pool_size % groups != 0) bad_field("pool_size", "must be a multiple of groups");
    if (top_k < 1) bad_field("top_k", "must be >= 1");
    if (group_size() < top_k)
        bad_field("top_k", "exceeds the per-group pool of " +
                               std::to_string(group_size()));
    if (alpha < 0.0) bad_field("alpha", "must be >= 0");
    if (alpha_pool < 0.0) bad_field("alpha_pool", "must be >= 0");
    if (alpha > 0.0 && alpha_pool > 0.0)
        bad_field("alpha_pool", "cannot be combined with per-layer alpha; "
                                "exactly one balancing loss may be active");
    if (router_eps < 0.0) bad_field("router_eps", "must be >= 0");
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
    reject_unknown(j,
                   {"layers", "hidden", "heads", "kv_heads", "ffn_dim",
                    "vocab_size", "seq_len", "mode", "groups", "pool_size",
                    "experts_per_group", "top_k", "router", "alpha", "alpha_pool",
                    "router_eps", "rope_base", "init_std", "tied_embeddings"},
                   "model.");

    ModelConfig c;
    c.layers = take(j, "layers", c.layers);
    c.hidden = take(j, "hidden", c.hidden);
    c.heads = take(j, "heads", c.heads);
    c.kv_heads = take(j, "kv_heads", c.kv_heads);
    c.ffn_dim = take(j, "ffn_dim", c.ffn_dim);
    c.vocab_size = take(j, "vocab_size", c.vocab_size);
    c.seq_len = take(j, "seq_len", c.seq_len);
    const std::string mode = take<std::string>(j, "mode", "moe");
    if (mode == "dense")
        c.mode = Mode::dense;
    else if (mode == "moe")
        c.mode = Mode::moe;
    else
        bad_field("mode", "must be 'dense' or 'moe', got '" + mode + "'");

    if (c.mode == Mode::dense) {
        for (const char* k : {"groups", "pool_size", "experts_per_group", "top_k",
                              "router", "alpha", "alpha_pool", "router_eps"})
            if (j.contains(k))
                bad_field(k, "is a mixture field; remove it in dense mode");
    } else {
        c.groups = take(j, "groups", 1);
        const bool has_pool = j.contains("pool_size");
        const bool has_epg = j.contains("experts_per_group");
        if (has_pool && has_epg)
            bad_field("experts_per_group", "conflicts with pool_size; give one");
        if (!has_pool && !has_epg)
            bad_field("pool_size", "or experts_per_group is required in moe mode");
        if (has_pool)
            c.pool_size = take(j, "pool_size", 0);
        else
            c.pool_size = take(j, "experts_per_group", 0) * c.groups;
        c.top_k = take(j, "top_k", 1);
        c.router = router_kind_from(take<std::string>(j, "router", "norm_router"));
        c.alpha = take(j, "alpha", 0.0);
        c.alpha_pool = take(j, "alpha_pool", 0.0);
        c.router_eps = take(j, "router_eps", 1e-6);
    }
    c.rope_base = take(j, "rope_base", c.rope_base);
    c.init_std = take(j, "init_std", c.init_std);
    c.tied_embeddings = take(j, "tied_embeddings", c.tied_embeddings);
    c.validate();
    return c;
}

std::string ModelConfig::to_json_text() const {
    json j;
    j["layers"] = layers;
    j["hidden"] = hidden;
    j["heads"] = heads;
    j["kv_heads"] = kv_heads;
    j["ffn_dim"] = resolved_ffn();
    j["vocab_size"] = vocab_size;
    j["seq_len"] = seq_len;
    j["mode"] = mode == Mode::dense ? "dense" : "moe";
    if (mode == Mode::moe) {
        j["groups"] = groups;
        j["pool_size"] = pool_size;
        j["top_k"] = top_k;
        j["router"] = router_kind_name(router);
        j["alpha"] = alpha;
        j["alpha_pool"] = alpha_pool;
        j["router_eps"] = router_eps;
    }
    j["rope_base"] = rope_base;
    j["init_std"] = init_std;
    j["tied_embeddings"] = tied_embeddings;
    return j.dump();
}

// ---------------------------------------------------------------------------
// construction

namespace {
Tensor init_matrix(int rows, int cols, double std, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(rows) * cols);
    for (double& v : w) v = std * rng.gaussian();
    return Tensor::param({rows, cols}, std::move(w));
}
Tensor ones_param(int n) {
    return Tensor::param({n}, std::vector<double>(static_cast<size_t>(n), 1.0));
}
}  // namespace

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(seed);
    const int H = cfg.hidden;
    const int hd = H / cfg.heads;
    const int kvw = cfg.kv_heads * hd;
    const int F = cfg.resolved_ffn();

    m.embed = init_matrix(cfg.vocab_size, H, cfg.init_std, rng);
    if (!cfg.tied_embeddings)
        m.out_proj = init_matrix(H, cfg.vocab_size, cfg.init_std, rng);
    m.out_norm = ones_param(H);

    m.blocks.resize(static_cast<size_t>(cfg.layers));
    for (auto& blk : m.blocks) {
        blk.attn_norm = ones_param(H);
        blk.wq = init_matrix(H, H, cfg.init_std, rng);
        blk.wk = init_matrix(H, kvw, cfg.init_std, rng);
        blk.wv = init_matrix(H, kvw, cfg.init_std, rng);
        blk.wo = init_matrix(H, H, cfg.init_std, rng);
        blk.ffn_norm = ones_param(H);
    }

    if (cfg.mode == ModelConfig::Mode::dense) {
        m.dense_ffn.resize(static_cast<size_t>(cfg.layers));
        for (auto& f : m.dense_ffn) {
            f.gate = init_matrix(H, F, cfg.init_std, rng);
            f.up = init_matrix(H, F, cfg.init_std, rng);
            f.down = init_matrix(F, H, cfg.init_std, rng);
        }
        return m;
    }

    double c = 1.0;
    if (cfg.router == RouterKind::norm_router)
        c = monte_carlo_c(cfg.group_size(), cfg.top_k, kCalibrationSamples,
                          kCalibrationSeed);
    m.routers.resize(static_cast<size_t>(cfg.layers));
    for (auto& r : m.routers) {
        r.kind = cfg.router;
        r.weight = init_matrix(cfg.group_size(), H, cfg.init_std, rng);
        if (cfg.router == RouterKind::norm_router) {
            r.sigma = Tensor::param({1}, {1.0});
            r.c = c;
        }
        r.eps = cfg.router_eps;
    }
    m.bank = build_bank(cfg.layers, cfg.groups, cfg.pool_size, cfg.top_k, H, F,
                        cfg.init_std, rng);
    return m;
}

std::vector<NamedParam> Model::parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"embed.weight", embed});
    if (!config.tied_embeddings) out.push_back({"output.weight", out_proj});
    out.push_back({"final_norm.weight", out_norm});
    for (size_t l = 0; l < blocks.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm.weight", blocks[l].attn_norm});
        out.push_back({p + "attn.wq", blocks[l].wq});
        out.push_back({p + "attn.wk", blocks[l].wk});
        out.push_back({p + "attn.wv", blocks[l].wv});
        out.push_back({p + "attn.wo", blocks[l].wo});
        out.push_back({p + "ffn_norm.weight", blocks[l].ffn_norm});
        if (config.mode == ModelConfig::Mode::moe) {
            out.push_back({p + "router.weight", routers[l].weight});
            if (routers[l].sigma.defined())
                out.push_back({p + "router.sigma", routers[l].sigma});
        } else {
            out.push_back({p + "ffn.gate", dense_ffn[l].gate});
            out.push_back({p + "ffn.up", dense_ffn[l].up});
            out.push_back({p + "ffn.down", dense_ffn[l].down});
        }
    }
    if (bank) {
        for (int e = 0; e < bank->pool_size(); ++e) {
            const std::string p = "experts." + std::to_string(e) + ".";
            out.push_back({p + "gate", bank->expert(e).gate});
            out.push_back({p + "up", bank->expert(e).up});
            out.push_back({p + "down", bank->expert(e).down});
        }
    }
    std::unordered_set<const void*> seen;
    for (const auto& p : out)
        if (!seen.insert(p.tensor.id()).second)
            throw Error("parameter registry: storage registered twice at '" +
                        p.name + "'");
    return out;
}

Model Model::clone() const {
    Model m = build_model(config, 0);
    auto src = parameters();
    auto dst = m.parameters();
    for (size_t i = 0; i < src.size(); ++i)
        dst[i].tensor.mutable_data() = src[i].tensor.data();
    // Copy calibrated constants verbatim rather than trusting recomputation.
    for (size_t l = 0; l < routers.size(); ++l) m.routers[l].c = routers[l].c;
    return m;
}

// ---------------------------------------------------------------------------
// forward

namespace {

Tensor ffn_swiglu(const Expert& e, const Tensor& x) {
    Tensor a = ops::silu(ops::matmul(x, e.gate));
    Tensor b = ops::matmul(x, e.up);
    return ops::matmul(ops::mul(a, b), e.down);
}

std::vector<double> fractions_from_topk(const RouterDecision& d, int offset,
                                        int width) {
    std::vector<double> f(static_cast<size_t>(width), 0.0);
    const double w = 1.0 / (static_cast<double>(d.tokens) * d.k);
    for (int id : d.topk) f[static_cast<size_t>(id - offset)] += w;
    return f;
}

RouterDecision routed_decision(Model& m, int layer, const Tensor& x,
                               const RoutingIntervention* iv) {
    RouterParams& rp = m.routers[layer];
    ExpertBank& bank = *m.bank;
    const int off = bank.slice_offset(layer);
    const int gsz = bank.group_size();
    const int k = m.config.top_k;

    if (iv && (iv->layer == layer || iv->layer == -1) &&
        iv->kind == RoutingIntervention::Kind::restrict_domain) {
        const int width = iv->dom_end - iv->dom_begin;
        const int begin =
            iv->layer == -1 ? layer * width + iv->dom_begin : iv->dom_begin;
        const int end = begin + width;
        if (begin < off || end > off + gsz || width < k)
            throw ConfigError("intervention: domain [" + std::to_string(begin) +
                              ", " + std::to_string(end) +
                              ") invalid for layer slice [" + std::to_string(off) +
                              ", " + std::to_string(off + gsz) + ")");
        RouterParams sub;
        sub.kind = rp.kind;
        sub.weight = ops::slice_rows(rp.weight, begin - off, end - off);
        sub.sigma = rp.sigma;
        sub.c = rp.c;
        sub.eps = rp.eps;
        return route(x, sub, k, begin);
    }

    RouterDecision d = route(x, rp, k, off);
    if (iv && iv->layer == layer &&
        iv->kind == RoutingIntervention::Kind::random_choice) {
        if (static_cast<int>(iv->choice_set.size()) < k)
            throw ConfigError("intervention: choice set smaller than k");
        for (int id : iv->choice_set)
            if (id < off || id >= off + gsz)
                throw ConfigError("intervention: choice " + std::to_string(id) +
                                  " outside layer slice");
        Rng rng(iv->seed);
        std::vector<int> pool(iv->choice_set);
        for (int t = 0; t < d.tokens; ++t) {
            // partial Fisher-Yates: k distinct uniform draws
            for (int j = 0; j < k; ++j) {
                const size_t pick =
                    j + static_cast<size_t>(rng.bounded(pool.size() - j));
                std::swap(pool[j], pool[pick]);
                d.topk[static_cast<size_t>(t) * k + j] = pool[j];
            }
        }
        d.gates = Tensor::full({d.tokens, k}, 1.0 / k);
    }
    return d;
}

}  // namespace

ForwardArtifacts forward(Model& m, const std::vector<int>& tokens, int batch,
                         const RoutingIntervention* iv) {
    const ModelConfig& cfg = m.config;
    if (batch < 1 || tokens.empty() || tokens.size() % static_cast<size_t>(batch) != 0)
        throw ShapeError("forward: " + std::to_string(tokens.size()) +
                         " tokens not divisible into batch of " +
                         std::to_string(batch));
    const int T = static_cast<int>(tokens.size()) / batch;
    const int hd = cfg.hidden / cfg.heads;

    ForwardArtifacts art;
    Tensor h = ops::embedding(m.embed, tokens);
    for (int l = 0; l < cfg.layers; ++l) {
        AttentionBlock& blk = m.blocks[static_cast<size_t>(l)];
        Tensor a = ops::rmsnorm(h, blk.attn_norm, kNormEps);
        Tensor q = ops::rope(ops::matmul(a, blk.wq), batch, T, cfg.heads, hd,
                             cfg.rope_base);
        Tensor kk = ops::rope(ops::matmul(a, blk.wk), batch, T, cfg.kv_heads, hd,
                              cfg.rope_base);
        Tensor v = ops::matmul(a, blk.wv);
        Tensor attn = ops::mha_causal(q, kk, v, batch, T, cfg.heads, cfg.kv_heads);
        h = ops::add(h, ops::matmul(attn, blk.wo));

        Tensor x = ops::rmsnorm(h, blk.ffn_norm, kNormEps);
        Tensor ffn_out;
        if (cfg.mode == ModelConfig::Mode::dense) {
            ffn_out = ffn_swiglu(m.dense_ffn[static_cast<size_t>(l)], x);
        } else {
            RouterDecision d = routed_decision(m, l, x, iv);
            ffn_out = dispatch_combine(*m.bank, x, d);

            // Balancing statistics: P is recomputed from a detached hidden
            // state so the aux losses reach router parameters only.
            const int off = m.bank->slice_offset(l);
            LayerRoutingStats st;
            st.num_choices = m.bank->group_size();
            st.slice_offset = off;
            st.f = fractions_from_topk(d, off, st.num_choices);
            st.P = ops::mean_over_rows(
                router_scores(x.detach(), m.routers[static_cast<size_t>(l)]));
            art.decisions.push_back(std::move(d));
            art.stats.push_back(std::move(st));
        }
        h = ops::add(h, ffn_out);
    }
    h = ops::rmsnorm(h, m.out_norm, kNormEps);
    art.logits = m.config.tied_embeddings ? ops::matmul_nt(h, m.embed)
                                          : ops::matmul(h, m.out_proj);
    return art;
}

LossBreakdown total_loss(const ForwardArtifacts& art,
                         const std::vector<int>& targets,
                         const ModelConfig& cfg, int batch,
                         const std::vector<double>* f_bar) {
    const int rows = art.logits.dim(0);
    if (rows % batch != 0)
        throw ShapeError("total_loss: logit rows not divisible by batch");
    const int T = rows / batch;
    if (static_cast<int>(targets.size()) != batch * (T - 1))
        throw ShapeError("total_loss: want " + std::to_string(batch * (T - 1)) +
                         " targets for batch " + std::to_string(batch) + " x T " +
                         std::to_string(T) + ", got " +
                         std::to_string(targets.size()));

    // Next-token shift inside each window: position T-1 predicts nothing.
    std::vector<int> rows_with_targets;
    rows_with_targets.reserve(targets.size());
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t + 1 < T; ++t) rows_with_targets.push_back(b * T + t);

    LossBreakdown out;
    Tensor ce = ops::cross_entropy_mean(
        ops::gather_rows(art.logits, rows_with_targets), targets);
    out.ce = ce.item();
    out.total = ce;

    if (cfg.mode == ModelConfig::Mode::moe && cfg.alpha > 0.0) {
        Tensor sum;
        for (const auto& st : art.stats) {
            Tensor term = per_layer_aux(st, cfg.alpha);
            sum = sum.defined() ? ops::add(sum, term) : term;
        }
        Tensor aux = ops::scale(sum, 1.0 / static_cast<double>(art.stats.size()));
        out.aux = aux.item();
        out.total = ops::add(out.total, aux);
    }
    if (cfg.mode == ModelConfig::Mode::moe && cfg.alpha_pool > 0.0) {
        if (!f_bar)
            throw ConfigError("total_loss: pool loss active but no f_bar supplied");
        Tensor pool = pool_aux(art.stats, *f_bar, cfg.alpha_pool, cfg.pool_size);
        out.pool = pool.item();
        out.total = ops::add(out.total, pool);
    }
    return out;
}

ParamCounts count_params(const Model& m) {
    auto n = [](const Tensor& t) { return t.numel(); };
    ParamCounts c;
    c.embedding = n(m.embed);
    if (!m.config.tied_embeddings) c.embedding += n(m.out_proj);
    c.norms = n(m.out_norm);
    for (const auto& blk : m.blocks) {
        c.attention += n(blk.wq) + n(blk.wk) + n(blk.wv) + n(blk.wo);
        c.norms += n(blk.attn_norm) + n(blk.ffn_norm);
    }
    for (const auto& r : m.routers) {
        c.router += n(r.weight);
        if (r.sigma.defined()) c.router += n(r.sigma);
    }
    if (m.bank) c.expert = bank_param_count(*m.bank);
    for (const auto& f : m.dense_ffn)
        c.expert += n(f.gate) + n(f.up) + n(f.down);
    c.total = c.embedding + c.attention + c.expert + c.router + c.norms;
    return c;
}

}  // namespace unipool
