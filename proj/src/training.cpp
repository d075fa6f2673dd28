#include "unipool/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "unipool/ops.hpp"

namespace unipool {

namespace {

using nlohmann::json;

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
    throw ConfigError("config: field '" + field + "' " + why);
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
        throw ConfigError(std::string("config: field '") + key +
                          "' has the wrong type");
    }
}

TrainingConfig training_from_json(const json& j) {
    reject_unknown(j,
                   {"corpus", "val_fraction", "batch_size", "steps", "lr",
                    "min_lr", "warmup_fraction", "beta1", "beta2", "adam_eps",
                    "weight_decay", "clip_norm", "eval_every",
                    "checkpoint_every"},
                   "training.");
    TrainingConfig t;
    t.corpus = take<std::string>(j, "corpus", t.corpus);
    t.val_fraction = take(j, "val_fraction", t.val_fraction);
    t.batch_size = take(j, "batch_size", t.batch_size);
    t.steps = take(j, "steps", t.steps);
    t.lr = take(j, "lr", t.lr);
    t.min_lr = take(j, "min_lr", t.min_lr);
    t.warmup_fraction = take(j, "warmup_fraction", t.warmup_fraction);
    t.beta1 = take(j, "beta1", t.beta1);
    t.beta2 = take(j, "beta2", t.beta2);
    t.adam_eps = take(j, "adam_eps", t.adam_eps);
    t.weight_decay = take(j, "weight_decay", t.weight_decay);
    t.clip_norm = take(j, "clip_norm", t.clip_norm);
    t.eval_every = take(j, "eval_every", t.eval_every);
    t.checkpoint_every = take(j, "checkpoint_every", t.checkpoint_every);
    return t;
}

json training_to_json(const TrainingConfig& t) {
    json j;
    j["corpus"] = t.corpus;
    j["val_fraction"] = t.val_fraction;
    j["batch_size"] = t.batch_size;
    j["steps"] = t.steps;
    j["lr"] = t.lr;
    j["min_lr"] = t.min_lr;
    j["warmup_fraction"] = t.warmup_fraction;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["adam_eps"] = t.adam_eps;
    j["weight_decay"] = t.weight_decay;
    j["clip_norm"] = t.clip_norm;
    j["eval_every"] = t.eval_every;
    j["checkpoint_every"] = t.checkpoint_every;
    return j;
}

AnalysisConfig analysis_from_json(const json& j) {
    reject_unknown(j, {"heldout_fraction", "top_n"}, "analysis.");
    AnalysisConfig a;
    a.heldout_fraction = take(j, "heldout_fraction", a.heldout_fraction);
    a.top_n = take(j, "top_n", a.top_n);
    return a;
}

// Batched window extraction: `which[i]` selects a window; outputs are the
// flattened inputs (B*T) and the within-window next-token targets (B*(T-1)).
void pack_windows(const std::vector<int>& tokens, const std::vector<int64_t>& which,
                  int seq_len, std::vector<int>* inputs,
                  std::vector<int>* targets) {
    inputs->clear();
    targets->clear();
    inputs->reserve(which.size() * seq_len);
    targets->reserve(which.size() * (seq_len - 1));
    for (int64_t w : which) {
        const int* base = tokens.data() + w * seq_len;
        inputs->insert(inputs->end(), base, base + seq_len);
        targets->insert(targets->end(), base + 1, base + seq_len);
    }
}

AdamWConfig adamw_config(const TrainingConfig& t) {
    AdamWConfig c;
    c.beta1 = t.beta1;
    c.beta2 = t.beta2;
    c.eps = t.adam_eps;
    c.weight_decay = t.weight_decay;
    return c;
}

}  // namespace

void TrainingConfig::validate() const {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        bad_field("training.val_fraction", "must lie in [0, 1)");
    if (batch_size < 1) bad_field("training.batch_size", "must be >= 1");
    if (steps < 0) bad_field("training.steps", "must be >= 0");
    if (lr <= 0.0) bad_field("training.lr", "must be positive");
    if (min_lr <= 0.0 || min_lr > lr)
        bad_field("training.min_lr", "must be positive and <= lr");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        bad_field("training.warmup_fraction", "must lie in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0) bad_field("training.beta1", "must lie in [0, 1)");
    if (beta2 < 0.0 || beta2 >= 1.0) bad_field("training.beta2", "must lie in [0, 1)");
    if (adam_eps <= 0.0) bad_field("training.adam_eps", "must be positive");
    if (weight_decay < 0.0) bad_field("training.weight_decay", "must be >= 0");
    if (clip_norm < 0.0)
        bad_field("training.clip_norm", "must be >= 0 (0 disables clipping)");
    if (eval_every < 0) bad_field("training.eval_every", "must be >= 0");
    if (checkpoint_every < 0) bad_field("training.checkpoint_every", "must be >= 0");
}

void AnalysisConfig::validate() const {
    if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0)
        bad_field("analysis.heldout_fraction", "must lie in (0, 1)");
    if (top_n < 1) bad_field("analysis.top_n", "must be >= 1");
}

void ExperimentConfig::validate() const {
    model.validate();
    training.validate();
    analysis.validate();
    if (output_dir.empty()) bad_field("output_dir", "must not be empty");
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    reject_unknown(j, {"model", "training", "analysis", "output_dir", "seed"}, "");

    ExperimentConfig c;
    if (!j.contains("model"))
        throw ConfigError("config: missing required 'model' block");
    c.model = ModelConfig::from_json_text(j.at("model").dump());
    if (j.contains("training")) {
        if (!j.at("training").is_object())
            bad_field("training", "must be an object");
        c.training = training_from_json(j.at("training"));
    }
    if (j.contains("analysis")) {
        if (!j.at("analysis").is_object())
            bad_field("analysis", "must be an object");
        c.analysis = analysis_from_json(j.at("analysis"));
    }
    c.output_dir = take(j, "output_dir", c.output_dir);
    c.seed = take(j, "seed", c.seed);
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["model"] = json::parse(model.to_json_text());
    j["training"] = training_to_json(training);
    j["analysis"]["heldout_fraction"] = analysis.heldout_fraction;
    j["analysis"]["top_n"] = analysis.top_n;
    j["output_dir"] = output_dir;
    j["seed"] = seed;
    return j.dump();  // nlohmann objects iterate key-sorted -> canonical
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(to_json_text())); }

// --- corpus ------------------------------------------------------------------

Corpus corpus_from_bytes(const std::string& bytes, double val_fraction) {
    if (bytes.empty()) throw IoError("corpus: no data");
    const int64_t n = static_cast<int64_t>(bytes.size());
    const int64_t val = std::llround(static_cast<double>(n) * val_fraction);
    Corpus c;
    c.train_tokens.reserve(n - val);
    c.val_tokens.reserve(val);
    for (int64_t i = 0; i < n; ++i) {
        const int tok = static_cast<unsigned char>(bytes[static_cast<size_t>(i)]);
        (i < n - val ? c.train_tokens : c.val_tokens).push_back(tok);
    }
    return c;
}

Corpus load_corpus(const std::string& path, double val_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return corpus_from_bytes(ss.str(), val_fraction);
}

int64_t window_count(int64_t tokens, int seq_len) { return tokens / seq_len; }

std::vector<int> window_tokens(const std::vector<int>& tokens, int64_t w,
                               int seq_len) {
    const auto begin = tokens.begin() + w * seq_len;
    return std::vector<int>(begin, begin + seq_len);
}

// --- evaluation --------------------------------------------------------------

double perplexity_from_loss(double loss) { return std::exp(loss); }

EvalResult evaluate(Model& m, const std::vector<int>& tokens, int batch_size,
                    const RoutingIntervention* iv) {
    const int T = m.config.seq_len;
    const int64_t windows = window_count(static_cast<int64_t>(tokens.size()), T);
    if (windows == 0)
        throw ConfigError("evaluate: split has no full window of " +
                          std::to_string(T) + " tokens");
    if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");

    // Same loss path as training, with both balancing terms switched off.
    ModelConfig plain = m.config;
    plain.alpha = 0.0;
    plain.alpha_pool = 0.0;

    NoGradGuard ng;
    EvalResult r;
    std::vector<int> inputs, targets;
    for (int64_t w0 = 0; w0 < windows; w0 += batch_size) {
        const int b = static_cast<int>(std::min<int64_t>(batch_size, windows - w0));
        std::vector<int64_t> which(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i) which[static_cast<size_t>(i)] = w0 + i;
        pack_windows(tokens, which, T, &inputs, &targets);
        auto art = forward(m, inputs, b, iv);
        auto lb = total_loss(art, targets, plain, b, nullptr);
        const int64_t batch_targets = static_cast<int64_t>(b) * (T - 1);
        r.ce += lb.ce * static_cast<double>(batch_targets);
        r.target_tokens += batch_targets;
        r.windows += b;
    }
    r.ce /= static_cast<double>(r.target_tokens);
    r.ppl = perplexity_from_loss(r.ce);
    return r;
}

std::string metrics_json_line(const StepMetrics& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["lr"] = m.lr;
    j["ce"] = m.ce;
    j["aux"] = m.aux;
    j["pool"] = m.pool;
    j["f_bar_min"] = m.f_bar_min;
    j["f_bar_max"] = m.f_bar_max;
    j["f_bar_cv"] = m.f_bar_cv;
    if (m.val_ce) j["val_ce"] = *m.val_ce;
    return j.dump();
}

// --- trainer -----------------------------------------------------------------

namespace {

// The data stream gets its own generator, decorrelated from the weight-init
// stream so adding a parameter never reshuffles the batch order.
constexpr uint64_t kDataStreamSalt = 0x9E3779B97F4A7C15ull;

TrainState fresh_state(const ExperimentConfig& cfg) {
    TrainState st;
    st.model = build_model(cfg.model, cfg.seed);
    st.opt = std::make_unique<AdamW>(st.model.parameters(),
                                     adamw_config(cfg.training));
    if (cfg.model.mode == ModelConfig::Mode::moe)
        st.acc = std::make_unique<PoolStatsAccumulator>(cfg.model.pool_size);
    st.data_rng = Rng(cfg.seed ^ kDataStreamSalt);
    st.step = 0;
    return st;
}

}  // namespace

Trainer::Trainer(ExperimentConfig cfg) : Trainer(std::move(cfg), TrainState{}) {
    state_ = fresh_state(cfg_);
}

Trainer::Trainer(ExperimentConfig cfg, TrainState state)
    : cfg_(std::move(cfg)), state_(std::move(state)) {
    cfg_.validate();
    corpus_ = load_corpus(cfg_.training.corpus, cfg_.training.val_fraction);
    const int64_t windows = window_count(
        static_cast<int64_t>(corpus_.train_tokens.size()), cfg_.model.seq_len);
    if (windows == 0)
        throw ConfigError("training split has no full window of " +
                          std::to_string(cfg_.model.seq_len) + " tokens");
    if (state_.opt &&
        state_.model.config.to_json_text() != cfg_.model.to_json_text())
        throw ConfigError("resume state was built for a different model config");
    sched_.peak = cfg_.training.lr;
    sched_.min = cfg_.training.min_lr;
    sched_.warmup_fraction = cfg_.training.warmup_fraction;
    sched_.total_steps = cfg_.training.steps;
}

StepMetrics Trainer::run_step() {
    const auto& tc = cfg_.training;
    const int T = cfg_.model.seq_len;
    const int64_t windows =
        window_count(static_cast<int64_t>(corpus_.train_tokens.size()), T);
    const int64_t s = state_.step + 1;

    std::vector<int64_t> which(static_cast<size_t>(tc.batch_size));
    for (auto& w : which)
        w = static_cast<int64_t>(state_.data_rng.bounded(
            static_cast<uint64_t>(windows)));
    std::vector<int> inputs, targets;
    pack_windows(corpus_.train_tokens, which, T, &inputs, &targets);

    auto art = forward(state_.model, inputs, tc.batch_size);

    const bool moe = cfg_.model.mode == ModelConfig::Mode::moe;
    // Pool balancing reads the running assignment profile BEFORE this batch
    // folds its own statistics in (one-step-behind estimator).
    const std::vector<double>* f_bar =
        (moe && cfg_.model.alpha_pool > 0.0) ? &state_.acc->f_bar() : nullptr;
    auto lb = total_loss(art, targets, cfg_.model, tc.batch_size, f_bar);

    StepMetrics out;
    if (moe) {
        std::vector<std::vector<double>> per_layer;
        per_layer.reserve(art.stats.size());
        for (const auto& st : art.stats)
            per_layer.push_back(global_f(st, cfg_.model.pool_size));
        state_.acc->step(per_layer);
        out.f_bar_min = state_.acc->f_min();
        out.f_bar_max = state_.acc->f_max();
        out.f_bar_cv = state_.acc->f_cv();
    }

    const double total = lb.total.item();
    if (!std::isfinite(total)) {
        std::ostringstream why;
        why << "training aborted at step " << s << ": non-finite loss (ce="
            << lb.ce << ", aux=" << lb.aux << ", pool=" << lb.pool
            << ", last finite ce=" << last_finite_ce_;
        if (moe)
            why << ", f_bar min/max=" << state_.acc->f_min() << "/"
                << state_.acc->f_max();
        why << ")";
        throw NumericError(why.str());
    }
    last_finite_ce_ = lb.ce;

    backward(lb.total);
    if (tc.clip_norm > 0.0) clip_global_norm(state_.opt->mutable_params(), tc.clip_norm);
    const double lr = lr_at(s, sched_);
    state_.opt->step(lr);
    state_.opt->zero_grad();
    state_.step = s;

    out.step = s;
    out.lr = lr;
    out.ce = lb.ce;
    out.aux = lb.aux;
    out.pool = lb.pool;
    return out;
}

double Trainer::evaluate_val() {
    return evaluate(state_.model, corpus_.val_tokens, cfg_.training.batch_size).ce;
}

TrainSummary train_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);
    Trainer tr(cfg);

    const std::string metrics_path = cfg.output_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics log: " + metrics_path);

    const bool has_val =
        window_count(static_cast<int64_t>(tr.corpus().val_tokens.size()),
                     cfg.model.seq_len) > 0;

    TrainSummary sum;
    sum.metrics_path = metrics_path;
    for (int64_t s = 1; s <= cfg.training.steps; ++s) {
        StepMetrics m = tr.run_step();
        if (s == 1) sum.first_ce = m.ce;
        sum.final_ce = m.ce;
        const bool last = s == cfg.training.steps;
        const bool cadence =
            cfg.training.eval_every > 0 && s % cfg.training.eval_every == 0;
        if (has_val && (cadence || last)) {
            m.val_ce = tr.evaluate_val();
            sum.final_val_ce = *m.val_ce;
            sum.final_val_ppl = perplexity_from_loss(*m.val_ce);
        }
        metrics << metrics_json_line(m) << "\n";
        if (cfg.training.checkpoint_every > 0 && !last &&
            s % cfg.training.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.upl",
                          static_cast<long long>(s));
            save_checkpoint(cfg.output_dir + "/" + name, cfg, tr.state());
        }
    }
    metrics.flush();
    if (!metrics) throw IoError("failed writing metrics log: " + metrics_path);

    sum.steps = cfg.training.steps;
    sum.checkpoint_path = cfg.output_dir + "/model.upl";
    save_checkpoint(sum.checkpoint_path, cfg, tr.state());
    return sum;
}

// --- checkpointing -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'U', 'P', 'L', '1'};
enum : uint8_t { kDtF64 = 0, kDtU8 = 1, kDtI64 = 2 };

// All integers are serialized little-endian via explicit byte shifts, so the
// format is host-order independent.
void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("checkpoint: truncated file");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw IoError("checkpoint: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_record(std::ostream& os, const std::string& name, uint8_t dtype,
                const Shape& shape, const void* data, size_t bytes) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(dtype));
    put_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) put_u64(os, static_cast<uint64_t>(d));
    put_u64(os, static_cast<uint64_t>(bytes));
    os.write(reinterpret_cast<const char*>(data),
             static_cast<std::streamsize>(bytes));
}

void put_f64_record(std::ostream& os, const std::string& name,
                    const Shape& shape, const std::vector<double>& v) {
    // Doubles are bit-copied; the little-endian guarantee covers x86/ARM,
    // which is every target this tool supports.
    put_record(os, name, kDtF64, shape, v.data(), v.size() * sizeof(double));
}

void put_i64_record(std::ostream& os, const std::string& name, int64_t v) {
    uint64_t le = static_cast<uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(le >> (8 * i));
    put_record(os, name, kDtI64, {1}, b, 8);
}

struct RawRecord {
    uint8_t dtype = kDtF64;
    Shape shape;
    std::string bytes;
};

std::map<std::string, RawRecord> read_records(std::istream& is) {
    std::map<std::string, RawRecord> out;
    const uint32_t count = get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw IoError("checkpoint: truncated file");
        RawRecord r;
        int c = is.get();
        if (c == std::char_traits<char>::eof())
            throw IoError("checkpoint: truncated file");
        r.dtype = static_cast<uint8_t>(c);
        const uint32_t ndim = get_u32(is);
        r.shape.resize(ndim);
        for (auto& d : r.shape) d = static_cast<int>(get_u64(is));
        const uint64_t bytes = get_u64(is);
        r.bytes.resize(bytes);
        if (!is.read(r.bytes.data(), static_cast<std::streamsize>(bytes)))
            throw IoError("checkpoint: truncated file");
        if (!out.emplace(name, std::move(r)).second)
            throw IoError("checkpoint: duplicate record '" + name + "'");
    }
    return out;
}

const RawRecord& need(const std::map<std::string, RawRecord>& recs,
                      const std::string& name, uint8_t dtype) {
    auto it = recs.find(name);
    if (it == recs.end())
        throw IoError("checkpoint: missing record '" + name + "'");
    if (it->second.dtype != dtype)
        throw IoError("checkpoint: record '" + name + "' has the wrong dtype");
    return it->second;
}

std::vector<double> f64_of(const RawRecord& r, const std::string& name,
                           size_t expect) {
    if (r.bytes.size() != expect * sizeof(double))
        throw IoError("checkpoint: record '" + name + "' has the wrong size");
    std::vector<double> v(expect);
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
}

int64_t i64_of(const RawRecord& r, const std::string& name) {
    if (r.bytes.size() != 8)
        throw IoError("checkpoint: record '" + name + "' has the wrong size");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(r.bytes[i]))
             << (8 * i);
    return static_cast<int64_t>(v);
}

}  // namespace

void save_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                     TrainState& state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    os.write(kMagic, 4);
    const std::string blob = cfg.to_json_text();
    put_u32(os, static_cast<uint32_t>(blob.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));

    const auto& params = state.opt->params();
    const bool moe = cfg.model.mode == ModelConfig::Mode::moe;
    uint32_t count = static_cast<uint32_t>(3 * params.size()) + 3;
    if (state.acc) ++count;
    if (moe) ++count;  // router rescale constants
    put_u32(os, count);

    for (size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        put_f64_record(os, p.name, p.tensor.shape(), p.tensor.data());
        put_f64_record(os, "opt.m/" + p.name, p.tensor.shape(),
                       state.opt->moment1(i));
        put_f64_record(os, "opt.v/" + p.name, p.tensor.shape(),
                       state.opt->moment2(i));
    }
    put_i64_record(os, "opt.step", state.opt->step_count());
    put_i64_record(os, "train.step", state.step);
    if (state.acc)
        put_f64_record(os, "pool.f_bar",
                       {static_cast<int>(state.acc->f_bar().size())},
                       state.acc->f_bar());
    if (moe) {
        // The rescale constant is derived, not learned; stored anyway so a
        // reload never depends on recomputing the calibration.
        std::vector<double> cs;
        cs.reserve(state.model.routers.size());
        for (const auto& r : state.model.routers) cs.push_back(r.c);
        put_f64_record(os, "router.c", {static_cast<int>(cs.size())}, cs);
    }
    const std::string rng = state.data_rng.state();
    put_record(os, "train.rng", kDtU8, {static_cast<int>(rng.size())},
               rng.data(), rng.size());

    os.flush();
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

std::pair<ExperimentConfig, TrainState> load_checkpoint(
    const std::string& path, const ModelConfig* expected_model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic (not a checkpoint, or an "
                      "unsupported format version)");
    const uint32_t blob_len = get_u32(is);
    std::string blob(blob_len, '\0');
    if (!is.read(blob.data(), blob_len))
        throw IoError("checkpoint: truncated file");
    ExperimentConfig cfg = ExperimentConfig::from_json_text(blob);
    if (expected_model &&
        expected_model->to_json_text() != cfg.model.to_json_text())
        throw ConfigError(
            "checkpoint was trained with a different model config");

    auto recs = read_records(is);

    TrainState st;
    st.model = build_model(cfg.model, cfg.seed);
    st.opt = std::make_unique<AdamW>(st.model.parameters(),
                                     adamw_config(cfg.training));
    const auto& params = st.opt->params();
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        const auto n = static_cast<size_t>(p.tensor.numel());
        auto w = f64_of(need(recs, p.name, kDtF64), p.name, n);
        Tensor t = p.tensor;  // shared handle; params stay aliased
        t.mutable_data() = std::move(w);
        st.opt->moment1(i) =
            f64_of(need(recs, "opt.m/" + p.name, kDtF64), "opt.m/" + p.name, n);
        st.opt->moment2(i) =
            f64_of(need(recs, "opt.v/" + p.name, kDtF64), "opt.v/" + p.name, n);
    }
    st.opt->set_step_count(i64_of(need(recs, "opt.step", kDtI64), "opt.step"));
    st.step = i64_of(need(recs, "train.step", kDtI64), "train.step");
    if (cfg.model.mode == ModelConfig::Mode::moe) {
        st.acc = std::make_unique<PoolStatsAccumulator>(cfg.model.pool_size);
        st.acc->raw() = f64_of(need(recs, "pool.f_bar", kDtF64), "pool.f_bar",
                               static_cast<size_t>(cfg.model.pool_size));
        auto cs = f64_of(need(recs, "router.c", kDtF64), "router.c",
                         st.model.routers.size());
        for (size_t l = 0; l < cs.size(); ++l) st.model.routers[l].c = cs[l];
    }
    const auto& rng = need(recs, "train.rng", kDtU8);
    st.data_rng.restore(rng.bytes);
    return {std::move(cfg), std::move(st)};
}

}  // namespace unipool
