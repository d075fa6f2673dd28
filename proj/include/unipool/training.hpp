#pragma once

// Corpus handling, the training loop, evaluation, and checkpoint I/O.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unipool/balancing.hpp"
#include "unipool/model.hpp"
#include "unipool/optim.hpp"

namespace unipool {

struct TrainingConfig {
    std::string corpus;
    double val_fraction = 0.1;
    int batch_size = 16;
    int64_t steps = 500;
    double lr = 5e-4;
    double min_lr = 5e-5;
    double warmup_fraction = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int64_t eval_every = 100;       // 0: validate at the final step only
    int64_t checkpoint_every = 0;   // 0: final checkpoint only

    void validate() const;
};

struct AnalysisConfig {
    // Fraction of the validation slice used to identify top experts; the
    // remainder is the probe evaluation split (kept disjoint).
    double heldout_fraction = 0.5;
    int top_n = 8;

    void validate() const;
};

struct ExperimentConfig {
    ModelConfig model;
    TrainingConfig training;
    AnalysisConfig analysis;
    std::string output_dir = "run";
    uint64_t seed = 42;

    void validate() const;
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string to_json_text() const;  // canonical, key-sorted
    std::string hash() const;          // fnv1a64 of canonical text, hex
};

// Byte-level tokens: IDs 0..255 are raw bytes; 256/257/258 are reserved
// BOS/EOS/PAD and never produced by the packer.
inline constexpr int kByteVocab = 259;

struct Corpus {
    std::vector<int> train_tokens;
    std::vector<int> val_tokens;
};

Corpus corpus_from_bytes(const std::string& bytes, double val_fraction);
Corpus load_corpus(const std::string& path, double val_fraction);

// Non-overlapping contiguous windows of exactly seq_len tokens; the
// remainder is dropped.
int64_t window_count(int64_t tokens, int seq_len);
std::vector<int> window_tokens(const std::vector<int>& tokens, int64_t w,
                               int seq_len);

struct EvalResult {
    double ce = 0.0;   // pure cross-entropy, no balancing terms
    double ppl = 0.0;  // exp(ce)
    int64_t windows = 0;
    int64_t target_tokens = 0;
};
double perplexity_from_loss(double loss);

// Forward-only evaluation over every full window of `tokens`, batched up to
// batch_size windows at a time. Errors on an empty window set.
EvalResult evaluate(Model& m, const std::vector<int>& tokens, int batch_size,
                    const RoutingIntervention* iv = nullptr);

struct StepMetrics {
    int64_t step = 0;
    double lr = 0.0;
    double ce = 0.0;
    double aux = 0.0;
    double pool = 0.0;
    double f_bar_min = 0.0;
    double f_bar_max = 0.0;
    double f_bar_cv = 0.0;
    std::optional<double> val_ce;
};
std::string metrics_json_line(const StepMetrics& m);

// Full mutable training state; checkpoints capture it exactly.
struct TrainState {
    Model model;
    std::unique_ptr<AdamW> opt;
    std::unique_ptr<PoolStatsAccumulator> acc;  // moe mode only
    Rng data_rng{0};
    int64_t step = 0;
};

class Trainer {
public:
    // Fresh state from config; the corpus is loaded from cfg.training.corpus.
    explicit Trainer(ExperimentConfig cfg);
    // Resume from a loaded state (corpus reloaded from config).
    Trainer(ExperimentConfig cfg, TrainState state);

    // One optimization step. Aborts with NumericError (including routing
    // diagnostics) if the loss goes non-finite.
    StepMetrics run_step();

    double evaluate_val();  // pure CE on the validation windows

    TrainState& state() { return state_; }
    const ExperimentConfig& config() const { return cfg_; }
    const Corpus& corpus() const { return corpus_; }

private:
    ExperimentConfig cfg_;
    Corpus corpus_;
    TrainState state_;
    LrSchedule sched_;
    double last_finite_ce_ = 0.0;
};

struct TrainSummary {
    int64_t steps = 0;
    double final_ce = 0.0;
    double first_ce = 0.0;
    double final_val_ce = 0.0;
    double final_val_ppl = 0.0;
    std::string checkpoint_path;
    std::string metrics_path;
};

// Runs the full loop: metrics JSONL + periodic validation + checkpoint(s)
// under cfg.output_dir. Deterministic: same config + seed, same bytes.
TrainSummary train_experiment(const ExperimentConfig& cfg);

// --- checkpointing -----------------------------------------------------------
// Single binary file, little-endian: magic "UPL1", one length-prefixed
// canonical config JSON blob, then named tensor records (name, dtype, shape,
// raw data). Weights of a shared expert are stored once.
void save_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                     TrainState& state);
// expected_model, when given, must match the embedded model config exactly.
std::pair<ExperimentConfig, TrainState> load_checkpoint(
    const std::string& path, const ModelConfig* expected_model = nullptr);

}  // namespace unipool
