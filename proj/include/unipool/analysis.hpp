#pragma once

// Post-training probes: routing traces and utilization matrices, cross-layer
// expert-reuse accounting, routing-randomization interventions, and the
// report files they produce.

#include <cstdint>
#include <string>
#include <vector>

#include "unipool/model.hpp"
#include "unipool/training.hpp"

namespace unipool {

inline constexpr int kReportSchemaVersion = 1;

// Stamped into every trace and report so artifacts are traceable to the
// experiment that produced them.
struct Provenance {
    std::string config_hash;
    uint64_t seed = 0;
    std::string split;
};

// One routing decision record per (token, layer, slot), in global expert IDs.
struct RoutingTrace {
    int layers = 0;
    int k = 1;
    int pool_size = 0;
    int groups = 1;
    int64_t tokens = 0;
    std::vector<int> ids;  // tokens x layers x k, row-major
    Provenance prov;

    int id_at(int64_t token, int layer, int slot) const {
        return ids[static_cast<size_t>((token * layers + layer) * k + slot)];
    }
    int group_size() const { return pool_size / groups; }
    int slice_offset(int layer) const {
        return (layer / (layers / groups)) * group_size();
    }
};

// Runs the model over every full window of `tokens` (forward only) and
// records the selected expert IDs. MoE models only.
RoutingTrace collect_trace(Model& m, const std::vector<int>& tokens,
                           int batch_size, const Provenance& prov,
                           const RoutingIntervention* iv = nullptr);

struct UtilizationReport {
    int layers = 0;
    int pool_size = 0;
    std::vector<double> matrix;     // layers x pool_size; each row sums to 1
    std::vector<double> aggregate;  // mean over layers; sums to 1
    double cv = 0.0;        // population std/mean of the aggregate vector
    double max_mean = 0.0;  // max(aggregate) / uniform share
    int dead = 0;           // experts with aggregate usage < 0.1x uniform
    Provenance prov;

    double at(int layer, int expert) const {
        return matrix[static_cast<size_t>(layer) * pool_size + expert];
    }
};
UtilizationReport utilization_from_trace(const RoutingTrace& t);

// Per-token count of distinct experts across layers. Defined for top-1
// routing only; k > 1 traces are rejected.
struct ReuseReport {
    int layers = 0;
    int64_t tokens = 0;
    double mean_unique = 0.0;    // mean |{id_l : l = 1..L}| over tokens
    double mean_fraction = 0.0;  // mean_unique / layers
    std::vector<int64_t> histogram;  // histogram[u] = tokens with exactly u
    Provenance prov;
};
ReuseReport unique_experts(const RoutingTrace& t);

// The closed-form expectation of the uniform-random reuse count, used by
// self-checks: M * (1 - (1 - 1/M)^L).
double expected_uniform_unique(int layers, int pool_size);

// For each layer, the n most frequently selected expert IDs on the trace
// (count descending, ID ascending; unselected slice members count 0).
std::vector<std::vector<int>> top_used_from_trace(const RoutingTrace& t, int n);

// --- routing randomization ----------------------------------------------------

enum class ProbeProtocol {
    self_control,       // re-run the learned routing (deltas must be 0)
    vanilla_uniform,    // uniform over the layer's own group slice
    pool_top8_matched,  // uniform over the layer's top-n most-used experts
    pool_full_random,   // uniform over the whole pool
};
ProbeProtocol probe_protocol_from(const std::string& name);
const char* probe_protocol_name(ProbeProtocol p);

// First layer of the deep half: interventions sweep layers [ceil(L/2), L).
int deep_half_begin(int layers);

struct ProbeLayerRow {
    int layer = 0;
    double baseline_ppl = 0.0;
    double intervened_ppl = 0.0;
    double delta = 0.0;
};

struct ProbeResult {
    ProbeProtocol protocol = ProbeProtocol::self_control;
    double baseline_ppl = 0.0;
    double mean_delta = 0.0;
    std::vector<ProbeLayerRow> rows;  // one per deep-half layer
    int top_n = 0;                    // matched protocol only
    std::string metric_note;
    Provenance prov;
};

// Replaces one deep-half layer's routing at a time (gate 1/k for randomized
// picks), evaluating PPL on `eval_tokens`. The matched protocol identifies
// top-n sets on `ident_tokens`, which must stay disjoint from the eval split.
// Pool-wide protocols require a fully shared pool (groups == 1). Layers may
// be probed in parallel (UNIPOOL_LAB_THREADS) on model clones; results are
// identical to the serial order.
ProbeResult randomization_probe(Model& m, const std::vector<int>& ident_tokens,
                                const std::vector<int>& eval_tokens,
                                ProbeProtocol protocol, const Provenance& prov,
                                int batch_size, int top_n = 8);

// --- report emission -----------------------------------------------------------

// CSV matrix: header "layer,expert_0,...", one row per layer.
void write_util_csv(const std::string& path, const UtilizationReport& u);
std::vector<std::vector<double>> parse_util_csv(const std::string& path);

std::string util_report_json(const UtilizationReport& u);
std::string reuse_report_json(const ReuseReport& r);
std::string probe_report_json(const ProbeResult& p);

// Bundles several emitted JSON reports into one document (order preserved).
std::string merge_reports_json(const std::vector<std::string>& report_texts);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace unipool
