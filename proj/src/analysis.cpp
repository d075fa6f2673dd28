#include "unipool/analysis.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace unipool {

namespace {

using nlohmann::json;

// splitmix64 finalizer: decorrelates the per-layer intervention streams from
// the base probe seed.
uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

json provenance_json(const Provenance& p) {
    json j;
    j["config_hash"] = p.config_hash;
    j["seed"] = p.seed;
    if (!p.split.empty()) j["split"] = p.split;
    return j;
}

json report_head(const Provenance& p) {
    json j = provenance_json(p);
    j["schema_version"] = kReportSchemaVersion;
    j["tool_version"] = kToolVersion;
    return j;
}

}  // namespace

RoutingTrace collect_trace(Model& m, const std::vector<int>& tokens,
                           int batch_size, const Provenance& prov,
                           const RoutingIntervention* iv) {
    const ModelConfig& cfg = m.config;
    if (cfg.mode != ModelConfig::Mode::moe)
        throw ConfigError("routing trace: model has no routers (dense mode)");
    const int T = cfg.seq_len;
    const int64_t windows = window_count(static_cast<int64_t>(tokens.size()), T);
    if (windows == 0)
        throw ConfigError("routing trace: split has no full window of " +
                          std::to_string(T) + " tokens");

    RoutingTrace tr;
    tr.layers = cfg.layers;
    tr.k = cfg.top_k;
    tr.pool_size = cfg.pool_size;
    tr.groups = cfg.groups;
    tr.tokens = windows * T;
    tr.ids.reserve(static_cast<size_t>(tr.tokens) * cfg.layers * cfg.top_k);
    tr.prov = prov;

    NoGradGuard ng;
    std::vector<int> inputs;
    for (int64_t w0 = 0; w0 < windows; w0 += batch_size) {
        const int b = static_cast<int>(std::min<int64_t>(batch_size, windows - w0));
        inputs.clear();
        inputs.insert(inputs.end(), tokens.begin() + w0 * T,
                      tokens.begin() + (w0 + b) * T);
        auto art = forward(m, inputs, b, iv);
        const int64_t rows = static_cast<int64_t>(b) * T;
        for (int64_t t = 0; t < rows; ++t)
            for (int l = 0; l < cfg.layers; ++l)
                for (int s = 0; s < cfg.top_k; ++s)
                    tr.ids.push_back(
                        art.decisions[static_cast<size_t>(l)]
                            .topk[static_cast<size_t>(t) * cfg.top_k + s]);
    }
    return tr;
}

UtilizationReport utilization_from_trace(const RoutingTrace& t) {
    UtilizationReport u;
    u.layers = t.layers;
    u.pool_size = t.pool_size;
    u.prov = t.prov;
    u.matrix.assign(static_cast<size_t>(t.layers) * t.pool_size, 0.0);
    u.aggregate.assign(static_cast<size_t>(t.pool_size), 0.0);
    if (t.tokens == 0) return u;

    // Count first, divide once: onehot rows come out exactly 1 and 0
    // instead of accumulating tokens-many rounding errors.
    std::vector<int64_t> counts(u.matrix.size(), 0);
    for (int64_t tok = 0; tok < t.tokens; ++tok)
        for (int l = 0; l < t.layers; ++l)
            for (int s = 0; s < t.k; ++s)
                ++counts[static_cast<size_t>(l) * t.pool_size +
                         t.id_at(tok, l, s)];
    const double denom = static_cast<double>(t.tokens) * t.k;
    for (size_t i = 0; i < counts.size(); ++i)
        u.matrix[i] = static_cast<double>(counts[i]) / denom;
    for (int l = 0; l < t.layers; ++l)
        for (int e = 0; e < t.pool_size; ++e)
            u.aggregate[static_cast<size_t>(e)] +=
                u.at(l, e) / static_cast<double>(t.layers);

    const double mean = 1.0 / t.pool_size;  // rows are normalized
    double var = 0.0, mx = 0.0;
    for (double a : u.aggregate) {
        var += (a - mean) * (a - mean);
        mx = std::max(mx, a);
        if (a < 0.1 * mean) ++u.dead;
    }
    var /= static_cast<double>(t.pool_size);
    u.cv = std::sqrt(var) / mean;
    u.max_mean = mx / mean;
    return u;
}

ReuseReport unique_experts(const RoutingTrace& t) {
    if (t.k != 1)
        throw ConfigError(
            "reuse accounting is defined for top-1 routing only (trace has "
            "k = " + std::to_string(t.k) + ")");
    ReuseReport r;
    r.layers = t.layers;
    r.tokens = t.tokens;
    r.prov = t.prov;
    r.histogram.assign(static_cast<size_t>(t.layers) + 1, 0);

    std::vector<int> seen;
    int64_t total = 0;
    for (int64_t tok = 0; tok < t.tokens; ++tok) {
        seen.clear();
        for (int l = 0; l < t.layers; ++l) seen.push_back(t.id_at(tok, l, 0));
        std::sort(seen.begin(), seen.end());
        const int u = static_cast<int>(
            std::unique(seen.begin(), seen.end()) - seen.begin());
        ++r.histogram[static_cast<size_t>(u)];
        total += u;
    }
    if (t.tokens > 0) {
        r.mean_unique = static_cast<double>(total) / static_cast<double>(t.tokens);
        r.mean_fraction = r.mean_unique / t.layers;
    }
    return r;
}

double expected_uniform_unique(int layers, int pool_size) {
    const double m = static_cast<double>(pool_size);
    return m * (1.0 - std::pow(1.0 - 1.0 / m, layers));
}

std::vector<std::vector<int>> top_used_from_trace(const RoutingTrace& t, int n) {
    if (n < 1) throw ConfigError("top_used: n must be >= 1");
    if (n > t.group_size())
        throw ConfigError("top_used: n = " + std::to_string(n) +
                          " exceeds the per-group pool of " +
                          std::to_string(t.group_size()));
    std::vector<std::vector<int>> out(static_cast<size_t>(t.layers));
    std::vector<int64_t> counts;
    for (int l = 0; l < t.layers; ++l) {
        const int off = t.slice_offset(l);
        counts.assign(static_cast<size_t>(t.group_size()), 0);
        for (int64_t tok = 0; tok < t.tokens; ++tok)
            for (int s = 0; s < t.k; ++s)
                ++counts[static_cast<size_t>(t.id_at(tok, l, s) - off)];
        std::vector<int> order(counts.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)])
                return counts[static_cast<size_t>(a)] >
                       counts[static_cast<size_t>(b)];
            return a < b;
        });
        auto& ids = out[static_cast<size_t>(l)];
        ids.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) ids.push_back(off + order[static_cast<size_t>(i)]);
    }
    return out;
}

// --- randomization probes ------------------------------------------------------

ProbeProtocol probe_protocol_from(const std::string& name) {
    if (name == "self") return ProbeProtocol::self_control;
    if (name == "vanilla_uniform") return ProbeProtocol::vanilla_uniform;
    if (name == "pool_top8_matched") return ProbeProtocol::pool_top8_matched;
    if (name == "pool_full_random") return ProbeProtocol::pool_full_random;
    throw ConfigError("unknown probe protocol '" + name +
                      "' (expected self, vanilla_uniform, pool_top8_matched, "
                      "or pool_full_random)");
}

const char* probe_protocol_name(ProbeProtocol p) {
    switch (p) {
        case ProbeProtocol::self_control: return "self";
        case ProbeProtocol::vanilla_uniform: return "vanilla_uniform";
        case ProbeProtocol::pool_top8_matched: return "pool_top8_matched";
        case ProbeProtocol::pool_full_random: return "pool_full_random";
    }
    return "?";
}

int deep_half_begin(int layers) { return (layers + 1) / 2; }

ProbeResult randomization_probe(Model& m, const std::vector<int>& ident_tokens,
                                const std::vector<int>& eval_tokens,
                                ProbeProtocol protocol, const Provenance& prov,
                                int batch_size, int top_n) {
    const ModelConfig& cfg = m.config;
    if (cfg.mode != ModelConfig::Mode::moe)
        throw ConfigError("probe: model has no routers (dense mode)");
    const bool pool_wide = protocol == ProbeProtocol::pool_top8_matched ||
                           protocol == ProbeProtocol::pool_full_random;
    if (pool_wide && cfg.groups != 1)
        throw ConfigError(std::string("probe: protocol '") +
                          probe_protocol_name(protocol) +
                          "' needs a fully shared pool (groups = 1), model has "
                          "groups = " + std::to_string(cfg.groups));

    ProbeResult res;
    res.protocol = protocol;
    res.prov = prov;
    res.metric_note =
        "validation PPL delta stands in for the paper-scale downstream "
        "accuracy delta at this model size";

    std::vector<std::vector<int>> top_sets;
    if (protocol == ProbeProtocol::pool_top8_matched) {
        res.top_n = top_n;
        Provenance ident_prov = prov;
        ident_prov.split = "ident";
        top_sets = top_used_from_trace(
            collect_trace(m, ident_tokens, batch_size, ident_prov), top_n);
    }

    res.baseline_ppl = evaluate(m, eval_tokens, batch_size).ppl;

    std::vector<int> layers;
    for (int l = deep_half_begin(cfg.layers); l < cfg.layers; ++l)
        layers.push_back(l);
    res.rows.resize(layers.size());

    auto probe_layer = [&](Model& model, size_t i) {
        const int l = layers[i];
        RoutingIntervention iv;
        iv.layer = l;
        iv.seed = mix64(prov.seed, static_cast<uint64_t>(l));
        switch (protocol) {
            case ProbeProtocol::self_control:
                iv.kind = RoutingIntervention::Kind::self;
                break;
            case ProbeProtocol::vanilla_uniform: {
                iv.kind = RoutingIntervention::Kind::random_choice;
                const int off = m.bank->slice_offset(l);
                for (int e = 0; e < cfg.group_size(); ++e)
                    iv.choice_set.push_back(off + e);
                break;
            }
            case ProbeProtocol::pool_top8_matched:
                iv.kind = RoutingIntervention::Kind::random_choice;
                iv.choice_set = top_sets[static_cast<size_t>(l)];
                break;
            case ProbeProtocol::pool_full_random:
                iv.kind = RoutingIntervention::Kind::random_choice;
                for (int e = 0; e < cfg.pool_size; ++e) iv.choice_set.push_back(e);
                break;
        }
        ProbeLayerRow row;
        row.layer = l;
        row.baseline_ppl = res.baseline_ppl;
        row.intervened_ppl = evaluate(model, eval_tokens, batch_size, &iv).ppl;
        row.delta = row.intervened_ppl - row.baseline_ppl;
        res.rows[i] = row;
    };

    const int workers =
        std::min<int>(thread_cap(), static_cast<int>(layers.size()));
    if (workers <= 1) {
        for (size_t i = 0; i < layers.size(); ++i) probe_layer(m, i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                Model local = m.clone();  // read-only per-thread copy
                for (size_t i = next.fetch_add(1); i < layers.size();
                     i = next.fetch_add(1))
                    probe_layer(local, i);
            });
        for (auto& th : pool) th.join();
    }

    for (const auto& row : res.rows) res.mean_delta += row.delta;
    if (!res.rows.empty())
        res.mean_delta /= static_cast<double>(res.rows.size());
    return res;
}

// --- report emission -----------------------------------------------------------

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write file: " + path);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.flush();
    if (!os) throw IoError("failed writing file: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_util_csv(const std::string& path, const UtilizationReport& u) {
    std::ostringstream os;
    os.precision(17);
    os << "layer";
    for (int e = 0; e < u.pool_size; ++e) os << ",expert_" << e;
    os << "\n";
    for (int l = 0; l < u.layers; ++l) {
        os << l;
        for (int e = 0; e < u.pool_size; ++e) os << ',' << u.at(l, e);
        os << "\n";
    }
    write_text_file(path, os.str());
}

std::vector<std::vector<double>> parse_util_csv(const std::string& path) {
    std::istringstream is(read_text_file(path));
    std::string line;
    if (!std::getline(is, line))
        throw IoError("utilization csv: missing header in " + path);
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        bool first = true;
        while (std::getline(ls, cell, ',')) {
            if (first) {  // leading layer index column
                first = false;
                continue;
            }
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError("utilization csv: bad cell '" + cell + "' in " +
                              path);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string util_report_json(const UtilizationReport& u) {
    json j = report_head(u.prov);
    j["kind"] = "utilization";
    j["layers"] = u.layers;
    j["pool_size"] = u.pool_size;
    j["uniform_share"] = u.pool_size > 0 ? 1.0 / u.pool_size : 0.0;
    j["cv"] = u.cv;
    j["max_mean"] = u.max_mean;
    j["dead_experts"] = u.dead;
    j["aggregate"] = u.aggregate;
    return j.dump();
}

std::string reuse_report_json(const ReuseReport& r) {
    json j = report_head(r.prov);
    j["kind"] = "reuse";
    j["layers"] = r.layers;
    j["tokens"] = r.tokens;
    j["mean_unique"] = r.mean_unique;
    j["mean_fraction"] = r.mean_fraction;
    j["histogram"] = r.histogram;
    return j.dump();
}

std::string probe_report_json(const ProbeResult& p) {
    json j = report_head(p.prov);
    j["kind"] = "probe";
    j["protocol"] = probe_protocol_name(p.protocol);
    j["metric"] = "val_ppl_delta";
    j["metric_note"] = p.metric_note;
    j["baseline_ppl"] = p.baseline_ppl;
    j["mean_delta"] = p.mean_delta;
    if (p.top_n > 0) j["top_n"] = p.top_n;
    json rows = json::array();
    for (const auto& r : p.rows) {
        json row;
        row["layer"] = r.layer;
        row["baseline_ppl"] = r.baseline_ppl;
        row["intervened_ppl"] = r.intervened_ppl;
        row["delta"] = r.delta;
        rows.push_back(row);
    }
    j["rows"] = rows;
    return j.dump();
}

std::string merge_reports_json(const std::vector<std::string>& report_texts) {
    json out;
    out["schema_version"] = kReportSchemaVersion;
    out["tool_version"] = kToolVersion;
    json reports = json::array();
    for (const auto& text : report_texts) {
        try {
            reports.push_back(json::parse(text));
        } catch (const json::exception& e) {
            throw ConfigError(std::string("report-merge: input is not valid "
                                          "JSON: ") + e.what());
        }
    }
    out["reports"] = reports;
    return out.dump();
}

}  // namespace unipool
