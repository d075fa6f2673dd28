// Probe and reporting checks: utilization matrices against counting oracles,
// cross-layer reuse accounting against brute force and its closed form,
// top-used ranking, the randomization probe's control/isolation/degenerate
// properties, CSV round-trips, and JSON reports validated against the
// published schema files.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "synthetic.hpp"
#include "unipool/analysis.hpp"
#include "unipool/common.hpp"
#include "unipool/model.hpp"
#include "unipool/training.hpp"

using namespace unipool;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() /
                     ("unipool_analysis_test_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

fs::path repo_root() { return fs::path(__FILE__).parent_path().parent_path(); }

Provenance prov() {
    Provenance p;
    p.config_hash = "00deadbeef001234";
    p.seed = 7;
    p.split = "val";
    return p;
}

RoutingTrace manual_trace(int layers, int pool, int groups,
                          std::vector<int> ids, int k = 1) {
    RoutingTrace t;
    t.layers = layers;
    t.k = k;
    t.pool_size = pool;
    t.groups = groups;
    t.tokens = static_cast<int64_t>(ids.size()) / (layers * k);
    t.ids = std::move(ids);
    t.prov = prov();
    return t;
}

ModelConfig probe_config(int L = 4, int M = 8, int G = 1,
                         RouterKind router = RouterKind::softmax) {
    ModelConfig c;
    c.layers = L;
    c.hidden = 8;
    c.heads = 2;
    c.kv_heads = 1;
    c.vocab_size = 259;
    c.seq_len = 16;
    c.mode = ModelConfig::Mode::moe;
    c.groups = G;
    c.pool_size = M;
    c.top_k = 1;
    c.router = router;
    return c;
}

std::vector<int> text_tokens(uint64_t seed, int n) {
    const std::string text = testutil::synthetic_text(seed, n, 300);
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char b : std::string_view(text).substr(0, static_cast<size_t>(n)))
        out.push_back(b);
    return out;
}

// Minimal JSON-Schema checker covering the subset the published schemas use:
// type, required, properties, additionalProperties:false, items, enum,
// const, and the hex pattern on config_hash.
void check_schema(const json& schema, const json& value,
                  const std::string& where) {
    INFO("at ", where);
    if (schema.contains("const")) CHECK(value == schema["const"]);
    if (schema.contains("enum")) {
        bool hit = false;
        for (const auto& v : schema["enum"]) hit = hit || v == value;
        CHECK(hit);
    }
    if (schema.contains("type")) {
        const std::string t = schema["type"].get<std::string>();
        if (t == "object") CHECK(value.is_object());
        if (t == "array") CHECK(value.is_array());
        if (t == "string") CHECK(value.is_string());
        if (t == "integer") CHECK(value.is_number_integer());
        if (t == "number") CHECK(value.is_number());
        if (t == "boolean") CHECK(value.is_boolean());
    }
    if (schema.contains("pattern") && value.is_string()) {
        const std::string p = schema["pattern"].get<std::string>();
        if (p == "^[0-9a-f]{16}$") {
            const std::string s = value.get<std::string>();
            CHECK(s.size() == 16);
            for (char c : s)
                CHECK(((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f')));
        }
    }
    if (value.is_object() && schema.contains("properties")) {
        if (schema.contains("required"))
            for (const auto& r : schema["required"])
                CHECK(value.contains(r.get<std::string>()));
        const bool closed = schema.contains("additionalProperties") &&
                            schema["additionalProperties"] == false;
        for (const auto& [k, v] : value.items()) {
            if (schema["properties"].contains(k))
                check_schema(schema["properties"][k], v, where + "." + k);
            else if (closed)
                FAIL_CHECK("unexpected key '", k, "' at ", where);
        }
    }
    if (value.is_array() && schema.contains("items")) {
        int i = 0;
        for (const auto& v : value)
            check_schema(schema["items"], v, where + "[" + std::to_string(i++) + "]");
    }
}

void check_against_schema_file(const std::string& report_text,
                               const std::string& schema_name) {
    const json schema =
        json::parse(read_text_file((repo_root() / "schemas" / schema_name).string()));
    check_schema(schema, json::parse(report_text), schema_name);
}

}  // namespace

// ---------------------------------------------------------------------------
// utilization

TEST_CASE("total collapse onto one expert pins the diagnostic values") {
    const int L = 3, M = 8, T = 10;
    RoutingTrace t = manual_trace(L, M, 1, std::vector<int>(L * T, 0));
    UtilizationReport u = utilization_from_trace(t);
    for (int l = 0; l < L; ++l) {
        CHECK(u.at(l, 0) == 1.0);
        for (int e = 1; e < M; ++e) CHECK(u.at(l, e) == 0.0);
    }
    CHECK(u.cv == doctest::Approx(std::sqrt(M - 1.0)).epsilon(1e-12));
    CHECK(u.max_mean == doctest::Approx(static_cast<double>(M)).epsilon(1e-12));
    CHECK(u.dead == M - 1);
}

TEST_CASE("perfectly uniform routing has no imbalance") {
    const int L = 2, M = 4;
    std::vector<int> ids;
    for (int tok = 0; tok < 8; ++tok)
        for (int l = 0; l < L; ++l) ids.push_back((tok + l) % M);
    UtilizationReport u = utilization_from_trace(manual_trace(L, M, 1, ids));
    CHECK(u.cv == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(u.max_mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(u.dead == 0);
}

TEST_CASE("utilization matches a counting oracle and rows sum to one") {
    Rng rng(5);
    const int L = 4, M = 12, T = 257;
    std::vector<int> ids(static_cast<size_t>(L) * T);
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    RoutingTrace t = manual_trace(L, M, 1, ids);
    UtilizationReport u = utilization_from_trace(t);

    for (int l = 0; l < L; ++l) {
        std::vector<int64_t> counts(M, 0);
        for (int tok = 0; tok < T; ++tok) ++counts[t.id_at(tok, l, 0)];
        double row_sum = 0.0;
        for (int e = 0; e < M; ++e) {
            CHECK(std::fabs(u.at(l, e) - counts[e] / double(T)) < 1e-12);
            row_sum += u.at(l, e);
        }
        CHECK(std::fabs(row_sum - 1.0) < 1e-9);
    }
    // Aggregate = mean over layers, and its moments drive the diagnostics.
    double mean = 0.0;
    for (int e = 0; e < M; ++e) mean += u.aggregate[e];
    CHECK(std::fabs(mean - 1.0) < 1e-9);
}

// ---------------------------------------------------------------------------
// reuse accounting

TEST_CASE("unique-expert counts on pinned traces") {
    ReuseReport same = unique_experts(manual_trace(3, 8, 1, {3, 3, 3}));
    CHECK(same.mean_unique == 1.0);
    CHECK(same.mean_fraction == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(same.histogram[1] == 1);

    ReuseReport distinct = unique_experts(manual_trace(3, 8, 1, {0, 1, 2}));
    CHECK(distinct.mean_unique == 3.0);
    CHECK(distinct.histogram[3] == 1);
}

TEST_CASE("reuse accounting matches a brute-force set count") {
    Rng rng(6);
    const int L = 6, M = 9;
    const int64_t T = 1000;
    std::vector<int> ids(static_cast<size_t>(L * T));
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    ReuseReport r = unique_experts(manual_trace(L, M, 1, ids));

    double total = 0.0;
    std::vector<int64_t> hist(static_cast<size_t>(L) + 1, 0);
    for (int64_t tok = 0; tok < T; ++tok) {
        std::set<int> seen;
        for (int l = 0; l < L; ++l)
            seen.insert(ids[static_cast<size_t>(tok * L + l)]);
        total += static_cast<double>(seen.size());
        ++hist[seen.size()];
    }
    CHECK(r.mean_unique == doctest::Approx(total / T).epsilon(1e-12));
    CHECK(r.mean_fraction ==
          doctest::Approx(total / T / L).epsilon(1e-12));
    CHECK(r.histogram == hist);
    CHECK(r.mean_unique >= 1.0);
    CHECK(r.mean_unique <= static_cast<double>(L));
    CHECK(r.tokens == T);
}

TEST_CASE("a trace with no repeats touches exactly L experts per token") {
    ReuseReport r = unique_experts(manual_trace(4, 8, 1, {0, 1, 2, 3,
                                                          4, 5, 6, 7}));
    CHECK(r.mean_unique == 4.0);
    CHECK(r.mean_fraction == 1.0);
}

TEST_CASE("reuse accounting is defined for top-1 traces only") {
    CHECK_THROWS_AS(
        unique_experts(manual_trace(2, 8, 1, {0, 1, 2, 3}, /*k=*/2)),
        ConfigError);
}

TEST_CASE("uniform-random reuse matches the closed form within 3 sigma") {
    const int L = 12, M = 96;
    const double expect = expected_uniform_unique(L, M);
    CHECK(expect == doctest::Approx(96.0 * (1.0 - std::pow(95.0 / 96.0, 12)))
                        .epsilon(1e-15));
    CHECK(expect == doctest::Approx(11.34).epsilon(1e-3));

    Rng rng(7);
    const int64_t T = 10000;
    std::vector<int> ids(static_cast<size_t>(L * T));
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    ReuseReport r = unique_experts(manual_trace(L, M, 1, ids));

    // Per-token U is bounded by [1, L]; its variance is far below (L/2)^2,
    // so a conservative sigma still gives a tight 3-sigma band.
    double var = 0.0;
    for (size_t u = 0; u < r.histogram.size(); ++u)
        var += static_cast<double>(r.histogram[u]) *
               (static_cast<double>(u) - r.mean_unique) *
               (static_cast<double>(u) - r.mean_unique);
    var /= static_cast<double>(T);
    const double sigma_mean = std::sqrt(var / static_cast<double>(T));
    CHECK(std::fabs(r.mean_unique - expect) < 3.0 * sigma_mean + 1e-9);
}

// ---------------------------------------------------------------------------
// top-used ranking

TEST_CASE("with n equal to the slice size every layer reports its full "
          "slice") {
    // Private slices of 4 over a pool of 8.
    std::vector<int> ids;
    Rng rng(8);
    for (int tok = 0; tok < 50; ++tok)
        for (int l = 0; l < 2; ++l)
            ids.push_back(l * 4 + static_cast<int>(rng.bounded(4)));
    auto tops = top_used_from_trace(manual_trace(2, 8, 2, ids), 4);
    REQUIRE(tops.size() == 2);
    for (int l = 0; l < 2; ++l) {
        std::set<int> got(tops[l].begin(), tops[l].end());
        std::set<int> want;
        for (int e = 0; e < 4; ++e) want.insert(l * 4 + e);
        CHECK(got == want);
    }
}

TEST_CASE("ranking is count-descending with ID ascending tie-breaks and "
          "zero-count padding") {
    // Layer selects 5 three times, 9 twice; everything else unseen.
    std::vector<int> ids{5, 9, 5, 9, 5};
    auto tops = top_used_from_trace(manual_trace(1, 12, 1, ids), 4);
    REQUIRE(tops.size() == 1);
    CHECK(tops[0] == std::vector<int>{5, 9, 0, 1});
}

TEST_CASE("top-used matches a sort-by-count oracle on random traces") {
    Rng rng(9);
    const int L = 3, M = 10, T = 301, n = 5;
    std::vector<int> ids(static_cast<size_t>(L) * T);
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    RoutingTrace t = manual_trace(L, M, 1, ids);
    auto tops = top_used_from_trace(t, n);
    for (int l = 0; l < L; ++l) {
        std::vector<std::pair<int64_t, int>> by_count(M);
        for (int e = 0; e < M; ++e) by_count[e] = {0, e};
        for (int tok = 0; tok < T; ++tok)
            ++by_count[t.id_at(tok, l, 0)].first;
        std::stable_sort(by_count.begin(), by_count.end(),
                         [](const auto& a, const auto& b) {
                             if (a.first != b.first) return a.first > b.first;
                             return a.second < b.second;
                         });
        for (int i = 0; i < n; ++i) CHECK(tops[l][i] == by_count[i].second);
    }
}

TEST_CASE("asking for more experts than a slice holds is an error") {
    std::vector<int> ids{0, 4};  // one token, two private slices of 4
    CHECK_THROWS_AS(top_used_from_trace(manual_trace(2, 8, 2, ids), 5),
                    ConfigError);
}

// ---------------------------------------------------------------------------
// randomization probe

TEST_CASE("deep-half boundary") {
    CHECK(deep_half_begin(2) == 1);
    CHECK(deep_half_begin(4) == 2);
    CHECK(deep_half_begin(5) == 3);
    CHECK(deep_half_begin(12) == 6);
}

TEST_CASE("collect_trace records in-slice IDs for every full window") {
    Model m = build_model(probe_config(4, 8, /*G=*/4), 31);
    std::vector<int> toks = text_tokens(21, 16 * 5 + 3);
    RoutingTrace t = collect_trace(m, toks, 2, prov());
    CHECK(t.tokens == 16 * 5);
    CHECK(t.layers == 4);
    REQUIRE(static_cast<int64_t>(t.ids.size()) == t.tokens * 4);
    for (int64_t tok = 0; tok < t.tokens; ++tok)
        for (int l = 0; l < 4; ++l) {
            const int id = t.id_at(tok, l, 0);
            CHECK(id >= t.slice_offset(l));
            CHECK(id < t.slice_offset(l) + t.group_size());
        }
}

TEST_CASE("the self-control probe changes nothing, exactly") {
    Model m = build_model(probe_config(), 32);
    std::vector<int> ident = text_tokens(22, 16 * 4);
    std::vector<int> eval = text_tokens(23, 16 * 6);
    ProbeResult r = randomization_probe(m, ident, eval,
                                        ProbeProtocol::self_control, prov(), 2);
    REQUIRE(r.rows.size() == 2);  // layers 2 and 3 of 4
    for (const auto& row : r.rows) {
        CHECK(row.baseline_ppl == r.baseline_ppl);
        CHECK(row.intervened_ppl == r.baseline_ppl);
        CHECK(row.delta == 0.0);
    }
    CHECK(r.mean_delta == 0.0);
    // The report flags the desk-scale metric substitution.
    CHECK(r.metric_note.find("PPL") != std::string::npos);
}

TEST_CASE("an intervened evaluation touches exactly one layer's routing") {
    Model m = build_model(probe_config(), 33);
    std::vector<int> toks = text_tokens(24, 16 * 6);
    RoutingTrace base = collect_trace(m, toks, 2, prov());

    RoutingIntervention iv;
    iv.kind = RoutingIntervention::Kind::random_choice;
    iv.layer = 2;
    iv.choice_set = {1, 3, 5};
    iv.seed = 99;
    RoutingTrace probed = collect_trace(m, toks, 2, prov(), &iv);

    for (int64_t tok = 0; tok < base.tokens; ++tok) {
        // Layers before the intervention are bitwise untouched.
        for (int l = 0; l < 2; ++l)
            CHECK(probed.id_at(tok, l, 0) == base.id_at(tok, l, 0));
        const int id = probed.id_at(tok, 2, 0);
        CHECK((id == 1 || id == 3 || id == 5));
    }
}

TEST_CASE("probe rows cover the deep half with a shared baseline") {
    Model m = build_model(probe_config(4, 8, 1), 34);
    std::vector<int> ident = text_tokens(25, 16 * 4);
    std::vector<int> eval = text_tokens(26, 16 * 6);
    for (ProbeProtocol p :
         {ProbeProtocol::vanilla_uniform, ProbeProtocol::pool_top8_matched,
          ProbeProtocol::pool_full_random}) {
        ProbeResult r =
            randomization_probe(m, ident, eval, p, prov(), 2, /*top_n=*/3);
        REQUIRE(r.rows.size() == 2);
        CHECK(r.rows[0].layer == 2);
        CHECK(r.rows[1].layer == 3);
        double mean = 0.0;
        for (const auto& row : r.rows) {
            CHECK(row.baseline_ppl == r.baseline_ppl);
            CHECK(row.delta ==
                  doctest::Approx(row.intervened_ppl - row.baseline_ppl)
                      .epsilon(1e-15));
            CHECK(std::isfinite(row.intervened_ppl));
            mean += row.delta;
        }
        CHECK(r.mean_delta == doctest::Approx(mean / 2).epsilon(1e-12));
    }
}

TEST_CASE("a single-expert pool makes randomization a bitwise no-op") {
    // Softmax over one choice gives gate exactly 1 = 1/k, so the random
    // pick is indistinguishable from the learned one.
    Model m = build_model(probe_config(2, 1, 1, RouterKind::softmax), 35);
    std::vector<int> ident = text_tokens(27, 16 * 3);
    std::vector<int> eval = text_tokens(28, 16 * 4);
    ProbeResult r = randomization_probe(
        m, ident, eval, ProbeProtocol::pool_full_random, prov(), 2);
    for (const auto& row : r.rows) CHECK(row.delta == 0.0);
    CHECK(r.mean_delta == 0.0);
}

TEST_CASE("pool-wide protocols reject privately sliced models") {
    Model m = build_model(probe_config(4, 8, /*G=*/4), 36);
    std::vector<int> ident = text_tokens(29, 16 * 3);
    std::vector<int> eval = text_tokens(30, 16 * 4);
    CHECK_THROWS_AS(
        randomization_probe(m, ident, eval, ProbeProtocol::pool_full_random,
                            prov(), 2),
        ConfigError);
    CHECK_THROWS_AS(
        randomization_probe(m, ident, eval, ProbeProtocol::pool_top8_matched,
                            prov(), 2),
        ConfigError);
    // The slice-local protocol is fine on private models.
    CHECK_NOTHROW(randomization_probe(
        m, ident, eval, ProbeProtocol::vanilla_uniform, prov(), 2));
}

TEST_CASE("parallel probing reproduces the serial result bit for bit") {
    Model m = build_model(probe_config(), 37);
    std::vector<int> ident = text_tokens(31, 16 * 4);
    std::vector<int> eval = text_tokens(32, 16 * 6);
    ::unsetenv("UNIPOOL_LAB_THREADS");
    ProbeResult serial = randomization_probe(
        m, ident, eval, ProbeProtocol::pool_full_random, prov(), 2);
    ::setenv("UNIPOOL_LAB_THREADS", "3", 1);
    ProbeResult parallel = randomization_probe(
        m, ident, eval, ProbeProtocol::pool_full_random, prov(), 2);
    ::unsetenv("UNIPOOL_LAB_THREADS");
    REQUIRE(serial.rows.size() == parallel.rows.size());
    CHECK(serial.baseline_ppl == parallel.baseline_ppl);
    CHECK(serial.mean_delta == parallel.mean_delta);
    for (size_t i = 0; i < serial.rows.size(); ++i) {
        CHECK(serial.rows[i].intervened_ppl == parallel.rows[i].intervened_ppl);
        CHECK(serial.rows[i].delta == parallel.rows[i].delta);
    }
}

TEST_CASE("protocol names round-trip") {
    for (const char* name : {"self", "vanilla_uniform", "pool_top8_matched",
                             "pool_full_random"})
        CHECK(std::string(probe_protocol_name(probe_protocol_from(name))) ==
              name);
    CHECK_THROWS_AS(probe_protocol_from("bogus"), ConfigError);
}

// ---------------------------------------------------------------------------
// report emission

TEST_CASE("utilization CSV round-trips exactly") {
    Rng rng(10);
    const int L = 3, M = 5;
    std::vector<int> ids(static_cast<size_t>(L) * 40);
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    UtilizationReport u = utilization_from_trace(manual_trace(L, M, 1, ids));

    const std::string path = (scratch() / "util.csv").string();
    write_util_csv(path, u);
    auto parsed = parse_util_csv(path);
    REQUIRE(parsed.size() == static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        REQUIRE(parsed[l].size() == static_cast<size_t>(M));
        for (int e = 0; e < M; ++e) CHECK(parsed[l][e] == u.at(l, e));
    }

    // Header survives with the expected column names.
    const std::string text = read_text_file(path);
    CHECK(text.rfind("layer,expert_0,expert_1", 0) == 0);
}

TEST_CASE("an empty matrix still yields a parseable header-only file") {
    UtilizationReport u;
    u.prov = prov();
    const std::string path = (scratch() / "empty.csv").string();
    write_util_csv(path, u);
    CHECK(parse_util_csv(path).empty());
    CHECK(read_text_file(path) == "layer\n");
}

TEST_CASE("JSON reports conform to the published schemas") {
    Rng rng(11);
    const int L = 4, M = 8;
    std::vector<int> ids(static_cast<size_t>(L) * 100);
    for (auto& id : ids) id = static_cast<int>(rng.bounded(M));
    RoutingTrace t = manual_trace(L, M, 1, ids);

    SUBCASE("utilization") {
        check_against_schema_file(
            util_report_json(utilization_from_trace(t)),
            "util_report.schema.json");
    }
    SUBCASE("reuse") {
        check_against_schema_file(reuse_report_json(unique_experts(t)),
                                  "reuse_report.schema.json");
    }
    SUBCASE("probe") {
        Model m = build_model(probe_config(), 38);
        std::vector<int> ident = text_tokens(33, 16 * 3);
        std::vector<int> eval = text_tokens(34, 16 * 4);
        ProbeResult r = randomization_probe(
            m, ident, eval, ProbeProtocol::pool_top8_matched, prov(), 2, 3);
        check_against_schema_file(probe_report_json(r),
                                  "probe_report.schema.json");
    }
}

TEST_CASE("merged reports preserve order inside a versioned envelope") {
    RoutingTrace t = manual_trace(2, 4, 1, {0, 1, 2, 3});
    const std::string a = util_report_json(utilization_from_trace(t));
    const std::string b = reuse_report_json(unique_experts(t));
    const json merged = json::parse(merge_reports_json({a, b}));
    CHECK(merged["schema_version"] == kReportSchemaVersion);
    CHECK(merged["tool_version"] == kToolVersion);
    REQUIRE(merged["reports"].size() == 2);
    CHECK(merged["reports"][0] == json::parse(a));
    CHECK(merged["reports"][1] == json::parse(b));
    CHECK_THROWS_AS(merge_reports_json({"not json"}), ConfigError);
}
