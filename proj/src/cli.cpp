#include "unipool/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "unipool/analysis.hpp"
#include "unipool/model.hpp"
#include "unipool/router.hpp"
#include "unipool/training.hpp"

namespace unipool {

namespace {

using nlohmann::ordered_json;

// Loads a checkpoint and resolves the data/provenance context the analysis
// commands share.
struct LoadedRun {
    ExperimentConfig cfg;
    TrainState state;
    Corpus corpus;

    Provenance prov(const std::string& split) const {
        return Provenance{cfg.hash(), cfg.seed, split};
    }
};

LoadedRun load_run(const std::string& checkpoint,
                   const std::optional<std::string>& data_override) {
    auto [cfg, state] = load_checkpoint(checkpoint);
    if (data_override) cfg.training.corpus = *data_override;
    LoadedRun run{std::move(cfg), std::move(state), {}};
    run.corpus =
        load_corpus(run.cfg.training.corpus, run.cfg.training.val_fraction);
    return run;
}

std::string default_out(const ExperimentConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.output_dir);
    return cfg.output_dir + "/" + name;
}

int cmd_calibrate(int experts, int topk, int64_t samples, uint64_t seed) {
    const double c = monte_carlo_c(experts, topk, samples, seed);
    ordered_json j;
    j["E"] = experts;
    j["k"] = topk;
    j["N"] = samples;
    j["seed"] = seed;
    j["c"] = c;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed,
              std::optional<std::string> output_dir) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    if (seed) cfg.seed = *seed;
    if (output_dir) cfg.output_dir = *output_dir;
    cfg.validate();

    const TrainSummary s = train_experiment(cfg);

    ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["tool_version"] = kToolVersion;
    j["config_hash"] = cfg.hash();
    j["seed"] = cfg.seed;
    j["kind"] = "train_summary";
    j["steps"] = s.steps;
    j["first_ce"] = s.first_ce;
    j["final_ce"] = s.final_ce;
    j["final_val_ce"] = s.final_val_ce;
    j["final_val_ppl"] = s.final_val_ppl;
    j["checkpoint"] = s.checkpoint_path;
    j["metrics"] = s.metrics_path;
    write_text_file(cfg.output_dir + "/summary.json", j.dump() + "\n");

    std::cout << "trained " << s.steps << " steps: ce " << s.first_ce << " -> "
              << s.final_ce << ", val ppl " << s.final_val_ppl << " ("
              << cfg.output_dir << ")\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, std::optional<std::string> data,
             const std::string& split, std::optional<int> batch,
             std::optional<std::string> out) {
    if (split != "train" && split != "val")
        throw ConfigError("eval: --split must be 'train' or 'val'");
    LoadedRun run = load_run(checkpoint, data);
    const auto& tokens =
        split == "train" ? run.corpus.train_tokens : run.corpus.val_tokens;
    const EvalResult r = evaluate(run.state.model, tokens,
                                  batch.value_or(run.cfg.training.batch_size));

    const Provenance prov = run.prov(split);
    ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["tool_version"] = kToolVersion;
    j["config_hash"] = prov.config_hash;
    j["seed"] = prov.seed;
    j["kind"] = "eval";
    j["split"] = split;
    j["ce"] = r.ce;
    j["ppl"] = r.ppl;
    j["windows"] = r.windows;
    j["target_tokens"] = r.target_tokens;
    const std::string path =
        out ? *out : default_out(run.cfg, "eval_" + split + ".json");
    write_text_file(path, j.dump() + "\n");
    std::cout << "eval " << split << ": ce " << r.ce << ", ppl " << r.ppl
              << " (" << path << ")\n";
    return 0;
}

// The validation slice is split once: the leading heldout fraction identifies
// matched expert sets, the remainder is what probes are scored on.
void split_probe_data(const LoadedRun& run, std::vector<int>* ident,
                      std::vector<int>* eval_split) {
    const auto& val = run.corpus.val_tokens;
    const auto cut = static_cast<size_t>(std::llround(
        static_cast<double>(val.size()) * run.cfg.analysis.heldout_fraction));
    ident->assign(val.begin(), val.begin() + static_cast<int64_t>(cut));
    eval_split->assign(val.begin() + static_cast<int64_t>(cut), val.end());
}

int cmd_probe(const std::string& checkpoint, const std::string& protocol,
              std::optional<std::string> data, std::optional<int> batch,
              std::optional<uint64_t> seed, std::optional<int> top_n,
              std::optional<std::string> out) {
    LoadedRun run = load_run(checkpoint, data);
    std::vector<int> ident, eval_split;
    split_probe_data(run, &ident, &eval_split);

    Provenance prov = run.prov("val_probe");
    if (seed) prov.seed = *seed;
    const ProbeResult res = randomization_probe(
        run.state.model, ident, eval_split, probe_protocol_from(protocol),
        prov, batch.value_or(run.cfg.training.batch_size),
        top_n.value_or(run.cfg.analysis.top_n));

    const std::string path =
        out ? *out : default_out(run.cfg, "probe_" + protocol + ".json");
    write_text_file(path, probe_report_json(res) + "\n");
    std::cout << "probe " << protocol << ": baseline ppl " << res.baseline_ppl
              << ", mean delta " << res.mean_delta << " over " << res.rows.size()
              << " deep layers (" << path << ")\n";
    return 0;
}

int cmd_reuse(const std::string& checkpoint, std::optional<std::string> data,
              std::optional<int> batch, std::optional<std::string> out) {
    LoadedRun run = load_run(checkpoint, data);
    const RoutingTrace trace = collect_trace(
        run.state.model, run.corpus.val_tokens,
        batch.value_or(run.cfg.training.batch_size), run.prov("val"));
    const ReuseReport r = unique_experts(trace);

    const std::string path = out ? *out : default_out(run.cfg, "reuse.json");
    write_text_file(path, reuse_report_json(r) + "\n");
    std::cout << "reuse: mean unique " << r.mean_unique << " of " << r.layers
              << " layers (" << path << ")\n";
    return 0;
}

int cmd_util(const std::string& checkpoint, std::optional<std::string> data,
             std::optional<int> batch, std::optional<std::string> out,
             std::optional<std::string> csv) {
    LoadedRun run = load_run(checkpoint, data);
    const RoutingTrace trace = collect_trace(
        run.state.model, run.corpus.val_tokens,
        batch.value_or(run.cfg.training.batch_size), run.prov("val"));
    const UtilizationReport u = utilization_from_trace(trace);

    const std::string json_path = out ? *out : default_out(run.cfg, "util.json");
    const std::string csv_path =
        csv ? *csv : default_out(run.cfg, "util_matrix.csv");
    write_text_file(json_path, util_report_json(u) + "\n");
    write_util_csv(csv_path, u);
    std::cout << "util: cv " << u.cv << ", max/mean " << u.max_mean << ", "
              << u.dead << " experts under 0.1x uniform (" << json_path << ", "
              << csv_path << ")\n";
    return 0;
}

int cmd_report_merge(const std::string& out,
                     const std::vector<std::string>& inputs) {
    std::vector<std::string> texts;
    texts.reserve(inputs.size());
    for (const auto& p : inputs) texts.push_back(read_text_file(p));
    write_text_file(out, merge_reports_json(texts) + "\n");
    std::cout << "merged " << inputs.size() << " reports (" << out << ")\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Mixture-of-experts lab: shared expert pools, pool-level "
                 "load balancing, and routing probes"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    // calibrate
    auto* cal = app.add_subcommand(
        "calibrate", "Estimate the norm router's rescale constant c");
    int cal_experts = 0, cal_topk = 0;
    int64_t cal_samples = 100000;
    uint64_t cal_seed = 0;
    cal->add_option("--experts", cal_experts, "router choices E")->required();
    cal->add_option("--topk", cal_topk, "selections per token k")->required();
    cal->add_option("--samples", cal_samples, "Monte Carlo samples (default 1e5)");
    cal->add_option("--seed", cal_seed, "sampler seed");

    // train
    auto* train = app.add_subcommand("train", "Train a model from a config file");
    std::string train_config;
    std::optional<uint64_t> train_seed;
    std::optional<std::string> train_out;
    train->add_option("--config", train_config, "experiment config (JSON)")
        ->required();
    train->add_option("--seed", train_seed, "override the config seed");
    train->add_option("--output", train_out, "override the output directory");

    // shared checkpoint-consuming options
    struct CkptArgs {
        std::string checkpoint;
        std::optional<std::string> data;
        std::optional<int> batch;
        std::optional<std::string> out;
    };
    auto add_ckpt_args = [](CLI::App* cmd, CkptArgs& a) {
        cmd->add_option("--checkpoint", a.checkpoint, "trained checkpoint (.upl)")
            ->required();
        cmd->add_option("--data", a.data, "override the corpus file");
        cmd->add_option("--batch", a.batch, "evaluation batch size");
        cmd->add_option("--out", a.out, "report path (default: run output dir)");
    };

    auto* ev = app.add_subcommand("eval", "Perplexity on a data split");
    CkptArgs ev_args;
    std::string ev_split = "val";
    add_ckpt_args(ev, ev_args);
    ev->add_option("--split", ev_split, "data split: train or val");

    auto* probe = app.add_subcommand(
        "probe", "Routing randomization sweep over the deep-half layers");
    CkptArgs probe_args;
    std::string probe_protocol;
    std::optional<uint64_t> probe_seed;
    std::optional<int> probe_top_n;
    add_ckpt_args(probe, probe_args);
    probe
        ->add_option("--protocol", probe_protocol,
                     "self | vanilla_uniform | pool_top8_matched | "
                     "pool_full_random")
        ->required();
    probe->add_option("--seed", probe_seed, "intervention seed (default: run seed)");
    probe->add_option("--top-n", probe_top_n,
                      "matched-set size (default: analysis.top_n)");

    auto* reuse = app.add_subcommand(
        "reuse", "Cross-layer unique-expert accounting (top-1 routing)");
    CkptArgs reuse_args;
    add_ckpt_args(reuse, reuse_args);

    auto* util = app.add_subcommand(
        "util", "Per-layer expert utilization matrix and imbalance stats");
    CkptArgs util_args;
    std::optional<std::string> util_csv;
    add_ckpt_args(util, util_args);
    util->add_option("--csv", util_csv, "matrix CSV path");

    auto* merge = app.add_subcommand("report-merge",
                                     "Bundle emitted JSON reports into one file");
    std::string merge_out;
    std::vector<std::string> merge_inputs;
    merge->add_option("--out", merge_out, "merged report path")->required();
    merge->add_option("inputs", merge_inputs, "report files to merge")
        ->required()
        ->expected(-1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(cal))
            return cmd_calibrate(cal_experts, cal_topk, cal_samples, cal_seed);
        if (app.got_subcommand(train))
            return cmd_train(train_config, train_seed, train_out);
        if (app.got_subcommand(ev))
            return cmd_eval(ev_args.checkpoint, ev_args.data, ev_split,
                            ev_args.batch, ev_args.out);
        if (app.got_subcommand(probe))
            return cmd_probe(probe_args.checkpoint, probe_protocol,
                             probe_args.data, probe_args.batch, probe_seed,
                             probe_top_n, probe_args.out);
        if (app.got_subcommand(reuse))
            return cmd_reuse(reuse_args.checkpoint, reuse_args.data,
                             reuse_args.batch, reuse_args.out);
        if (app.got_subcommand(util))
            return cmd_util(util_args.checkpoint, util_args.data,
                            util_args.batch, util_args.out, util_csv);
        if (app.got_subcommand(merge))
            return cmd_report_merge(merge_out, merge_inputs);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        // Shape violations and anything else unexpected: a computation-level
        // failure, not a usage or I/O problem.
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace unipool
