#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fewseg/analysis.hpp"
#include "fewseg/image_io.hpp"
#include "fewseg/plot.hpp"
#include "fewseg/runner.hpp"

namespace fs = std::filesystem;
using namespace fewseg;

namespace {

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw ConfigError("cannot open config: " + config_path);
        cfg = parse_config(f, cfg);
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw IngestError("cannot write " + path);
    f << content;
}

int cmd_run(const std::string& episode_dir, const std::string& config_path,
            const std::vector<std::string>& overrides, const std::string& out_dir,
            bool quick, const std::string& adapters_path) {
    RunConfig cfg = load_config(config_path, overrides);
    if (quick) cfg.quick_infer = true;
    Episode ep = load_episode(episode_dir);
    EpisodeResult res = run_episode(ep, cfg);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        for (size_t j = 0; j < res.queries.size(); ++j) {
            const auto& q = res.queries[j];
            write_mask((fs::path(out_dir) / ("mask_" + std::to_string(j) + ".png")).string(),
                       q.mask);
            if (cfg.save_soft_maps) {
                write_soft_map(
                    (fs::path(out_dir) / ("fused_" + std::to_string(j) + ".png")).string(),
                    q.fused);
                for (size_t l = 0; l < q.per_level.size(); ++l)
                    write_soft_map((fs::path(out_dir) / ("level_" + std::to_string(j) + "_" +
                                                         std::to_string(l) + ".png"))
                                       .string(),
                                   q.per_level[l]);
            }
        }
        std::ostringstream trace;
        trace << "epoch,mean_loss\n";
        for (size_t e = 0; e < res.loss_trace.size(); ++e)
            trace << e << "," << res.loss_trace[e] << "\n";
        write_text((fs::path(out_dir) / "loss_trace.csv").string(), trace.str());
    }
    if (!adapters_path.empty()) {
        // cache the fitted heads for later quick-infer runs
        FittedEpisode fit = fit_episode(ep, 0, cfg);
        save_adapter_stack(fit.stack, adapters_path);
    }
    std::cout << "episode " << res.episode_id << ": " << res.queries.size() << " queries, fit "
              << res.fit_ms << " ms, refined=" << (res.refine.refine ? "yes" : "no") << "\n";
    for (size_t j = 0; j < res.queries.size(); ++j) {
        const auto& q = res.queries[j];
        std::cout << "  query " << j << ": threshold " << q.threshold;
        if (q.counts) {
            const auto u = q.counts->tp + q.counts->fp + q.counts->fn;
            std::cout << ", IoU "
                      << (u ? static_cast<double>(q.counts->tp) / static_cast<double>(u) : 0.0);
        }
        std::cout << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& dataset_dir, int synthetic_count, uint64_t synth_seed,
             double separation, int synth_size, int synth_shots, const std::string& config_path,
             const std::vector<std::string>& overrides, const std::string& mode, double random_p,
             bool with_naive, int count, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path, overrides);
    EvalOptions opt;
    if (mode == "pipeline") opt.mode = PredictorMode::kPipeline;
    else if (mode == "naive") opt.mode = PredictorMode::kNaive;
    else if (mode == "random") opt.mode = PredictorMode::kRandom;
    else if (mode == "oracle") opt.mode = PredictorMode::kOracle;
    else throw ConfigError("unknown predictor mode: " + mode);
    opt.random_p = random_p;
    opt.with_naive_row = with_naive;

    EpisodeSource src;
    std::string label = mode;
    if (!dataset_dir.empty()) {
        src = directory_source(dataset_dir, count);
    } else {
        SynthSpec spec;
        spec.separation = separation;
        spec.height = spec.width = synth_size;
        spec.shots = synth_shots;
        if (cfg.input_size == 400) cfg.input_size = 0;  // synthetic episodes keep their size
        src = synthetic_source(synth_seed, synthetic_count, spec);
    }

    EvalSummary sum = evaluate(src, cfg, opt);
    std::optional<EvalSummary> naive;
    if (with_naive) naive = naive_summary_from(sum);
    const std::string csv = summary_csv(sum, label, naive ? &*naive : nullptr);
    std::cout << csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text((fs::path(out_dir) / "summary.csv").string(), csv);
        write_text((fs::path(out_dir) / "records.jsonl").string(), records_jsonl(sum));
        std::vector<Scalar> ious, ratios;
        for (const auto& r : sum.records) {
            const auto u = r.counts.tp + r.counts.fp + r.counts.fn;
            ious.push_back(u ? static_cast<Scalar>(r.counts.tp) / u : 0.0);
            ratios.push_back(r.pred_fg_ratio);
        }
        plot_report(ious, ratios, (fs::path(out_dir) / "report.png").string());
    }
    return 0;
}

int cmd_synth(int n, uint64_t seed, const std::string& out_dir, double separation, int size,
              int shots, int queries) {
    SynthSpec spec;
    spec.separation = separation;
    spec.height = spec.width = size;
    spec.shots = shots;
    spec.queries = queries;
    fs::create_directories(out_dir);
    for (int i = 0; i < n; ++i) {
        Episode ep = synthesize_episode(derive_seed(seed, i), spec);
        save_episode(ep, (fs::path(out_dir) / ep.episode_id).string());
    }
    std::cout << "wrote " << n << " episodes to " << out_dir << "\n";
    return 0;
}

int cmd_analyze(const std::string& episode_dir, const std::string& config_path,
                const std::vector<std::string>& overrides, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path, overrides);
    Episode raw = load_episode(episode_dir);
    auto backbone = make_backbone(cfg.backbone);
    Episode ep = prepare_episode(raw, cfg, *backbone);
    if (!ep.queries[0].gt)
        throw IngestError("analyze requires a ground-truth mask for the first query");

    FeaturePyramid qp = extract_pyramid(to_float(ep.queries[0].image), *backbone);
    FeaturePyramid sp = extract_pyramid(to_float(ep.support[0].image), *backbone);
    const MaskU8& qm = *ep.queries[0].gt;
    const MaskU8& sm = ep.support[0].mask;

    std::vector<LevelEmbeddingStats> before;
    for (int l = 0; l < qp.level_count(); ++l)
        before.push_back(class_similarities(qp.levels[l], sp.levels[l], qm, sm, l));

    FittedEpisode fit = fit_episode(raw, 0, cfg, backbone);
    std::vector<LevelEmbeddingStats> after;
    for (int l = 0; l < qp.level_count(); ++l) {
        Volume aq = adapter_infer(qp.levels[l], fit.stack.params[l]);
        Volume as = adapter_infer(sp.levels[l], fit.stack.params[l]);
        after.push_back(class_similarities(aq, as, qm, sm, l));
    }

    const std::vector<int>& split = backbone->spec().block_split;
    BlockSummary bs_before = block_average(before, split);
    BlockSummary bs_after = block_average(after, split);
    std::vector<std::string> names;
    const char* base[3] = {"L", "M", "H"};
    for (size_t b = 0; b < split.size(); ++b)
        names.push_back(b < 3 ? base[b] : "B" + std::to_string(b));
    const std::string csv = embedding_table_csv(bs_before, bs_after, names);
    std::cout << csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text((fs::path(out_dir) / "embedding_stats.csv").string(), csv);
    }
    return 0;
}

int cmd_plot(const std::string& report_file, const std::string& maps_dir,
             const std::string& out_dir) {
    fs::create_directories(out_dir);
    if (!maps_dir.empty()) {
        // expects the save_soft_maps layout produced by `run --out`
        MapF fused = read_soft_map((fs::path(maps_dir) / "fused_0.png").string());
        std::vector<MapF> levels;
        for (int l = 0;; ++l) {
            const fs::path p = fs::path(maps_dir) / ("level_0_" + std::to_string(l) + ".png");
            if (!fs::exists(p)) break;
            levels.push_back(read_soft_map(p.string()));
        }
        plot_fused_histogram(fused, (fs::path(out_dir) / "fused_histogram.png").string());
        if (!levels.empty()) {
            MaskU8 mask = binarize(fused);
            plot_level_grid(levels, fused, mask,
                            (fs::path(out_dir) / "level_grid.png").string());
        }
        std::cout << "wrote plots to " << out_dir << "\n";
        return 0;
    }
    if (!report_file.empty()) {
        std::ifstream f(report_file);
        if (!f) throw IngestError("cannot open report: " + report_file);
        std::vector<Scalar> ious, ratios;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            const double tp = j["tp"].get<double>(), fp = j["fp"].get<double>(),
                         fn = j["fn"].get<double>();
            const double u = tp + fp + fn;
            ious.push_back(u > 0 ? tp / u : 0.0);
            ratios.push_back(j["pred_fg_ratio"].get<double>());
        }
        plot_report(ious, ratios, (fs::path(out_dir) / "report.png").string());
        std::cout << "wrote plots to " << out_dir << "\n";
        return 0;
    }
    throw ConfigError("plot: pass --report or --maps");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"episodic few-shot segmentation via test-time adapted feature pyramids"};
    app.require_subcommand(1);

    std::string config_path, out_dir, episode_dir, dataset_dir, adapters_path;
    std::vector<std::string> overrides;
    bool quick = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--set", overrides, "config override key=value (repeatable)");
    };

    // run
    auto* run = app.add_subcommand("run", "run the pipeline on one episode");
    run->add_option("--episode", episode_dir, "episode directory")->required();
    run->add_option("--out", out_dir, "output directory");
    run->add_option("--adapters", adapters_path, "write the fitted adapter archive here");
    run->add_flag("--quick-infer", quick, "fit once on the first query, reuse for the rest");
    add_common(run);

    // eval
    std::string mode = "pipeline";
    double random_p = 0.5, separation = 1.0;
    int synthetic_count = 0, count = 0, shots_opt = 0, synth_size = 48, synth_shots = 1;
    uint64_t synth_seed = 7;
    bool with_naive = false;
    auto* eval = app.add_subcommand("eval", "evaluate over a dataset or synthetic suite");
    eval->add_option("--dataset", dataset_dir, "directory of episode directories");
    eval->add_option("--synthetic", synthetic_count, "number of synthetic episodes");
    eval->add_option("--seed", synth_seed, "synthetic suite seed");
    eval->add_option("--separation", separation, "synthetic texture separation in [0,1]");
    eval->add_option("--size", synth_size, "synthetic image size");
    eval->add_option("--synth-shots", synth_shots, "synthetic support shots");
    eval->add_option("--shots", shots_opt, "use at most this many support shots");
    eval->add_option("--count", count, "limit the number of dataset episodes");
    eval->add_option("--mode", mode, "pipeline | naive | random | oracle");
    eval->add_flag("--naive", [&mode](int64_t) { mode = "naive"; },
                   "shorthand for --mode naive");
    eval->add_option("--random", random_p, "Bernoulli probability; sets --mode random")
        ->expected(1);
    eval->add_flag("--with-naive", with_naive, "append the all-foreground comparison row");
    eval->add_option("--out", out_dir, "write summary.csv / records.jsonl / report.png");
    add_common(eval);

    // synth
    int synth_n = 10, synth_queries = 1;
    auto* synth = app.add_subcommand("synth", "write synthetic episodes to disk");
    synth->add_option("--count", synth_n, "episodes to generate")->required();
    synth->add_option("--seed", synth_seed, "suite seed");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--separation", separation, "texture separation in [0,1]");
    synth->add_option("--size", synth_size, "image size");
    synth->add_option("--shots", synth_shots, "support shots per episode");
    synth->add_option("--queries", synth_queries, "queries per episode");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "embedding discriminability before/after fit");
    analyze->add_option("--episode", episode_dir, "episode directory")->required();
    analyze->add_option("--out", out_dir, "output directory");
    add_common(analyze);

    // plot
    std::string report_file, maps_dir;
    auto* plot = app.add_subcommand("plot", "render histogram / level-grid / report plots");
    plot->add_option("--report", report_file, "records.jsonl from eval");
    plot->add_option("--maps", maps_dir, "soft-map directory from run --out");
    plot->add_option("--out", out_dir, "output directory")->required();

    // metrics surface
    auto* metrics_cmd = app.add_subcommand("metrics", "metric utilities");
    std::string surface_out;
    auto* surface = metrics_cmd->add_subcommand("surface", "random-predictor expectation surface");
    surface->add_option("--out", surface_out, "output PNG")->required();
    int surface_n = 50;
    surface->add_option("--grid", surface_n, "grid resolution");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return cmd_run(episode_dir, config_path, overrides, out_dir, quick, adapters_path);
        if (eval->parsed()) {
            if (eval->count("--random")) mode = "random";
            if (shots_opt > 0) overrides.push_back("shots=" + std::to_string(shots_opt));
            return cmd_eval(dataset_dir, synthetic_count, synth_seed, separation, synth_size,
                            synth_shots, config_path, overrides, mode, random_p, with_naive,
                            count, out_dir);
        }
        if (synth->parsed())
            return cmd_synth(synth_n, synth_seed, out_dir, separation, synth_size, synth_shots,
                             synth_queries);
        if (analyze->parsed()) return cmd_analyze(episode_dir, config_path, overrides, out_dir);
        if (plot->parsed()) return cmd_plot(report_file, maps_dir, out_dir);
        if (metrics_cmd->parsed() && surface->parsed()) {
            plot_random_surface(surface_n, surface_out);
            std::cout << "wrote " << surface_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
