#include "fewseg/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fewseg/compare.hpp"
#include "fewseg/geometry.hpp"
#include "fewseg/image_io.hpp"

namespace fs = std::filesystem;

namespace fewseg {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

}  // namespace

void RunConfig::validate() const {
    if (input_size < 0) throw ConfigError("input_size must be >= 0");
    if (aug_count < 1) throw ConfigError("aug_count must be >= 1");
    if (max_shear_deg < 0) throw ConfigError("max_shear_deg must be >= 0");
    if (threads < 0) throw ConfigError("threads must be >= 0");
    loss.validate();
    crf.validate();
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&value] { return std::stoi(value); };
    auto as_f = [&value] { return std::stod(value); };
    auto as_bool = [&value] {
        return value == "1" || value == "true" || value == "yes" || value == "on";
    };
    if (key == "input_size") cfg.input_size = as_int();
    else if (key == "shots") cfg.shots = as_int();
    else if (key == "aug_count") cfg.aug_count = as_int();
    else if (key == "max_shear_deg") cfg.max_shear_deg = as_f();
    else if (key == "temperature") cfg.loss.temperature = as_f();
    else if (key == "epochs") cfg.loss.epochs = as_int();
    else if (key == "learning_rate") cfg.loss.learning_rate = as_f();
    else if (key == "momentum") cfg.loss.momentum = as_f();
    else if (key == "adapter_channels") cfg.loss.adapter_channels = as_int();
    else if (key == "bn_momentum") cfg.loss.bn_momentum = as_f();
    else if (key == "backbone") cfg.backbone.provider_id = value;
    else if (key == "backbone_seed") cfg.backbone.seed = std::stoull(value);
    else if (key == "backbone_weights") cfg.backbone.weights_path = value;
    else if (key == "sxy_gaussian") cfg.crf.sxy_gaussian = as_f();
    else if (key == "compat_gaussian") cfg.crf.compat_gaussian = as_f();
    else if (key == "sxy_bilateral") cfg.crf.sxy_bilateral = as_f();
    else if (key == "srgb") cfg.crf.srgb = as_f();
    else if (key == "compat_bilateral") cfg.crf.compat_bilateral = as_f();
    else if (key == "crf_iterations") cfg.crf.iterations = as_int();
    else if (key == "crf_temperature") cfg.crf.temperature = as_f();
    else if (key == "refinement") {
        if (value == "dynamic") cfg.refinement = Refinement::kDynamic;
        else if (value == "never") cfg.refinement = Refinement::kNever;
        else throw ConfigError("refinement must be 'dynamic' or 'never'");
    } else if (key == "quick_infer") cfg.quick_infer = as_bool();
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "threads") cfg.threads = as_int();
    else if (key == "save_soft_maps") cfg.save_soft_maps = as_bool();
    else throw ConfigError("unknown config key: " + key);
}

RunConfig parse_config(std::istream& in, RunConfig base) {
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto strip = [](std::string s) {
            auto b2 = s.find_first_not_of(" \t");
            auto e2 = s.find_last_not_of(" \t");
            return b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
        };
        apply_override(base, strip(key), strip(value));
    }
    return base;
}

std::string dump_config(const RunConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "input_size=" << cfg.input_size << "\n";
    os << "shots=" << cfg.shots << "\n";
    os << "aug_count=" << cfg.aug_count << "\n";
    os << "max_shear_deg=" << cfg.max_shear_deg << "\n";
    os << "temperature=" << cfg.loss.temperature << "\n";
    os << "epochs=" << cfg.loss.epochs << "\n";
    os << "learning_rate=" << cfg.loss.learning_rate << "\n";
    os << "momentum=" << cfg.loss.momentum << "\n";
    os << "adapter_channels=" << cfg.loss.adapter_channels << "\n";
    os << "bn_momentum=" << cfg.loss.bn_momentum << "\n";
    os << "backbone=" << cfg.backbone.provider_id << "\n";
    os << "backbone_seed=" << cfg.backbone.seed << "\n";
    os << "backbone_weights=" << cfg.backbone.weights_path << "\n";
    os << "sxy_gaussian=" << cfg.crf.sxy_gaussian << "\n";
    os << "compat_gaussian=" << cfg.crf.compat_gaussian << "\n";
    os << "sxy_bilateral=" << cfg.crf.sxy_bilateral << "\n";
    os << "srgb=" << cfg.crf.srgb << "\n";
    os << "compat_bilateral=" << cfg.crf.compat_bilateral << "\n";
    os << "crf_iterations=" << cfg.crf.iterations << "\n";
    os << "crf_temperature=" << cfg.crf.temperature << "\n";
    os << "refinement=" << (cfg.refinement == Refinement::kDynamic ? "dynamic" : "never") << "\n";
    os << "quick_infer=" << (cfg.quick_infer ? 1 : 0) << "\n";
    os << "seed=" << cfg.seed << "\n";
    os << "threads=" << cfg.threads << "\n";
    os << "save_soft_maps=" << (cfg.save_soft_maps ? 1 : 0) << "\n";
    return os.str();
}

Episode prepare_episode(Episode ep, const RunConfig& cfg, const BackboneProvider& backbone) {
    const int stride = backbone.spec().max_stride();
    if (cfg.input_size > 0) {
        if (cfg.input_size % stride != 0)
            throw ConfigError("input_size " + std::to_string(cfg.input_size) +
                              " not divisible by backbone stride " + std::to_string(stride));
        for (auto& s : ep.support) {
            s.image = resize_image(s.image, cfg.input_size, cfg.input_size);
            s.mask = resize_mask(s.mask, cfg.input_size, cfg.input_size);
        }
        for (auto& q : ep.queries) {
            q.image = resize_image(q.image, cfg.input_size, cfg.input_size);
            if (q.gt) q.gt = resize_mask(*q.gt, cfg.input_size, cfg.input_size);
        }
    }
    if (cfg.shots > 0 && ep.shots() > cfg.shots)
        ep.support.resize(cfg.shots);
    ep.validate();
    return ep;
}

namespace {

struct ImageFeatures {
    FeaturePyramid orig;
    // per view, per level
    std::vector<std::vector<Backprojected>> views;
};

ImageFeatures featurize(const ImageF& image, const BackboneProvider& backbone, int aug_count,
                        Scalar max_shear_deg, uint64_t view_seed, const MaskU8* mask = nullptr) {
    ImageFeatures out;
    out.orig = extract_pyramid(image, backbone);
    ViewSet views = make_views(image, mask, aug_count, max_shear_deg, view_seed);
    out.views.resize(views.views.size());
    for (size_t a = 0; a < views.views.size(); ++a) {
        FeaturePyramid vp = extract_pyramid(views.views[a].image, backbone);
        out.views[a].reserve(vp.level_count());
        for (int l = 0; l < vp.level_count(); ++l) {
            const Volume& fv = vp.levels[l];
            std::vector<uint8_t> vv =
                view_feature_validity(views.views[a].affine, fv.h, fv.w, image.h, image.w);
            out.views[a].push_back(backproject(fv, views.views[a].affine, image.h, image.w, &vv));
        }
    }
    return out;
}

// rows of adapted features restricted to valid positions
void gather_valid(const Eigen::MatrixXd& rows, const std::vector<uint8_t>& valid,
                  Eigen::MatrixXd& out_rows, Eigen::VectorXd* out_mask = nullptr,
                  const MapF* mask = nullptr) {
    std::vector<int> idx;
    for (size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) idx.push_back(static_cast<int>(i));
    out_rows.resize(idx.size(), rows.cols());
    if (out_mask) out_mask->resize(idx.size());
    for (size_t r = 0; r < idx.size(); ++r) {
        out_rows.row(r) = rows.row(idx[r]);
        if (out_mask) (*out_mask)(r) = mask->data[idx[r]];
    }
}

}  // namespace

FittedEpisode fit_episode(const Episode& ep, int query_index, const RunConfig& cfg,
                          std::shared_ptr<BackboneProvider> backbone) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    if (!backbone) backbone = make_backbone(cfg.backbone);
    Episode prepared = prepare_episode(ep, cfg, *backbone);
    if (query_index < 0 || query_index >= static_cast<int>(prepared.queries.size()))
        throw ConfigError("fit_episode: query index out of range");

    const int img_h = prepared.queries[query_index].image.h;
    const int img_w = prepared.queries[query_index].image.w;
    for (const auto& s : prepared.support)
        if (s.image.h != img_h || s.image.w != img_w)
            throw IngestError("episode " + prepared.episode_id +
                              ": support/query sizes differ after preparation");

    const uint64_t base_seed = derive_seed(cfg.seed, prepared.seed);
    const BackboneSpec& spec = backbone->spec();
    const int levels = spec.level_count();
    const int shots = prepared.shots();

    // feature extraction + views + backprojection; view seeds derive from
    // the image content, so duplicated shots get identical view sets
    auto content_seed = [base_seed](const ImageU8& img) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (uint8_t b : img.data) {
            h ^= b;
            h *= 0x100000001b3ull;
        }
        return derive_seed(base_seed, h);
    };
    ImageFeatures qf = featurize(to_float(prepared.queries[query_index].image), *backbone,
                                 cfg.aug_count, cfg.max_shear_deg,
                                 content_seed(prepared.queries[query_index].image));
    std::vector<ImageFeatures> sf(shots);
    std::vector<MaskPyramid> mp(shots);
    for (int k = 0; k < shots; ++k) {
        sf[k] = featurize(to_float(prepared.support[k].image), *backbone, cfg.aug_count,
                          cfg.max_shear_deg, content_seed(prepared.support[k].image),
                          &prepared.support[k].mask);
        mp[k] = downsample_mask(prepared.support[k].mask, spec);
    }

    // assemble per-level fit data
    std::vector<LevelFitData> fit_data(levels);
    for (int l = 0; l < levels; ++l) {
        LevelFitData& d = fit_data[l];
        d.query = qf.orig.levels[l];
        for (size_t a = 0; a < qf.views.size(); ++a) {
            d.query_views.push_back(qf.views[a][l].features);
            d.query_view_valid.push_back(qf.views[a][l].valid);
        }
        d.support.resize(shots);
        d.support_views.resize(shots);
        d.support_view_valid.resize(shots);
        d.masks.resize(shots);
        for (int k = 0; k < shots; ++k) {
            d.support[k] = sf[k].orig.levels[l];
            for (size_t a = 0; a < sf[k].views.size(); ++a) {
                d.support_views[k].push_back(sf[k].views[a][l].features);
                d.support_view_valid[k].push_back(sf[k].views[a][l].valid);
            }
            d.masks[k] = mp[k].levels[l];
        }
    }

    FittedEpisode out;
    out.backbone = backbone;
    out.img_h = img_h;
    out.img_w = img_w;
    out.stack = fit_adapters(fit_data, cfg.loss, derive_seed(base_seed, 0xF17),
                             cfg.threads > 1 ? cfg.threads : 1);

    // adapted support rows (frozen statistics) and pseudoepisode features
    out.support_levels.resize(levels);
    PseudoEpisode pe;
    pe.q.resize(levels);
    pe.k.resize(levels);
    pe.v.resize(levels);
    pe.level_hw.resize(levels);
    for (int l = 0; l < levels; ++l) {
        const AdapterParams& params = out.stack.params[l];
        std::vector<Volume> adapted(shots);
        std::vector<const Volume*> feat_ptrs(shots);
        std::vector<const MapF*> mask_ptrs(shots);
        for (int k = 0; k < shots; ++k) {
            adapted[k] = adapter_infer(fit_data[l].support[k], params);
            feat_ptrs[k] = &adapted[k];
            mask_ptrs[k] = &mp[k].levels[l];
        }
        concat_shots(feat_ptrs, mask_ptrs, out.support_levels[l].k, out.support_levels[l].v);
        out.support_levels[l].h = adapted[0].h;
        out.support_levels[l].w = adapted[0].w;

        // pseudoepisode: support as query vs its first view as support;
        // invalid backprojected rows carry no content and are dropped
        pe.level_hw[l] = {adapted[0].h, adapted[0].w};
        pe.q[l] = out.support_levels[l].k;
        std::vector<Eigen::MatrixXd> krows(shots);
        std::vector<Eigen::VectorXd> vrows(shots);
        Eigen::Index total = 0;
        for (int k = 0; k < shots; ++k) {
            Volume vadapted = adapter_infer(fit_data[l].support_views[k][0], params);
            gather_valid(vadapted.rows(), fit_data[l].support_view_valid[k][0], krows[k],
                         &vrows[k], &mp[k].levels[l]);
            total += krows[k].rows();
        }
        pe.k[l].resize(total, cfg.loss.adapter_channels);
        pe.v[l].resize(total);
        Eigen::Index at = 0;
        for (int k = 0; k < shots; ++k) {
            pe.k[l].middleRows(at, krows[k].rows()) = krows[k];
            pe.v[l].segment(at, vrows[k].size()) = vrows[k];
            at += krows[k].rows();
        }
    }

    if (cfg.refinement == Refinement::kDynamic) {
        for (int k = 0; k < shots; ++k) {
            pe.support_images.push_back(prepared.support[k].image);
            pe.support_masks.push_back(prepared.support[k].mask);
        }
        out.refine = refine_decision(pe, cfg.crf);
    } else {
        out.refine.refine = false;
    }
    out.fit_ms = ms_since(t0);
    return out;
}

QueryResult infer_query(const FittedEpisode& fit, const QuerySample& query, const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    QueryResult res;
    ImageU8 img = query.image;
    std::optional<MaskU8> gt = query.gt;
    if (cfg.input_size > 0 && (img.h != cfg.input_size || img.w != cfg.input_size)) {
        img = resize_image(img, cfg.input_size, cfg.input_size);
        if (gt) gt = resize_mask(*gt, cfg.input_size, cfg.input_size);
    }
    if (img.h != fit.img_h || img.w != fit.img_w)
        throw ShapeError("infer_query: query size does not match the fitted episode");

    FeaturePyramid qp = extract_pyramid(to_float(img), *fit.backbone);
    if (qp.level_count() != static_cast<int>(fit.stack.params.size()))
        throw ShapeError("infer_query: adapter stack level mismatch");

    std::vector<MapF> level_maps;
    for (int l = 0; l < qp.level_count(); ++l) {
        Volume adapted = adapter_infer(qp.levels[l], fit.stack.params[l]);
        CorrelationInputs ci;
        ci.q = adapted.rows();
        ci.k = fit.support_levels[l].k;
        ci.v = fit.support_levels[l].v;
        ci.out_h = adapted.h;
        ci.out_w = adapted.w;
        level_maps.push_back(correlation_map(ci));
    }

    res.fused = fuse(level_maps, img.h, img.w, &res.per_level);
    res.threshold = threshold(res.fused);
    if (fit.refine.refine) {
        res.mask = crf_refine(img, res.fused, res.threshold, cfg.crf);
        res.refined = true;
    } else {
        res.mask = binarize(res.fused, res.threshold);
        res.refined = false;
    }
    if (gt) res.counts = count_pixels(res.mask, *gt);
    res.infer_ms = ms_since(t0);
    return res;
}

std::vector<QueryResult> quick_infer(const FittedEpisode& fit,
                                     const std::vector<QuerySample>& queries,
                                     const RunConfig& cfg) {
    std::vector<QueryResult> out;
    out.reserve(queries.size());
    for (const auto& q : queries) out.push_back(infer_query(fit, q, cfg));
    return out;
}

EpisodeResult run_episode(const Episode& ep, const RunConfig& cfg) {
    cfg.validate();
    EpisodeResult out;
    out.episode_id = ep.episode_id;
    out.class_id = ep.class_id;
    try {
        auto backbone = make_backbone(cfg.backbone);
        if (cfg.quick_infer) {
            FittedEpisode fit = fit_episode(ep, 0, cfg, backbone);
            out.queries = quick_infer(fit, ep.queries, cfg);
            out.refine = fit.refine;
            out.loss_trace = fit.stack.loss_trace;
            out.fit_ms = fit.fit_ms;
        } else {
            for (size_t j = 0; j < ep.queries.size(); ++j) {
                FittedEpisode fit = fit_episode(ep, static_cast<int>(j), cfg, backbone);
                out.queries.push_back(infer_query(fit, ep.queries[j], cfg));
                out.refine = fit.refine;
                out.loss_trace = fit.stack.loss_trace;
                out.fit_ms += fit.fit_ms;
            }
        }
    } catch (const std::exception& e) {
        throw NumericError("episode " + ep.episode_id + ": " + e.what());
    }
    return out;
}

// ---- evaluation ----

EpisodeSource directory_source(const std::string& dataset_dir, int max_episodes) {
    std::vector<std::string> dirs;
    if (!fs::is_directory(dataset_dir)) throw IngestError("dataset dir not found: " + dataset_dir);
    for (const auto& e : fs::directory_iterator(dataset_dir))
        if (e.is_directory()) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (max_episodes > 0 && static_cast<int>(dirs.size()) > max_episodes)
        dirs.resize(max_episodes);
    if (dirs.empty()) throw IngestError("no episodes in " + dataset_dir);
    EpisodeSource src;
    src.count = static_cast<int>(dirs.size());
    src.get = [dirs](int i) { return load_episode(dirs[i]); };
    return src;
}

EpisodeSource synthetic_source(uint64_t seed, int count, const SynthSpec& spec) {
    if (count < 1) throw ConfigError("synthetic source needs at least one episode");
    spec.validate();
    EpisodeSource src;
    src.count = count;
    src.get = [seed, spec](int i) { return synthesize_episode(derive_seed(seed, i), spec); };
    return src;
}

namespace {

EpisodeRecord run_one_for_eval(const Episode& ep, const RunConfig& cfg, const EvalOptions& opt) {
    EpisodeRecord rec;
    rec.episode_id = ep.episode_id;
    rec.class_id = ep.class_id;
    uint64_t pred_fg = 0, pixels = 0;

    auto need_gt = [&ep](size_t j) -> const MaskU8& {
        if (!ep.queries[j].gt)
            throw IngestError("episode " + ep.episode_id + ": evaluation requires query masks");
        return *ep.queries[j].gt;
    };

    switch (opt.mode) {
        case PredictorMode::kPipeline: {
            EpisodeResult er = run_episode(ep, cfg);
            for (size_t j = 0; j < er.queries.size(); ++j) {
                const QueryResult& q = er.queries[j];
                if (!q.counts)
                    throw IngestError("episode " + ep.episode_id +
                                      ": evaluation requires query masks");
                rec.counts.tp += q.counts->tp;
                rec.counts.fp += q.counts->fp;
                rec.counts.fn += q.counts->fn;
                rec.counts.tn += q.counts->tn;
                pred_fg += q.mask.count_fg();
                pixels += static_cast<uint64_t>(q.mask.size());
                rec.threshold = q.threshold;
                rec.refined = q.refined;
            }
            rec.pseudo_iou_refined = er.refine.pseudo_iou_refined;
            rec.pseudo_iou_unrefined = er.refine.pseudo_iou_unrefined;
            rec.fit_ms = er.fit_ms;
            for (const auto& q : er.queries) rec.infer_ms += q.infer_ms;
            break;
        }
        case PredictorMode::kNaive:
        case PredictorMode::kOracle:
        case PredictorMode::kRandom: {
            for (size_t j = 0; j < ep.queries.size(); ++j) {
                const MaskU8& gt = need_gt(j);
                MaskU8 pred(gt.h, gt.w, 1);
                if (opt.mode == PredictorMode::kOracle) pred = gt;
                if (opt.mode == PredictorMode::kRandom) {
                    Rng rng(derive_seed(derive_seed(cfg.seed, ep.seed), 0xBE4, j));
                    for (auto& v : pred.data) v = rng.uniform() < opt.random_p ? 1 : 0;
                }
                PixelCounts c = count_pixels(pred, gt);
                rec.counts.tp += c.tp;
                rec.counts.fp += c.fp;
                rec.counts.fn += c.fn;
                rec.counts.tn += c.tn;
                pred_fg += pred.count_fg();
                pixels += static_cast<uint64_t>(pred.size());
            }
            break;
        }
    }
    rec.pred_fg_ratio = pixels ? static_cast<Scalar>(pred_fg) / pixels : 0.0;
    return rec;
}

EvalSummary summarize(std::vector<EpisodeRecord> records) {
    EvalSummary s;
    s.records = std::move(records);
    s.episodes = static_cast<int>(s.records.size());
    int classes = 1;
    for (const auto& r : s.records) classes = std::max(classes, r.class_id + 1);
    s.acc = IoUAccumulator(classes);
    Scalar iou_sum = 0.0, fg_sum = 0.0;
    for (const auto& r : s.records) {
        accumulate(r.counts, r.class_id, s.acc);
        const uint64_t u = r.counts.tp + r.counts.fp + r.counts.fn;
        iou_sum += u ? static_cast<Scalar>(r.counts.tp) / u : 0.0;
        fg_sum += r.pred_fg_ratio;
    }
    s.miou_aggregate = miou(s.acc);
    s.miou_episode_mean = iou_sum / s.episodes;
    s.fbiou = fbiou(s.acc);
    s.mean_fg_pct = 100.0 * fg_sum / s.episodes;
    return s;
}

}  // namespace

EvalSummary evaluate(const EpisodeSource& source, const RunConfig& cfg, const EvalOptions& opt) {
    cfg.validate();
    if (source.count < 1) throw IngestError("evaluate: empty episode source");
    std::vector<EpisodeRecord> records(source.count);

    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    int workers = cfg.threads > 0 ? cfg.threads : std::max(1, hw);
    workers = std::min(workers, source.count);

    // worker pool with private records; merge order is fixed by index
    RunConfig worker_cfg = cfg;
    worker_cfg.threads = 1;
    std::exception_ptr error;
    std::mutex error_mu;
    if (workers > 1) {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                for (int i = next.fetch_add(1); i < source.count; i = next.fetch_add(1)) {
                    try {
                        records[i] = run_one_for_eval(source.get(i), worker_cfg, opt);
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(error_mu);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
        if (error) std::rethrow_exception(error);
    } else {
        for (int i = 0; i < source.count; ++i)
            records[i] = run_one_for_eval(source.get(i), worker_cfg, opt);
    }
    return summarize(std::move(records));
}

EvalSummary naive_summary_from(const EvalSummary& s) {
    std::vector<EpisodeRecord> records = s.records;
    for (auto& r : records) {
        const PixelCounts c = r.counts;
        r.counts.tp = c.tp + c.fn;  // ground-truth foreground
        r.counts.fp = c.fp + c.tn;  // ground-truth background
        r.counts.fn = 0;
        r.counts.tn = 0;
        r.pred_fg_ratio = 1.0;
        r.threshold = 0.0;
        r.refined = false;
    }
    return summarize(std::move(records));
}

std::string records_jsonl(const EvalSummary& s) {
    std::ostringstream os;
    for (const auto& r : s.records) {
        nlohmann::json j;
        j["episode_id"] = r.episode_id;
        j["class_id"] = r.class_id;
        j["tp"] = r.counts.tp;
        j["fp"] = r.counts.fp;
        j["fn"] = r.counts.fn;
        j["tn"] = r.counts.tn;
        j["pred_fg_ratio"] = r.pred_fg_ratio;
        j["threshold"] = r.threshold;
        j["refined"] = r.refined;
        j["pseudo_iou_refined"] = r.pseudo_iou_refined;
        j["pseudo_iou_unrefined"] = r.pseudo_iou_unrefined;
        j["fit_ms"] = r.fit_ms;
        j["infer_ms"] = r.infer_ms;
        os << j.dump() << "\n";
    }
    return os.str();
}

std::string summary_csv(const EvalSummary& s, const std::string& label, const EvalSummary* naive) {
    std::ostringstream os;
    os.precision(2);
    os << std::fixed;
    os << "predictor,episodes,miou,miou_episode_mean,fbiou,fg_pct\n";
    auto row = [&os](const std::string& name, const EvalSummary& v) {
        os << name << "," << v.episodes << "," << 100.0 * v.miou_aggregate << ","
           << 100.0 * v.miou_episode_mean << "," << 100.0 * v.fbiou << "," << v.mean_fg_pct
           << "\n";
    };
    row(label, s);
    if (naive) row("naive", *naive);
    return os.str();
}

}  // namespace fewseg
