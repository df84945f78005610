#include "bifrec/commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "bifrec/errors.hpp"
#include "bifrec/threading.hpp"

namespace bifrec {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void ensure_parent_dir(const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent_dir(path);
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw DataError("write failed for '" + path + "'");
}

std::string config_echo_string(const RunConfig& config, const ordered_json& meta) {
    ordered_json j;
    j["format_version"] = 1;
    j["config"] = to_json(config);
    j["meta"] = meta;
    return j.dump();
}

void assign_from_checkpoint(const Checkpoint& ckpt, const std::string& name, Tensor& dest) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw DataError("checkpoint is missing tensor '" + name + "'");
    if (src->shape() != dest.shape())
        throw DataError("checkpoint tensor '" + name + "' has unexpected shape");
    dest.mutable_data() = src->data();
}

}  // namespace

Checkpoint build_checkpoint(DualChannelParams& params, const RunConfig& config,
                            const ordered_json& meta, bool include_head) {
    Checkpoint ckpt;
    ckpt.config_json = config_echo_string(config, meta);
    visit_tensors(params.frozen, [&](const std::string& name, Tensor& t) {
        ckpt.tensors.emplace_back("frozen." + name, t.detach_copy());
    });
    if (include_head) {
        params.visit_head_tensors([&](const std::string& name, Tensor& t) {
            ckpt.tensors.emplace_back("head." + name, t.detach_copy());
        });
    }
    return ckpt;
}

namespace {

std::pair<RunConfig, json> parse_ckpt_config(const Checkpoint& ckpt) {
    json j;
    try {
        j = json::parse(ckpt.config_json);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("checkpoint config echo is not valid JSON: ") + e.what());
    }
    if (!j.contains("config") || !j.contains("meta"))
        throw DataError("checkpoint config echo lacks config/meta");
    return {run_config_from_json(j.at("config")), j.at("meta")};
}

FrozenEncoderSet frozen_from_checkpoint(const Checkpoint& ckpt, const EncoderConfig& cfg,
                                        uint64_t seed) {
    FrozenEncoderSet set;
    RandomStream root(seed);
    set.image = init_image_encoder(cfg, root.fork("image"));
    set.text = init_text_encoder(cfg, root.fork("text"));
    set.audio = init_audio_encoder(cfg, root.fork("audio"));
    visit_tensors(set, [&](const std::string& name, Tensor& t) {
        assign_from_checkpoint(ckpt, "frozen." + name, t);
    });
    set_requires_grad(set, false);
    return set;
}

}  // namespace

LoadedFrozen load_frozen(const std::string& checkpoint_path) {
    Checkpoint ckpt = read_checkpoint(checkpoint_path);
    auto [config, meta] = parse_ckpt_config(ckpt);
    config.encoder.validate();
    LoadedFrozen out{frozen_from_checkpoint(ckpt, config.encoder, config.seed), config, meta};
    return out;
}

LoadedModel load_model(const std::string& checkpoint_path, ModelMode mode) {
    Checkpoint ckpt = read_checkpoint(checkpoint_path);
    auto [config, meta] = parse_ckpt_config(ckpt);
    config.encoder.validate();
    std::string kind = meta.value("kind", "pretrain");
    if (mode != ModelMode::pipeline_zero_shot) {
        if (kind != "trained")
            throw UsageError("checkpoint '" + checkpoint_path +
                             "' holds no trained head; only pipeline_zero_shot can use it");
        std::string trained_mode = meta.value("mode", "");
        if (trained_mode != mode_name(mode))
            throw UsageError("checkpoint was trained in mode " + trained_mode +
                             ", requested " + mode_name(mode));
    }
    FrozenEncoderSet frozen = frozen_from_checkpoint(ckpt, config.encoder, config.seed);
    DualChannelParams params = init_params(config.encoder, mode, std::move(frozen), config.seed);
    if (kind == "trained" && mode != ModelMode::pipeline_zero_shot) {
        params.visit_head_tensors([&](const std::string& name, Tensor& t) {
            assign_from_checkpoint(ckpt, "head." + name, t);
        });
    }
    return {std::move(params), std::move(config), std::move(meta)};
}

std::vector<uint8_t> frozen_bytes(DualChannelParams& params) {
    std::vector<std::pair<std::string, Tensor>> named;
    visit_tensors(params.frozen, [&](const std::string& name, Tensor& t) {
        named.emplace_back(name, t);
    });
    return serialize_tensors(named);
}

ordered_json report_to_json(const RetrievalReport& report, const RunConfig& config) {
    ordered_json j;
    j["format_version"] = 1;
    j["config"] = to_json(config);
    j["mode"] = report.mode;
    j["text_source"] = report.text_source;
    j["speech2image"] = {{"r1", report.s2i_r1}, {"r5", report.s2i_r5}, {"r10", report.s2i_r10}};
    j["image2speech"] = {{"r1", report.i2s_r1}, {"r5", report.i2s_r5}, {"r10", report.i2s_r10}};
    j["n_queries_speech2image"] = report.n_queries_s2i;
    j["n_queries_image2speech"] = report.n_queries_i2s;
    j["n_dropped"] = report.n_dropped;
    return j;
}

std::string report_to_csv(const RetrievalReport& r) {
    std::ostringstream os;
    os << "speech2image_r1,speech2image_r5,speech2image_r10,"
       << "image2speech_r1,image2speech_r5,image2speech_r10\n";
    os << r.s2i_r1 << ',' << r.s2i_r5 << ',' << r.s2i_r10 << ',' << r.i2s_r1 << ','
       << r.i2s_r5 << ',' << r.i2s_r10 << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

void cmd_gen_data(const std::string& style, long n_images, long captions_per_image,
                  uint64_t seed, const std::string& out_path, std::ostream& log) {
    Dataset ds = generate_dataset(parse_style(style), n_images, captions_per_image, seed);
    ensure_parent_dir(out_path);
    write_dataset(ds, out_path);
    log << "wrote " << ds.samples.size() << " samples (" << n_images << " images, "
        << ds.header.train_image_ids.size() << " train / " << ds.header.test_image_ids.size()
        << " test) to " << out_path << "\n";
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

void cmd_pretrain(const RunConfig& config, std::ostream& log) {
    config.validate();
    if (config.corpus_path.empty() || config.checkpoint_path.empty())
        throw UsageError("pretrain needs corpus_path and checkpoint_path");
    Dataset corpus = read_dataset(config.corpus_path);
    std::string why;
    if (!dataset_compatible(corpus.header, config.encoder, &why))
        throw DataError("corpus incompatible with encoder config: " + why);

    std::ostringstream csv;
    csv << "step,loss\n";
    PretrainOptions opt;
    opt.steps = config.pretrain_steps;
    opt.batch_size = config.loss.batch_size;
    opt.schedule = config.schedule;
    opt.schedule.total_steps = config.pretrain_steps;
    opt.schedule.warmup_steps =
        std::min(config.schedule.warmup_steps, std::max(1L, config.pretrain_steps / 10));
    opt.log_interval = 50;
    opt.log = [&](long step, double loss) { csv << step << ',' << loss << '\n'; };

    log << "pretraining image/text stand-ins for " << opt.steps << " steps on "
        << corpus.samples.size() << " samples\n";
    FrozenEncoderSet set = pretrain_standins(corpus, config.encoder, config.seed, opt);

    DualChannelParams params =
        init_params(config.encoder, ModelMode::pipeline_zero_shot, std::move(set), config.seed);
    ordered_json meta;
    meta["kind"] = "pretrain";
    meta["steps"] = opt.steps;
    meta["vocab_words"] = vocab_size();
    Checkpoint ckpt = build_checkpoint(params, config, meta, false);
    ensure_parent_dir(config.checkpoint_path);
    write_checkpoint(ckpt, config.checkpoint_path);
    write_text(config.checkpoint_path + ".log.csv", csv.str());

    // quick zero-shot sanity number on the held-out corpus split
    RetrievalReport report =
        evaluate_retrieval(params, corpus, false, TextSource::ground_truth);
    log << "pretrain done; held-out caption->image R@1 " << std::fixed << std::setprecision(3)
        << report.s2i_r1 << "; checkpoint at " << config.checkpoint_path << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainResult cmd_train(const RunConfig& config, const std::string& frozen_checkpoint,
                      const std::string& out_checkpoint, std::ostream& log) {
    ModelMode mode = parse_mode(config.mode);
    if (!mode_trainable(mode))
        throw UsageError("pipeline_zero_shot uses the pretrained modules without any fine "
                         "tuning or prompting; evaluate it directly instead of training");

    LoadedFrozen base = load_frozen(frozen_checkpoint);
    RunConfig rc = config;
    rc.encoder = base.config.encoder;  // weights fix the architecture
    rc.validate();

    Dataset ds = read_dataset(rc.dataset_path);
    std::string why;
    if (!dataset_compatible(ds.header, rc.encoder, &why))
        throw DataError("dataset incompatible with checkpoint: " + why);
    resolve_asr(ds, rc.asr, rc.seed);

    DualChannelParams params = init_params(rc.encoder, mode, std::move(base.frozen), rc.seed);
    auto train_pool = ds.split_indices(true);
    if (mode != ModelMode::full && mode_uses_text(mode)) {
        // pipeline batches cannot carry crashed samples
        std::vector<std::size_t> usable;
        for (std::size_t idx : train_pool)
            if (ds.samples[idx].has_transcription) usable.push_back(idx);
        train_pool = std::move(usable);
    }
    if (train_pool.empty()) throw UsageError("train: no usable training samples");

    // mood-aware batches co-locate each sample with its confusable twin so
    // the tint-disambiguation contrast is present in every step
    bool pair_batches = ds.header.style == DatasetStyle::mood_aware &&
                        mode_uses_e2e(mode) && rc.loss.batch_size >= 2;
    std::map<long, std::size_t> index_of_sample;
    if (pair_batches)
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            index_of_sample[ds.samples[i].sample_id] = i;

    BatchSampler sampler(train_pool, pair_batches ? rc.loss.batch_size / 2 : rc.loss.batch_size,
                         RandomStream(rc.seed).fork("train-batches"));
    auto draw_batch = [&]() {
        auto idx = sampler.next();
        if (!pair_batches) return idx;
        std::vector<std::size_t> out;
        for (std::size_t i : idx) {
            out.push_back(i);
            const auto& s = ds.samples[i];
            long k = s.sample_id - s.image_id * ds.header.captions_per_image;
            long twin_sample = confusable_twin(s.image_id) * ds.header.captions_per_image + k;
            auto it = index_of_sample.find(twin_sample);
            if (it != index_of_sample.end()) out.push_back(it->second);
        }
        return out;
    };
    ZaCache za(&params.frozen, rc.encoder);
    AdamState state;

    std::ostringstream csv;
    csv << "step,lr,final,inner,outer\n";
    TrainResult result;
    std::vector<std::pair<std::string, std::vector<double>>> best_head;
    auto snapshot_head = [&]() {
        best_head.clear();
        params.visit_head_tensors([&](const std::string& name, Tensor& t) {
            best_head.emplace_back(name, t.data());
        });
    };

    log << "training " << mode_name(mode) << " for " << rc.schedule.total_steps << " steps ("
        << train_pool.size() << " samples)\n";
    for (long step = 1; step <= rc.schedule.total_steps; ++step) {
        auto batch_idx = draw_batch();
        std::vector<const PairedSample*> batch;
        for (std::size_t idx : batch_idx) batch.push_back(&ds.samples[idx]);
        StepLosses losses = train_step(batch, params, state, rc.schedule, step, rc.loss, &za);
        result.final_loss = losses.final_value;
        if (step % 50 == 0 || step == 1)
            csv << step << ',' << lr_at(step, rc.schedule) << ',' << losses.final_value << ','
                << losses.inner_value << ',' << losses.outer_value << '\n';
        if (step % rc.eval_interval == 0 || step == rc.schedule.total_steps) {
            RetrievalReport report = evaluate_retrieval(params, ds, false, TextSource::asr, &za);
            log << "step " << step << " loss " << std::fixed << std::setprecision(4)
                << losses.final_value << " heldout s2i R@1 " << std::setprecision(3)
                << report.s2i_r1 << "\n";
            if (best_head.empty() || report.s2i_r1 > result.best_report.s2i_r1) {
                result.best_report = report;
                result.best_step = step;
                snapshot_head();
            }
        }
    }

    // restore the best head before writing
    std::size_t cursor = 0;
    params.visit_head_tensors([&](const std::string&, Tensor& t) {
        t.mutable_data() = best_head[cursor++].second;
    });

    ordered_json meta;
    meta["kind"] = "trained";
    meta["mode"] = mode_name(mode);
    meta["steps"] = rc.schedule.total_steps;
    meta["best_step"] = result.best_step;
    meta["best_s2i_r1"] = result.best_report.s2i_r1;
    Checkpoint ckpt = build_checkpoint(params, rc, meta, true);
    ensure_parent_dir(out_checkpoint);
    write_checkpoint(ckpt, out_checkpoint);
    write_text(out_checkpoint + ".log.csv", csv.str());
    log << "best step " << result.best_step << " s2i R@1 " << std::fixed
        << std::setprecision(3) << result.best_report.s2i_r1 << "; checkpoint at "
        << out_checkpoint << "\n";
    return result;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

ordered_json per_sample_json(const RetrievalReport& report, const RunConfig& config) {
    ordered_json j;
    j["format_version"] = 1;
    j["config"] = to_json(config);
    ordered_json rows = ordered_json::array();
    for (const auto& o : report.per_sample) {
        ordered_json row;
        row["sample_id"] = o.sample_id;
        row["wer"] = o.wer;
        row["hit1"] = o.hit1;
        rows.push_back(row);
    }
    j["samples"] = rows;
    return j;
}

}  // namespace

EvalResult cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& mode, const std::string& text_source,
                    const std::string& out_dir, std::ostream& log, const std::string& split) {
    ModelMode m = parse_mode(mode);
    if (split != "test" && split != "train")
        throw UsageError("split must be test or train, got '" + split + "'");
    TextSource source;
    if (text_source == "asr")
        source = TextSource::asr;
    else if (text_source == "ground_truth")
        source = TextSource::ground_truth;
    else
        throw UsageError("text source must be asr or ground_truth, got '" + text_source + "'");
    if (m == ModelMode::e2e_only && source == TextSource::ground_truth)
        throw UsageError("e2e_only has no text channel; --text-source ground_truth is invalid");

    LoadedModel model = load_model(checkpoint_path, m);
    Dataset ds = read_dataset(dataset_path);
    std::string why;
    if (!dataset_compatible(ds.header, model.config.encoder, &why))
        throw DataError("dataset incompatible with checkpoint: " + why);
    resolve_asr(ds, model.config.asr, model.config.seed);

    RunConfig echo = model.config;
    echo.mode = mode;
    echo.dataset_path = dataset_path;
    echo.checkpoint_path = checkpoint_path;
    RetrievalReport report = evaluate_retrieval(model.params, ds, split == "train", source);

    EvalResult result;
    result.report = report;
    fs::create_directories(out_dir);
    result.report_json_path = (fs::path(out_dir) / "report.json").string();
    result.report_csv_path = (fs::path(out_dir) / "report.csv").string();
    result.per_sample_path = (fs::path(out_dir) / "per_sample.json").string();
    write_text(result.report_json_path, report_to_json(report, echo).dump(2) + "\n");
    write_text(result.report_csv_path, report_to_csv(report));
    write_text(result.per_sample_path, per_sample_json(report, echo).dump(2) + "\n");

    log << std::fixed << std::setprecision(3) << "speech2image R@1 " << report.s2i_r1 << " R@5 "
        << report.s2i_r5 << " R@10 " << report.s2i_r10 << "\n"
        << "image2speech R@1 " << report.i2s_r1 << " R@5 " << report.i2s_r5 << " R@10 "
        << report.i2s_r10 << "\n"
        << "queries " << report.n_queries_s2i << ", dropped " << report.n_dropped << "\n";
    return result;
}

// ---------------------------------------------------------------------------
// probe-ser
// ---------------------------------------------------------------------------

ProbeReport cmd_probe_ser(const std::string& checkpoint_path, const std::string& dataset_path,
                          const std::string& features, const std::string& out_path,
                          std::ostream& log, long train_steps) {
    ProbeFeatures pf;
    if (features == "acoustic")
        pf = ProbeFeatures::acoustic;
    else if (features == "text")
        pf = ProbeFeatures::text;
    else
        throw UsageError("features must be acoustic or text, got '" + features + "'");

    Checkpoint raw = read_checkpoint(checkpoint_path);
    auto [config, meta] = parse_ckpt_config(raw);
    ModelMode mode = meta.value("kind", "pretrain") == "trained"
                         ? parse_mode(meta.value("mode", "full"))
                         : ModelMode::pipeline_zero_shot;
    LoadedModel model = load_model(checkpoint_path, mode);
    Dataset ds = read_dataset(dataset_path);
    std::string why;
    if (!dataset_compatible(ds.header, model.config.encoder, &why))
        throw DataError("dataset incompatible with checkpoint: " + why);

    ProbeReport report = ser_probe(model.params, ds, pf, train_steps);

    ordered_json j;
    j["format_version"] = 1;
    j["config"] = to_json(model.config);
    j["feature_source"] = report.feature_source;
    j["overall_accuracy"] = report.overall_accuracy;
    j["per_class_accuracy"] = report.per_class_accuracy;
    j["per_class_counts"] = report.per_class_counts;
    j["mood_names"] = mood_names();
    j["n_train"] = report.n_train;
    j["n_test"] = report.n_test;
    j["train_steps"] = report.train_steps;
    write_text(out_path, j.dump(2) + "\n");

    log << report.feature_source << " probe accuracy " << std::fixed << std::setprecision(3)
        << report.overall_accuracy << " over " << report.n_test << " held-out clips\n";
    return report;
}

// ---------------------------------------------------------------------------
// analyze-wer
// ---------------------------------------------------------------------------

WerAnalysis cmd_analyze_wer(const std::string& per_sample_path, const std::string& out_path,
                            std::ostream& log) {
    std::ifstream in(per_sample_path);
    if (!in) throw DataError("cannot open '" + per_sample_path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError("per-sample dump '" + per_sample_path + "': " + e.what());
    }
    if (!j.contains("samples")) throw DataError("per-sample dump lacks a samples array");
    std::vector<PerSampleOutcome> outcomes;
    for (const auto& row : j.at("samples")) {
        PerSampleOutcome o;
        o.sample_id = row.at("sample_id").get<long>();
        o.wer = row.at("wer").get<double>();
        o.hit1 = row.at("hit1").get<bool>();
        outcomes.push_back(o);
    }

    WerAnalysis fit = wer_recall_analysis(outcomes);
    ordered_json out;
    out["format_version"] = 1;
    if (j.contains("config")) out["config"] = j.at("config");
    out["n_samples"] = fit.n_samples;
    out["intercept"] = fit.intercept;
    out["slope"] = fit.slope;
    out["slope_l2"] = fit.slope_l2;
    out["converged"] = fit.converged;
    out["grad_norm"] = fit.grad_norm;
    write_text(out_path, out.dump(2) + "\n");
    log << "logistic fit over " << fit.n_samples << " samples: intercept " << std::fixed
        << std::setprecision(4) << fit.intercept << ", slope " << fit.slope << " ("
        << (fit.slope < 0 ? "negative" : "non-negative") << ")\n";
    return fit;
}

// ---------------------------------------------------------------------------
// cross-eval
// ---------------------------------------------------------------------------

void cmd_cross_eval(const std::vector<std::string>& checkpoint_paths,
                    const std::vector<std::string>& dataset_paths, const std::string& out_dir,
                    std::ostream& log) {
    if (checkpoint_paths.empty() || dataset_paths.empty())
        throw UsageError("cross-eval needs at least one checkpoint and one dataset");
    fs::create_directories(out_dir);

    std::ostringstream csv;
    csv << "checkpoint";
    for (const auto& d : dataset_paths) csv << ',' << fs::path(d).filename().string();
    csv << '\n';
    ordered_json grid = ordered_json::array();

    for (const auto& ckpt_path : checkpoint_paths) {
        Checkpoint raw = read_checkpoint(ckpt_path);
        auto [config, meta] = parse_ckpt_config(raw);
        ModelMode mode = meta.value("kind", "pretrain") == "trained"
                             ? parse_mode(meta.value("mode", "full"))
                             : ModelMode::pipeline_zero_shot;
        LoadedModel model = load_model(ckpt_path, mode);
        csv << fs::path(ckpt_path).filename().string();
        for (const auto& ds_path : dataset_paths) {
            ordered_json cell;
            cell["checkpoint"] = ckpt_path;
            cell["dataset"] = ds_path;
            Dataset ds = read_dataset(ds_path);
            std::string why;
            if (!dataset_compatible(ds.header, model.config.encoder, &why)) {
                csv << ",incompatible";
                cell["status"] = "incompatible";
                cell["reason"] = why;
                log << fs::path(ckpt_path).filename().string() << " x "
                    << fs::path(ds_path).filename().string() << ": incompatible (" << why
                    << ")\n";
            } else {
                resolve_asr(ds, model.config.asr, model.config.seed);
                RetrievalReport report =
                    evaluate_retrieval(model.params, ds, false, TextSource::asr);
                RunConfig echo = model.config;
                echo.dataset_path = ds_path;
                echo.checkpoint_path = ckpt_path;
                cell["status"] = "ok";
                cell["report"] = report_to_json(report, echo);
                csv << ',' << report.s2i_r1;
                log << fs::path(ckpt_path).filename().string() << " x "
                    << fs::path(ds_path).filename().string() << ": s2i R@1 " << std::fixed
                    << std::setprecision(3) << report.s2i_r1 << "\n";
            }
            grid.push_back(cell);
        }
        csv << '\n';
    }

    ordered_json out;
    out["format_version"] = 1;
    out["cells"] = grid;
    write_text((fs::path(out_dir) / "cross_eval.csv").string(), csv.str());
    write_text((fs::path(out_dir) / "cross_eval.json").string(), out.dump(2) + "\n");
}

}  // namespace bifrec
