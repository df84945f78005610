// bifrec: bifurcated dual-channel audio-image retrieval testbed.
//
// Subcommands cover the whole pipeline: synthetic data generation,
// stand-in pretraining, prompt/e2e fine-tuning, retrieval evaluation,
// the mood probe, WER analysis and cross-dataset grids.

#include <iostream>

#include <CLI11.hpp>

#include "bifrec/commands.hpp"
#include "bifrec/errors.hpp"

using namespace bifrec;

namespace {

// exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure
int run_guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

struct CommonFlags {
    std::string config_file;
    uint64_t seed = 0;
    bool seed_set = false;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "bifrec: dual-channel audio-image retrieval on synthetic paired data.\n"
        "Set BFRC_THREADS to parallelize data generation and evaluation (default 1)."};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
    std::string gen_style = "scripted", gen_out;
    long gen_images = 100, gen_captions = 5;
    uint64_t gen_seed = 1;
    gen->add_option("--style", gen_style, "scripted | unscripted | mood_aware");
    gen->add_option("--n-images", gen_images, "number of images")->required();
    gen->add_option("--captions", gen_captions, "captions per image");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output JSONL path")->required();

    // ---- shared config plumbing for pretrain/train ----
    auto add_run_flags = [](CLI::App* cmd, RunConfig& rc, std::string& config_file) {
        cmd->add_option("--config", config_file, "JSON config file mirroring RunConfig fields");
        cmd->add_option("--seed", rc.seed, "run seed");
        cmd->add_option("--batch-size", rc.loss.batch_size, "contrastive batch size");
        cmd->add_option("--alpha", rc.loss.alpha, "inner-loss weight");
        cmd->add_option("--peak-lr", rc.schedule.peak_lr, "peak learning rate");
        cmd->add_option("--warmup-steps", rc.schedule.warmup_steps, "linear warmup steps");
        cmd->add_option("--final-lr", rc.schedule.final_lr, "final learning rate");
        cmd->add_option("--target-wer", rc.asr.target_wer, "ASR target word error rate");
        cmd->add_option("--wer-jitter", rc.asr.wer_jitter, "per-sample WER half-width");
        cmd->add_option("--drop-filler-prob", rc.asr.drop_filler_prob,
                        "probability a filler token is dropped");
        cmd->add_option("--crash-prob", rc.asr.crash_prob, "probability ASR yields nothing");
        cmd->add_option("--d-model", rc.encoder.d_model, "embedding width");
        cmd->add_option("--n-layers", rc.encoder.n_layers, "encoder layers");
        cmd->add_option("--prompt-len", rc.encoder.prompt_len, "prompt length M");
    };

    // ---- pretrain ----
    auto* pre = app.add_subcommand("pretrain", "train the frozen image/text stand-ins");
    RunConfig pre_rc;
    std::string pre_config_file;
    add_run_flags(pre, pre_rc, pre_config_file);
    pre->add_option("--corpus", pre_rc.corpus_path, "pretraining corpus JSONL")->required();
    pre->add_option("--out", pre_rc.checkpoint_path, "output checkpoint")->required();
    pre->add_option("--steps", pre_rc.pretrain_steps, "pretraining steps");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "fine-tune prompts / e2e head on a dataset");
    RunConfig tr_rc;
    std::string tr_config_file, tr_frozen, tr_out;
    add_run_flags(tr, tr_rc, tr_config_file);
    tr->add_option("--frozen", tr_frozen, "pretrained (frozen) checkpoint")->required();
    tr->add_option("--dataset", tr_rc.dataset_path, "training dataset JSONL")->required();
    tr->add_option("--mode", tr_rc.mode, "full | pipeline_prompted | e2e_only");
    tr->add_option("--out", tr_out, "output checkpoint")->required();
    tr->add_option("--steps", tr_rc.schedule.total_steps, "training steps");
    tr->add_option("--eval-interval", tr_rc.eval_interval, "held-out eval cadence");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "retrieval evaluation on a dataset test split");
    std::string ev_ckpt, ev_dataset, ev_mode = "pipeline_zero_shot", ev_source = "asr", ev_out;
    std::string ev_split = "test";
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--dataset", ev_dataset)->required();
    ev->add_option("--mode", ev_mode, "full | pipeline_zero_shot | pipeline_prompted | e2e_only");
    ev->add_option("--text-source", ev_source, "asr | ground_truth");
    ev->add_option("--split", ev_split, "test | train");
    ev->add_option("--out", ev_out, "output directory")->required();

    // ---- probe-ser ----
    auto* pr = app.add_subcommand("probe-ser", "mood probe on frozen features");
    std::string pr_ckpt, pr_dataset, pr_features = "acoustic", pr_out;
    long pr_steps = 400;
    pr->add_option("--checkpoint", pr_ckpt)->required();
    pr->add_option("--dataset", pr_dataset, "mood-labeled dataset JSONL")->required();
    pr->add_option("--features", pr_features, "acoustic | text");
    pr->add_option("--out", pr_out, "output report JSON")->required();
    pr->add_option("--steps", pr_steps, "probe training steps");

    // ---- analyze-wer ----
    auto* aw = app.add_subcommand("analyze-wer", "logistic fit of hit@1 against WER");
    std::string aw_in, aw_out;
    aw->add_option("--per-sample", aw_in, "per_sample.json from eval")->required();
    aw->add_option("--out", aw_out, "output JSON")->required();

    // ---- cross-eval ----
    auto* ce = app.add_subcommand("cross-eval", "checkpoint x dataset evaluation grid");
    std::vector<std::string> ce_ckpts, ce_datasets;
    std::string ce_out;
    ce->add_option("--checkpoints", ce_ckpts, "checkpoint paths")->required()->expected(-1);
    ce->add_option("--datasets", ce_datasets, "dataset paths")->required()->expected(-1);
    ce->add_option("--out", ce_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help text, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // stable usage-error code
    }

    // a config file provides the base; explicit flags stay on top because
    // CLI11 already wrote them into the RunConfig fields
    auto overlay_config = [&](CLI::App* cmd, RunConfig& rc, const std::string& file) {
        if (file.empty()) return;
        RunConfig base = load_run_config(file);
        auto keep = [&](const std::string& flag) { return cmd->count(flag) > 0; };
        RunConfig merged = base;
        if (keep("--seed")) merged.seed = rc.seed;
        if (keep("--batch-size")) merged.loss.batch_size = rc.loss.batch_size;
        if (keep("--alpha")) merged.loss.alpha = rc.loss.alpha;
        if (keep("--peak-lr")) merged.schedule.peak_lr = rc.schedule.peak_lr;
        if (keep("--warmup-steps")) merged.schedule.warmup_steps = rc.schedule.warmup_steps;
        if (keep("--final-lr")) merged.schedule.final_lr = rc.schedule.final_lr;
        if (keep("--target-wer")) merged.asr.target_wer = rc.asr.target_wer;
        if (keep("--wer-jitter")) merged.asr.wer_jitter = rc.asr.wer_jitter;
        if (keep("--drop-filler-prob")) merged.asr.drop_filler_prob = rc.asr.drop_filler_prob;
        if (keep("--crash-prob")) merged.asr.crash_prob = rc.asr.crash_prob;
        if (keep("--d-model")) merged.encoder.d_model = rc.encoder.d_model;
        if (keep("--n-layers")) merged.encoder.n_layers = rc.encoder.n_layers;
        if (keep("--prompt-len")) merged.encoder.prompt_len = rc.encoder.prompt_len;
        if (keep("--steps")) {
            merged.pretrain_steps = rc.pretrain_steps;
            merged.schedule.total_steps = rc.schedule.total_steps;
        }
        if (keep("--eval-interval")) merged.eval_interval = rc.eval_interval;
        merged.mode = cmd->count("--mode") ? rc.mode : base.mode;
        merged.corpus_path = rc.corpus_path.empty() ? base.corpus_path : rc.corpus_path;
        merged.dataset_path = rc.dataset_path.empty() ? base.dataset_path : rc.dataset_path;
        merged.checkpoint_path =
            rc.checkpoint_path.empty() ? base.checkpoint_path : rc.checkpoint_path;
        rc = merged;
    };

    if (gen->parsed())
        return run_guarded([&] {
            cmd_gen_data(gen_style, gen_images, gen_captions, gen_seed, gen_out, std::cout);
        });
    if (pre->parsed())
        return run_guarded([&] {
            overlay_config(pre, pre_rc, pre_config_file);
            cmd_pretrain(pre_rc, std::cout);
        });
    if (tr->parsed())
        return run_guarded([&] {
            overlay_config(tr, tr_rc, tr_config_file);
            cmd_train(tr_rc, tr_frozen, tr_out, std::cout);
        });
    if (ev->parsed())
        return run_guarded([&] {
            cmd_eval(ev_ckpt, ev_dataset, ev_mode, ev_source, ev_out, std::cout, ev_split);
        });
    if (pr->parsed())
        return run_guarded([&] {
            cmd_probe_ser(pr_ckpt, pr_dataset, pr_features, pr_out, std::cout, pr_steps);
        });
    if (aw->parsed()) return run_guarded([&] { cmd_analyze_wer(aw_in, aw_out, std::cout); });
    if (ce->parsed())
        return run_guarded([&] { cmd_cross_eval(ce_ckpts, ce_datasets, ce_out, std::cout); });
    return 1;
}
