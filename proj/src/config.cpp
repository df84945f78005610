#include "bifrec/config.hpp"

#include <fstream>

#include "bifrec/errors.hpp"

namespace bifrec {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw DataError("config: unknown field '" + key + "' in " + where);
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
    encoder.validate();
    loss.validate();
    asr.validate();
    parse_mode(mode);
    if (schedule.warmup_steps >= schedule.total_steps)
        throw UsageError("schedule: warmup_steps must be below total_steps");
    if (eval_interval < 1) throw UsageError("eval_interval must be positive");
    if (pretrain_steps < 1) throw UsageError("pretrain_steps must be positive");
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["mode"] = c.mode;
    j["encoder"] = {{"d_model", c.encoder.d_model},
                    {"n_layers", c.encoder.n_layers},
                    {"n_heads", c.encoder.n_heads},
                    {"d_ff", c.encoder.d_ff},
                    {"max_text_len", c.encoder.max_text_len},
                    {"max_audio_len", c.encoder.max_audio_len},
                    {"vocab_size", c.encoder.vocab_size_},
                    {"n_patches", c.encoder.n_patches},
                    {"patch_dim", c.encoder.patch_dim_},
                    {"frame_dim", c.encoder.frame_dim},
                    {"prompt_len", c.encoder.prompt_len}};
    j["loss"] = {{"alpha", c.loss.alpha}, {"batch_size", c.loss.batch_size}};
    j["schedule"] = {{"peak_lr", c.schedule.peak_lr},
                     {"warmup_steps", c.schedule.warmup_steps},
                     {"final_lr", c.schedule.final_lr},
                     {"total_steps", c.schedule.total_steps}};
    j["asr"] = {{"target_wer", c.asr.target_wer},
                {"wer_jitter", c.asr.wer_jitter},
                {"drop_filler_prob", c.asr.drop_filler_prob},
                {"crash_prob", c.asr.crash_prob}};
    j["eval_interval"] = c.eval_interval;
    j["pretrain_steps"] = c.pretrain_steps;
    j["dataset_path"] = c.dataset_path;
    j["corpus_path"] = c.corpus_path;
    j["checkpoint_path"] = c.checkpoint_path;
    j["output_dir"] = c.output_dir;
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    reject_unknown(j,
                   {"seed", "mode", "encoder", "loss", "schedule", "asr", "eval_interval",
                    "pretrain_steps", "dataset_path", "corpus_path", "checkpoint_path",
                    "output_dir"},
                   "run config");
    read_if(j, "seed", c.seed);
    read_if(j, "mode", c.mode);
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        reject_unknown(e,
                       {"d_model", "n_layers", "n_heads", "d_ff", "max_text_len",
                        "max_audio_len", "vocab_size", "n_patches", "patch_dim", "frame_dim",
                        "prompt_len"},
                       "encoder");
        read_if(e, "d_model", c.encoder.d_model);
        read_if(e, "n_layers", c.encoder.n_layers);
        read_if(e, "n_heads", c.encoder.n_heads);
        read_if(e, "d_ff", c.encoder.d_ff);
        read_if(e, "max_text_len", c.encoder.max_text_len);
        read_if(e, "max_audio_len", c.encoder.max_audio_len);
        read_if(e, "vocab_size", c.encoder.vocab_size_);
        read_if(e, "n_patches", c.encoder.n_patches);
        read_if(e, "patch_dim", c.encoder.patch_dim_);
        read_if(e, "frame_dim", c.encoder.frame_dim);
        read_if(e, "prompt_len", c.encoder.prompt_len);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        reject_unknown(l, {"alpha", "batch_size"}, "loss");
        read_if(l, "alpha", c.loss.alpha);
        read_if(l, "batch_size", c.loss.batch_size);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        reject_unknown(s, {"peak_lr", "warmup_steps", "final_lr", "total_steps"}, "schedule");
        read_if(s, "peak_lr", c.schedule.peak_lr);
        read_if(s, "warmup_steps", c.schedule.warmup_steps);
        read_if(s, "final_lr", c.schedule.final_lr);
        read_if(s, "total_steps", c.schedule.total_steps);
    }
    if (j.contains("asr")) {
        const auto& a = j.at("asr");
        reject_unknown(a, {"target_wer", "wer_jitter", "drop_filler_prob", "crash_prob"}, "asr");
        read_if(a, "target_wer", c.asr.target_wer);
        read_if(a, "wer_jitter", c.asr.wer_jitter);
        read_if(a, "drop_filler_prob", c.asr.drop_filler_prob);
        read_if(a, "crash_prob", c.asr.crash_prob);
    }
    read_if(j, "eval_interval", c.eval_interval);
    read_if(j, "pretrain_steps", c.pretrain_steps);
    read_if(j, "dataset_path", c.dataset_path);
    read_if(j, "corpus_path", c.corpus_path);
    read_if(j, "checkpoint_path", c.checkpoint_path);
    read_if(j, "output_dir", c.output_dir);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError("config file '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace bifrec
