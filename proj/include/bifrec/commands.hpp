#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifrec/checkpoint.hpp"
#include "bifrec/config.hpp"
#include "bifrec/eval.hpp"

namespace bifrec {

// ---------------------------------------------------------------------------
// Checkpoint binding
// ---------------------------------------------------------------------------

// Tensor naming: frozen weights under "frozen.", head (prompts, projection,
// e2e, temperature) under "head.". Pretrain checkpoints carry the frozen set
// only.
Checkpoint build_checkpoint(DualChannelParams& params, const RunConfig& config,
                            const nlohmann::ordered_json& meta, bool include_head);

struct LoadedFrozen {
    FrozenEncoderSet frozen;
    RunConfig config;
    nlohmann::json meta;
};
LoadedFrozen load_frozen(const std::string& checkpoint_path);

struct LoadedModel {
    DualChannelParams params;
    RunConfig config;
    nlohmann::json meta;
};
// Zero-shot accepts any checkpoint; other modes require a checkpoint
// trained in exactly that mode.
LoadedModel load_model(const std::string& checkpoint_path, ModelMode mode);

// Byte-exact serialization of the frozen parameter subset.
std::vector<uint8_t> frozen_bytes(DualChannelParams& params);

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

nlohmann::ordered_json report_to_json(const RetrievalReport& report, const RunConfig& config);
std::string report_to_csv(const RetrievalReport& report);  // exactly 6 metric columns

// ---------------------------------------------------------------------------
// Commands (CLI calls these; tests call them directly)
// ---------------------------------------------------------------------------

void cmd_gen_data(const std::string& style, long n_images, long captions_per_image,
                  uint64_t seed, const std::string& out_path, std::ostream& log);

// corpus -> frozen checkpoint at config.checkpoint_path, loss CSV alongside
void cmd_pretrain(const RunConfig& config, std::ostream& log);

struct TrainResult {
    RetrievalReport best_report;
    long best_step = 0;
    double final_loss = 0.0;
};
TrainResult cmd_train(const RunConfig& config, const std::string& frozen_checkpoint,
                      const std::string& out_checkpoint, std::ostream& log);

struct EvalResult {
    RetrievalReport report;
    std::string report_json_path;
    std::string report_csv_path;
    std::string per_sample_path;
};
EvalResult cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& mode, const std::string& text_source,
                    const std::string& out_dir, std::ostream& log,
                    const std::string& split = "test");

ProbeReport cmd_probe_ser(const std::string& checkpoint_path, const std::string& dataset_path,
                          const std::string& features, const std::string& out_path,
                          std::ostream& log, long train_steps = 400);

WerAnalysis cmd_analyze_wer(const std::string& per_sample_path, const std::string& out_path,
                            std::ostream& log);

void cmd_cross_eval(const std::vector<std::string>& checkpoint_paths,
                    const std::vector<std::string>& dataset_paths, const std::string& out_dir,
                    std::ostream& log);

}  // namespace bifrec
