#pragma once

#include <string>

#include <json.hpp>

#include "bifrec/encoders.hpp"
#include "bifrec/model.hpp"

namespace bifrec {

// One run = one RunConfig. Every artifact a command emits echoes this back.
// Desk-scale defaults here; paper-scale values stay reachable through flags
// or a JSON config file mirroring these field names.
struct RunConfig {
    uint64_t seed = 1;
    std::string mode = "pipeline_prompted";
    EncoderConfig encoder{};
    LossConfig loss{};
    LrSchedule schedule{2e-3, 200, 1e-6, 3000};
    AsrConfig asr{};
    long eval_interval = 250;
    long pretrain_steps = 2000;
    std::string dataset_path;
    std::string corpus_path;
    std::string checkpoint_path;
    std::string output_dir;

    void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);  // strict keys, defaults for absent
RunConfig load_run_config(const std::string& path);

}  // namespace bifrec
