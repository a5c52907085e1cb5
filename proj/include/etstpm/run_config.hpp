#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "etstpm/backbone.hpp"
#include "etstpm/data.hpp"
#include "etstpm/distill.hpp"
#include "etstpm/finetune.hpp"
#include "etstpm/metrics.hpp"

namespace etstpm {

/// Every knob of a pipeline run. Serialized as a JSON document with sections
/// backbone / finetune / distill / scoring / data / eval plus a top-level
/// seed; unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 7; // teacher initialization
    BackboneConfig backbone;
    FinetuneConfig finetune;
    TrainConfig distill;
    ScoringConfig scoring;
    std::optional<std::filesystem::path> data_root;
    SynthConfig synth;
    std::size_t eval_batch_size = 16;
    bool record_wall_clock = true;

    void validate() const;
    EvalConfig eval_config() const { return {scoring, eval_batch_size}; }
    /// Distillation settings with the shared distance weights applied.
    TrainConfig train_config() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

} // namespace etstpm
