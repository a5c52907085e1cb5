#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "etstpm/finetune.hpp"
#include "etstpm/metrics.hpp"

namespace etstpm {

inline constexpr const char* kToolVersion = "1.0.0";

struct TrainingHistory {
    std::vector<EpochStats> finetune;
    std::vector<double> distill_epoch_losses;

    friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

struct RunReport {
    EvalReport eval;
    TrainingHistory history;
    nlohmann::json config; // echo of the run configuration
    std::uint64_t seed = 0;
    std::optional<double> wall_clock_seconds;
    std::string tool_version = kToolVersion;
};

/// JSON document with sorted keys and shortest round-trip number formatting,
/// so identical reports serialize to identical bytes.
std::string serialize_report(const RunReport& report);
RunReport parse_report(const std::string& text);

void write_report(const RunReport& report, const std::filesystem::path& path);
RunReport read_report(const std::filesystem::path& path);

nlohmann::json history_to_json(const TrainingHistory& h);
TrainingHistory history_from_json(const nlohmann::json& j);

} // namespace etstpm
