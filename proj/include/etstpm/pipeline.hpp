#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "etstpm/checkpoint.hpp"
#include "etstpm/image_io.hpp"
#include "etstpm/report.hpp"
#include "etstpm/run_config.hpp"

// Stage orchestration shared by the CLI and the acceptance suite.

namespace etstpm {

using LogFn = std::function<void(const std::string&)>;

/// Untrained teacher for a run: initialized from cfg.seed with a fresh head
/// sized for `num_classes`.
Backbone initial_teacher(const RunConfig& cfg, std::size_t num_classes);

FinetuneResult finetune_stage(const RunConfig& cfg, const DatasetIndex& index, const LogFn& log = {});

DistillState train_stage(const RunConfig& cfg, const Backbone& teacher, const DatasetIndex& index,
                         const LogFn& log = {});

/// Normal (train split) image paths in index order.
std::vector<std::filesystem::path> normal_training_images(const DatasetIndex& index);

/// Loads a checkpoint and checks its layout against the run's backbone
/// section (the head size may differ: it follows the dataset).
Backbone load_backbone_for_run(const std::filesystem::path& path, const RunConfig& cfg);

/// Training history stored next to a checkpoint as <ckpt>.history.json.
std::filesystem::path history_path(const std::filesystem::path& checkpoint);
void save_history(const std::filesystem::path& checkpoint, const TrainingHistory& h);
TrainingHistory load_history(const std::filesystem::path& checkpoint);

RunReport make_report(const RunConfig& cfg, EvalReport eval, TrainingHistory history,
                      std::optional<double> wall_clock_seconds);

/// Blend of the image (resized to the map) with a blue-to-red colouring of
/// the map over [0, max(map)].
Image8 render_heatmap(const FloatMap& map, const Image8& image);

/// Fixed colour ramp: 0 -> blue, 1 -> red.
std::array<std::uint8_t, 3> heat_colour(double t);

} // namespace etstpm
