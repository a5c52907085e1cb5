#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "etstpm/backbone.hpp"
#include "etstpm/distance.hpp"
#include "etstpm/optim.hpp"

namespace etstpm {

struct TrainConfig {
    SgdConfig optimizer{0.4, 0.9, 1e-4};
    std::size_t batch_size = 32;
    std::size_t epochs = 100;
    DistanceWeights weights;
    std::uint64_t seed = 23;
    // Normalization statistics used by the student while it trains. The
    // teacher always runs on its running statistics.
    NormMode student_norm = NormMode::batch;
    // With batch-mode training, re-estimate the student's running statistics
    // on the training images once training ends.
    bool calibrate_student_norm = true;
    // Teacher pyramids are computed once and kept in memory when they fit.
    std::size_t feature_cache_bytes = std::size_t{1} << 30;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct DistillState {
    Backbone teacher;
    Backbone student;
    std::vector<double> step_losses;
    std::vector<double> epoch_losses; // mean per-image loss of each epoch
};

using DistillEpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Student seed used by train_student when no student is supplied.
Backbone fresh_student(const Backbone& teacher, std::uint64_t seed);

/// Trains a freshly initialized student (seeded by cfg.seed) to reproduce the
/// teacher pyramid on `normal_images`. The teacher is never modified.
DistillState train_student(const Backbone& teacher, const std::vector<std::filesystem::path>& normal_images,
                           const TrainConfig& cfg, const DistillEpochCallback& on_epoch = {});

/// Same, starting from a caller-provided student with the teacher's configuration.
DistillState train_student(const Backbone& teacher, Backbone student,
                           const std::vector<std::filesystem::path>& normal_images, const TrainConfig& cfg,
                           const DistillEpochCallback& on_epoch = {});

std::string to_string(NormMode m);
NormMode parse_norm_mode(const std::string& s);

} // namespace etstpm
