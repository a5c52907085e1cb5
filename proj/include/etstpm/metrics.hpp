#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etstpm/data.hpp"
#include "etstpm/scoring.hpp"

namespace etstpm {

/// Probability that a random positive outranks a random negative, ties
/// counted one half (Mann-Whitney U / (n_pos * n_neg)), via midranks.
/// Throws UndefinedMetricError when only one class is present.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// AUROC over the pooled pixels of all maps against their masks.
double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<Tensor<std::uint8_t>>& masks);

struct CategoryResult {
    std::string category;
    std::optional<double> image_auroc; // empty when undefined for the category
    std::optional<double> pixel_auroc;
    std::size_t n_images = 0;

    friend bool operator==(const CategoryResult&, const CategoryResult&) = default;
};

struct EvalReport {
    std::vector<CategoryResult> per_category;
    double mean_image_auroc = 0.0;
    double mean_pixel_auroc = 0.0;
    std::vector<std::string> warnings;

    /// Recompute the unweighted means over categories with a defined value.
    void finalize();
    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalConfig {
    ScoringConfig scoring;
    std::size_t batch_size = 16;
};

/// Scored test image of one category.
struct ScoredRecord {
    const ImageRecord* record = nullptr;
    AnomalyMap fused;
    double score = 0.0;
    Tensor<std::uint8_t> mask; // all zero for good images
};

/// Runs the scoring pipeline on every test image of `category`.
std::vector<ScoredRecord> score_category(const Backbone& teacher, const Backbone& student, const DatasetIndex& index,
                                         const std::string& category, const EvalConfig& cfg);

/// Per-category image-level and pixel-level AUROC plus their means.
EvalReport evaluate(const Backbone& teacher, const Backbone& student, const DatasetIndex& index,
                    const EvalConfig& cfg);

} // namespace etstpm
