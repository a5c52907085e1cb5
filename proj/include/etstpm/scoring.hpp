#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "etstpm/backbone.hpp"
#include "etstpm/distance.hpp"

namespace etstpm {

enum class MapSource { level_1, level_2, level_3, fused };
enum class FusionMode { product, sum };
enum class ImageStatistic { max, top_k_mean };

/// Non-negative per-pixel anomaly scores, (H, W).
struct AnomalyMap {
    Tensor<float> values;
    MapSource source = MapSource::fused;

    std::size_t height() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
};

struct ScoringConfig {
    FusionMode fusion = FusionMode::product;
    ImageStatistic statistic = ImageStatistic::max;
    std::size_t top_k = 10;
    DistanceWeights weights;

    friend bool operator==(const ScoringConfig&, const ScoringConfig&) = default;
};

/// (N, C, h, w) teacher/student level -> one (h, w) map per batch item.
std::vector<Tensor<float>> level_anomaly_map(const Tensor<float>& teacher, const Tensor<float>& student,
                                             const DistanceWeights& w);

/// Half-pixel bilinear upsampling with edge clamp. Downscaling is unsupported.
Tensor<float> upsample_bilinear(const Tensor<float>& map, std::size_t height, std::size_t width);

AnomalyMap fuse_maps(const std::vector<Tensor<float>>& maps, FusionMode mode);

double image_score(const AnomalyMap& map, ImageStatistic statistic = ImageStatistic::max, std::size_t top_k = 10);

struct ScoredImage {
    std::array<AnomalyMap, 3> levels; // upsampled to input resolution
    AnomalyMap fused;
    double score = 0.0;
};

/// Full scoring pipeline for a batch (N, 3, S, S).
std::vector<ScoredImage> score_batch(const Backbone& teacher, const Backbone& student, const Tensor<float>& batch,
                                     const ScoringConfig& cfg);

std::string to_string(FusionMode m);
std::string to_string(ImageStatistic s);
FusionMode parse_fusion_mode(const std::string& s);
ImageStatistic parse_image_statistic(const std::string& s);

} // namespace etstpm
