#include "etstpm/scoring.hpp"

#include <algorithm>
#include <functional>

#include "etstpm/resample.hpp"

namespace etstpm {

std::vector<Tensor<float>> level_anomaly_map(const Tensor<float>& teacher, const Tensor<float>& student,
                                             const DistanceWeights& w) {
    const Tensor<float> all = level_distance_map(teacher, student, w);
    const std::size_t n = all.dim(0), h = all.dim(1), wd = all.dim(2);
    std::vector<Tensor<float>> out;
    out.reserve(n);
    for (std::size_t b = 0; b < n; ++b) {
        Tensor<float> m({h, wd});
        std::copy(all.data() + b * h * wd, all.data() + (b + 1) * h * wd, m.data());
        out.push_back(std::move(m));
    }
    return out;
}

Tensor<float> upsample_bilinear(const Tensor<float>& map, std::size_t height, std::size_t width) {
    if (map.rank() != 2 || map.dim(0) == 0 || map.dim(1) == 0)
        throw ShapeError("upsample_bilinear expects a non-empty (h, w) map, got " + shape_str(map.shape()));
    if (height < map.dim(0) || width < map.dim(1))
        throw ShapeError("upsample_bilinear: downscaling " + shape_str(map.shape()) + " to (" +
                         std::to_string(height) + "," + std::to_string(width) + ") is unsupported");
    Tensor<float> out({height, width});
    resize_bilinear_plane(map.data(), map.dim(0), map.dim(1), out.data(), height, width);
    return out;
}

AnomalyMap fuse_maps(const std::vector<Tensor<float>>& maps, FusionMode mode) {
    if (maps.empty()) throw ShapeError("fuse_maps needs at least one map");
    for (const auto& m : maps)
        if (m.shape() != maps.front().shape())
            throw ShapeError("fuse_maps shape mismatch: " + shape_str(m.shape()) + " vs " +
                             shape_str(maps.front().shape()));
    AnomalyMap out{Tensor<float>(maps.front().shape()), MapSource::fused};
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        double acc = mode == FusionMode::product ? 1.0 : 0.0;
        for (const auto& m : maps) acc = mode == FusionMode::product ? acc * m[i] : acc + m[i];
        out.values[i] = static_cast<float>(acc);
    }
    return out;
}

double image_score(const AnomalyMap& map, ImageStatistic statistic, std::size_t top_k) {
    const auto& v = map.values.storage();
    if (v.empty()) return 0.0;
    if (statistic == ImageStatistic::max) return *std::max_element(v.begin(), v.end());
    const std::size_t k = std::clamp<std::size_t>(top_k, 1, v.size());
    std::vector<float> sorted(v.begin(), v.end());
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(), std::greater<>{});
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += sorted[i];
    return s / static_cast<double>(k);
}

std::vector<ScoredImage> score_batch(const Backbone& teacher, const Backbone& student, const Tensor<float>& batch,
                                     const ScoringConfig& cfg) {
    const auto pt = teacher.extract_pyramid(batch);
    const auto ps = student.extract_pyramid(batch);
    const std::size_t n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
    std::vector<ScoredImage> out(n);
    for (std::size_t l = 0; l < 3; ++l) {
        auto maps = level_anomaly_map(pt.levels[l], ps.levels[l], cfg.weights);
        for (std::size_t b = 0; b < n; ++b)
            out[b].levels[l] = AnomalyMap{upsample_bilinear(maps[b], h, w), static_cast<MapSource>(l)};
    }
    for (auto& img : out) {
        img.fused = fuse_maps({img.levels[0].values, img.levels[1].values, img.levels[2].values}, cfg.fusion);
        img.score = image_score(img.fused, cfg.statistic, cfg.top_k);
    }
    return out;
}

std::string to_string(FusionMode m) { return m == FusionMode::product ? "product" : "sum"; }
std::string to_string(ImageStatistic s) { return s == ImageStatistic::max ? "max" : "top_k_mean"; }

FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "product") return FusionMode::product;
    if (s == "sum") return FusionMode::sum;
    throw ConfigError("unknown fusion mode '" + s + "' (expected product or sum)");
}

ImageStatistic parse_image_statistic(const std::string& s) {
    if (s == "max") return ImageStatistic::max;
    if (s == "top_k_mean") return ImageStatistic::top_k_mean;
    throw ConfigError("unknown image score statistic '" + s + "' (expected max or top_k_mean)");
}

} // namespace etstpm
