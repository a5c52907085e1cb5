#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "etstpm/backbone.hpp"

namespace etstpm {

inline constexpr double kNormEps = 1e-8;

/// Weights of the two per-position distance terms, shared by the training
/// loss and the anomaly maps.
struct DistanceWeights {
    double lambda_l1 = 1.0;
    double lambda_cos = 1.0;

    void validate() const;
    friend bool operator==(const DistanceWeights&, const DistanceWeights&) = default;
};

/// f / max(|f|_2, eps)
std::vector<double> normalize_position(std::span<const double> f);

/// lambda_cos * (1 - cos(ft, fs)) + lambda_l1 * |ft - fs|_1 / C, with the
/// cosine taken between eps-normalized vectors. Symmetric in its arguments
/// and exactly zero for identical non-zero inputs.
double position_distance(std::span<const double> ft, std::span<const double> fs, const DistanceWeights& w);

/// Same distance for a channel vector stored with a stride (a column of an
/// (N, C, h, w) tensor). When `grad_s` is non-null, adds
/// scale * d(distance)/d(fs) into it using the same stride.
template <class T>
double strided_distance(const T* ft, const T* fs, std::size_t channels, std::size_t stride,
                        const DistanceWeights& w, T* grad_s = nullptr, double scale = 1.0);

/// Mean over levels of the mean over (batch, y, x) of the position distance.
template <class T>
double distill_loss(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student, const DistanceWeights& w);

/// distill_loss plus its gradient with respect to the student pyramid.
template <class T>
double distill_loss_and_grad(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student,
                             const DistanceWeights& w, std::array<Tensor<T>, 3>& grads);

/// Per-position distance of one level: (N, C, h, w) x2 -> (N, h, w).
template <class T>
Tensor<T> level_distance_map(const Tensor<T>& teacher, const Tensor<T>& student, const DistanceWeights& w);

} // namespace etstpm
