#include "etstpm/distance.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace etstpm {

void DistanceWeights::validate() const {
    if (!(lambda_l1 >= 0.0) || !(lambda_cos >= 0.0) || !(lambda_l1 + lambda_cos > 0.0) ||
        !std::isfinite(lambda_l1) || !std::isfinite(lambda_cos))
        throw ConfigError("distance weights must be non-negative with a positive sum");
}

std::vector<double> normalize_position(std::span<const double> f) {
    double sq = 0.0;
    for (double v : f) sq += v * v;
    const double denom = std::max(std::sqrt(sq), kNormEps);
    std::vector<double> out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] / denom;
    return out;
}

// The cosine term is evaluated as |t^ - s^|^2 / 2, which equals 1 - <t^, s^>
// whenever both vectors are above eps. Below eps the normalized vectors are
// shorter than one and the two forms part ways; this one keeps identical
// inputs (zero vectors included) at exactly 0 and is symmetric bit for bit.
template <class T>
double strided_distance(const T* ft, const T* fs, std::size_t channels, std::size_t stride,
                        const DistanceWeights& w, T* grad_s, double scale) {
    double nt2 = 0.0, ns2 = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double a = ft[c * stride], b = fs[c * stride];
        nt2 += a * a;
        ns2 += b * b;
    }
    const double nt = std::sqrt(nt2), ns = std::sqrt(ns2);
    const double dt = std::max(nt, kNormEps), ds = std::max(ns, kNormEps);
    double diff2 = 0.0, l1 = 0.0, se_dot = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double a = ft[c * stride], b = fs[c * stride];
        const double ta = a / dt, sb = b / ds;
        diff2 += (ta - sb) * (ta - sb);
        l1 += std::abs(a - b);
        se_dot += sb * (sb - ta);
    }
    const double cos_term = 0.5 * diff2;
    const double inv_c = 1.0 / static_cast<double>(channels);
    const double d = w.lambda_cos * cos_term + w.lambda_l1 * inv_c * l1;

    if (grad_s) {
        const bool above = ns > kNormEps;
        for (std::size_t c = 0; c < channels; ++c) {
            const double a = ft[c * stride], b = fs[c * stride];
            const double ta = a / dt, sb = b / ds;
            // J^T (s^ - t^) with J = (I - s^ s^T) / |s|; exactly zero when s^ == t^
            const double gcos = above ? ((sb - ta) - sb * se_dot) / ns : (sb - ta) / kNormEps;
            const double gl1 = b > a ? 1.0 : (b < a ? -1.0 : 0.0);
            grad_s[c * stride] += static_cast<T>(scale * (w.lambda_cos * gcos + w.lambda_l1 * inv_c * gl1));
        }
    }
    return d;
}

double position_distance(std::span<const double> ft, std::span<const double> fs, const DistanceWeights& w) {
    if (ft.size() != fs.size() || ft.empty())
        throw ShapeError("position_distance: dimension mismatch (" + std::to_string(ft.size()) + " vs " +
                         std::to_string(fs.size()) + ")");
    return strided_distance(ft.data(), fs.data(), ft.size(), 1, w);
}

namespace {

template <class T>
void check_level(const Tensor<T>& t, const Tensor<T>& s, std::size_t level) {
    if (t.shape() != s.shape() || t.rank() != 4)
        throw ShapeError("pyramid level " + std::to_string(level + 1) + " shape mismatch: " + shape_str(t.shape()) +
                         " vs " + shape_str(s.shape()));
}

// Reduction order: level, then batch, then row-major position.
template <class T>
double level_mean(const Tensor<T>& t, const Tensor<T>& s, const DistanceWeights& w, Tensor<T>* grad, double scale) {
    const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
    const double inv = 1.0 / static_cast<double>(n * hw);
    double sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        const T* tb = t.data() + b * c * hw;
        const T* sb = s.data() + b * c * hw;
        T* gb = grad ? grad->data() + b * c * hw : nullptr;
        for (std::size_t p = 0; p < hw; ++p)
            sum += strided_distance(tb + p, sb + p, c, hw, w, gb ? gb + p : nullptr, scale * inv);
    }
    return sum * inv;
}

} // namespace

template <class T>
double distill_loss(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student, const DistanceWeights& w) {
    double total = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        check_level(teacher.levels[l], student.levels[l], l);
        total += level_mean(teacher.levels[l], student.levels[l], w, static_cast<Tensor<T>*>(nullptr), 1.0);
    }
    return total / 3.0;
}

template <class T>
double distill_loss_and_grad(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student,
                             const DistanceWeights& w, std::array<Tensor<T>, 3>& grads) {
    double total = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        check_level(teacher.levels[l], student.levels[l], l);
        grads[l] = Tensor<T>(student.levels[l].shape());
        total += level_mean(teacher.levels[l], student.levels[l], w, &grads[l], 1.0 / 3.0);
    }
    return total / 3.0;
}

template <class T>
Tensor<T> level_distance_map(const Tensor<T>& teacher, const Tensor<T>& student, const DistanceWeights& w) {
    check_level(teacher, student, 0);
    const std::size_t n = teacher.dim(0), c = teacher.dim(1), h = teacher.dim(2), wd = teacher.dim(3);
    const std::size_t hw = h * wd;
    Tensor<T> out({n, h, wd});
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            out[b * hw + p] = static_cast<T>(
                strided_distance(teacher.data() + b * c * hw + p, student.data() + b * c * hw + p, c, hw, w));
    return out;
}

#define ETSTPM_INSTANTIATE(T)                                                                                  \
    template double strided_distance(const T*, const T*, std::size_t, std::size_t, const DistanceWeights&, T*, \
                                     double);                                                                  \
    template double distill_loss(const FeaturePyramid<T>&, const FeaturePyramid<T>&, const DistanceWeights&);  \
    template double distill_loss_and_grad(const FeaturePyramid<T>&, const FeaturePyramid<T>&,                  \
                                          const DistanceWeights&, std::array<Tensor<T>, 3>&);                  \
    template Tensor<T> level_distance_map(const Tensor<T>&, const Tensor<T>&, const DistanceWeights&);

ETSTPM_INSTANTIATE(float)
ETSTPM_INSTANTIATE(double)

#undef ETSTPM_INSTANTIATE

} // namespace etstpm
