#include "etstpm/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "etstpm/calibration.hpp"
#include "etstpm/data.hpp"
#include "etstpm/rng.hpp"

namespace etstpm {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("distill.batch_size must be at least 1");
    optimizer.validate("distill");
    weights.validate();
}

std::string to_string(NormMode m) { return m == NormMode::batch ? "batch" : "running"; }

NormMode parse_norm_mode(const std::string& s) {
    if (s == "batch") return NormMode::batch;
    if (s == "running") return NormMode::running;
    throw ConfigError("unknown normalization mode '" + s + "' (expected batch or running)");
}

Backbone fresh_student(const Backbone& teacher, std::uint64_t seed) {
    BackboneConfig cfg = teacher.config();
    return build_backbone(cfg, derive_seed(seed, 0x53545544));
}

DistillState train_student(const Backbone& teacher, const std::vector<std::filesystem::path>& normal_images,
                           const TrainConfig& cfg, const DistillEpochCallback& on_epoch) {
    return train_student(teacher, fresh_student(teacher, cfg.seed), normal_images, cfg, on_epoch);
}

namespace {

// Copies the pyramid slices of the images listed in `items` out of a cache.
FeaturePyramid<float> gather(const std::vector<FeaturePyramid<float>>& cache, const std::vector<std::size_t>& items) {
    FeaturePyramid<float> out;
    for (std::size_t l = 0; l < 3; ++l) {
        Shape s = cache[items.front()].levels[l].shape();
        s[0] = items.size();
        out.levels[l] = Tensor<float>(s);
        const std::size_t per = cache[items.front()].levels[l].size();
        for (std::size_t i = 0; i < items.size(); ++i)
            std::copy_n(cache[items[i]].levels[l].data(), per, out.levels[l].data() + i * per);
    }
    return out;
}

} // namespace

DistillState train_student(const Backbone& teacher, Backbone student,
                           const std::vector<std::filesystem::path>& normal_images, const TrainConfig& cfg,
                           const DistillEpochCallback& on_epoch) {
    cfg.validate();
    if (normal_images.empty()) throw DataError("distillation needs at least one anomaly-free image");
    if (!(student.config() == teacher.config()))
        throw ConfigError("student and teacher configurations differ");

    DistillState state{teacher, std::move(student), {}, {}};
    state.student.set_trainable(TrainableScope::all);
    const Backbone& frozen = state.teacher;
    const std::size_t size = frozen.config().input_size;
    const std::size_t n = normal_images.size();

    // Teacher features are a pure function of the image in running mode.
    std::vector<FeaturePyramid<float>> cache;
    {
        const auto w = frozen.config().stage_widths();
        const std::size_t per_image = w[0] * (size / 4) * (size / 4) + w[1] * (size / 8) * (size / 8) +
                                      w[2] * (size / 16) * (size / 16);
        if (per_image * n * sizeof(float) <= cfg.feature_cache_bytes) {
            std::vector<std::size_t> ident(n);
            std::iota(ident.begin(), ident.end(), std::size_t{0});
            for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
                const std::size_t end = std::min(n, begin + cfg.batch_size);
                auto pyr = frozen.extract_pyramid(load_batch(normal_images, ident, begin, end, size));
                for (std::size_t i = 0; i < end - begin; ++i) {
                    FeaturePyramid<float> one;
                    for (std::size_t l = 0; l < 3; ++l) one.levels[l] = pyr.levels[l].slice(i, i + 1);
                    cache.push_back(std::move(one));
                }
            }
        }
    }

    Rng shuffle_rng(derive_seed(cfg.seed, 0x5348));
    Sgd<float> opt(cfg.optimizer);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffle_rng.permutation(n);
        double epoch_sum = 0.0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            const Tensor<float> batch = load_batch(normal_images, order, begin, end, size);
            FeaturePyramid<float> target;
            if (!cache.empty())
                target = gather(cache, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                                order.begin() + static_cast<std::ptrdiff_t>(end)));
            else
                target = frozen.extract_pyramid(batch);

            state.student.zero_grad();
            auto pass = state.student.forward_train(batch, cfg.student_norm, false);
            std::array<Tensor<float>, 3> grads;
            const double loss = distill_loss_and_grad(target, pass.pyramid, cfg.weights, grads);
            ++step;
            if (!std::isfinite(loss)) throw NumericError("non-finite distillation loss", step);
            state.step_losses.push_back(loss);
            epoch_sum += loss * static_cast<double>(end - begin);
            state.student.backward(pass, {&grads[0], &grads[1], &grads[2]}, nullptr);
            if (const auto bad = opt.step(state.student))
                throw NumericError("non-finite parameter " + *bad + " after distillation update", step);
        }
        const double mean = epoch_sum / static_cast<double>(n);
        state.epoch_losses.push_back(mean);
        if (on_epoch) on_epoch(epoch + 1, mean);
    }
    if (cfg.calibrate_student_norm && cfg.student_norm == NormMode::batch && cfg.epochs > 0)
        calibrate_norm_stats(state.student, normal_images, cfg.batch_size, cfg.seed);
    state.student.zero_grad();
    return state;
}

} // namespace etstpm
