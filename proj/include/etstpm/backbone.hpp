#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "etstpm/kernels.hpp"
#include "etstpm/tensor.hpp"

namespace etstpm {

/// Residual feature extractor layout: 7x7/2 stem conv, 3x3/2 max-pool, then
/// three stages of basic residual blocks with strides 1, 2, 2. An optional
/// fourth stage (stride 2, doubled width) exists only to feed the
/// classification head during fine-tuning.
struct BackboneConfig {
    std::size_t input_size = 256;
    std::size_t stem_channels = 64;
    std::array<std::size_t, 3> block_channels{64, 128, 256};
    std::size_t blocks_per_stage = 2;
    std::size_t num_classes = 15; // 0 builds a pure extractor without a head
    double depth_scale = 1.0;
    bool include_stage4_for_finetune = false;

    /// Throws ConfigError when any invariant is violated.
    void validate() const;

    std::size_t scaled(std::size_t channels) const;
    std::size_t stem_width() const { return scaled(stem_channels); }
    std::array<std::size_t, 3> stage_widths() const;
    std::size_t head_inputs() const;

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

enum class TrainableScope { head_only, all };

/// Which statistics batch normalization uses in a forward pass.
enum class NormMode { running, batch };

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool buffer = false; // running statistics: persisted, never trained
    bool head = false;
};

template <class T>
struct FeaturePyramid {
    std::array<Tensor<T>, 3> levels;
};

template <class T>
class BasicBackbone {
public:
    struct ConvBn {
        std::size_t conv = 0;
        std::size_t gamma = 0, beta = 0, mean = 0, var = 0;
        ConvGeometry geometry;
    };
    struct Block {
        ConvBn conv1, conv2;
        std::optional<ConvBn> downsample;
    };

    struct ConvBnCache {
        Tensor<T> input;
        BatchNormCache<T> bn;
    };
    struct BlockCache {
        ConvBnCache conv1, conv2;
        std::optional<ConvBnCache> downsample;
        Tensor<T> hidden; // after conv1/bn1/relu
        Tensor<T> output; // after residual add and relu
    };

    /// Everything a backward pass needs from one training forward pass.
    struct Pass {
        NormMode mode = NormMode::batch;
        FeaturePyramid<T> pyramid;
        std::optional<Tensor<T>> logits;
        ConvBnCache stem;
        Tensor<T> stem_out;
        MaxPoolCache pool;
        std::vector<std::vector<BlockCache>> stages;
        Tensor<T> pooled; // head input
        Shape head_feature_shape;
    };

    BasicBackbone(const BackboneConfig& cfg, std::uint64_t seed);

    const BackboneConfig& config() const noexcept { return cfg_; }
    TrainableScope trainable_scope() const noexcept { return scope_; }
    void set_trainable(TrainableScope scope) noexcept { scope_ = scope; }
    bool has_head() const noexcept { return head_.has_value(); }
    std::size_t num_classes() const noexcept { return has_head() ? cfg_.num_classes : 0; }

    std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
    Parameter<T>& parameter(std::string_view name);
    const Parameter<T>& parameter(std::string_view name) const;
    bool contains(std::string_view name) const;

    /// Fresh randomly initialized head with `num_classes` outputs.
    void replace_head(std::size_t num_classes, std::uint64_t seed);

    /// Inference: running statistics, no caches.
    FeaturePyramid<T> extract_pyramid(const Tensor<T>& batch) const;
    Tensor<T> classify(const Tensor<T>& batch) const;
    /// Pooled head input followed by the head; exposed so callers can check
    /// classify against the pyramid path.
    Tensor<T> apply_head(const Tensor<T>& pooled) const;

    /// Training forward pass. In batch mode the running statistics are
    /// blended with the batch statistics unless `update_running` is false.
    Pass forward_train(const Tensor<T>& batch, NormMode mode, bool with_logits,
                       bool update_running = true);

    /// Accumulates parameter gradients. Null entries mean "no gradient from
    /// that output". Only parameters inside the trainable scope receive
    /// gradients.
    void backward(const Pass& pass, const std::array<const Tensor<T>*, 3>& level_grads,
                  const Tensor<T>* logit_grad);

    /// Replaces every running statistic by the plain average of batch
    /// statistics over `count` batches from `batch_at`. Weights are untouched.
    void calibrate_norm_stats(const std::function<Tensor<T>(std::size_t)>& batch_at, std::size_t count);

    void zero_grad();
    bool is_trainable(const Parameter<T>& p) const noexcept {
        return !p.buffer && (scope_ == TrainableScope::all || p.head);
    }

    template <class U>
    BasicBackbone<U> cast() const;

private:
    template <class U>
    friend class BasicBackbone;

    BasicBackbone() = default;

    std::size_t add_param(std::string name, Shape shape, bool buffer, bool head);
    ConvBn make_conv_bn(const std::string& prefix, const std::string& conv_name,
                        const std::string& bn_name, std::size_t cin, std::size_t cout,
                        std::size_t k, ConvGeometry geo);
    void check_input(const Tensor<T>& batch) const;
    std::size_t stage_count() const noexcept { return stages_.size(); }

    Tensor<T> conv_bn_forward(const Tensor<T>& x, const ConvBn& layer, NormMode mode, bool update,
                              ConvBnCache* cache);
    Tensor<T> conv_bn_infer(const Tensor<T>& x, const ConvBn& layer) const;
    Tensor<T> block_infer(const Tensor<T>& x, const Block& block) const;
    Tensor<T> conv_bn_backward(const Tensor<T>& dy, const ConvBn& layer, const ConvBnCache& cache,
                               NormMode mode, bool need_dx);
    Tensor<T> block_backward(const Tensor<T>& dy, const Block& block, const BlockCache& cache,
                             NormMode mode, bool need_dx);
    Tensor<T>& grad_of(std::size_t idx);

    BackboneConfig cfg_;
    TrainableScope scope_ = TrainableScope::all;
    double momentum_ = kBatchNormMomentum; // running-statistic blend factor of batch-mode passes
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
    ConvBn stem_;
    std::vector<std::vector<Block>> stages_;
    struct Head {
        std::size_t weight = 0, bias = 0;
    };
    std::optional<Head> head_;
};

using Backbone = BasicBackbone<float>;

template <class T = float>
BasicBackbone<T> build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    return BasicBackbone<T>(cfg, seed);
}

template <class T>
FeaturePyramid<T> extract_pyramid(const BasicBackbone<T>& b, const Tensor<T>& batch) {
    return b.extract_pyramid(batch);
}

template <class T>
Tensor<T> classify(const BasicBackbone<T>& b, const Tensor<T>& batch) {
    return b.classify(batch);
}

/// Copy of `b` with a new head. Throws ConfigError for fewer than two classes.
template <class T>
BasicBackbone<T> replace_head(BasicBackbone<T> b, std::size_t num_classes, std::uint64_t seed) {
    b.replace_head(num_classes, seed);
    return b;
}

template <class T>
BasicBackbone<T> set_trainable(BasicBackbone<T> b, TrainableScope scope) {
    b.set_trainable(scope);
    return b;
}

/// Concatenated bytes of every non-head parameter and buffer, for freeze checks.
template <class T>
std::vector<T> body_values(const BasicBackbone<T>& b) {
    std::vector<T> out;
    for (const auto& p : b.parameters())
        if (!p.head) out.insert(out.end(), p.value.storage().begin(), p.value.storage().end());
    return out;
}

} // namespace etstpm
