#include "etstpm/backbone.hpp"

#include <cmath>

#include "etstpm/rng.hpp"

namespace etstpm {

void BackboneConfig::validate() const {
    if (!(depth_scale > 0.0) || !std::isfinite(depth_scale))
        throw ConfigError("backbone.depth_scale must be positive, got " + std::to_string(depth_scale));
    if (input_size == 0 || input_size % 16 != 0)
        throw ConfigError("backbone.input_size must be a positive multiple of 16, got " +
                          std::to_string(input_size));
    if (blocks_per_stage == 0) throw ConfigError("backbone.blocks_per_stage must be at least 1");
    if (num_classes == 1) throw ConfigError("backbone.num_classes must be 0 (no head) or at least 2");
    (void)stem_width();
    (void)stage_widths();
}

std::size_t BackboneConfig::scaled(std::size_t channels) const {
    const double v = std::round(static_cast<double>(channels) * depth_scale);
    if (v < 1.0)
        throw ConfigError("channel count " + std::to_string(channels) + " scaled by " +
                          std::to_string(depth_scale) + " drops below 1");
    return static_cast<std::size_t>(v);
}

std::array<std::size_t, 3> BackboneConfig::stage_widths() const {
    return {scaled(block_channels[0]), scaled(block_channels[1]), scaled(block_channels[2])};
}

std::size_t BackboneConfig::head_inputs() const {
    const std::size_t c3 = stage_widths()[2];
    return include_stage4_for_finetune ? 2 * c3 : c3;
}

template <class T>
std::size_t BasicBackbone<T>::add_param(std::string name, Shape shape, bool buffer, bool head) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    Parameter<T> p;
    p.name = std::move(name);
    p.value = Tensor<T>(std::move(shape));
    p.buffer = buffer;
    p.head = head;
    params_.push_back(std::move(p));
    return params_.size() - 1;
}

template <class T>
typename BasicBackbone<T>::ConvBn BasicBackbone<T>::make_conv_bn(const std::string& prefix,
                                                                const std::string& conv_name,
                                                                const std::string& bn_name,
                                                                std::size_t cin, std::size_t cout,
                                                                std::size_t k, ConvGeometry geo) {
    ConvBn l;
    l.geometry = geo;
    l.conv = add_param(prefix + conv_name + ".weight", {cout, cin, k, k}, false, false);
    l.gamma = add_param(prefix + bn_name + ".weight", {cout}, false, false);
    l.beta = add_param(prefix + bn_name + ".bias", {cout}, false, false);
    l.mean = add_param(prefix + bn_name + ".running_mean", {cout}, true, false);
    l.var = add_param(prefix + bn_name + ".running_var", {cout}, true, false);
    params_[l.gamma].value.fill(T{1});
    params_[l.var].value.fill(T{1});
    return l;
}

template <class T>
BasicBackbone<T>::BasicBackbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t stem = cfg_.stem_width();
    const auto widths = cfg_.stage_widths();
    stem_ = make_conv_bn("", "conv1", "bn1", 3, stem, 7, {2, 3});

    std::vector<std::size_t> stage_w(widths.begin(), widths.end());
    if (cfg_.include_stage4_for_finetune) stage_w.push_back(2 * widths[2]);
    std::size_t cin = stem;
    for (std::size_t s = 0; s < stage_w.size(); ++s) {
        const std::size_t cout = stage_w[s];
        std::vector<Block> blocks;
        for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
            const std::string prefix = "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
            Block blk;
            blk.conv1 = make_conv_bn(prefix, "conv1", "bn1", cin, cout, 3, {stride, 1});
            blk.conv2 = make_conv_bn(prefix, "conv2", "bn2", cout, cout, 3, {1, 1});
            if (stride != 1 || cin != cout)
                blk.downsample = make_conv_bn(prefix, "downsample.0", "downsample.1", cin, cout, 1, {stride, 0});
            blocks.push_back(blk);
            cin = cout;
        }
        stages_.push_back(std::move(blocks));
    }

    // Fan-in scaled Gaussian (std = sqrt(2 / fan_in)) for every convolution.
    Rng rng(seed);
    for (auto& p : params_) {
        if (p.value.rank() != 4) continue;
        const double fan_in = static_cast<double>(p.value.dim(1) * p.value.dim(2) * p.value.dim(3));
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& v : p.value.storage()) v = static_cast<T>(rng.normal() * std);
    }

    if (cfg_.num_classes >= 2) replace_head(cfg_.num_classes, seed);
}

template <class T>
void BasicBackbone<T>::replace_head(std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("head needs at least 2 classes, got " + std::to_string(num_classes));
    const std::size_t in = cfg_.head_inputs();
    if (!head_) {
        Head h;
        h.weight = add_param("fc.weight", {num_classes, in}, false, true);
        h.bias = add_param("fc.bias", {num_classes}, false, true);
        head_ = h;
    } else {
        params_[head_->weight].value = Tensor<T>({num_classes, in});
        params_[head_->bias].value = Tensor<T>({num_classes});
        params_[head_->weight].grad = {};
        params_[head_->bias].grad = {};
    }
    cfg_.num_classes = num_classes;
    Rng rng(derive_seed(seed, 0x4845414400ULL));
    const double std = std::sqrt(1.0 / static_cast<double>(in));
    for (auto& v : params_[head_->weight].value.storage()) v = static_cast<T>(rng.normal() * std);
}

template <class T>
Parameter<T>& BasicBackbone<T>::parameter(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named " + std::string(name));
    return params_[it->second];
}

template <class T>
const Parameter<T>& BasicBackbone<T>::parameter(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named " + std::string(name));
    return params_[it->second];
}

template <class T>
bool BasicBackbone<T>::contains(std::string_view name) const {
    return index_.contains(std::string(name));
}

template <class T>
void BasicBackbone<T>::check_input(const Tensor<T>& batch) const {
    const std::size_t s = cfg_.input_size;
    if (batch.rank() != 4 || batch.dim(0) == 0 || batch.dim(1) != 3 || batch.dim(2) != s || batch.dim(3) != s)
        throw ShapeError("backbone input must be (N,3," + std::to_string(s) + "," + std::to_string(s) +
                         "), got " + shape_str(batch.shape()));
}

template <class T>
Tensor<T> BasicBackbone<T>::conv_bn_infer(const Tensor<T>& x, const ConvBn& l) const {
    auto y = kernels::conv2d_forward(x, params_[l.conv].value, l.geometry);
    return kernels::batchnorm_forward_running<T>(y, params_[l.gamma].value, params_[l.beta].value,
                                              params_[l.mean].value, params_[l.var].value,
                                              kBatchNormEps, nullptr);
}

template <class T>
Tensor<T> BasicBackbone<T>::block_infer(const Tensor<T>& x, const Block& blk) const {
    auto h = conv_bn_infer(x, blk.conv1);
    kernels::relu_inplace(h);
    auto out = conv_bn_infer(h, blk.conv2);
    if (blk.downsample)
        kernels::add_inplace(out, conv_bn_infer(x, *blk.downsample));
    else
        kernels::add_inplace(out, x);
    kernels::relu_inplace(out);
    return out;
}

template <class T>
FeaturePyramid<T> BasicBackbone<T>::extract_pyramid(const Tensor<T>& batch) const {
    check_input(batch);
    auto x = conv_bn_infer(batch, stem_);
    kernels::relu_inplace(x);
    x = kernels::maxpool_forward(x, nullptr);
    FeaturePyramid<T> pyr;
    for (std::size_t s = 0; s < 3; ++s) {
        for (const auto& blk : stages_[s]) x = block_infer(x, blk);
        pyr.levels[s] = x;
    }
    return pyr;
}

template <class T>
Tensor<T> BasicBackbone<T>::apply_head(const Tensor<T>& pooled) const {
    if (!head_) throw StateError("backbone has no classification head");
    return kernels::linear_forward(pooled, params_[head_->weight].value, params_[head_->bias].value);
}

template <class T>
Tensor<T> BasicBackbone<T>::classify(const Tensor<T>& batch) const {
    if (!head_) throw StateError("backbone has no classification head");
    auto pyr = extract_pyramid(batch);
    Tensor<T> x = std::move(pyr.levels[2]);
    if (stage_count() > 3)
        for (const auto& blk : stages_[3]) x = block_infer(x, blk);
    return apply_head(kernels::global_avg_pool(x));
}

template <class T>
Tensor<T> BasicBackbone<T>::conv_bn_forward(const Tensor<T>& x, const ConvBn& l, NormMode mode, bool update,
                                            ConvBnCache* cache) {
    auto y = kernels::conv2d_forward(x, params_[l.conv].value, l.geometry);
    cache->input = x;
    if (mode == NormMode::batch)
        return kernels::batchnorm_forward_batch<T>(y, params_[l.gamma].value, params_[l.beta].value,
                                                update ? &params_[l.mean].value : nullptr,
                                                update ? &params_[l.var].value : nullptr,
                                                momentum_, kBatchNormEps, &cache->bn);
    return kernels::batchnorm_forward_running<T>(y, params_[l.gamma].value, params_[l.beta].value,
                                              params_[l.mean].value, params_[l.var].value,
                                              kBatchNormEps, &cache->bn);
}

template <class T>
void BasicBackbone<T>::calibrate_norm_stats(const std::function<Tensor<T>(std::size_t)>& batch_at,
                                            std::size_t count) {
    const TrainableScope scope = scope_;
    scope_ = TrainableScope::all;
    for (std::size_t k = 0; k < count; ++k) {
        momentum_ = 1.0 / static_cast<double>(k + 1);
        forward_train(batch_at(k), NormMode::batch, false, true);
    }
    momentum_ = kBatchNormMomentum;
    scope_ = scope;
}

template <class T>
typename BasicBackbone<T>::Pass BasicBackbone<T>::forward_train(const Tensor<T>& batch, NormMode mode,
                                                               bool with_logits, bool update_running) {
    check_input(batch);
    if (with_logits && !head_) throw StateError("backbone has no classification head");
    // A frozen body must not move, running statistics included.
    if (scope_ == TrainableScope::head_only) mode = NormMode::running;
    Pass pass;
    pass.mode = mode;
    auto x = conv_bn_forward(batch, stem_, mode, update_running, &pass.stem);
    kernels::relu_inplace(x);
    pass.stem_out = x;
    x = kernels::maxpool_forward(x, &pass.pool);
    const std::size_t run_stages = with_logits ? stage_count() : 3;
    pass.stages.resize(run_stages);
    for (std::size_t s = 0; s < run_stages; ++s) {
        for (const auto& blk : stages_[s]) {
            BlockCache bc;
            auto h = conv_bn_forward(x, blk.conv1, mode, update_running, &bc.conv1);
            kernels::relu_inplace(h);
            bc.hidden = h;
            auto out = conv_bn_forward(h, blk.conv2, mode, update_running, &bc.conv2);
            if (blk.downsample) {
                bc.downsample.emplace();
                kernels::add_inplace(out, conv_bn_forward(x, *blk.downsample, mode, update_running,
                                                          &*bc.downsample));
            } else {
                kernels::add_inplace(out, x);
            }
            kernels::relu_inplace(out);
            bc.output = out;
            x = std::move(out);
            pass.stages[s].push_back(std::move(bc));
        }
        if (s < 3) pass.pyramid.levels[s] = x;
    }
    if (with_logits) {
        pass.head_feature_shape = x.shape();
        pass.pooled = kernels::global_avg_pool(x);
        pass.logits = apply_head(pass.pooled);
    }
    return pass;
}

template <class T>
Tensor<T>& BasicBackbone<T>::grad_of(std::size_t idx) {
    auto& p = params_[idx];
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    return p.grad;
}

template <class T>
Tensor<T> BasicBackbone<T>::conv_bn_backward(const Tensor<T>& dy, const ConvBn& l, const ConvBnCache& cache,
                                             NormMode mode, bool need_dx) {
    auto& dgamma = grad_of(l.gamma);
    auto& dbeta = grad_of(l.beta);
    Tensor<T> dconv = mode == NormMode::batch
                          ? kernels::batchnorm_backward_batch(dy, cache.bn, params_[l.gamma].value, dgamma, dbeta)
                          : kernels::batchnorm_backward_running(dy, cache.bn, params_[l.gamma].value, dgamma, dbeta);
    Tensor<T> dx;
    kernels::conv2d_backward(cache.input, params_[l.conv].value, dconv, l.geometry, grad_of(l.conv),
                             need_dx ? &dx : nullptr);
    return dx;
}

template <class T>
Tensor<T> BasicBackbone<T>::block_backward(const Tensor<T>& dy_in, const Block& blk, const BlockCache& c,
                                           NormMode mode, bool need_dx) {
    Tensor<T> d = dy_in;
    kernels::relu_backward_inplace(d, c.output);
    Tensor<T> dh = conv_bn_backward(d, blk.conv2, c.conv2, mode, true);
    kernels::relu_backward_inplace(dh, c.hidden);
    Tensor<T> dx = conv_bn_backward(dh, blk.conv1, c.conv1, mode, need_dx);
    if (!need_dx) {
        if (blk.downsample) conv_bn_backward(d, *blk.downsample, *c.downsample, mode, false);
        return dx;
    }
    if (blk.downsample)
        kernels::add_inplace(dx, conv_bn_backward(d, *blk.downsample, *c.downsample, mode, true));
    else
        kernels::add_inplace(dx, d);
    return dx;
}

template <class T>
void BasicBackbone<T>::backward(const Pass& pass, const std::array<const Tensor<T>*, 3>& level_grads,
                                const Tensor<T>* logit_grad) {
    Tensor<T> grad; // gradient w.r.t. the current stage output
    bool have_grad = false;

    if (logit_grad) {
        if (!head_ || !pass.logits) throw StateError("logit gradient given but the pass has no logits");
        require_shape(*logit_grad, pass.logits->shape(), "logit gradient");
        auto& hw = grad_of(head_->weight);
        auto& hb = grad_of(head_->bias);
        Tensor<T> dpooled = kernels::linear_backward(pass.pooled, params_[head_->weight].value, *logit_grad, hw, hb);
        if (scope_ == TrainableScope::head_only) return;
        grad = kernels::global_avg_pool_backward(dpooled, pass.head_feature_shape);
        have_grad = true;
    }
    if (scope_ == TrainableScope::head_only) return;

    for (std::size_t s = pass.stages.size(); s-- > 0;) {
        if (s < 3 && level_grads[s]) {
            require_shape(*level_grads[s], pass.pyramid.levels[s].shape(), "pyramid level gradient");
            if (have_grad)
                kernels::add_inplace(grad, *level_grads[s]);
            else
                grad = *level_grads[s];
            have_grad = true;
        }
        if (!have_grad) continue;
        for (std::size_t b = stages_[s].size(); b-- > 0;)
            grad = block_backward(grad, stages_[s][b], pass.stages[s][b], pass.mode, true);
    }
    if (!have_grad) return;
    grad = kernels::maxpool_backward(grad, pass.pool);
    kernels::relu_backward_inplace(grad, pass.stem_out);
    conv_bn_backward(grad, stem_, pass.stem, pass.mode, false);
}

template <class T>
void BasicBackbone<T>::zero_grad() {
    for (auto& p : params_)
        if (!p.grad.empty()) p.grad.fill(T{0});
}

template <class T>
template <class U>
BasicBackbone<U> BasicBackbone<T>::cast() const {
    BasicBackbone<U> out;
    out.cfg_ = cfg_;
    out.scope_ = scope_;
    out.index_ = index_;
    out.stem_ = typename BasicBackbone<U>::ConvBn{stem_.conv, stem_.gamma, stem_.beta, stem_.mean, stem_.var, stem_.geometry};
    auto conv_cast = [](const ConvBn& c) {
        return typename BasicBackbone<U>::ConvBn{c.conv, c.gamma, c.beta, c.mean, c.var, c.geometry};
    };
    for (const auto& stage : stages_) {
        std::vector<typename BasicBackbone<U>::Block> blocks;
        for (const auto& b : stage) {
            typename BasicBackbone<U>::Block nb;
            nb.conv1 = conv_cast(b.conv1);
            nb.conv2 = conv_cast(b.conv2);
            if (b.downsample) nb.downsample = conv_cast(*b.downsample);
            blocks.push_back(nb);
        }
        out.stages_.push_back(std::move(blocks));
    }
    if (head_) out.head_ = typename BasicBackbone<U>::Head{head_->weight, head_->bias};
    for (const auto& p : params_) {
        Parameter<U> q;
        q.name = p.name;
        q.value = p.value.template cast<U>();
        q.buffer = p.buffer;
        q.head = p.head;
        out.params_.push_back(std::move(q));
    }
    return out;
}

template class BasicBackbone<float>;
template class BasicBackbone<double>;
template BasicBackbone<double> BasicBackbone<float>::cast<double>() const;
template BasicBackbone<float> BasicBackbone<double>::cast<float>() const;
template BasicBackbone<float> BasicBackbone<float>::cast<float>() const;

} // namespace etstpm
