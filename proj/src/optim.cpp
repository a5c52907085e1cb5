#include "etstpm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace etstpm {

void SgdConfig::validate(const char* section) const {
    const std::string s(section);
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError(s + ".learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError(s + ".momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError(s + ".weight_decay must be non-negative");
}

template <class T>
std::optional<std::string> Sgd<T>::step(BasicBackbone<T>& model) {
    std::optional<std::string> bad;
    auto& params = model.parameters();
    if (velocity_.size() < params.size()) velocity_.resize(params.size());
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T mu = static_cast<T>(cfg_.momentum);
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!model.is_trainable(p) || p.grad.shape() != p.value.shape()) continue;
        auto& v = velocity_[i];
        if (v.shape() != p.value.shape()) v = Tensor<T>(p.value.shape());
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* vel = v.data();
        const std::size_t n = p.value.size();
        for (std::size_t j = 0; j < n; ++j) {
            vel[j] = mu * vel[j] + (g[j] + wd * w[j]);
            w[j] -= lr * vel[j];
        }
        if (!bad && !std::all_of(w, w + n, [](T x) { return std::isfinite(x); })) bad = p.name;
    }
    return bad;
}

template class Sgd<float>;
template class Sgd<double>;

} // namespace etstpm
