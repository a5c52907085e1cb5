#pragma once

#include <optional>
#include <string>
#include <vector>

#include "etstpm/backbone.hpp"

namespace etstpm {

struct SgdConfig {
    double learning_rate = 0.4;
    double momentum = 0.9;
    double weight_decay = 1e-4;

    void validate(const char* section) const;
};

/// SGD with heavy-ball momentum and coupled L2 weight decay:
///   v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
/// Parameters outside the backbone's trainable scope are never touched.
template <class T>
class Sgd {
public:
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

    /// Returns the name of the first updated parameter that went non-finite.
    std::optional<std::string> step(BasicBackbone<T>& model);
    const SgdConfig& config() const noexcept { return cfg_; }

private:
    SgdConfig cfg_;
    std::vector<Tensor<T>> velocity_;
};

} // namespace etstpm
