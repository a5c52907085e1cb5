#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "etstpm/tensor.hpp"

// Layer kernels for the feature extractor. Two implementations live side by
// side: `kernels` (OpenMP, im2col + row-parallel GEMM) is what the pipeline
// runs; `reference` is a direct serial transcription kept for tests and the
// benchmark. Every parallel loop writes disjoint outputs and every reduction
// runs in a fixed order, so results do not depend on the thread count.

namespace etstpm {

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, ConvGeometry g) {
    return (in + 2 * g.pad - k) / g.stride + 1;
}

/// Saved batch-norm quantities needed by the backward pass.
template <class T>
struct BatchNormCache {
    Tensor<T> xhat;            // normalized input
    std::vector<double> invstd; // per channel
};

struct MaxPoolCache {
    Shape input_shape;
    std::vector<std::uint32_t> argmax; // flat input offset within (n, c) plane
};

namespace kernels {

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry g);

/// Accumulates into `dw`; overwrites `dx` when non-null.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvGeometry g,
                     Tensor<T>& dw, Tensor<T>* dx);

/// Normalize with batch statistics; optionally blends them into the running buffers.
template <class T>
Tensor<T> batchnorm_forward_batch(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  Tensor<T>* running_mean, Tensor<T>* running_var, double momentum,
                                  double eps, BatchNormCache<T>* cache);

/// Normalize with the running statistics (inference behaviour).
template <class T>
Tensor<T> batchnorm_forward_running(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                    const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                    double eps, BatchNormCache<T>* cache);

template <class T>
Tensor<T> batchnorm_backward_batch(const Tensor<T>& dy, const BatchNormCache<T>& cache,
                                   const Tensor<T>& gamma, Tensor<T>& dgamma, Tensor<T>& dbeta);

template <class T>
Tensor<T> batchnorm_backward_running(const Tensor<T>& dy, const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma, Tensor<T>& dgamma, Tensor<T>& dbeta);

template <class T>
void relu_inplace(Tensor<T>& x);

/// dy masked by y > 0, in place.
template <class T>
void relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y);

/// 3x3 window, stride 2, padding 1.
template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x, MaxPoolCache* cache);

template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& dy, const MaxPoolCache& cache);

/// (N, C, H, W) -> (N, C)
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <class T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& input_shape);

/// y = x W^T + b with x (N, C), W (K, C), b (K).
template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Accumulates into dw / db; returns dx.
template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw,
                          Tensor<T>& db);

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

} // namespace kernels

namespace reference {

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry g);

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvGeometry g,
                     Tensor<T>& dw, Tensor<T>* dx);

template <class T>
Tensor<T> batchnorm_forward_batch(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  double eps);

template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x);

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

} // namespace reference

} // namespace etstpm
