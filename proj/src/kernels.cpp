#include "etstpm/kernels.hpp"

#include <cmath>
#include <limits>

namespace etstpm::kernels {

namespace {

template <class T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()));
}

// Unrolled dot product with a fixed association order.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// col has shape (Ci*k*k, Ho*Wo) for one image.
template <class T>
void im2col(const T* img, std::size_t ci, std::size_t h, std::size_t wd, std::size_t k,
            ConvGeometry g, std::size_t ho, std::size_t wo, T* col) {
    const std::size_t rows = ci * k * k;
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t c = r / (k * k);
        const std::size_t ky = (r / k) % k;
        const std::size_t kx = r % k;
        T* dst = col + r * ho * wo;
        const T* plane = img + c * h * wd;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            T* drow = dst + oy * wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                for (std::size_t ox = 0; ox < wo; ++ox) drow[ox] = T{0};
                continue;
            }
            const T* srow = plane + static_cast<std::size_t>(iy) * wd;
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad);
                drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) ? T{0}
                                                                             : srow[ix];
            }
        }
    }
}

template <class T>
void col2im(const T* col, std::size_t ci, std::size_t h, std::size_t wd, std::size_t k,
            ConvGeometry g, std::size_t ho, std::size_t wo, T* img) {
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < ci; ++c) {
        T* plane = img + c * h * wd;
        for (std::size_t i = 0; i < h * wd; ++i) plane[i] = T{0};
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* src = col + ((c * k + ky) * k + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* drow = plane + static_cast<std::size_t>(iy) * wd;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        drow[ix] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

bool is_pointwise(std::size_t k, ConvGeometry g) { return k == 1 && g.stride == 1 && g.pad == 0; }

} // namespace

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry g) {
    check_conv_args(x, w);
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const std::size_t ho = conv_out_size(h, k, g), wo = conv_out_size(wd, k, g);
    const std::size_t kk = ci * k * k, hw = ho * wo;
    Tensor<T> y({n, co, ho, wo});
    std::vector<T> col(is_pointwise(k, g) ? 0 : kk * hw);
    for (std::size_t b = 0; b < n; ++b) {
        const T* img = x.data() + b * ci * h * wd;
        const T* src = img;
        if (!is_pointwise(k, g)) {
            im2col(img, ci, h, wd, k, g, ho, wo, col.data());
            src = col.data();
        }
        T* out = y.data() + b * co * hw;
#pragma omp parallel for schedule(static)
        for (std::size_t o = 0; o < co; ++o) {
            T* orow = out + o * hw;
            const T* wrow = w.data() + o * kk;
            for (std::size_t r = 0; r < kk; ++r) axpy(wrow[r], src + r * hw, orow, hw);
        }
    }
    return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvGeometry g,
                     Tensor<T>& dw, Tensor<T>* dx) {
    check_conv_args(x, w);
    require_shape(dw, w.shape(), "conv2d weight gradient");
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const std::size_t ho = conv_out_size(h, k, g), wo = conv_out_size(wd, k, g);
    require_shape(dy, {n, co, ho, wo}, "conv2d output gradient");
    const std::size_t kk = ci * k * k, hw = ho * wo;
    const bool pointwise = is_pointwise(k, g);
    std::vector<T> col(pointwise ? 0 : kk * hw);
    std::vector<T> dcol(dx && !pointwise ? kk * hw : 0);
    if (dx) *dx = Tensor<T>(x.shape());

    for (std::size_t b = 0; b < n; ++b) {
        const T* img = x.data() + b * ci * h * wd;
        const T* src = img;
        if (!pointwise) {
            im2col(img, ci, h, wd, k, g, ho, wo, col.data());
            src = col.data();
        }
        const T* grad = dy.data() + b * co * hw;

#pragma omp parallel for schedule(static)
        for (std::size_t o = 0; o < co; ++o) {
            T* dwrow = dw.data() + o * kk;
            const T* grow = grad + o * hw;
            for (std::size_t r = 0; r < kk; ++r) dwrow[r] += dot(grow, src + r * hw, hw);
        }

        if (dx) {
            T* target = pointwise ? dx->data() + b * ci * h * wd : dcol.data();
#pragma omp parallel for schedule(static)
            for (std::size_t r = 0; r < kk; ++r) {
                T* drow = target + r * hw;
                for (std::size_t i = 0; i < hw; ++i) drow[i] = T{0};
                for (std::size_t o = 0; o < co; ++o) axpy(w.data()[o * kk + r], grad + o * hw, drow, hw);
            }
            if (!pointwise) col2im(dcol.data(), ci, h, wd, k, g, ho, wo, dx->data() + b * ci * h * wd);
        }
    }
}

template <class T>
Tensor<T> batchnorm_forward_batch(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  Tensor<T>* running_mean, Tensor<T>* running_var, double momentum,
                                  double eps, BatchNormCache<T>* cache) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t m = n * hw;
    if (m < 2) throw ShapeError("batch statistics need more than one value per channel");
    Tensor<T> y(x.shape());
    if (cache) {
        cache->xhat = Tensor<T>(x.shape());
        cache->invstd.assign(c, 0.0);
    }
#pragma omp parallel for schedule(static)
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const T* p = x.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        }
        const double mean = sum / static_cast<double>(m);
        double sq = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const T* p = x.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double d = p[i] - mean;
                sq += d * d;
            }
        }
        const double var = sq / static_cast<double>(m);
        const double invstd = 1.0 / std::sqrt(var + eps);
        const double gm = gamma[ch], bt = beta[ch];
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double xh = (x[off + i] - mean) * invstd;
                y[off + i] = static_cast<T>(xh * gm + bt);
                if (cache) cache->xhat[off + i] = static_cast<T>(xh);
            }
        }
        if (cache) cache->invstd[ch] = invstd;
        if (running_mean && running_var) {
            const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            (*running_mean)[ch] = static_cast<T>((1.0 - momentum) * (*running_mean)[ch] + momentum * mean);
            (*running_var)[ch] = static_cast<T>((1.0 - momentum) * (*running_var)[ch] + momentum * unbiased);
        }
    }
    return y;
}

template <class T>
Tensor<T> batchnorm_forward_running(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                    const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                    double eps, BatchNormCache<T>* cache) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y(x.shape());
    if (cache) {
        cache->xhat = Tensor<T>(x.shape());
        cache->invstd.assign(c, 0.0);
    }
#pragma omp parallel for schedule(static)
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double mean = running_mean[ch];
        const double invstd = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
        const double gm = gamma[ch], bt = beta[ch];
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double xh = (x[off + i] - mean) * invstd;
                y[off + i] = static_cast<T>(xh * gm + bt);
                if (cache) cache->xhat[off + i] = static_cast<T>(xh);
            }
        }
        if (cache) cache->invstd[ch] = invstd;
    }
    return y;
}

template <class T>
Tensor<T> batchnorm_backward_batch(const Tensor<T>& dy, const BatchNormCache<T>& cache,
                                   const Tensor<T>& gamma, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    const double m = static_cast<double>(n * hw);
    Tensor<T> dx(dy.shape());
#pragma omp parallel for schedule(static)
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                sum_dy += dy[off + i];
                sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
            }
        }
        dgamma[ch] += static_cast<T>(sum_dy_xhat);
        dbeta[ch] += static_cast<T>(sum_dy);
        const double scale = gamma[ch] * cache.invstd[ch] / m;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i)
                dx[off + i] = static_cast<T>(scale * (m * dy[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat));
        }
    }
    return dx;
}

template <class T>
Tensor<T> batchnorm_backward_running(const Tensor<T>& dy, const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor<T> dx(dy.shape());
#pragma omp parallel for schedule(static)
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        const double scale = gamma[ch] * cache.invstd[ch];
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                sum_dy += dy[off + i];
                sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
                dx[off + i] = static_cast<T>(scale * dy[off + i]);
            }
        }
        dgamma[ch] += static_cast<T>(sum_dy_xhat);
        dbeta[ch] += static_cast<T>(sum_dy);
    }
    return dx;
}

template <class T>
void relu_inplace(Tensor<T>& x) {
    T* p = x.data();
    const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > T{0} ? p[i] : T{0};
}

template <class T>
void relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y) {
    T* g = dy.data();
    const T* p = y.data();
    const std::size_t n = dy.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i)
        if (!(p[i] > T{0})) g[i] = T{0};
}

template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x, MaxPoolCache* cache) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const ConvGeometry g{2, 1};
    const std::size_t ho = conv_out_size(h, 3, g), wo = conv_out_size(w, 3, g);
    Tensor<T> y({n, c, ho, wo});
    if (cache) {
        cache->input_shape = x.shape();
        cache->argmax.assign(y.size(), 0);
    }
    const std::size_t planes = n * c;
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.data() + p * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::uint32_t arg = 0;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * 2 + ky) - 1;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * 2 + kx) - 1;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        const std::size_t off = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                        if (src[off] > best) {
                            best = src[off];
                            arg = static_cast<std::uint32_t>(off);
                        }
                    }
                }
                const std::size_t o = p * ho * wo + oy * wo + ox;
                y[o] = best;
                if (cache) cache->argmax[o] = arg;
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& dy, const MaxPoolCache& cache) {
    Tensor<T> dx(cache.input_shape);
    const std::size_t planes = dy.dim(0) * dy.dim(1);
    const std::size_t in_plane = cache.input_shape[2] * cache.input_shape[3];
    const std::size_t out_plane = dy.dim(2) * dy.dim(3);
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < planes; ++p) {
        T* dst = dx.data() + p * in_plane;
        for (std::size_t i = 0; i < out_plane; ++i) dst[cache.argmax[p * out_plane + i]] += dy[p * out_plane + i];
    }
    return dx;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y({n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
        y[p] = static_cast<T>(s / static_cast<double>(hw));
    }
    return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& input_shape) {
    Tensor<T> dx(input_shape);
    const std::size_t hw = input_shape[2] * input_shape[3];
    const T scale = T{1} / static_cast<T>(hw);
    for (std::size_t p = 0; p < dy.size(); ++p)
        for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] = dy[p] * scale;
    return dx;
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t n = x.dim(0), c = x.dim(1), k = w.dim(0);
    if (w.dim(1) != c) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    Tensor<T> y({n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < k; ++o) y[i * k + o] = dot(x.data() + i * c, w.data() + o * c, c) + b[o];
    return y;
}

template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw,
                          Tensor<T>& db) {
    const std::size_t n = x.dim(0), c = x.dim(1), k = w.dim(0);
    Tensor<T> dx({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < k; ++o) {
            const T g = dy[i * k + o];
            db[o] += g;
            axpy(g, x.data() + i * c, dw.data() + o * c, c);
            axpy(g, w.data() + o * c, dx.data() + i * c, c);
        }
    }
    return dx;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    T* p = a.data();
    const T* q = b.data();
    const std::size_t n = a.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) p[i] += q[i];
}

#define ETSTPM_INSTANTIATE(T)                                                                          \
    template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, ConvGeometry);               \
    template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvGeometry,  \
                                  Tensor<T>&, Tensor<T>*);                                             \
    template Tensor<T> batchnorm_forward_batch(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                               Tensor<T>*, Tensor<T>*, double, double,                 \
                                               BatchNormCache<T>*);                                    \
    template Tensor<T> batchnorm_forward_running(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                 const Tensor<T>&, const Tensor<T>&, double,           \
                                                 BatchNormCache<T>*);                                  \
    template Tensor<T> batchnorm_backward_batch(const Tensor<T>&, const BatchNormCache<T>&,            \
                                                const Tensor<T>&, Tensor<T>&, Tensor<T>&);             \
    template Tensor<T> batchnorm_backward_running(const Tensor<T>&, const BatchNormCache<T>&,          \
                                                  const Tensor<T>&, Tensor<T>&, Tensor<T>&);           \
    template void relu_inplace(Tensor<T>&);                                                            \
    template void relu_backward_inplace(Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> maxpool_forward(const Tensor<T>&, MaxPoolCache*);                               \
    template Tensor<T> maxpool_backward(const Tensor<T>&, const MaxPoolCache&);                        \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                              \
    template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                       \
    template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                       Tensor<T>&, Tensor<T>&);                                        \
    template void add_inplace(Tensor<T>&, const Tensor<T>&);

ETSTPM_INSTANTIATE(float)
ETSTPM_INSTANTIATE(double)

#undef ETSTPM_INSTANTIATE

} // namespace etstpm::kernels
