// Direct serial kernels. Slow on purpose: every output is a literal
// transcription of the defining sum.

#include <cmath>
#include <limits>

#include "etstpm/kernels.hpp"

namespace etstpm::reference {

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry g) {
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci) throw ShapeError("reference conv2d channel mismatch");
    const std::size_t ho = conv_out_size(h, k, g), wo = conv_out_size(wd, k, g);
    Tensor<T> y({n, co, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                s += static_cast<double>(x.at(b, c, iy, ix)) * w.at(o, c, ky, kx);
                            }
                    y.at(b, o, oy, ox) = static_cast<T>(s);
                }
    return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvGeometry g,
                     Tensor<T>& dw, Tensor<T>* dx) {
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const std::size_t ho = dy.dim(2), wo = dy.dim(3);
    if (dx) *dx = Tensor<T>(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T gout = dy.at(b, o, oy, ox);
                    for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                dw.at(o, c, ky, kx) += gout * x.at(b, c, iy, ix);
                                if (dx) dx->at(b, c, iy, ix) += gout * w.at(o, c, ky, kx);
                            }
                }
}

template <class T>
Tensor<T> batchnorm_forward_batch(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  double eps) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) mean += x.at(b, ch, i, j);
        mean /= static_cast<double>(n * h * w);
        double var = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) var += (x.at(b, ch, i, j) - mean) * (x.at(b, ch, i, j) - mean);
        var /= static_cast<double>(n * h * w);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    y.at(b, ch, i, j) = static_cast<T>((x.at(b, ch, i, j) - mean) / std::sqrt(var + eps) * gamma[ch] + beta[ch]);
    }
    return y;
}

template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = (h + 2 - 3) / 2 + 1, wo = (w + 2 - 3) / 2 + 1;
    Tensor<T> y({n, c, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    for (std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(2 * oy) - 1; iy <= static_cast<std::ptrdiff_t>(2 * oy) + 1; ++iy)
                        for (std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(2 * ox) - 1; ix <= static_cast<std::ptrdiff_t>(2 * ox) + 1; ++ix)
                            if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix < static_cast<std::ptrdiff_t>(w))
                                best = std::max(best, x.at(b, ch, iy, ix));
                    y.at(b, ch, oy, ox) = best;
                }
    return y;
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t n = x.dim(0), c = x.dim(1), k = w.dim(0);
    Tensor<T> y({n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < k; ++o) {
            double s = b[o];
            for (std::size_t j = 0; j < c; ++j) s += static_cast<double>(x[i * c + j]) * w[o * c + j];
            y[i * k + o] = static_cast<T>(s);
        }
    return y;
}

#define ETSTPM_INSTANTIATE(T)                                                                            \
    template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, ConvGeometry);                 \
    template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvGeometry,    \
                                  Tensor<T>&, Tensor<T>*);                                               \
    template Tensor<T> batchnorm_forward_batch(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
    template Tensor<T> maxpool_forward(const Tensor<T>&);                                                \
    template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

ETSTPM_INSTANTIATE(float)
ETSTPM_INSTANTIATE(double)

#undef ETSTPM_INSTANTIATE

} // namespace etstpm::reference
