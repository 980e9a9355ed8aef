// SPDX-License-Identifier: Apache-2.0
#include "advlab/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advlab::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelMacs = 1u << 15;

inline bool worth_parallel(std::size_t macs) {
#ifdef _OPENMP
  return macs >= kParallelMacs && !omp_in_parallel() && omp_get_max_threads() > 1;
#else
  (void)macs;
  return false;
#endif
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
  const std::size_t ic = g.in_c, oc = g.out_c;
  const auto rows = static_cast<std::ptrdiff_t>(oh_n);
#pragma omp parallel for schedule(static) if (worth_parallel(g.macs()))
  for (std::ptrdiff_t oh_i = 0; oh_i < rows; ++oh_i) {
    const auto oh = static_cast<std::size_t>(oh_i);
    for (std::size_t ow = 0; ow < ow_n; ++ow) {
      double* out = &y[(oh * ow_n + ow) * oc];
      for (std::size_t co = 0; co < oc; ++co) out[co] = b[co];
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                  static_cast<std::ptrdiff_t>(g.padding);
        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          const double* px = &x[(static_cast<std::size_t>(ih) * g.in_w + static_cast<std::size_t>(iw)) * ic];
          const double* wk = &w[(kh * g.kernel_w + kw) * ic * oc];
          for (std::size_t ci = 0; ci < ic; ++ci) axpy(px[ci], wk + ci * oc, out, oc);
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  // Gather form: each input pixel sums over the outputs whose window covers it.
  const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
  const std::size_t ic = g.in_c, oc = g.out_c;
  const auto rows = static_cast<std::ptrdiff_t>(g.in_h);
#pragma omp parallel for schedule(static) if (worth_parallel(g.macs()))
  for (std::ptrdiff_t ih_i = 0; ih_i < rows; ++ih_i) {
    const auto ih = static_cast<std::size_t>(ih_i);
    for (std::size_t iw = 0; iw < g.in_w; ++iw) {
      double* px = &dx[(ih * g.in_w + iw) * ic];
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const std::ptrdiff_t th = static_cast<std::ptrdiff_t>(ih + g.padding) - static_cast<std::ptrdiff_t>(kh);
        if (th < 0 || th % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
        const std::size_t oh = static_cast<std::size_t>(th) / g.stride;
        if (oh >= oh_n) continue;
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::ptrdiff_t tw = static_cast<std::ptrdiff_t>(iw + g.padding) - static_cast<std::ptrdiff_t>(kw);
          if (tw < 0 || tw % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
          const std::size_t ow = static_cast<std::size_t>(tw) / g.stride;
          if (ow >= ow_n) continue;
          const double* grad = &dy[(oh * ow_n + ow) * oc];
          const double* wk = &w[(kh * g.kernel_w + kw) * ic * oc];
          for (std::size_t ci = 0; ci < ic; ++ci) px[ci] += dot(wk + ci * oc, grad, oc);
        }
      }
    }
  }
}

void conv2d_backward_params(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db) {
  const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
  const std::size_t ic = g.in_c, oc = g.out_c;
  const auto taps = static_cast<std::ptrdiff_t>(g.kernel_h * g.kernel_w);
  // One kernel tap per thread: the tap owns its [C_in, C_out] weight slice.
#pragma omp parallel for schedule(static) if (worth_parallel(g.macs()))
  for (std::ptrdiff_t tap = 0; tap < taps; ++tap) {
    const std::size_t kh = static_cast<std::size_t>(tap) / g.kernel_w;
    const std::size_t kw = static_cast<std::size_t>(tap) % g.kernel_w;
    double* wk = &dw[static_cast<std::size_t>(tap) * ic * oc];
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
      const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                static_cast<std::ptrdiff_t>(g.padding);
      if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
      for (std::size_t ow = 0; ow < ow_n; ++ow) {
        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                  static_cast<std::ptrdiff_t>(g.padding);
        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
        const double* px = &x[(static_cast<std::size_t>(ih) * g.in_w + static_cast<std::size_t>(iw)) * ic];
        const double* grad = &dy[(oh * ow_n + ow) * oc];
        for (std::size_t ci = 0; ci < ic; ++ci) axpy(px[ci], grad, wk + ci * oc, oc);
      }
    }
  }
  for (std::size_t pos = 0; pos < oh_n * ow_n; ++pos) axpy(1.0, &dy[pos * oc], db.data(), oc);
}

void affine_forward(std::size_t m, std::size_t n, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  for (std::size_t i = 0; i < m; ++i) y[i] = b[i] + dot(&w[i * n], x.data(), n);
}

void affine_backward_input(std::size_t m, std::size_t n, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  for (std::size_t i = 0; i < m; ++i) axpy(dy[i], &w[i * n], dx.data(), n);
}

void affine_backward_params(std::size_t m, std::size_t n, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db) {
  for (std::size_t i = 0; i < m; ++i) {
    axpy(dy[i], x.data(), &dw[i * n], n);
    db[i] += dy[i];
  }
}

void cosine_bank_forward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                         std::span<const double> bank, std::span<double> out,
                         std::span<double> a_norms, std::span<double> bank_norms) {
  for (std::size_t j = 0; j < p; ++j) bank_norms[j] = std::sqrt(dot(&bank[j * d], &bank[j * d], d));
  const auto rows = static_cast<std::ptrdiff_t>(s);
#pragma omp parallel for schedule(static) if (worth_parallel(s * p * d))
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const auto i = static_cast<std::size_t>(r);
    const double* ai = &a[i * d];
    const double na = std::sqrt(dot(ai, ai, d));
    a_norms[i] = na;
    for (std::size_t j = 0; j < p; ++j) {
      const double denom = na * bank_norms[j];
      out[i * p + j] = denom > 0.0 ? dot(ai, &bank[j * d], d) / denom : 0.0;
    }
  }
}

void cosine_bank_backward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                          std::span<const double> bank, std::span<const double> cos,
                          std::span<const double> a_norms, std::span<const double> bank_norms,
                          std::span<const double> dout, std::span<double> da, std::span<double> dbank) {
  // d cos / d a = bank_j / (|a||b_j|) - cos * a / |a|^2, symmetric for the bank.
  // Zero-norm rows contribute nothing.
  for (std::size_t i = 0; i < s; ++i) {
    const double na = a_norms[i];
    if (na == 0.0) continue;
    const double* ai = &a[i * d];
    for (std::size_t j = 0; j < p; ++j) {
      const double nb = bank_norms[j];
      const double g = dout[i * p + j];
      if (nb == 0.0 || g == 0.0) continue;
      const double c = cos[i * p + j];
      const double* bj = &bank[j * d];
      const double inv = 1.0 / (na * nb);
      if (!da.empty()) {
        double* dai = &da[i * d];
        const double self = c / (na * na);
        for (std::size_t k = 0; k < d; ++k) dai[k] += g * (bj[k] * inv - self * ai[k]);
      }
      if (!dbank.empty()) {
        double* dbj = &dbank[j * d];
        const double self = c / (nb * nb);
        for (std::size_t k = 0; k < d; ++k) dbj[k] += g * (ai[k] * inv - self * bj[k]);
      }
    }
  }
}

}  // namespace advlab::kernels
