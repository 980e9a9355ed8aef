// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "advlab/kernels.hpp"

namespace advlab::kernels::reference {

namespace {

// Returns false when the tap falls into the zero padding.
bool input_index(const ConvGeometry& g, std::size_t oh, std::size_t ow, std::size_t kh, std::size_t kw,
                 std::size_t& ih, std::size_t& iw) {
  const long h = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
  const long w = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
  if (h < 0 || w < 0 || h >= static_cast<long>(g.in_h) || w >= static_cast<long>(g.in_w)) return false;
  ih = static_cast<std::size_t>(h);
  iw = static_cast<std::size_t>(w);
  return true;
}

std::size_t w_index(const ConvGeometry& g, std::size_t kh, std::size_t kw, std::size_t ci, std::size_t co) {
  return ((kh * g.kernel_w + kw) * g.in_c + ci) * g.out_c + co;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  for (std::size_t oh = 0; oh < g.out_h(); ++oh)
    for (std::size_t ow = 0; ow < g.out_w(); ++ow)
      for (std::size_t co = 0; co < g.out_c; ++co) {
        double acc = b[co];
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            std::size_t ih = 0, iw = 0;
            if (!input_index(g, oh, ow, kh, kw, ih, iw)) continue;
            for (std::size_t ci = 0; ci < g.in_c; ++ci)
              acc += x[(ih * g.in_w + iw) * g.in_c + ci] * w[w_index(g, kh, kw, ci, co)];
          }
        y[(oh * g.out_w() + ow) * g.out_c + co] = acc;
      }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx) {
  for (std::size_t oh = 0; oh < g.out_h(); ++oh)
    for (std::size_t ow = 0; ow < g.out_w(); ++ow)
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          std::size_t ih = 0, iw = 0;
          if (!input_index(g, oh, ow, kh, kw, ih, iw)) continue;
          for (std::size_t ci = 0; ci < g.in_c; ++ci)
            for (std::size_t co = 0; co < g.out_c; ++co)
              dx[(ih * g.in_w + iw) * g.in_c + ci] +=
                  w[w_index(g, kh, kw, ci, co)] * dy[(oh * g.out_w() + ow) * g.out_c + co];
        }
}

void conv2d_backward_params(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db) {
  for (std::size_t oh = 0; oh < g.out_h(); ++oh)
    for (std::size_t ow = 0; ow < g.out_w(); ++ow)
      for (std::size_t co = 0; co < g.out_c; ++co) {
        const double grad = dy[(oh * g.out_w() + ow) * g.out_c + co];
        db[co] += grad;
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            std::size_t ih = 0, iw = 0;
            if (!input_index(g, oh, ow, kh, kw, ih, iw)) continue;
            for (std::size_t ci = 0; ci < g.in_c; ++ci)
              dw[w_index(g, kh, kw, ci, co)] += x[(ih * g.in_w + iw) * g.in_c + ci] * grad;
          }
      }
}

void cosine_bank_forward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                         std::span<const double> bank, std::span<double> out) {
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double dotp = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        dotp += a[i * d + k] * bank[j * d + k];
        na += a[i * d + k] * a[i * d + k];
        nb += bank[j * d + k] * bank[j * d + k];
      }
      out[i * p + j] = (na > 0.0 && nb > 0.0) ? dotp / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
    }
}

}  // namespace advlab::kernels::reference
