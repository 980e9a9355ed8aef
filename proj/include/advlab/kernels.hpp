// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense compute kernels behind the differentiable primitives.
//
// Layouts (all row-major):
//   feature maps   [H, W, C]
//   conv weights   [KH, KW, C_in, C_out]
//   affine weights [M, N]  (y = W x + b)
//   cosine inputs  [S, D]  (S positions, feature axis last)
//
// Backward kernels accumulate (+=) into their outputs.
//
// The functions in advlab::kernels are the production path and use OpenMP
// where the loop is wide enough. advlab::kernels::reference holds plain serial
// loops written for readability; tests compare the two and bench/ times them.
// Every parallel kernel assigns each output element to exactly one thread and
// keeps its summation order fixed, so results do not depend on thread count.

#include <cstddef>
#include <span>

namespace advlab::kernels {

struct ConvGeometry {
  std::size_t in_h = 1, in_w = 1, in_c = 1;
  std::size_t out_c = 1;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_h() const noexcept { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const noexcept { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  std::size_t weight_size() const noexcept { return kernel_h * kernel_w * in_c * out_c; }
  std::size_t macs() const noexcept { return out_h() * out_w() * kernel_h * kernel_w * in_c * out_c; }
};

/// Number of OpenMP threads the kernels may use (1 when built without OpenMP).
int max_threads();

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
void conv2d_backward_params(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db);

void affine_forward(std::size_t m, std::size_t n, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
void affine_backward_input(std::size_t m, std::size_t n, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
void affine_backward_params(std::size_t m, std::size_t n, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db);

/// Cosine similarity of every row of `a` [S, D] with every row of `bank` [P, D] -> [S, P].
/// Rows with zero norm produce similarity 0; `a_norms`/`bank_norms` receive the row norms.
void cosine_bank_forward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                         std::span<const double> bank, std::span<double> out,
                         std::span<double> a_norms, std::span<double> bank_norms);
void cosine_bank_backward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                          std::span<const double> bank, std::span<const double> cos,
                          std::span<const double> a_norms, std::span<const double> bank_norms,
                          std::span<const double> dout, std::span<double> da, std::span<double> dbank);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
void conv2d_backward_params(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db);
void cosine_bank_forward(std::size_t s, std::size_t p, std::size_t d, std::span<const double> a,
                         std::span<const double> bank, std::span<double> out);

}  // namespace reference
}  // namespace advlab::kernels
