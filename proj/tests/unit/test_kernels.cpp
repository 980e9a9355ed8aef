// SPDX-License-Identifier: Apache-2.0
#include <omp.h>

#include <cmath>
#include <random>
#include <vector>

#include "advlab/kernels.hpp"
#include "doctest.h"

using namespace advlab::kernels;

namespace {

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  }
  return worst;
}

// Restores the thread count on scope exit so other tests are unaffected.
struct Threads {
  int saved = omp_get_max_threads();
  explicit Threads(int n) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
};

const ConvGeometry kGeometries[] = {
    {8, 9, 1, 4, 3, 3, 1, 1},
    {32, 64, 1, 8, 3, 3, 2, 1},
    {16, 32, 8, 16, 3, 3, 2, 1},
    {5, 7, 3, 2, 2, 3, 1, 0},
};

}  // namespace

TEST_CASE("conv2d: parallel kernels agree with the serial reference") {
  Threads four(4);
  std::mt19937_64 rng(11);
  for (const auto& g : kGeometries) {
    const auto x = random_vec(rng, g.in_h * g.in_w * g.in_c);
    const auto w = random_vec(rng, g.weight_size());
    const auto b = random_vec(rng, g.out_c);
    const std::size_t ny = g.out_h() * g.out_w() * g.out_c;
    std::vector<double> y(ny), y_ref(ny);
    conv2d_forward(g, x, w, b, y);
    reference::conv2d_forward(g, x, w, b, y_ref);
    CHECK(max_rel_diff(y, y_ref) < 1e-12);

    const auto dy = random_vec(rng, ny);
    std::vector<double> dx(x.size()), dx_ref(x.size());
    conv2d_backward_input(g, dy, w, dx);
    reference::conv2d_backward_input(g, dy, w, dx_ref);
    CHECK(max_rel_diff(dx, dx_ref) < 1e-12);

    std::vector<double> dw(w.size()), db(b.size()), dw_ref(w.size()), db_ref(b.size());
    conv2d_backward_params(g, x, dy, dw, db);
    reference::conv2d_backward_params(g, x, dy, dw_ref, db_ref);
    CHECK(max_rel_diff(dw, dw_ref) < 1e-12);
    CHECK(max_rel_diff(db, db_ref) < 1e-12);
  }
}

TEST_CASE("conv2d: results do not depend on the thread count") {
  std::mt19937_64 rng(12);
  const ConvGeometry g{16, 32, 8, 16, 3, 3, 2, 1};
  const auto x = random_vec(rng, g.in_h * g.in_w * g.in_c);
  const auto w = random_vec(rng, g.weight_size());
  const auto b = random_vec(rng, g.out_c);
  const auto dy = random_vec(rng, g.out_h() * g.out_w() * g.out_c);
  auto run = [&](int threads) {
    Threads t(threads);
    std::vector<double> y(dy.size()), dx(x.size()), dw(w.size()), db(b.size());
    conv2d_forward(g, x, w, b, y);
    conv2d_backward_input(g, dy, w, dx);
    conv2d_backward_params(g, x, dy, dw, db);
    y.insert(y.end(), dx.begin(), dx.end());
    y.insert(y.end(), dw.begin(), dw.end());
    y.insert(y.end(), db.begin(), db.end());
    return y;
  };
  CHECK(run(1) == run(4));
}

TEST_CASE("conv2d backward kernels accumulate into their outputs") {
  const ConvGeometry g{4, 4, 1, 1, 3, 3, 1, 1};
  std::mt19937_64 rng(13);
  const auto x = random_vec(rng, 16), w = random_vec(rng, 9), dy = random_vec(rng, 16);
  std::vector<double> dx(16, 0.0), dx2(16, 1.0);
  conv2d_backward_input(g, dy, w, dx);
  conv2d_backward_input(g, dy, w, dx2);
  for (std::size_t i = 0; i < 16; ++i) CHECK(dx2[i] == doctest::Approx(dx[i] + 1.0).epsilon(1e-14));
}

TEST_CASE("affine kernels: hand example and transpose consistency") {
  // W = [[1, 2], [3, 4]], x = [1, -1], b = [0.5, 0] -> y = [-0.5, -1]
  const std::vector<double> w{1, 2, 3, 4}, x{1, -1}, b{0.5, 0};
  std::vector<double> y(2);
  affine_forward(2, 2, x, w, b, y);
  CHECK(y[0] == -0.5);
  CHECK(y[1] == -1.0);

  std::vector<double> dx(2), dw(4), db(2);
  const std::vector<double> dy{1, 2};
  affine_backward_input(2, 2, dy, w, dx);
  affine_backward_params(2, 2, x, dy, dw, db);
  CHECK(dx == std::vector<double>{7, 10});
  CHECK(dw == std::vector<double>{1, -1, 2, -2});
  CHECK(db == std::vector<double>{1, 2});
}

TEST_CASE("cosine bank: parallel forward agrees with the reference; zero rows give 0") {
  Threads four(4);
  std::mt19937_64 rng(14);
  const std::size_t s = 128, p = 18, d = 32;
  auto a = random_vec(rng, s * d);
  for (std::size_t k = 0; k < d; ++k) a[5 * d + k] = 0.0;
  const auto bank = random_vec(rng, p * d);
  std::vector<double> out(s * p), ref(s * p), an(s), bn(p);
  cosine_bank_forward(s, p, d, a, bank, out, an, bn);
  reference::cosine_bank_forward(s, p, d, a, bank, ref);
  CHECK(max_rel_diff(out, ref) < 1e-12);
  for (std::size_t j = 0; j < p; ++j) CHECK(out[5 * p + j] == 0.0);
  CHECK(an[5] == 0.0);
}
