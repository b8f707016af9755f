// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <vector>

#include "soho/random.hpp"
#include "soho/tensor.hpp"

namespace soho::testing {

inline std::vector<Real> random_values(Rng& rng, std::size_t n, Real lo = -1.0, Real hi = 1.0) {
  std::vector<Real> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor random_param(Rng& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
  const auto n = numel(shape);
  return Tensor::parameter(std::move(shape), random_values(rng, n, lo, hi));
}

inline Tensor random_const(Rng& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
  const auto n = numel(shape);
  return Tensor::constant(std::move(shape), random_values(rng, n, lo, hi));
}

inline bool grad_is_zero(const Tensor& t) {
  const auto g = t.grad();
  return std::all_of(g.begin(), g.end(), [](Real v) { return v == 0.0; });
}

}  // namespace soho::testing
