// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

struct GradCheckOptions {
  Real h = 1e-5;
  Real tol = 1e-4;
  /// Lower clamp on the relative-error denominator.
  Real floor = 1e-8;
  /// Check at most this many elements (deterministic subset); 0 checks all.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0x9d2c5680u;
};

struct GradCheckReport {
  std::vector<std::size_t> indices;
  std::vector<Real> analytic;
  std::vector<Real> numeric;
  std::vector<Real> rel_error;
  Real max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;

  std::string summary() const;
};

/// Compares the reverse-mode gradient of f with respect to the leaf `x`
/// against central differences. f rebuilds its graph on every call and reads
/// x's current values; a non-scalar output is reduced with fixed random
/// weights. Throws ContractError when two evaluations at the same point differ.
/// Other leaves reached by f accumulate gradient as a side effect.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& options = {});

}  // namespace soho
