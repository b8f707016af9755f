// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

struct GradCheckSuiteOptions {
  std::size_t configs = 5;
  Real h = 1e-5;
  Real tol = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckCase {
  std::string name;
  std::size_t configs = 0;
  /// Individual gradient entries compared.
  std::size_t checks = 0;
  Real max_rel_error = 0.0;
  bool passed = true;
  std::string worst;
};

/// Central-difference check of every differentiable op, each on `configs`
/// random instances, plus the heads . forward . embed . encode composite of a
/// small model. The composite differentiates the straight-through surrogate
/// v + (d - v) with the offset held fixed.
std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace soho
