// SPDX-License-Identifier: Apache-2.0
#include "soho/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "soho/error.hpp"
#include "soho/ops.hpp"
#include "soho/random.hpp"

namespace soho {

std::string GradCheckReport::summary() const {
  std::string s = passed ? "pass" : "FAIL";
  s += " checked=" + std::to_string(indices.size());
  s += " max_rel_error=" + std::to_string(max_rel_error);
  if (!indices.empty()) {
    s += " worst@" + std::to_string(indices[worst_index]) + " analytic=" + std::to_string(analytic[worst_index]) +
         " numeric=" + std::to_string(numeric[worst_index]);
  }
  return s;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& options) {
  if (!x.is_leaf() || !x.requires_grad()) throw ContractError("finite_diff_check: x must be a trainable leaf");
  if (!(options.h > 0.0)) throw ContractError("finite_diff_check: h must be positive");

  const Tensor first = f();
  const Tensor second = f();
  if (first.shape() != second.shape() ||
      std::memcmp(first.data().data(), second.data().data(), first.size() * sizeof(Real)) != 0) {
    throw ContractError("finite_diff_check: f is not deterministic");
  }

  Tensor weights;
  if (first.size() != 1) {
    Rng rng(options.seed);
    std::vector<Real> w(first.size());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    weights = Tensor::constant(first.shape(), std::move(w));
  }
  auto objective = [&]() -> Tensor {
    Tensor y = f();
    return weights.defined() ? sum(mul(y, weights)) : sum(y);
  };

  std::vector<Real> saved_grad(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(objective());
  const std::vector<Real> grad(x.grad().begin(), x.grad().end());
  if (saved_grad.empty()) {
    x.zero_grad();
  } else {
    std::copy(saved_grad.begin(), saved_grad.end(), x.mutable_grad().begin());
  }

  GradCheckReport report;
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (options.max_elements != 0 && options.max_elements < idx.size()) {
    Rng rng(options.seed ^ 0x51ed27u);
    for (std::size_t i = 0; i < options.max_elements; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(options.max_elements);
    std::sort(idx.begin(), idx.end());
  }

  NoGradGuard no_grad;
  auto values = x.mutable_data();
  for (std::size_t i : idx) {
    const Real original = values[i];
    values[i] = original + options.h;
    const Real plus = objective().item();
    values[i] = original - options.h;
    const Real minus = objective().item();
    values[i] = original;
    const Real numeric = (plus - minus) / (2.0 * options.h);
    const Real analytic = grad.empty() ? 0.0 : grad[i];
    const Real denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
    const Real rel = std::abs(analytic - numeric) / denom;
    report.indices.push_back(i);
    report.analytic.push_back(analytic);
    report.numeric.push_back(numeric);
    report.rel_error.push_back(rel);
    if (rel > report.max_rel_error || report.indices.size() == 1) {
      report.max_rel_error = rel;
      report.worst_index = report.indices.size() - 1;
    }
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

}  // namespace soho
