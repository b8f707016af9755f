// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

/// Classical momentum SGD with L2 weight decay folded into the gradient:
/// v <- mu v + (g + wd theta); theta <- theta - lr v.
class Sgd {
 public:
  explicit Sgd(std::vector<Tensor> params, Real momentum = 0.9);

  /// Throws ContractError when a parameter has no gradient.
  void step(Real lr, Real wd);

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<Real>>& velocity() { return velocity_; }
  const std::vector<std::vector<Real>>& velocity() const { return velocity_; }
  Real momentum() const { return momentum_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> velocity_;
  Real momentum_;
};

/// Adam with decoupled weight decay: theta <- theta (1 - lr wd), then the
/// bias-corrected adaptive step.
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8);

  /// Advances the step counter t and applies one update.
  void step(Real lr, Real wd);

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<Real>>& first_moment() { return m_; }
  std::vector<std::vector<Real>>& second_moment() { return v_; }
  const std::vector<std::vector<Real>>& first_moment() const { return m_; }
  const std::vector<std::vector<Real>>& second_moment() const { return v_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  Real beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
Real clip_grad_norm(const std::vector<Tensor>& params, Real max_norm);

}  // namespace soho
