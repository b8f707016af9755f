// SPDX-License-Identifier: Apache-2.0
#include "soho/optim.hpp"

#include <cmath>

#include "soho/error.hpp"

namespace soho {
namespace {

void require_grad(const Tensor& p, std::size_t i, const char* who) {
  if (!p.has_grad()) throw ContractError(std::string(who) + ": parameter " + std::to_string(i) + " has no gradient");
}

std::vector<std::vector<Real>> zeros_like(const std::vector<Tensor>& params) {
  std::vector<std::vector<Real>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.size(), 0.0);
  return out;
}

}  // namespace

Sgd::Sgd(std::vector<Tensor> params, Real momentum)
    : params_(std::move(params)), velocity_(zeros_like(params_)), momentum_(momentum) {}

void Sgd::step(Real lr, Real wd) {
  for (std::size_t i = 0; i < params_.size(); ++i) require_grad(params_[i], i, "sgd_step");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = momentum_ * v[j] + (g[j] + wd * theta[j]);
      theta[j] -= lr * v[j];
    }
  }
}

AdamW::AdamW(std::vector<Tensor> params, Real beta1, Real beta2, Real eps)
    : params_(std::move(params)), m_(zeros_like(params_)), v_(zeros_like(params_)), beta1_(beta1), beta2_(beta2),
      eps_(eps) {}

void AdamW::step(Real lr, Real wd) {
  for (std::size_t i = 0; i < params_.size(); ++i) require_grad(params_[i], i, "adamw_step");
  ++t_;
  const Real c1 = 1.0 - std::pow(beta1_, Real(t_));
  const Real c2 = 1.0 - std::pow(beta2_, Real(t_));
  const Real decay = 1.0 - lr * wd;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      theta[j] *= decay;
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

Real clip_grad_norm(const std::vector<Tensor>& params, Real max_norm) {
  Real sq = 0.0;
  for (const auto& p : params)
    for (Real g : p.grad()) sq += g * g;
  const Real norm = std::sqrt(sq);
  if (norm > max_norm) {
    const Real f = max_norm / norm;
    for (auto p : params)
      for (Real& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

}  // namespace soho
