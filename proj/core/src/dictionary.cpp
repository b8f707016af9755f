// SPDX-License-Identifier: Apache-2.0
#include "soho/dictionary.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numeric>
#include <string>

#include "soho/error.hpp"
#include "soho/ops.hpp"
#include "soho/random.hpp"

namespace soho {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;

void check_features(const Tensor& features, const Codebook& book, const char* op) {
  if (features.rank() != 2 || features.dim(1) != book.c) {
    throw DimensionError(std::string(op) + ": features " + to_string(features.shape()) +
                         " do not match codebook width " + std::to_string(book.c));
  }
}

}  // namespace

Assignment Assignment::from_indices(std::vector<std::int32_t> indices) {
  Assignment a;
  a.indices = std::move(indices);
  for (std::size_t i = 0; i < a.indices.size(); ++i) a.inverse_map[a.indices[i]].push_back(i);
  return a;
}

Assignment Assignment::slice(std::size_t first, std::size_t count) const {
  if (first + count > indices.size()) throw ContractError("assignment slice out of range");
  return from_indices(std::vector<std::int32_t>(indices.begin() + first, indices.begin() + first + count));
}

Codebook init_codebook(std::size_t k, std::size_t c, std::uint64_t seed, Real gamma) {
  if (k < 2 || c < 1) throw ContractError("codebook needs k >= 2 and c >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("codebook momentum must lie in [0, 1]");
  Rng rng(seed);
  const Real bound = 1.0 / std::sqrt(Real(c));
  std::vector<Real> v(k * c);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  Codebook book;
  book.k = k;
  book.c = c;
  book.entries = Tensor::parameter({k, c}, std::move(v));
  book.counts.assign(k, 0);
  book.gamma = gamma;
  return book;
}

Assignment assign(const Tensor& features, const Codebook& book) {
  check_features(features, book, "assign");
  const Eigen::Index l = features.dim(0), k = book.k, c = book.c;
  MapC v(features.data().data(), l, c);
  MapC d(book.entries.data().data(), k, c);
  const Eigen::VectorXd d_sq = d.rowwise().squaredNorm();
  // Expanded distance ||v||^2 - 2 v.d + ||d||^2 without the per-row constant.
  const RowMat scores = (-2.0 * (v * d.transpose())).rowwise() + d_sq.transpose();

  std::vector<std::int32_t> indices(l);
  for (Eigen::Index i = 0; i < l; ++i) {
    Eigen::Index best = 0;
    Real best_score = scores(i, 0);
    for (Eigen::Index j = 1; j < k; ++j) {
      if (scores(i, j) < best_score) {
        best_score = scores(i, j);
        best = j;
      }
    }
    // Rounding in the expanded form can reorder near-ties; settle them with
    // the direct distance so ties resolve to the lowest index.
    const Real slack = 1e-9 * (std::abs(best_score) + v.row(i).squaredNorm() + 1.0);
    Real best_direct = (v.row(i) - d.row(best)).squaredNorm();
    for (Eigen::Index j = 0; j < k; ++j) {
      if (j == best || scores(i, j) > best_score + slack) continue;
      const Real direct = (v.row(i) - d.row(j)).squaredNorm();
      if (direct < best_direct || (direct == best_direct && j < best)) {
        best_direct = direct;
        best = j;
      }
    }
    indices[i] = static_cast<std::int32_t>(best);
  }
  return Assignment::from_indices(std::move(indices));
}

Tensor embed(const Tensor& features, const Assignment& assignment, const Codebook& book) {
  check_features(features, book, "embed");
  if (assignment.tokens() != features.dim(0)) {
    throw ContractError("embed: assignment covers " + std::to_string(assignment.tokens()) + " tokens but features have " +
                        std::to_string(features.dim(0)));
  }
  std::vector<std::size_t> rows(assignment.indices.begin(), assignment.indices.end());
  return straight_through(features, gather_rows(book.entries, rows));
}

void momentum_update(Codebook& book, const Tensor& features, const Assignment& assignment) {
  check_features(features, book, "momentum_update");
  if (assignment.tokens() != features.dim(0)) {
    throw ContractError("momentum_update: assignment does not match features");
  }
  const auto v = features.data();
  auto d = book.entries.mutable_data();
  const std::size_t c = book.c;
  std::vector<Real> mean(c);
  for (const auto& [j, group] : assignment.inverse_map) {
    if (group.empty()) continue;
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t i : group)
      for (std::size_t t = 0; t < c; ++t) mean[t] += v[i * c + t];
    for (auto& m : mean) m /= Real(group.size());
    Real* row = d.data() + std::size_t(j) * c;
    for (std::size_t t = 0; t < c; ++t) row[t] = book.gamma * row[t] + (1.0 - book.gamma) * mean[t];
    book.counts[j] += group.size();
  }
}

UtilizationReport utilization(std::span<const std::uint64_t> histogram) {
  UtilizationReport r;
  r.histogram.assign(histogram.begin(), histogram.end());
  if (histogram.empty()) return r;
  const std::uint64_t total = std::accumulate(histogram.begin(), histogram.end(), std::uint64_t{0});
  std::size_t used = 0;
  Real entropy = 0.0;
  for (auto n : histogram) {
    if (n == 0) continue;
    ++used;
    const Real p = Real(n) / Real(total);
    entropy -= p * std::log(p);
  }
  r.utilization = Real(used) / Real(histogram.size());
  r.perplexity = total == 0 ? 0.0 : std::exp(entropy);
  return r;
}

void AssignmentTally::add(const Assignment& assignment) {
  for (auto j : assignment.indices) ++histogram_.at(std::size_t(j));
}

std::uint64_t AssignmentTally::total() const {
  return std::accumulate(histogram_.begin(), histogram_.end(), std::uint64_t{0});
}

UtilizationReport AssignmentTally::report() const { return utilization(histogram_); }

}  // namespace soho
