// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

/// The visual dictionary: k entries of width c, updated by a moving average
/// of the features assigned to them and never by gradients.
struct Codebook {
  std::size_t k = 0;
  std::size_t c = 0;
  /// [k x c]. A trainable leaf only so that backward can show its gradient
  /// stays exactly zero; no optimizer owns it.
  Tensor entries;
  /// Cumulative per-entry assignment tallies.
  std::vector<std::uint64_t> counts;
  Real gamma = 0.99;
};

/// Nearest-entry index per token and the inverse mapping index -> tokens.
struct Assignment {
  std::vector<std::int32_t> indices;
  std::map<std::int32_t, std::vector<std::size_t>> inverse_map;

  std::size_t tokens() const { return indices.size(); }
  /// Restricts to tokens [first, first + count), renumbering positions from 0.
  Assignment slice(std::size_t first, std::size_t count) const;
  static Assignment from_indices(std::vector<std::int32_t> indices);
};

/// Entries drawn i.i.d. uniform in [-1/sqrt(c), 1/sqrt(c)]; counts zero.
Codebook init_codebook(std::size_t k, std::size_t c, std::uint64_t seed, Real gamma = 0.99);

/// h_i = argmin_j ||v_i - d_j||, lowest index on ties. features is [l x c];
/// only its values are read.
Assignment assign(const Tensor& features, const Codebook& book);

/// Forward value d_{h_i}; backward passes the upstream gradient to the
/// features unchanged and nothing to the entries.
Tensor embed(const Tensor& features, const Assignment& assignment, const Codebook& book);

/// d_j <- gamma d_j + (1 - gamma) mean_{i in f^-1(j)} v_i for every non-empty
/// group, using feature values only. Counts grow by the group sizes.
void momentum_update(Codebook& book, const Tensor& features, const Assignment& assignment);

struct UtilizationReport {
  /// Fraction of entries with a nonzero count.
  Real utilization = 0.0;
  std::vector<std::uint64_t> histogram;
  /// exp(entropy) of the normalized histogram.
  Real perplexity = 0.0;
};

UtilizationReport utilization(std::span<const std::uint64_t> histogram);

/// Accumulates assignments over a pass through a dataset.
class AssignmentTally {
 public:
  explicit AssignmentTally(std::size_t k) : histogram_(k, 0) {}
  void add(const Assignment& assignment);
  std::uint64_t total() const;
  UtilizationReport report() const;
  const std::vector<std::uint64_t>& histogram() const { return histogram_; }

 private:
  std::vector<std::uint64_t> histogram_;
};

}  // namespace soho
