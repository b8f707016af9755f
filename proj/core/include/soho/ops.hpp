// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

// Elementwise ops require identical shapes; there is no general broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
/// x[m x n] + row[n] added to every row.
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor relu(const Tensor& x);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

/// [m x n] . [n x p]; dA = dC B^T, dB = A^T dC.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[m x n] . w[n x p] + bias[p]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int32_t> targets);
/// Mean binary cross-entropy of sigmoid(logit) against targets in {0, 1}.
Tensor bce_with_logits(const Tensor& logits, std::span<const Real> targets);

/// Normalizes every trailing-dimension vector to zero mean and unit variance,
/// then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

/// Rows of a matrix by index, repeats allowed. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Rows with flag != 0 are replaced by `fill`; gradients of replaced rows go to fill.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> flags, const Tensor& fill);
Tensor reshape(const Tensor& x, Shape shape);

/// sg[x]: same values, no gradient contribution.
Tensor stop_gradient(const Tensor& x);
/// Forward value of `target`, backward identity into `x`: x + sg[target - x]
/// with the forward value exact rather than rounded.
Tensor straight_through(const Tensor& x, const Tensor& target);

/// x[N,C,H,W] with weights [O,C,K,K] and bias [O]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad);
/// Non-overlapping window max pool; ties go to the first element scanned.
Tensor max_pool2d(const Tensor& x, std::size_t window);
/// [N,C,H,W] -> [N*H*W, C], rows ordered image-major then row-major over the grid.
Tensor nchw_to_rows(const Tensor& x);

/// Multi-head scaled dot-product attention over packed sequences.
/// q, k, v are [S*n x c]; key_mask has S*n entries, 0 marks keys nobody may attend to.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_mask,
                 std::size_t seq_len, std::size_t heads);
/// Attention probabilities laid out [S][heads][n][n], without recording a graph.
std::vector<Real> attention_probabilities(const Tensor& q, const Tensor& k, std::span<const std::uint8_t> key_mask,
                                          std::size_t seq_len, std::size_t heads);

}  // namespace soho
