// SPDX-License-Identifier: Apache-2.0
#include "soho/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "soho/error.hpp"

namespace soho {

namespace {

using detail::make_result;
using detail::Node;
using detail::wants_grad;

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
using SMapC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using SMapM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
}

template <class F, class G>
Tensor unary(const char* op, const Tensor& x, F&& forward, G&& derivative) {
  const auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_result(op, x.shape(), std::move(out), {&x}, [derivative](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t i = 0; i < a.value.size(); ++i) a.grad[i] += self.grad[i] * derivative(a.value[i]);
  });
}

constexpr Real kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr Real kGeluCubic = 0.044715;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Buffer out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& n = *self.parents[p];
      if (!wants_grad(n)) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Buffer out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& n0 = *self.parents[0];
    Node& n1 = *self.parents[1];
    if (wants_grad(n0))
      for (std::size_t i = 0; i < n0.grad.size(); ++i) n0.grad[i] += self.grad[i];
    if (wants_grad(n1))
      for (std::size_t i = 0; i < n1.grad.size(); ++i) n1.grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Buffer out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& n0 = *self.parents[0];
    Node& n1 = *self.parents[1];
    if (wants_grad(n0))
      for (std::size_t i = 0; i < n0.grad.size(); ++i) n0.grad[i] += self.grad[i] * n1.value[i];
    if (wants_grad(n1))
      for (std::size_t i = 0; i < n1.grad.size(); ++i) n1.grad[i] += self.grad[i] * n0.value[i];
  });
}

Tensor scale(const Tensor& a, Real s) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result("scale", a.shape(), std::move(out), {&a}, [s](Node& self) {
    Node& n = *self.parents[0];
    if (!wants_grad(n)) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += s * self.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_rank(x, 2, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (row.size() != n) {
    throw DimensionError("add_row: row of shape " + to_string(row.shape()) + " does not fit " + to_string(x.shape()));
  }
  Buffer out(x.data().begin(), x.data().end());
  const auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  return make_result("add_row", x.shape(), std::move(out), {&x, &row}, [m, n](Node& self) {
    Node& a = *self.parents[0];
    Node& r = *self.parents[1];
    if (wants_grad(a))
      for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += self.grad[i];
    if (wants_grad(r))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) r.grad[j] += self.grad[i * n + j];
  });
}

Tensor sum(const Tensor& x) {
  Real s = 0.0;
  for (Real v : x.data()) s += v;
  return make_result("sum", {}, {s}, {&x}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (auto& g : a.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto n = static_cast<Real>(x.size());
  return scale(sum(x), 1.0 / n);
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](Real v) { return v > 0.0 ? v : 0.0; }, [](Real v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](Real v) { return 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v))); },
      [](Real v) {
        const Real inner = kGeluScale * (v + kGeluCubic * v * v * v);
        const Real t = std::tanh(inner);
        const Real dinner = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const Eigen::Index m = a.dim(0), n = a.dim(1), p = b.dim(1);
  Buffer out(m * p);
  MapM(out.data(), m, p).noalias() = MapC(a.data().data(), m, n) * MapC(b.data().data(), n, p);
  return make_result("matmul", {std::size_t(m), std::size_t(p)}, std::move(out), {&a, &b}, [m, n, p](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    MapC dC(self.grad.data(), m, p);
    if (wants_grad(A)) MapM(A.grad.data(), m, n).noalias() += dC * MapC(B.value.data(), n, p).transpose();
    if (wants_grad(B)) MapM(B.grad.data(), n, p).noalias() += MapC(A.value.data(), m, n).transpose() * dC;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
  }
  const Eigen::Index m = x.dim(0), n = x.dim(1), p = w.dim(1);
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != std::size_t(p)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match output width " +
                         std::to_string(p));
  }
  Buffer out(m * p);
  MapM y(out.data(), m, p);
  y.noalias() = MapC(x.data().data(), m, n) * MapC(w.data().data(), n, p);
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.data().data(), p);
  return make_result("linear", {std::size_t(m), std::size_t(p)}, std::move(out), {&x, &w, &bias},
                     [m, n, p](Node& self) {
                       Node& X = *self.parents[0];
                       Node& W = *self.parents[1];
                       MapC dY(self.grad.data(), m, p);
                       if (wants_grad(X))
                         MapM(X.grad.data(), m, n).noalias() += dY * MapC(W.value.data(), n, p).transpose();
                       if (wants_grad(W))
                         MapM(W.grad.data(), n, p).noalias() += MapC(X.value.data(), m, n).transpose() * dY;
                       if (self.parents[2] && wants_grad(*self.parents[2])) {
                         Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(self.parents[2]->grad.data(), p) +=
                             dY.colwise().sum();
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  const auto in = x.data();
  Buffer out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      Real z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result("softmax", s, std::move(out), {&x}, [outer, inner, n](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        Real dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          a.grad[k] += y[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy_logits");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  if (targets.size() != b) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " rows");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 0 || std::size_t(targets[i]) >= n) {
      throw IndexError("cross_entropy_logits: target " + std::to_string(targets[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
    }
  }
  if (b == 0) return Tensor::scalar(0.0);
  const auto in = logits.data();
  Buffer probs(in.size());
  Real total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const Real* row = in.data() + i * n;
    Real mx = *std::max_element(row, row + n);
    Real z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  return make_result("cross_entropy", {}, {total / Real(b)}, {&logits},
                     [probs = std::move(probs), t = std::move(t), b, n](Node& self) {
                       Node& a = *self.parents[0];
                       if (!wants_grad(a)) return;
                       const Real g = self.grad[0] / Real(b);
                       for (std::size_t i = 0; i < b; ++i) {
                         for (std::size_t j = 0; j < n; ++j) a.grad[i * n + j] += g * probs[i * n + j];
                         a.grad[i * n + t[i]] -= g;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const Real> targets) {
  const std::size_t b = logits.size();
  if (targets.size() != b) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " logits");
  }
  if (b == 0) return Tensor::scalar(0.0);
  const auto x = logits.data();
  Real total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    total += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  Buffer t(targets.begin(), targets.end());
  return make_result("bce_with_logits", {}, {total / Real(b)}, {&logits}, [t = std::move(t), b](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    const Real g = self.grad[0] / Real(b);
    for (std::size_t i = 0; i < b; ++i) {
      const Real sig = 1.0 / (1.0 + std::exp(-a.value[i]));
      a.grad[i] += g * (sig - t[i]);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: gain/bias do not match feature width " + std::to_string(c));
  }
  const std::size_t rows = x.size() / c;
  const auto in = x.data(), g = gain.data(), bb = bias.data();
  Buffer out(in.size()), xhat(in.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* v = in.data() + r * c;
    Real mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += v[j];
    mu /= Real(c);
    Real var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (v[j] - mu) * (v[j] - mu);
    var /= Real(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (v[j] - mu) * rstd[r];
      out[r * c + j] = xhat[r * c + j] * g[j] + bb[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                     [xhat = std::move(xhat), rstd = std::move(rstd), rows, c](Node& self) {
                       Node& X = *self.parents[0];
                       Node& G = *self.parents[1];
                       Node& B = *self.parents[2];
                       const auto& dy = self.grad;
                       if (wants_grad(G))
                         for (std::size_t i = 0; i < rows * c; ++i) G.grad[i % c] += dy[i] * xhat[i];
                       if (wants_grad(B))
                         for (std::size_t i = 0; i < rows * c; ++i) B.grad[i % c] += dy[i];
                       if (!wants_grad(X)) return;
                       Buffer dxhat(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           dxhat[j] = dy[r * c + j] * G.value[j];
                           m1 += dxhat[j];
                           m2 += dxhat[j] * xhat[r * c + j];
                         }
                         m1 /= Real(c);
                         m2 /= Real(c);
                         for (std::size_t j = 0; j < c; ++j)
                           X.grad[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Buffer out(rows.size() * n);
  const auto in = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " + to_string(x.shape()));
    }
    std::copy_n(in.begin() + rows[i] * n, n, out.begin() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("gather_rows", {rows.size(), n}, std::move(out), {&x}, [idx = std::move(idx), n](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) a.grad[idx[i] * n + j] += self.grad[i * n + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column mismatch " + to_string(parts.front().shape()) + " vs " +
                           to_string(p.shape()));
    }
    m += p.dim(0);
  }
  Buffer out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result("concat_rows", {m, n}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (wants_grad(*p))
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[offset + i];
      offset += p->value.size();
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  Buffer out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().begin() + i * p, p, out.begin() + i * (p + q));
    std::copy_n(b.data().begin() + i * q, q, out.begin() + i * (p + q) + p);
  }
  return make_result("concat_cols", {m, p + q}, std::move(out), {&a, &b}, [m, p, q](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i) {
      if (wants_grad(A))
        for (std::size_t j = 0; j < p; ++j) A.grad[i * p + j] += self.grad[i * (p + q) + j];
      if (wants_grad(B))
        for (std::size_t j = 0; j < q; ++j) B.grad[i * q + j] += self.grad[i * (p + q) + p + j];
    }
  });
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> flags, const Tensor& fill) {
  require_rank(x, 2, "mask_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (flags.size() != m || fill.size() != n) {
    throw DimensionError("mask_rows: flags/fill do not match " + to_string(x.shape()));
  }
  Buffer out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    if (flags[i]) std::copy(fill.data().begin(), fill.data().end(), out.begin() + i * n);
  std::vector<std::uint8_t> f(flags.begin(), flags.end());
  return make_result("mask_rows", x.shape(), std::move(out), {&x, &fill}, [f = std::move(f), m, n](Node& self) {
    Node& X = *self.parents[0];
    Node& F = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i) {
      if (f[i]) {
        if (wants_grad(F))
          for (std::size_t j = 0; j < n; ++j) F.grad[j] += self.grad[i * n + j];
      } else if (wants_grad(X)) {
        for (std::size_t j = 0; j < n; ++j) X.grad[i * n + j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {&x}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += self.grad[i];
  });
}

Tensor stop_gradient(const Tensor& x) {
  Buffer out(x.data().begin(), x.data().end());
  return make_result("stop_gradient", x.shape(), std::move(out), {}, nullptr);
}

Tensor straight_through(const Tensor& x, const Tensor& target) {
  require_same(x, target, "straight_through");
  Buffer out(target.data().begin(), target.data().end());
  return make_result("straight_through", x.shape(), std::move(out), {&x, &target}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += self.grad[i];
    // The target sits behind the stop-gradient barrier: nothing flows to it.
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != K) {
    throw DimensionError("conv2d: weights " + to_string(w.shape()) + " incompatible with input " +
                         to_string(x.shape()));
  }
  if (bias.defined() && bias.size() != O) throw DimensionError("conv2d: bias does not match output channels");
  if (stride == 0 || H + 2 * pad < K || W + 2 * pad < K) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " too small for kernel");
  }
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  const std::size_t CKK = C * K * K, P = Ho * Wo;
  const auto in = x.data();
  Buffer cols(N * CKK * P, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    Real* col = cols.data() + n * CKK * P;
    for (std::size_t c = 0; c < C; ++c) {
      const Real* img = in.data() + (n * C + c) * H * W;
      for (std::size_t ky = 0; ky < K; ++ky) {
        for (std::size_t kx = 0; kx < K; ++kx) {
          Real* dst = col + ((c * K + ky) * K + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
              if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
              dst[oy * Wo + ox] = img[iy * W + ix];
            }
          }
        }
      }
    }
  }
  Buffer out(N * O * P);
  MapC wm(w.data().data(), O, CKK);
  for (std::size_t n = 0; n < N; ++n) {
    MapM y(out.data() + n * O * P, O, P);
    y.noalias() = wm * MapC(cols.data() + n * CKK * P, CKK, P);
    if (bias.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), O);
  }
  return make_result(
      "conv2d", {N, O, Ho, Wo}, std::move(out), {&x, &w, &bias},
      [cols = std::move(cols), N, C, H, W, O, K, Ho, Wo, CKK, P, stride, pad](Node& self) {
        Node& X = *self.parents[0];
        Node& Wt = *self.parents[1];
        Node* B = self.parents[2].get();
        MapC wm(Wt.value.data(), O, CKK);
        RowMat dcols;
        for (std::size_t n = 0; n < N; ++n) {
          MapC dy(self.grad.data() + n * O * P, O, P);
          MapC col(cols.data() + n * CKK * P, CKK, P);
          if (wants_grad(Wt)) MapM(Wt.grad.data(), O, CKK).noalias() += dy * col.transpose();
          if (B && wants_grad(*B)) Eigen::Map<Eigen::VectorXd>(B->grad.data(), O) += dy.rowwise().sum();
          if (!wants_grad(X)) continue;
          dcols.noalias() = wm.transpose() * dy;
          for (std::size_t c = 0; c < C; ++c) {
            Real* img = X.grad.data() + (n * C + c) * H * W;
            for (std::size_t ky = 0; ky < K; ++ky) {
              for (std::size_t kx = 0; kx < K; ++kx) {
                const Real* src = dcols.data() + ((c * K + ky) * K + kx) * P;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                  if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                    img[iy * W + ix] += src[oy * Wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_rank(x, 4, "max_pool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw DimensionError("max_pool2d: " + to_string(x.shape()) + " not divisible by window " +
                         std::to_string(window));
  }
  const std::size_t Ho = H / window, Wo = W / window;
  Buffer out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const auto in = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = nc * H * W + oy * window * W + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = nc * H * W + (oy * window + dy) * W + ox * window + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = in[best];
        arg[o] = best;
      }
    }
  }
  return make_result("max_pool2d", {N, C, Ho, Wo}, std::move(out), {&x}, [arg = std::move(arg)](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t i = 0; i < arg.size(); ++i) a.grad[arg[i]] += self.grad[i];
  });
}

Tensor nchw_to_rows(const Tensor& x) {
  require_rank(x, 4, "nchw_to_rows");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t HW = H * W;
  Buffer out(x.size());
  const auto in = x.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) out[(n * HW + p) * C + c] = in[(n * C + c) * HW + p];
  return make_result("nchw_to_rows", {N * HW, C}, std::move(out), {&x}, [N, C, HW](Node& self) {
    Node& a = *self.parents[0];
    if (!wants_grad(a)) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) a.grad[(n * C + c) * HW + p] += self.grad[(n * HW + p) * C + c];
  });
}

namespace {

struct AttentionShape {
  std::size_t seqs, n, c, heads, dh;
};

AttentionShape check_attention(const Tensor& q, const Tensor& k, std::span<const std::uint8_t> key_mask,
                               std::size_t seq_len, std::size_t heads) {
  require_rank(q, 2, "attention");
  if (k.shape() != q.shape()) {
    throw DimensionError("attention: q " + to_string(q.shape()) + " and k " + to_string(k.shape()) + " differ");
  }
  const std::size_t rows = q.dim(0), c = q.dim(1);
  if (heads == 0 || c % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(c) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  if (seq_len == 0 || rows % seq_len != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into sequences of " +
                         std::to_string(seq_len));
  }
  if (key_mask.size() != rows) {
    throw DimensionError("attention: mask length " + std::to_string(key_mask.size()) + " for " +
                         std::to_string(rows) + " positions");
  }
  return {rows / seq_len, seq_len, c, heads, c / heads};
}

// Fills probs [S][H][n][n].
void attention_forward_probs(const AttentionShape& s, const Real* q, const Real* k,
                             std::span<const std::uint8_t> mask, Buffer& probs) {
  probs.assign(s.seqs * s.heads * s.n * s.n, 0.0);
  const Real scale = 1.0 / std::sqrt(Real(s.dh));
  const Eigen::Index n = s.n, dh = s.dh, c = s.c;
  for (std::size_t sq = 0; sq < s.seqs; ++sq) {
    const std::uint8_t* m = mask.data() + sq * s.n;
    for (std::size_t h = 0; h < s.heads; ++h) {
      SMapC Q(q + sq * s.n * s.c + h * s.dh, n, dh, Eigen::OuterStride<>(c));
      SMapC K(k + sq * s.n * s.c + h * s.dh, n, dh, Eigen::OuterStride<>(c));
      MapM P(probs.data() + (sq * s.heads + h) * s.n * s.n, n, n);
      P.noalias() = (Q * K.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (Eigen::Index j = 0; j < n; ++j)
          if (m[j]) mx = std::max(mx, P(i, j));
        Real z = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const Real e = m[j] ? std::exp(P(i, j) - mx) : 0.0;
          P(i, j) = e;
          z += e;
        }
        if (z > 0.0) P.row(i) /= z;
      }
    }
  }
}

}  // namespace

std::vector<Real> attention_probabilities(const Tensor& q, const Tensor& k, std::span<const std::uint8_t> key_mask,
                                          std::size_t seq_len, std::size_t heads) {
  const auto s = check_attention(q, k, key_mask, seq_len, heads);
  Buffer probs;
  attention_forward_probs(s, q.data().data(), k.data().data(), key_mask, probs);
  return {probs.begin(), probs.end()};
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_mask,
                 std::size_t seq_len, std::size_t heads) {
  const auto s = check_attention(q, k, key_mask, seq_len, heads);
  if (v.shape() != q.shape()) {
    throw DimensionError("attention: v " + to_string(v.shape()) + " does not match q " + to_string(q.shape()));
  }
  Buffer probs;
  attention_forward_probs(s, q.data().data(), k.data().data(), key_mask, probs);
  Buffer out(q.size());
  const Eigen::Index n = s.n, dh = s.dh, c = s.c;
  for (std::size_t sq = 0; sq < s.seqs; ++sq) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      const std::size_t off = sq * s.n * s.c + h * s.dh;
      SMapC V(v.data().data() + off, n, dh, Eigen::OuterStride<>(c));
      SMapM O(out.data() + off, n, dh, Eigen::OuterStride<>(c));
      O.noalias() = MapC(probs.data() + (sq * s.heads + h) * s.n * s.n, n, n) * V;
    }
  }
  return make_result("attention", q.shape(), std::move(out), {&q, &k, &v}, [probs = std::move(probs), s](Node& self) {
    Node& Qn = *self.parents[0];
    Node& Kn = *self.parents[1];
    Node& Vn = *self.parents[2];
    const Real scale = 1.0 / std::sqrt(Real(s.dh));
    const Eigen::Index n = s.n, dh = s.dh, c = s.c;
    RowMat dP, dS;
    for (std::size_t sq = 0; sq < s.seqs; ++sq) {
      for (std::size_t h = 0; h < s.heads; ++h) {
        const std::size_t off = sq * s.n * s.c + h * s.dh;
        MapC P(probs.data() + (sq * s.heads + h) * s.n * s.n, n, n);
        SMapC dO(self.grad.data() + off, n, dh, Eigen::OuterStride<>(c));
        SMapC V(Vn.value.data() + off, n, dh, Eigen::OuterStride<>(c));
        SMapC Q(Qn.value.data() + off, n, dh, Eigen::OuterStride<>(c));
        SMapC K(Kn.value.data() + off, n, dh, Eigen::OuterStride<>(c));
        if (wants_grad(Vn)) {
          SMapM dV(Vn.grad.data() + off, n, dh, Eigen::OuterStride<>(c));
          dV.noalias() += P.transpose() * dO;
        }
        if (!wants_grad(Qn) && !wants_grad(Kn)) continue;
        dP.noalias() = dO * V.transpose();
        dS.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const Real dot = P.row(i).dot(dP.row(i));
          dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
        }
        if (wants_grad(Qn)) {
          SMapM dQ(Qn.grad.data() + off, n, dh, Eigen::OuterStride<>(c));
          dQ.noalias() += (dS * K) * scale;
        }
        if (wants_grad(Kn)) {
          SMapM dK(Kn.grad.data() + off, n, dh, Eigen::OuterStride<>(c));
          dK.noalias() += (dS.transpose() * Q) * scale;
        }
      }
    }
  });
}

}  // namespace soho
