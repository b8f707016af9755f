// SPDX-License-Identifier: Apache-2.0
#include "soho/encoder.hpp"

#include <bit>
#include <cmath>
#include <string>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "soho/error.hpp"
#include "soho/ops.hpp"

namespace soho {

namespace {

Tensor kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in, Real gain) {
  const Real bound = gain * std::sqrt(3.0 / Real(fan_in));
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

std::vector<GridCoord> VisualFeatureMap::coords() const {
  std::vector<GridCoord> out;
  out.reserve(grid_h * grid_w);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) out.push_back({r, c});
  return out;
}

VisualEncoder::VisualEncoder(const EncoderConfig& config, Rng& rng)
    : config_(config), counter_(std::make_shared<std::atomic<std::size_t>>(0)) {
  if (config.downsample < 4 || !std::has_single_bit(config.downsample)) {
    throw ConfigError("encoder downsample factor must be a power of two >= 4, got " +
                      std::to_string(config.downsample));
  }
  if (config.c == 0) throw ConfigError("encoder width c must be positive");
  const std::size_t n_blocks = std::bit_width(config.downsample) - 2;  // log2(s) - 1
  std::size_t in = Image::kChannels;
  for (std::size_t i = 0; i < n_blocks; ++i) {
    const std::size_t out = (i + 1 == n_blocks) ? config.c : (std::size_t{16} << i);
    blocks_.push_back({kaiming_uniform(rng, {out, in, 3, 3}, in * 9, std::sqrt(2.0)), Tensor::zeros({out}, true)});
    in = out;
  }
  proj_weight_ = kaiming_uniform(rng, {config.c, config.c, 1, 1}, config.c, 1.0);
  proj_bias_ = Tensor::zeros({config.c}, true);
}

VisualFeatureMap VisualEncoder::encode(const Image& image, bool frozen) const {
  return encode(std::span<const Image>(&image, 1), frozen);
}

Tensor VisualEncoder::trunk(std::span<const Image> images, bool frozen) const {
  if (images.empty()) throw DimensionError("encode: no images");
  const std::size_t h = images.front().height, w = images.front().width;
  if (h == 0 || w == 0) throw DimensionError("encode: zero-sized image");
  const std::size_t s = config_.downsample;
  const std::size_t ph = grid_extent(h, s) * s, pw = grid_extent(w, s) * s;

  std::vector<Real> batch(images.size() * Image::kChannels * ph * pw, 0.0);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = images[n];
    if (img.height != h || img.width != w) throw DimensionError("encode: images in a batch must share one size");
    if (img.pixels.size() != Image::kChannels * h * w) {
      throw DimensionError("encode: expected " + std::to_string(Image::kChannels) + " channels of " +
                           std::to_string(h) + "x" + std::to_string(w) + " pixels");
    }
    for (std::size_t ch = 0; ch < Image::kChannels; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          batch[((n * Image::kChannels + ch) * ph + y) * pw + x] = img.pixels[(ch * h + y) * w + x];
  }

  Tensor x = Tensor::constant({images.size(), Image::kChannels, ph, pw}, std::move(batch));
  for (const auto& block : blocks_) {
    const Tensor wgt = frozen ? stop_gradient(block.weight) : block.weight;
    const Tensor b = frozen ? stop_gradient(block.bias) : block.bias;
    x = relu(conv2d(x, wgt, b, 2, 1));
  }
  return x;
}

VisualFeatureMap VisualEncoder::encode(std::span<const Image> images, bool frozen) const {
  Tensor x = trunk(images, frozen);
  x = conv2d(x, proj_weight_, proj_bias_, 1, 0);
  x = max_pool2d(x, 2);
  counter_->fetch_add(images.size());

  VisualFeatureMap out;
  out.images = images.size();
  out.grid_h = grid_extent(images.front().height, config_.downsample);
  out.grid_w = grid_extent(images.front().width, config_.downsample);
  out.c = config_.c;
  out.features = nchw_to_rows(x);
  return out;
}

void VisualEncoder::fit_projection(std::span<const Image> images, Real radius, Real power) {
  if (!(radius > 0.0)) throw ConfigError("fit_projection: radius must be positive");
  if (!(power >= 0.0 && power <= 0.5)) throw ConfigError("fit_projection: power must lie in [0, 0.5]");
  NoGradGuard no_grad;
  const std::size_t c = config_.c;
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto as_matrix = [c](const Tensor& rows) {
    return Mat(Eigen::Map<const Mat>(rows.data().data(), Eigen::Index(rows.dim(0)), Eigen::Index(c)));
  };

  const Mat hidden = as_matrix(nchw_to_rows(trunk(images, true)));
  Eigen::Map<Mat> weight(proj_weight_.mutable_data().data(), Eigen::Index(c), Eigen::Index(c));
  Eigen::Map<Eigen::VectorXd> bias(proj_bias_.mutable_data().data(), Eigen::Index(c));

  const Eigen::RowVectorXd mean_h = hidden.colwise().mean();
  const Mat centered = (hidden.rowwise() - mean_h) * weight.transpose();
  const Mat cov = centered.transpose() * centered / Real(hidden.rows());
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  const Real floor = std::max(eig.eigenvalues().maxCoeff(), Real(1e-12)) * 1e-6;
  const Mat whiten =
      eig.eigenvectors() * eig.eigenvalues().cwiseMax(floor).array().pow(-power).matrix().asDiagonal() *
      eig.eigenvectors().transpose();
  weight = (whiten * weight).eval();
  bias = -(weight * mean_h.transpose());

  const Mat pooled = as_matrix(nchw_to_rows(max_pool2d(conv2d(trunk(images, true), proj_weight_, proj_bias_, 1, 0), 2)));
  const Eigen::RowVectorXd mean_f = pooled.colwise().mean();
  const Real spread = std::sqrt((pooled.rowwise() - mean_f).squaredNorm() / Real(pooled.rows()));
  const Real scale = spread > 0.0 ? radius / spread : 1.0;
  weight *= scale;
  bias = scale * (bias - mean_f.transpose());
}

void VisualEncoder::collect_parameters(ParameterList& out) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "encoder.conv" + std::to_string(i + 1);
    out.push_back({prefix + ".weight", blocks_[i].weight, ParamGroup::kBackbone});
    out.push_back({prefix + ".bias", blocks_[i].bias, ParamGroup::kBackbone});
  }
  out.push_back({"encoder.proj.weight", proj_weight_, ParamGroup::kAdaptive});
  out.push_back({"encoder.proj.bias", proj_bias_, ParamGroup::kAdaptive});
}

Tensor position_encoding_2d(std::size_t grid_h, std::size_t grid_w, std::size_t c) {
  if (c == 0 || c % 4 != 0) throw ConfigError("position encoding width must be divisible by 4, got " + std::to_string(c));
  const std::size_t half = c / 2;
  std::vector<Real> out(grid_h * grid_w * c);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t col = 0; col < grid_w; ++col) {
      Real* v = out.data() + (r * grid_w + col) * c;
      for (std::size_t i = 0; i < half / 2; ++i) {
        const Real freq = 1.0 / std::pow(10000.0, Real(2 * i) / Real(half));
        v[2 * i] = std::sin(Real(r) * freq);
        v[2 * i + 1] = std::cos(Real(r) * freq);
        v[half + 2 * i] = std::sin(Real(col) * freq);
        v[half + 2 * i + 1] = std::cos(Real(col) * freq);
      }
    }
  }
  return Tensor::constant({grid_h * grid_w, c}, std::move(out));
}

}  // namespace soho
