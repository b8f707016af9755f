// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "soho/parameters.hpp"
#include "soho/random.hpp"
#include "soho/tensor.hpp"

namespace soho {

/// RGB image, channel-major (CHW), values in [0, 1].
struct Image {
  static constexpr std::size_t kChannels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Real> pixels;
};

struct GridCoord {
  std::size_t row;
  std::size_t col;
  bool operator==(const GridCoord&) const = default;
};

/// Grid features of one or more images. Rows of `features` are ordered
/// image-major, then row-major over the grid.
struct VisualFeatureMap {
  std::size_t images = 1;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t c = 0;
  Tensor features;

  std::size_t tokens_per_image() const { return grid_h * grid_w; }
  std::vector<GridCoord> coords() const;
};

/// ceil(pixels / factor).
constexpr std::size_t grid_extent(std::size_t pixels, std::size_t factor) { return (pixels + factor - 1) / factor; }

struct EncoderConfig {
  std::size_t c = 64;
  /// Total downsample factor; a power of two >= 4. Each stride-2 conv block
  /// halves the resolution and the final 2x2 max pool halves it once more.
  std::size_t downsample = 16;
};

/// Small CNN standing in for the ResNet backbone: stride-2 3x3 conv + ReLU
/// blocks, then a 1x1 conv to c channels and a 2x2 max pool.
class VisualEncoder {
 public:
  VisualEncoder(const EncoderConfig& config, Rng& rng);

  /// Images must share one size; they are zero-padded on the bottom/right up
  /// to a multiple of the downsample factor. With `frozen`, conv blocks are
  /// read through a stop-gradient barrier while the 1x1 projection trains.
  VisualFeatureMap encode(std::span<const Image> images, bool frozen) const;
  VisualFeatureMap encode(const Image& image, bool frozen) const;

  /// Data-dependent re-initialization of the 1x1 projection: pre-pool
  /// outputs are multiplied by cov^-power on `images` (0.5 whitens, 0 only
  /// rescales), then the pooled features are shifted to zero mean and scaled
  /// to RMS distance `radius` from it.
  void fit_projection(std::span<const Image> images, Real radius, Real power = 0.5);

  const EncoderConfig& config() const { return config_; }
  std::size_t conv_blocks() const { return blocks_.size(); }

  void collect_parameters(ParameterList& out) const;

  /// Number of images pushed through the backbone since construction.
  std::size_t images_encoded() const { return counter_->load(); }

 private:
  struct ConvBlock {
    Tensor weight;
    Tensor bias;
  };

  Tensor trunk(std::span<const Image> images, bool frozen) const;

  EncoderConfig config_;
  std::vector<ConvBlock> blocks_;
  Tensor proj_weight_;
  Tensor proj_bias_;
  std::shared_ptr<std::atomic<std::size_t>> counter_;
};

/// Fixed 2-D sine/cosine encoding, [grid_h * grid_w x c]. Channels [0, c/2)
/// encode the row, [c/2, c) the column; each half interleaves sin/cos pairs
/// with frequencies 1 / 10000^(2i / (c/2)).
Tensor position_encoding_2d(std::size_t grid_h, std::size_t grid_w, std::size_t c);

}  // namespace soho
