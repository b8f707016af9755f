// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "soho/model.hpp"
#include "soho/tensor.hpp"

namespace soho {

struct TrainConfig {
  // model
  std::size_t c = 64;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t downsample = 16;
  std::size_t max_len = 16;
  std::size_t k = 128;
  Real gamma = 0.99;
  /// Scale of the visual position encoding relative to unit sine/cosine.
  Real position_scale = 0.125;
  // pre-training
  std::size_t m_idx = 1;
  Real mlm_p = 0.15;
  Real lr_encoder = 1e-2;
  Real wd_encoder = 5e-4;
  Real momentum = 0.9;
  /// Global-norm clip on backbone gradients; 0 disables.
  Real clip_encoder = 0.1;
  /// RMS radius the 1x1 projection is fitted to on init_images training
  /// images before the first step; 0 keeps the random initialization.
  Real init_radius = 1.0;
  /// Exponent of the inverse covariance applied by that fit; 0.5 whitens.
  Real whiten_power = 0.25;
  std::size_t init_images = 256;
  Real lr_transformer = 1e-4;
  Real wd_transformer = 1e-2;
  std::size_t batch_images = 8;
  std::size_t epochs = 30;
  std::vector<std::size_t> decay_epochs{20, 26};
  std::size_t freeze_epochs = 2;
  bool use_vd = true;
  std::size_t keep_checkpoints = 2;
  // data
  std::size_t train_images = 1000;
  std::size_t val_images = 100;
  std::size_t test_images = 200;
  // retrieval fine-tuning
  std::size_t ft_batch = 8;
  std::size_t ft_epochs = 10;
  std::vector<std::size_t> ft_halve_epochs{2, 4, 6};
  Real ft_lr = 1e-4;
  Real ft_wd = 1e-2;
  bool ft_use_vd = false;
  std::size_t ft_images = 900;
  // classification fine-tuning
  std::size_t cls_epochs = 10;
  std::size_t cls_batch = 32;
  Real cls_lr = 1e-4;
  std::size_t cls_samples = 2000;

  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string out_dir = "runs";

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  ModelConfig model(std::size_t vocab_size) const;

  static TrainConfig toy();
  /// Full-scale schedule and dimensions; documentation only at desk scale.
  static TrainConfig full_scale();
};

/// "key = value" lines, '#' starts a comment, lists are comma-separated.
/// Unknown keys and malformed values throw ConfigError naming the line.
TrainConfig parse_config(std::string_view text, TrainConfig base = TrainConfig::toy());
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = TrainConfig::toy());
/// Every key, in a form parse_config reads back to an equal config.
std::string to_text(const TrainConfig& config);

bool operator==(const TrainConfig& a, const TrainConfig& b);

/// Transformer input length: ceil(H/s) * ceil(W/s) + T.
std::size_t sequence_length(std::size_t height, std::size_t width, std::size_t downsample, std::size_t text_len);

}  // namespace soho
