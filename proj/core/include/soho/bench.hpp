// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "soho/model.hpp"
#include "soho/text.hpp"

namespace soho {

struct StageTiming {
  std::string stage;
  Real mean_ms = 0.0;
};

/// Mean wall-clock latency of a no-grad forward pass, split into the visual
/// encoder, the dictionary lookup and the transformer.
struct BenchReport {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t visual_tokens = 0;
  std::size_t text_tokens = 0;
  std::size_t runs = 0;
  std::vector<StageTiming> stages;

  std::size_t sequence_length() const { return visual_tokens + text_tokens; }
  Real total_ms() const;
  std::string to_tsv() const;
};

/// Times `runs` passes after `warmup` untimed ones.
BenchReport bench_forward(const SohoModel& model, const Vocabulary& vocab, const Image& image,
                          std::string_view caption, bool use_vd, std::size_t runs, std::size_t warmup = 2);

}  // namespace soho
