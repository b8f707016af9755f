// SPDX-License-Identifier: Apache-2.0
#include "soho/bench.hpp"

#include <chrono>

#include <fmt/format.h>

#include "soho/dictionary.hpp"
#include "soho/error.hpp"

namespace soho {

Real BenchReport::total_ms() const {
  Real t = 0.0;
  for (const auto& s : stages) t += s.mean_ms;
  return t;
}

std::string BenchReport::to_tsv() const {
  std::string out = "stage\tmean_ms\n";
  for (const auto& s : stages) out += fmt::format("{}\t{:.4f}\n", s.stage, s.mean_ms);
  out += fmt::format("total\t{:.4f}\n", total_ms());
  out += fmt::format("# image {}x{}, visual tokens {}, text tokens {}, sequence length {}, runs {}\n", height, width,
                     visual_tokens, text_tokens, sequence_length(), runs);
  return out;
}

BenchReport bench_forward(const SohoModel& model, const Vocabulary& vocab, const Image& image,
                          std::string_view caption, bool use_vd, std::size_t runs, std::size_t warmup) {
  if (runs == 0) throw UsageError("bench needs at least one timed run");
  using Clock = std::chrono::steady_clock;
  NoGradGuard no_grad;
  const TokenSequence text = tokenize(caption, vocab, model.config().max_len);
  const std::vector<TokenSequence> texts{text};
  double t_encode = 0.0, t_vd = 0.0, t_transformer = 0.0;
  BenchReport report;
  report.height = image.height;
  report.width = image.width;
  report.text_tokens = text.ids.size();
  report.runs = runs;
  for (std::size_t r = 0; r < warmup + runs; ++r) {
    const auto t0 = Clock::now();
    const auto features = model.encoder.encode(image, true);
    const auto t1 = Clock::now();
    const auto assignment = assign(features.features, model.book);
    const Tensor visual = model.visual_tokens(features, assignment, use_vd);
    const auto t2 = Clock::now();
    const Tensor hidden = model.forward(model.joint_input(visual, features.grid_h, features.grid_w, texts));
    const auto t3 = Clock::now();
    report.visual_tokens = features.tokens_per_image();
    if (r < warmup) continue;
    t_encode += std::chrono::duration<double, std::milli>(t1 - t0).count();
    t_vd += std::chrono::duration<double, std::milli>(t2 - t1).count();
    t_transformer += std::chrono::duration<double, std::milli>(t3 - t2).count();
    (void)hidden;
  }
  const Real n = Real(runs);
  report.stages = {{"encoder", t_encode / n}, {"dictionary", t_vd / n}, {"transformer", t_transformer / n}};
  return report;
}

}  // namespace soho
