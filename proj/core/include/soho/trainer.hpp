// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "soho/checkpoint.hpp"
#include "soho/config.hpp"
#include "soho/model.hpp"
#include "soho/optim.hpp"
#include "soho/synthetic.hpp"
#include "soho/text.hpp"

namespace soho {

struct EpochMetrics {
  std::size_t epoch = 0;
  Real total = 0.0;
  Real mlm = 0.0;
  Real mvm = 0.0;
  Real itm = 0.0;
  Real itm_acc = 0.0;
  Real util = 0.0;
  Real perplexity = 0.0;
  bool operator==(const EpochMetrics&) const = default;
};

std::string csv_header();
/// Values printed with 17 significant digits so rows compare bitwise.
std::string csv_row(const EpochMetrics& m);

/// Learning-rate multiplier for 0-based epoch e: 0.1 per decay mark <= e.
Real decay_factor(const std::vector<std::size_t>& marks, std::size_t epoch, Real factor = 0.1);

/// Model parameters and codebook as named tensors ("vd.entries", "vd.counts").
void write_model(Checkpoint& ckpt, const SohoModel& model);
/// Copies values into an already constructed model; shapes must match.
void read_model(const Checkpoint& ckpt, SohoModel& model);

struct LoadedModel {
  TrainConfig config;
  Vocabulary vocab;
  std::unique_ptr<SohoModel> model;
};

/// Weights, config and vocabulary only (no optimizer state); load_model
/// reads it back.
Checkpoint model_checkpoint(const TrainConfig& config, const Vocabulary& vocab, const SohoModel& model);

/// Rebuilds config, vocabulary and model from a checkpoint.
LoadedModel load_model(const std::filesystem::path& path);
LoadedModel load_model(const Checkpoint& ckpt);

/// The pre-training loop. Every epoch appends a CSV row to
/// {run_dir}/metrics.csv and writes {run_dir}/checkpoints/epoch_{e}.ckpt.
class Pretrainer {
 public:
  Pretrainer(const TrainConfig& config, Dataset train, std::filesystem::path run_dir);
  /// Continues a run from a checkpoint written by a previous Pretrainer.
  static Pretrainer resume(const std::filesystem::path& checkpoint, Dataset train, std::filesystem::path run_dir);

  /// Runs the next epoch. Throws NumericError (and writes a dump of the
  /// batch) when the loss turns non-finite.
  EpochMetrics run_epoch();
  /// Runs until config().epochs; returns the whole history.
  const std::vector<EpochMetrics>& run(const std::function<void(const EpochMetrics&)>& on_epoch = {});

  std::size_t epochs_done() const { return epoch_; }
  bool frozen() const { return epoch_ < config_.freeze_epochs; }
  const TrainConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  SohoModel& model() { return *model_; }
  const SohoModel& model() const { return *model_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  std::filesystem::path checkpoint_path(std::size_t epoch) const;

  Checkpoint checkpoint() const;

 private:
  Pretrainer(const TrainConfig& config, Dataset train, std::filesystem::path run_dir, Vocabulary vocab);
  void write_outputs();

  TrainConfig config_;
  Dataset train_;
  std::filesystem::path run_dir_;
  Vocabulary vocab_;
  std::unique_ptr<SohoModel> model_;
  ParameterList params_;
  std::unique_ptr<Sgd> sgd_;
  std::unique_ptr<AdamW> adamw_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::uint64_t step_ = 0;
  std::vector<EpochMetrics> history_;
};

}  // namespace soho
