// SPDX-License-Identifier: Apache-2.0
#include "soho/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "soho/error.hpp"
#include "soho/ops.hpp"
#include "soho/pretrain.hpp"

namespace soho {
namespace {

std::vector<std::uint64_t> dims_of(const Tensor& t) { return {t.shape().begin(), t.shape().end()}; }

void copy_into(const TensorRecord& rec, Tensor& t) {
  if (rec.dtype != DType::kF64 || rec.dims != dims_of(t)) {
    throw DataError("checkpoint tensor " + rec.name + " does not match the model's shape");
  }
  std::copy(rec.f64.begin(), rec.f64.end(), t.mutable_data().begin());
}

void copy_into(const TensorRecord& rec, std::vector<Real>& v) {
  if (rec.dtype != DType::kF64 || rec.f64.size() != v.size()) {
    throw DataError("optimizer tensor " + rec.name + " has the wrong size");
  }
  v = rec.f64;
}

std::vector<std::string> vocab_words(const Vocabulary& v) {
  return {v.tokens().begin() + Vocabulary::kFirstWord, v.tokens().end()};
}

EpochMetrics parse_row(const std::string& row) {
  EpochMetrics m;
  char comma;
  std::istringstream is(row);
  is >> m.epoch >> comma >> m.total >> comma >> m.mlm >> comma >> m.mvm >> comma >> m.itm >> comma >> m.itm_acc >>
      comma >> m.util >> comma >> m.perplexity;
  if (!is) throw DataError("bad metrics row in checkpoint: " + row);
  return m;
}

struct RunState {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  std::vector<std::string> words;
  std::vector<EpochMetrics> history;
};

std::string write_state(const RunState& s) {
  std::string out = fmt::format("epoch {}\nstep {}\nvocab", s.epoch, s.step);
  for (const auto& w : s.words) out += " " + w;
  out += "\n";
  for (const auto& m : s.history) out += "metric " + csv_row(m) + "\n";
  return out;
}

RunState read_state(const std::string& text) {
  RunState s;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "epoch") {
      ls >> s.epoch;
    } else if (key == "step") {
      ls >> s.step;
    } else if (key == "vocab") {
      for (std::string w; ls >> w;) s.words.push_back(w);
    } else if (key == "metric") {
      std::string row;
      ls >> row;
      s.history.push_back(parse_row(row));
    } else if (!key.empty()) {
      throw DataError("unknown checkpoint state entry: " + key);
    }
  }
  return s;
}

Vocabulary corpus_vocab(const Dataset& data) {
  std::vector<std::string> corpus;
  for (const auto& item : data)
    for (const auto& c : item.captions) corpus.push_back(c);
  return build_vocab(corpus);
}

}  // namespace

std::string csv_header() { return "epoch,total,mlm,mvm,itm,itm_acc,util,perplexity"; }

std::string csv_row(const EpochMetrics& m) {
  return fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}", m.epoch, m.total, m.mlm, m.mvm,
                     m.itm, m.itm_acc, m.util, m.perplexity);
}

Real decay_factor(const std::vector<std::size_t>& marks, std::size_t epoch, Real factor) {
  Real f = 1.0;
  for (auto d : marks)
    if (d <= epoch) f *= factor;
  return f;
}

void write_model(Checkpoint& ckpt, const SohoModel& model) {
  for (const auto& p : model.parameters()) ckpt.tensors.push_back(make_record(p.name, p.tensor));
  ckpt.tensors.push_back(make_record("vd.entries", model.book.entries));
  ckpt.tensors.push_back(make_record("vd.counts", model.book.counts));
}

void read_model(const Checkpoint& ckpt, SohoModel& model) {
  for (auto& p : model.parameters()) copy_into(ckpt.tensor(p.name), p.tensor);
  copy_into(ckpt.tensor("vd.entries"), model.book.entries);
  const auto& counts = ckpt.tensor("vd.counts");
  if (counts.dtype != DType::kU64 || counts.u64.size() != model.book.k) {
    throw DataError("checkpoint codebook counts do not match k");
  }
  model.book.counts = counts.u64;
}

LoadedModel load_model(const std::filesystem::path& path) { return load_model(load_checkpoint(path)); }

Checkpoint model_checkpoint(const TrainConfig& config, const Vocabulary& vocab, const SohoModel& model) {
  Checkpoint ckpt;
  write_model(ckpt, model);
  ckpt.config = to_text(config);
  ckpt.state = write_state({0, 0, vocab_words(vocab), {}});
  return ckpt;
}

LoadedModel load_model(const Checkpoint& ckpt) {
  LoadedModel out{parse_config(ckpt.config), Vocabulary(read_state(ckpt.state).words), nullptr};
  out.model = std::make_unique<SohoModel>(out.config.model(out.vocab.size()), out.config.seed);
  read_model(ckpt, *out.model);
  return out;
}

Pretrainer::Pretrainer(const TrainConfig& config, Dataset train, std::filesystem::path run_dir)
    : Pretrainer(config, std::move(train), std::move(run_dir), Vocabulary({})) {}

Pretrainer::Pretrainer(const TrainConfig& config, Dataset train, std::filesystem::path run_dir, Vocabulary vocab)
    : config_(config), train_(std::move(train)), run_dir_(std::move(run_dir)), vocab_(std::move(vocab)),
      rng_(derive_seed(config.seed, {0x7472})) {
  config_.validate();
  if (train_.size() < 2) throw DataError("pre-training needs at least two images");
  if (vocab_.word_count() == 0) vocab_ = corpus_vocab(train_);
  model_ = std::make_unique<SohoModel>(config_.model(vocab_.size()), config_.seed);
  if (config_.init_radius > 0) {
    std::vector<Image> sample;
    for (std::size_t i = 0; i < std::min(config_.init_images, train_.size()); ++i) sample.push_back(train_[i].image.to_image());
    model_->encoder.fit_projection(sample, config_.init_radius, config_.whiten_power);
  }
  params_ = model_->parameters();
  std::vector<Tensor> backbone, adaptive;
  for (const auto& p : params_) (p.group == ParamGroup::kBackbone ? backbone : adaptive).push_back(p.tensor);
  sgd_ = std::make_unique<Sgd>(std::move(backbone), config_.momentum);
  adamw_ = std::make_unique<AdamW>(std::move(adaptive));
}

Pretrainer Pretrainer::resume(const std::filesystem::path& checkpoint, Dataset train, std::filesystem::path run_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  RunState state = read_state(ckpt.state);
  Pretrainer t(parse_config(ckpt.config), std::move(train), std::move(run_dir), Vocabulary(state.words));
  read_model(ckpt, *t.model_);
  for (std::size_t i = 0, b = 0, a = 0; i < t.params_.size(); ++i) {
    const auto& p = t.params_[i];
    if (p.group == ParamGroup::kBackbone) {
      copy_into(ckpt.optimizer_tensor("sgd.velocity." + p.name), t.sgd_->velocity()[b++]);
    } else {
      copy_into(ckpt.optimizer_tensor("adamw.m." + p.name), t.adamw_->first_moment()[a]);
      copy_into(ckpt.optimizer_tensor("adamw.v." + p.name), t.adamw_->second_moment()[a++]);
    }
  }
  const auto& steps = ckpt.optimizer_tensor("adamw.t");
  if (steps.dtype != DType::kU64 || steps.u64.size() != 1) throw DataError("bad adamw.t record");
  t.adamw_->set_steps(steps.u64[0]);
  t.rng_.restore(ckpt.rng);
  t.epoch_ = state.epoch;
  t.step_ = state.step;
  t.history_ = std::move(state.history);
  return t;
}

Checkpoint Pretrainer::checkpoint() const {
  Checkpoint ckpt;
  write_model(ckpt, *model_);
  for (std::size_t i = 0, b = 0, a = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    const auto dims = dims_of(p.tensor);
    if (p.group == ParamGroup::kBackbone) {
      ckpt.optimizer.push_back(make_record("sgd.velocity." + p.name, dims, sgd_->velocity()[b++]));
    } else {
      ckpt.optimizer.push_back(make_record("adamw.m." + p.name, dims, adamw_->first_moment()[a]));
      ckpt.optimizer.push_back(make_record("adamw.v." + p.name, dims, adamw_->second_moment()[a++]));
    }
  }
  ckpt.optimizer.push_back(make_record("adamw.t", std::vector<std::uint64_t>{adamw_->steps()}));
  ckpt.rng = rng_.state();
  ckpt.config = to_text(config_);
  ckpt.state = write_state({epoch_, step_, vocab_words(vocab_), history_});
  return ckpt;
}

std::filesystem::path Pretrainer::checkpoint_path(std::size_t epoch) const {
  return run_dir_ / "checkpoints" / fmt::format("epoch_{}.ckpt", epoch);
}

EpochMetrics Pretrainer::run_epoch() {
  if (epoch_ >= config_.epochs) throw ContractError("pre-training already finished");
  const bool freeze = frozen();
  const Real scale = decay_factor(config_.decay_epochs, epoch_);
  PretrainOptions options;
  options.mlm_p = config_.mlm_p;
  options.m_idx = config_.m_idx;
  options.use_vd = config_.use_vd;
  options.frozen = freeze;

  const std::vector<std::size_t> order = permutation(train_.size(), rng_);

  AssignmentTally tally(model_->book.k);
  Real sum_total = 0, sum_mlm = 0, sum_mvm = 0, sum_itm = 0;
  std::size_t batches = 0, correct = 0, pairs = 0;
  for (std::size_t first = 0; first < order.size(); first += config_.batch_images) {
    const std::size_t count = std::min(config_.batch_images, order.size() - first);
    std::vector<Image> images;
    std::vector<CaptionSet> captions;
    for (std::size_t b = 0; b < count; ++b) {
      const auto& item = train_[order[first + b]];
      images.push_back(item.image.to_image());
      auto neg = sample_negatives(train_, order[first + b], 2, rng_);
      captions.push_back({item.captions, {neg[0], neg[1]}});
    }
    for (auto& p : params_) p.tensor.zero_grad();
    const PretrainBatch batch = build_pretrain_batch(*model_, vocab_, images, captions, options, rng_);
    const PretrainLosses losses = pretrain_loss(batch, *model_);
    if (!std::isfinite(losses.total.item())) {
      std::filesystem::create_directories(run_dir_);
      const auto dump = run_dir_ / fmt::format("nonfinite_batch_{}.tsv", step_);
      std::ofstream out(dump);
      out << "epoch\t" << epoch_ + 1 << "\nbatch\t" << step_ << "\nmlm\t" << losses.mlm << "\nmvm\t" << losses.mvm
          << "\nitm\t" << losses.itm << "\n";
      for (std::size_t b = 0; b < count; ++b) out << "image\t" << train_[order[first + b]].id << "\n";
      throw NumericError(std::int64_t(step_), "non-finite loss; batch dumped to " + dump.string());
    }
    backward(losses.total);
    if (!freeze) {
      if (config_.clip_encoder > 0) clip_grad_norm(sgd_->params(), config_.clip_encoder);
      sgd_->step(config_.lr_encoder * scale, config_.wd_encoder);
    }
    adamw_->step(config_.lr_transformer * scale, config_.wd_transformer);
    momentum_update(model_->book, batch.features.features, batch.assignment);
    tally.add(batch.assignment);

    sum_total += losses.total.item();
    sum_mlm += losses.mlm;
    sum_mvm += losses.mvm;
    sum_itm += losses.itm;
    correct += losses.itm_correct;
    pairs += losses.itm_pairs;
    ++batches;
    ++step_;
  }
  const auto report = tally.report();
  EpochMetrics m;
  m.epoch = ++epoch_;
  m.total = sum_total / Real(batches);
  m.mlm = sum_mlm / Real(batches);
  m.mvm = sum_mvm / Real(batches);
  m.itm = sum_itm / Real(batches);
  m.itm_acc = Real(correct) / Real(pairs);
  m.util = report.utilization;
  m.perplexity = report.perplexity;
  history_.push_back(m);
  write_outputs();
  return m;
}

const std::vector<EpochMetrics>& Pretrainer::run(const std::function<void(const EpochMetrics&)>& on_epoch) {
  while (epoch_ < config_.epochs) {
    const auto m = run_epoch();
    if (on_epoch) on_epoch(m);
  }
  return history_;
}

void Pretrainer::write_outputs() {
  std::filesystem::create_directories(run_dir_ / "checkpoints");
  {
    std::ofstream csv(run_dir_ / "metrics.csv");
    csv << csv_header() << "\n";
    for (const auto& m : history_) csv << csv_row(m) << "\n";
  }
  vocab_.save(run_dir_ / "vocab.txt");
  {
    std::ofstream cfg(run_dir_ / "config.txt");
    cfg << to_text(config_);
  }
  save_checkpoint(checkpoint_path(epoch_), checkpoint());
  if (epoch_ > config_.keep_checkpoints) {
    std::filesystem::remove(checkpoint_path(epoch_ - config_.keep_checkpoints));
  }
}

}  // namespace soho
