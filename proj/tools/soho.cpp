// SPDX-License-Identifier: Apache-2.0
// soho: data generation, pre-training, fine-tuning, evaluation and tooling.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "soho/bench.hpp"
#include "soho/checkpoint.hpp"
#include "soho/config.hpp"
#include "soho/downstream.hpp"
#include "soho/error.hpp"
#include "soho/gradcheck_suite.hpp"
#include "soho/synthetic.hpp"
#include "soho/trainer.hpp"

namespace fs = std::filesystem;
using namespace soho;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::string ckpt;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Config file (key = value lines)");
  app->add_option("--ckpt", c.ckpt, "Checkpoint file");
  app->add_option("--data", c.data, "Dataset root holding train/, val/ and test/");
  app->add_option("--out", c.out, "Output path");
  app->add_option("--seed", c.seed, "Override the config seed");
}

TrainConfig config_from(const Common& c, TrainConfig base = TrainConfig::toy()) {
  TrainConfig cfg = c.config.empty() ? base : load_config(c.config, base);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

fs::path data_root(const Common& c, const TrainConfig& cfg) { return c.data.empty() ? fs::path(cfg.data_dir) : fs::path(c.data); }

Dataset load_split(const fs::path& root, const char* split) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw DataError(fmt::format("missing dataset split {}", dir.string()));
  return load_dataset(dir);
}

LoadedModel require_model(const Common& c) {
  if (c.ckpt.empty()) throw UsageError("--ckpt is required");
  return load_model(c.ckpt);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << text;
}

int gen_data(const Common& c) {
  const TrainConfig cfg = config_from(c);
  const fs::path out = c.out.empty() ? fs::path(cfg.data_dir) : fs::path(c.out);
  const Splits s = generate_splits(cfg.seed, {cfg.train_images, cfg.val_images, cfg.test_images});
  save_dataset(s.train, out / "train");
  save_dataset(s.val, out / "val");
  save_dataset(s.test, out / "test");
  fmt::print("wrote {} train, {} val, {} test images to {}\n", s.train.size(), s.val.size(), s.test.size(), out.string());
  return kOk;
}

int pretrain(const Common& c) {
  std::optional<Pretrainer> trainer;
  if (!c.ckpt.empty()) {
    const Checkpoint ckpt = load_checkpoint(c.ckpt);
    const TrainConfig cfg = parse_config(ckpt.config);
    const fs::path out = c.out.empty() ? fs::path(c.ckpt).parent_path().parent_path() : fs::path(c.out);
    trainer.emplace(Pretrainer::resume(c.ckpt, load_split(data_root(c, cfg), "train"), out));
  } else {
    const TrainConfig cfg = config_from(c);
    const fs::path out = c.out.empty() ? fs::path(cfg.out_dir) / "pretrain" : fs::path(c.out);
    trainer.emplace(cfg, load_split(data_root(c, cfg), "train"), out);
  }
  fmt::print("{}\n", csv_header());
  for (const auto& m : trainer->history()) fmt::print("{}\n", csv_row(m));
  trainer->run([](const EpochMetrics& m) {
    fmt::print("{}\n", csv_row(m));
    std::fflush(stdout);
  });
  fmt::print(stderr, "checkpoints in {}\n", (trainer->run_dir() / "checkpoints").string());
  return kOk;
}

int finetune(const Common& c, const std::string& task, bool use_vd) {
  LoadedModel loaded = require_model(c);
  const TrainConfig cfg = config_from(c, loaded.config);
  const fs::path root = data_root(c, cfg);
  const fs::path out = c.out.empty() ? fs::path(cfg.out_dir) / ("finetune_" + task) : fs::path(c.out);
  fs::create_directories(out);
  const Dataset train = load_split(root, "train");
  std::string log = "epoch\tloss\taccuracy\n";
  auto on_epoch = [&](const FinetuneEpoch& e) {
    const auto row = fmt::format("{}\t{:.6f}\t{:.6f}\n", e.epoch, e.loss, e.accuracy);
    log += row;
    fmt::print("{}", row);
    std::fflush(stdout);
  };
  Checkpoint ckpt;
  if (task == "retrieval") {
    RetrievalFinetuneOptions opt;
    opt.batch = cfg.ft_batch;
    opt.epochs = cfg.ft_epochs;
    opt.halve_epochs = cfg.ft_halve_epochs;
    opt.lr = cfg.ft_lr;
    opt.wd = cfg.ft_wd;
    opt.use_vd = use_vd;
    opt.seed = cfg.seed;
    const Dataset subset(train.begin(), train.begin() + std::ptrdiff_t(std::min(cfg.ft_images, train.size())));
    finetune_retrieval(*loaded.model, loaded.vocab, subset, opt, on_epoch);
    ckpt = model_checkpoint(cfg, loaded.vocab, *loaded.model);
  } else if (task == "color-qa" || task == "paired") {
    const bool paired = task == "paired";
    const Dataset val = load_split(root, "val");
    Rng rng(derive_seed(cfg.seed, {0x7161}));
    const auto samples = paired ? paired_samples(train, cfg.cls_samples, rng) : color_qa_samples(train, cfg.cls_samples, rng);
    const auto held_out = paired ? paired_samples(val, 500, rng) : color_qa_samples(val, 500, rng);
    ClassifyOptions opt;
    opt.mode = paired ? ClassifyMode::kPaired : ClassifyMode::kSingle;
    opt.classes = paired ? 4 : kColors.size();
    opt.epochs = cfg.cls_epochs;
    opt.batch = cfg.cls_batch;
    opt.lr = cfg.cls_lr;
    opt.wd = cfg.ft_wd;
    opt.use_vd = use_vd;
    opt.seed = cfg.seed;
    const ClassifierHead head = finetune_classify(*loaded.model, loaded.vocab, train, samples, opt, on_epoch);
    const Real acc = classify_accuracy(*loaded.model, head, loaded.vocab, val, held_out, opt.mode, use_vd);
    fmt::print("val_accuracy\t{:.6f}\n", acc);
    log += fmt::format("# val_accuracy\t{:.6f}\n", acc);
    ckpt = model_checkpoint(cfg, loaded.vocab, *loaded.model);
    ParameterList head_params;
    head.collect_parameters(head_params);
    for (const auto& p : head_params) ckpt.tensors.push_back(make_record(p.name, p.tensor));
  } else {
    throw UsageError(fmt::format("unknown task '{}'; expected retrieval, color-qa or paired", task));
  }
  write_text(out / "finetune.tsv", log);
  save_checkpoint(out / "model.ckpt", ckpt);
  fmt::print(stderr, "wrote {}\n", (out / "model.ckpt").string());
  return kOk;
}

int eval(const Common& c, bool use_vd, std::size_t images) {
  LoadedModel loaded = require_model(c);
  const TrainConfig cfg = config_from(c, loaded.config);
  Dataset test = load_split(data_root(c, cfg), "test");
  if (images > 0 && images < test.size()) test.resize(images);
  const auto scores = score_retrieval(*loaded.model, loaded.vocab, test, use_vd);
  const std::string report = recall_report(scores).to_tsv();
  if (c.out.empty()) {
    fmt::print("{}", report);
  } else {
    write_text(c.out, report);
    fmt::print(stderr, "wrote {}\n", c.out);
  }
  return kOk;
}

int inspect(const Common& c, const InspectOptions& opt, const std::string& split) {
  LoadedModel loaded = require_model(c);
  const TrainConfig cfg = config_from(c, loaded.config);
  const Dataset data = load_split(data_root(c, cfg), split.c_str());
  const fs::path out = c.out.empty() ? fs::path(cfg.out_dir) / "inspect_vd" : fs::path(c.out);
  const auto sums = inspect_vd(*loaded.model, data, out, opt);
  fmt::print("index\ttokens\tdumped\tmajority\tpurity\n");
  for (const auto& s : sums) fmt::print("{}\t{}\t{}\t{}\t{:.4f}\n", s.index, s.tokens, s.dumped, s.majority, s.purity);
  return kOk;
}

int bench(const Common& c, std::size_t height, std::size_t width, std::size_t runs, bool use_vd) {
  LoadedModel loaded{TrainConfig::toy(), Vocabulary({}), nullptr};
  if (c.ckpt.empty()) {
    loaded.config = config_from(c);
    loaded.vocab = Vocabulary(grammar_words());
    loaded.model = std::make_unique<SohoModel>(loaded.config.model(loaded.vocab.size()), loaded.config.seed);
  } else {
    loaded = load_model(c.ckpt);
    loaded.config = config_from(c, loaded.config);
  }
  Rng rng(derive_seed(loaded.config.seed, {0x6265}));
  Image image;
  image.height = height;
  image.width = width;
  image.pixels.resize(Image::kChannels * height * width);
  for (auto& p : image.pixels) p = rng.uniform();
  const auto report = bench_forward(*loaded.model, loaded.vocab, image, "a red circle left of a blue square", use_vd, runs);
  fmt::print("{}", report.to_tsv());
  return kOk;
}

int gradcheck(const Common& c, std::size_t configs) {
  GradCheckSuiteOptions opt;
  opt.configs = configs;
  opt.seed = c.seed.value_or(0);
  bool ok = true;
  fmt::print("case\tconfigs\tchecks\tmax_rel_error\tresult\n");
  for (const auto& r : run_gradcheck_suite(opt)) {
    fmt::print("{}\t{}\t{}\t{:.3e}\t{}\n", r.name, r.configs, r.checks, r.max_rel_error, r.passed ? "pass" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale vision-language pre-training with a visual dictionary"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/test synthetic splits");
  add_common(gen, common);

  auto* pre = app.add_subcommand("pretrain", "Pre-train with MLM, MVM and ITM (--ckpt resumes)");
  add_common(pre, common);

  std::string task = "retrieval";
  bool use_vd = false;
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint for retrieval or classification");
  add_common(ft, common);
  ft->add_option("--task", task, "retrieval, color-qa or paired")->check(CLI::IsMember({"retrieval", "color-qa", "paired"}));
  ft->add_flag("--use-vd", use_vd, "Feed quantized dictionary embeddings instead of raw features");

  std::size_t eval_images = 0;
  auto* ev = app.add_subcommand("eval", "Recall@K retrieval report on the test split");
  add_common(ev, common);
  ev->add_flag("--use-vd", use_vd, "Feed quantized dictionary embeddings instead of raw features");
  ev->add_option("--images", eval_images, "Evaluate on the first N test images (0 = all)");

  InspectOptions inspect_opt;
  std::string split = "train";
  auto* iv = app.add_subcommand("inspect-vd", "Dump image patches per dictionary index");
  add_common(iv, common);
  iv->add_option("--index", inspect_opt.indices, "Dictionary indices to dump (default: most used)");
  iv->add_option("--top", inspect_opt.top, "Number of most used indices when --index is absent");
  iv->add_option("--max-patches", inspect_opt.max_patches, "Patches written per index");
  iv->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));

  std::size_t height = 64, width = 64, runs = 20;
  auto* bn = app.add_subcommand("bench", "Per-stage forward latency and sequence length");
  add_common(bn, common);
  bn->add_option("--height", height, "Input height in pixels")->check(CLI::PositiveNumber);
  bn->add_option("--width", width, "Input width in pixels")->check(CLI::PositiveNumber);
  bn->add_option("--runs", runs, "Timed runs")->check(CLI::PositiveNumber);
  bn->add_flag("--use-vd", use_vd, "Time the quantized path");

  std::size_t configs = 5;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full model");
  add_common(gc, common);
  gc->add_option("--configs", configs, "Random instances per op")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_data(common);
    if (*pre) return pretrain(common);
    if (*ft) return finetune(common, task, use_vd);
    if (*ev) return eval(common, use_vd, eval_images);
    if (*iv) return inspect(common, inspect_opt, split);
    if (*bn) return bench(common, height, width, runs, use_vd);
    if (*gc) return gradcheck(common, configs);
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return kNumeric;
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kUsage;
  } catch (const Error& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kData;
  }
  return kUsage;
}
