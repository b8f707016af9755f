// SPDX-License-Identifier: Apache-2.0
#include "soho/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <cmath>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "soho/encoder.hpp"
#include "soho/error.hpp"

namespace soho {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(std::string_view v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) throw std::invalid_argument("not an unsigned integer");
  return out;
}

Real parse_real(std::string_view v) {
  std::size_t used = 0;
  const std::string s(v);
  const Real out = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("not a number");
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("not a boolean");
}

std::vector<std::size_t> parse_list(std::string_view v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(parse_size(trim(v.substr(start, comma - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string fmt_real(Real v) { return fmt::format("{}", v); }

std::string fmt_list(const std::vector<std::size_t>& v) { return fmt::format("{}", fmt::join(v, ",")); }

struct Field {
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
Field size_field(T TrainConfig::*m) {
  return {[m](TrainConfig& c, std::string_view v) { c.*m = T(parse_size(v)); },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}
Field real_field(Real TrainConfig::*m) {
  return {[m](TrainConfig& c, std::string_view v) { c.*m = parse_real(v); },
          [m](const TrainConfig& c) { return fmt_real(c.*m); }};
}
Field bool_field(bool TrainConfig::*m) {
  return {[m](TrainConfig& c, std::string_view v) { c.*m = parse_bool(v); },
          [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}
Field list_field(std::vector<std::size_t> TrainConfig::*m) {
  return {[m](TrainConfig& c, std::string_view v) { c.*m = parse_list(v); },
          [m](const TrainConfig& c) { return fmt_list(c.*m); }};
}
Field string_field(std::string TrainConfig::*m) {
  return {[m](TrainConfig& c, std::string_view v) { c.*m = std::string(v); },
          [m](const TrainConfig& c) { return c.*m; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table{
      {"c", size_field(&TrainConfig::c)},
      {"layers", size_field(&TrainConfig::layers)},
      {"heads", size_field(&TrainConfig::heads)},
      {"mlp_ratio", size_field(&TrainConfig::mlp_ratio)},
      {"downsample", size_field(&TrainConfig::downsample)},
      {"max_len", size_field(&TrainConfig::max_len)},
      {"k", size_field(&TrainConfig::k)},
      {"gamma", real_field(&TrainConfig::gamma)},
      {"position_scale", real_field(&TrainConfig::position_scale)},
      {"m_idx", size_field(&TrainConfig::m_idx)},
      {"mlm_p", real_field(&TrainConfig::mlm_p)},
      {"lr_encoder", real_field(&TrainConfig::lr_encoder)},
      {"wd_encoder", real_field(&TrainConfig::wd_encoder)},
      {"momentum", real_field(&TrainConfig::momentum)},
      {"clip_encoder", real_field(&TrainConfig::clip_encoder)},
      {"init_radius", real_field(&TrainConfig::init_radius)},
      {"init_images", size_field(&TrainConfig::init_images)},
      {"whiten_power", real_field(&TrainConfig::whiten_power)},
      {"lr_transformer", real_field(&TrainConfig::lr_transformer)},
      {"wd_transformer", real_field(&TrainConfig::wd_transformer)},
      {"batch_images", size_field(&TrainConfig::batch_images)},
      {"epochs", size_field(&TrainConfig::epochs)},
      {"decay_epochs", list_field(&TrainConfig::decay_epochs)},
      {"freeze_epochs", size_field(&TrainConfig::freeze_epochs)},
      {"use_vd", bool_field(&TrainConfig::use_vd)},
      {"keep_checkpoints", size_field(&TrainConfig::keep_checkpoints)},
      {"train_images", size_field(&TrainConfig::train_images)},
      {"val_images", size_field(&TrainConfig::val_images)},
      {"test_images", size_field(&TrainConfig::test_images)},
      {"ft_batch", size_field(&TrainConfig::ft_batch)},
      {"ft_epochs", size_field(&TrainConfig::ft_epochs)},
      {"ft_halve_epochs", list_field(&TrainConfig::ft_halve_epochs)},
      {"ft_lr", real_field(&TrainConfig::ft_lr)},
      {"ft_wd", real_field(&TrainConfig::ft_wd)},
      {"ft_use_vd", bool_field(&TrainConfig::ft_use_vd)},
      {"ft_images", size_field(&TrainConfig::ft_images)},
      {"cls_epochs", size_field(&TrainConfig::cls_epochs)},
      {"cls_batch", size_field(&TrainConfig::cls_batch)},
      {"cls_lr", real_field(&TrainConfig::cls_lr)},
      {"cls_samples", size_field(&TrainConfig::cls_samples)},
      {"seed", size_field(&TrainConfig::seed)},
      {"data_dir", string_field(&TrainConfig::data_dir)},
      {"out_dir", string_field(&TrainConfig::out_dir)},
  };
  return table;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_schedule(const std::vector<std::size_t>& marks, std::size_t epochs, const char* key) {
  for (std::size_t i = 0; i < marks.size(); ++i) {
    require(marks[i] < epochs, fmt::format("{} entry {} is not below epochs={}", key, marks[i], epochs));
    require(i == 0 || marks[i] > marks[i - 1], fmt::format("{} must be strictly increasing", key));
  }
}

}  // namespace

void TrainConfig::validate() const {
  require(c > 0 && heads > 0 && c % heads == 0, "c must be a positive multiple of heads");
  require(c % 4 == 0, "c must be divisible by 4 for the 2-D position encoding");
  require(layers > 0 && mlp_ratio > 0, "layers and mlp_ratio must be positive");
  require(downsample >= 4 && (downsample & (downsample - 1)) == 0, "downsample must be a power of two >= 4");
  require(max_len >= 3, "max_len must be at least 3");
  require(k > 0, "k must be positive");
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
  require(m_idx >= 1, "m_idx must be at least 1");
  require(mlm_p >= 0.0 && mlm_p <= 1.0, "mlm_p must lie in [0, 1]");
  require(lr_encoder > 0 && lr_transformer > 0 && ft_lr > 0 && cls_lr > 0, "learning rates must be positive");
  require(wd_encoder >= 0 && wd_transformer >= 0 && ft_wd >= 0, "weight decays must be non-negative");
  require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
  require(clip_encoder >= 0, "clip_encoder must be non-negative");
  require(position_scale >= 0, "position_scale must be non-negative");
  require(init_radius >= 0, "init_radius must be non-negative");
  require(whiten_power >= 0 && whiten_power <= 0.5, "whiten_power must lie in [0, 0.5]");
  require(init_radius == 0 || init_images > 0, "init_images must be positive when init_radius is set");
  require(batch_images > 0 && epochs > 0, "batch_images and epochs must be positive");
  check_schedule(decay_epochs, epochs, "decay_epochs");
  require(freeze_epochs < epochs, "freeze_epochs must be below epochs");
  require(keep_checkpoints > 0, "keep_checkpoints must be positive");
  require(train_images >= 2, "train_images must be at least 2");
  require(ft_batch >= 2, "ft_batch must be at least 2");
  require(ft_epochs > 0 && cls_epochs > 0 && cls_batch > 0, "fine-tuning epochs and batches must be positive");
  check_schedule(ft_halve_epochs, ft_epochs, "ft_halve_epochs");
}

ModelConfig TrainConfig::model(std::size_t vocab_size) const {
  ModelConfig m;
  m.c = c;
  m.downsample = downsample;
  m.layers = layers;
  m.heads = heads;
  m.mlp_ratio = mlp_ratio;
  m.k = k;
  m.gamma = gamma;
  m.max_len = max_len;
  m.vocab_size = vocab_size;
  m.position_scale = position_scale;
  return m;
}

TrainConfig TrainConfig::toy() { return {}; }

TrainConfig TrainConfig::full_scale() {
  TrainConfig p;
  p.c = 768;
  p.layers = 12;
  p.heads = 12;
  p.downsample = 64;
  p.k = 2048;
  p.position_scale = 1.0 / std::sqrt(768.0);
  p.batch_images = 1024;
  p.epochs = 40;
  p.decay_epochs = {25, 35};
  p.freeze_epochs = 10;
  p.ft_batch = 24;
  p.ft_epochs = 20;
  p.ft_halve_epochs = {3, 5, 9, 13};
  return p;
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::map<std::string_view, const Field*> index;
  for (const auto& [k, f] : fields()) index.emplace(k, &f);
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(fmt::format("line {}: expected 'key = value'", line_no));
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, key));
    try {
      it->second->set(base, value);
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("line {}: bad value '{}' for {}: {}", line_no, value, key, e.what()));
    }
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_text(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return to_text(a) == to_text(b); }

std::size_t sequence_length(std::size_t height, std::size_t width, std::size_t downsample, std::size_t text_len) {
  return grid_extent(height, downsample) * grid_extent(width, downsample) + text_len;
}

}  // namespace soho
