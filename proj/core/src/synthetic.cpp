// SPDX-License-Identifier: Apache-2.0
#include "soho/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "soho/error.hpp"
#include "soho/text.hpp"

namespace soho {
namespace {

constexpr std::array<std::string_view, 3> kShapeNames{"circle", "square", "triangle"};
constexpr std::array<std::string_view, 5> kColorNames{"red", "green", "blue", "yellow", "white"};

std::string describe(const SceneObject& o) { return "a " + std::string(name(o.color)) + " " + std::string(name(o.shape)); }

bool relation_holds(std::string_view rel, const SceneObject& a, const SceneObject& b) {
  if (rel == "left of") return a.col < b.col;
  if (rel == "right of") return a.col > b.col;
  if (rel == "above") return a.row < b.row;
  if (rel == "below") return a.row > b.row;
  return false;
}

bool inside(ShapeKind shape, double dx, double dy) {
  switch (shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= 36.0;
    case ShapeKind::kSquare:
      return std::abs(dx) <= 5.0 && std::abs(dy) <= 5.0;
    case ShapeKind::kTriangle:
      return dy >= -6.0 && dy <= 6.0 && std::abs(dx) <= (dy + 6.0) * 0.5;
  }
  return false;
}

template <std::size_t N, class E>
bool parse_enum(std::string_view word, const std::array<std::string_view, N>& names, E& out) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == word) {
      out = static_cast<E>(i);
      return true;
    }
  }
  return false;
}

/// Offset of the first byte that breaks UTF-8, or npos.
std::size_t invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (b < 0x80) {
      extra = 0;
    } else if ((b & 0xE0) == 0xC0 && b >= 0xC2) {
      extra = 1;
    } else if ((b & 0xF0) == 0xE0) {
      extra = 2;
    } else if ((b & 0xF8) == 0xF0 && b <= 0xF4) {
      extra = 3;
    } else {
      return i;
    }
    for (std::size_t k = 1; k <= extra; ++k) {
      if (i + k >= s.size() || (static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return i;
    }
    i += extra + 1;
  }
  return std::string_view::npos;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Line {
  std::string_view text;
  std::size_t offset;
};

/// Splits into lines, validating UTF-8 first.
std::vector<Line> lines_of(const std::string& content, const std::filesystem::path& path) {
  if (auto bad = invalid_utf8(content); bad != std::string_view::npos) {
    throw FormatError(path.string(), bad, "invalid UTF-8");
  }
  std::vector<Line> out;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    out.push_back({std::string_view(content).substr(start, end - start), start});
    start = end + 1;
  }
  return out;
}

std::uint64_t parse_id(std::string_view s, const std::filesystem::path& path, std::size_t offset) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError(path.string(), offset, "bad image id \"" + std::string(s) + "\"");
  }
  return v;
}

std::string serialize_scene(const SceneSpec& scene) {
  std::ostringstream os;
  os << scene.grid << ' ' << scene.canvas;
  for (const auto& o : scene.objects) {
    os << ' ' << name(o.shape) << ':' << name(o.color) << ':' << o.row << ':' << o.col;
  }
  return os.str();
}

SceneSpec parse_scene(std::string_view text, const std::filesystem::path& path, std::size_t offset) {
  auto fail = [&](const std::string& what) -> SceneSpec { throw FormatError(path.string(), offset, what); };
  std::istringstream is{std::string(text)};
  SceneSpec scene;
  if (!(is >> scene.grid >> scene.canvas) || scene.grid == 0 || scene.canvas % scene.grid != 0) {
    return fail("bad scene header");
  }
  std::string item;
  while (is >> item) {
    std::vector<std::string> f;
    std::istringstream fields(item);
    for (std::string part; std::getline(fields, part, ':');) f.push_back(part);
    SceneObject o{};
    if (f.size() != 4 || item.back() == ':' || !parse_enum(f[0], kShapeNames, o.shape) ||
        !parse_enum(f[1], kColorNames, o.color)) {
      return fail("bad scene object \"" + item + "\"");
    }
    try {
      o.row = std::stoul(f[2]);
      o.col = std::stoul(f[3]);
    } catch (const std::exception&) {
      return fail("bad scene object \"" + item + "\"");
    }
    if (o.row >= scene.grid || o.col >= scene.grid) return fail("scene object outside the grid");
    scene.objects.push_back(o);
  }
  return scene;
}

}  // namespace

Rgb palette(Color color) {
  switch (color) {
    case Color::kRed:
      return {255, 0, 0};
    case Color::kGreen:
      return {0, 255, 0};
    case Color::kBlue:
      return {0, 0, 255};
    case Color::kYellow:
      return {255, 255, 0};
    case Color::kWhite:
      return {255, 255, 255};
  }
  return kBackground;
}

std::string_view name(ShapeKind shape) { return kShapeNames[std::size_t(shape)]; }
std::string_view name(Color color) { return kColorNames[std::size_t(color)]; }

Rgb RgbImage::pixel(std::size_t y, std::size_t x) const {
  const std::size_t o = (y * width + x) * 3;
  return {data[o], data[o + 1], data[o + 2]};
}

Image RgbImage::to_image() const {
  Image img;
  img.height = height;
  img.width = width;
  img.pixels.resize(3 * height * width);
  const std::size_t plane = height * width;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[ch * plane + i] = data[i * 3 + ch] / 255.0;
  return img;
}

RgbImage render(const SceneSpec& scene) {
  RgbImage img;
  img.height = img.width = scene.canvas;
  img.data.resize(scene.canvas * scene.canvas * 3);
  for (std::size_t i = 0; i < scene.canvas * scene.canvas; ++i) {
    img.data[i * 3] = kBackground.r;
    img.data[i * 3 + 1] = kBackground.g;
    img.data[i * 3 + 2] = kBackground.b;
  }
  const std::size_t cell = scene.cell();
  for (const auto& o : scene.objects) {
    const Rgb rgb = palette(o.color);
    const double cx = double(o.col * cell) + cell / 2.0, cy = double(o.row * cell) + cell / 2.0;
    for (std::size_t y = o.row * cell; y < (o.row + 1) * cell; ++y) {
      for (std::size_t x = o.col * cell; x < (o.col + 1) * cell; ++x) {
        if (!inside(o.shape, x + 0.5 - cx, y + 0.5 - cy)) continue;
        auto* p = &img.data[(y * scene.canvas + x) * 3];
        p[0] = rgb.r;
        p[1] = rgb.g;
        p[2] = rgb.b;
      }
    }
  }
  return img;
}

SceneSpec sample_scene(Rng& rng, std::size_t grid, std::size_t canvas) {
  SceneSpec scene;
  scene.grid = grid;
  scene.canvas = canvas;
  const std::size_t cells = grid * grid;
  const std::size_t n = std::min<std::size_t>(1 + rng.below(3), cells);
  std::vector<std::size_t> order(cells);
  for (std::size_t i = 0; i < cells; ++i) order[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(cells - i)]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto shape = kShapes[rng.below(kShapes.size())];
    const auto color = kColors[rng.below(kColors.size())];
    scene.objects.push_back({shape, color, order[i] / grid, order[i] % grid});
  }
  return scene;
}

std::vector<std::string> true_captions(const SceneSpec& scene) {
  std::set<std::string> out;
  for (const auto& a : scene.objects) {
    out.insert(describe(a));
    for (const auto& b : scene.objects) {
      if (&a == &b) continue;
      for (auto rel : kRelations) {
        if (relation_holds(rel, a, b)) out.insert(describe(a) + " " + std::string(rel) + " " + describe(b));
      }
    }
  }
  return {out.begin(), out.end()};
}

bool caption_true(std::string_view caption, const SceneSpec& scene) {
  const auto words = split_words(caption);
  struct Phrase {
    Color color;
    ShapeKind shape;
  };
  auto phrase_at = [&](std::size_t i, Phrase& p) {
    return i + 2 < words.size() && words[i] == "a" && parse_enum(words[i + 1], kColorNames, p.color) &&
           parse_enum(words[i + 2], kShapeNames, p.shape);
  };
  auto matches = [](const SceneObject& o, const Phrase& p) { return o.color == p.color && o.shape == p.shape; };
  Phrase first{}, second{};
  if (words.size() == 3) {
    if (!phrase_at(0, first)) return false;
    return std::any_of(scene.objects.begin(), scene.objects.end(), [&](const auto& o) { return matches(o, first); });
  }
  std::string rel;
  std::size_t next = 0;
  if (words.size() == 7 && (words[3] == "above" || words[3] == "below")) {
    rel = words[3];
    next = 4;
  } else if (words.size() == 8 && (words[3] == "left" || words[3] == "right") && words[4] == "of") {
    rel = words[3] + " of";
    next = 5;
  } else {
    return false;
  }
  if (!phrase_at(0, first) || !phrase_at(next, second)) return false;
  // Independent of true_captions: checks the geometry directly.
  for (const auto& a : scene.objects) {
    if (!matches(a, first)) continue;
    for (const auto& b : scene.objects) {
      if (&a == &b || !matches(b, second)) continue;
      const bool ok = rel == "left of"    ? a.col < b.col
                      : rel == "right of" ? b.col < a.col
                      : rel == "above"    ? a.row < b.row
                                          : b.row < a.row;
      if (ok) return true;
    }
  }
  return false;
}

std::vector<std::string> grammar_words() {
  std::set<std::string> words{"a"};
  for (auto c : kColorNames) words.emplace(c);
  for (auto s : kShapeNames) words.emplace(s);
  for (auto r : kRelations)
    for (auto& w : split_words(r)) words.insert(w);
  return {words.begin(), words.end()};
}

Dataset generate(std::uint64_t seed, std::size_t n, std::uint64_t first_id) {
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CaptionedImage item;
    item.id = first_id + i;
    Rng rng(derive_seed(seed, {item.id}));
    item.scene = sample_scene(rng);
    item.image = render(item.scene);
    auto pool = true_captions(item.scene);
    const std::size_t a = rng.below(pool.size());
    item.captions[0] = pool[a];
    if (pool.size() > 1) {
      std::size_t b = rng.below(pool.size() - 1);
      if (b >= a) ++b;
      item.captions[1] = pool[b];
    } else {
      item.captions[1] = pool[a];
    }
    for (const auto& cap : item.captions) {
      if (!caption_true(cap, item.scene)) throw DataError("generator emitted a false caption: " + cap);
    }
    out.push_back(std::move(item));
  }
  return out;
}

Splits generate_splits(std::uint64_t seed, const SplitSizes& sizes) {
  Splits s;
  s.train = generate(seed, sizes.train, 0);
  s.val = generate(seed, sizes.val, sizes.train);
  s.test = generate(seed, sizes.test, sizes.train + sizes.val);
  return s;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data.data()), std::streamsize(image.data.size()));
  if (!out) throw DataError("short write to " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string file = path.string();
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t at = pos;
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
    if (ec != std::errc() || ptr == bytes.data() + pos) throw FormatError(file, at, std::string("expected ") + what);
    pos = std::size_t(ptr - bytes.data());
    return v;
  };
  if (bytes.compare(0, 2, "P6") != 0) throw FormatError(file, 0, "missing P6 magic");
  pos = 2;
  RgbImage img;
  img.width = number("width");
  img.height = number("height");
  skip_space();
  const std::size_t maxval_at = pos;
  if (number("maxval") != 255) throw FormatError(file, maxval_at, "maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(file, pos, "expected whitespace after maxval");
  }
  ++pos;
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - pos != need) {
    throw FormatError(file, bytes.size() < pos + need ? bytes.size() : pos + need,
                      "payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                          std::to_string(need));
  }
  img.data.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.end());
  return img;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream captions(dir / "captions.tsv", std::ios::binary), scenes(dir / "scenes.tsv", std::ios::binary);
  if (!captions || !scenes) throw DataError("cannot write dataset files in " + dir.string());
  for (const auto& item : data) {
    write_ppm(dir / "images" / (std::to_string(item.id) + ".ppm"), item.image);
    for (const auto& c : item.captions) captions << item.id << '\t' << c << '\n';
    scenes << item.id << '\t' << serialize_scene(item.scene) << '\n';
  }
  if (!captions || !scenes) throw DataError("short write in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto scenes_path = dir / "scenes.tsv", captions_path = dir / "captions.tsv";
  const std::string scenes_text = read_file(scenes_path), captions_text = read_file(captions_path);
  Dataset data;
  std::map<std::uint64_t, std::size_t> slot;
  for (const auto& line : lines_of(scenes_text, scenes_path)) {
    const auto tab = line.text.find('\t');
    if (tab == std::string_view::npos) throw FormatError(scenes_path.string(), line.offset, "missing tab");
    CaptionedImage item;
    item.id = parse_id(line.text.substr(0, tab), scenes_path, line.offset);
    item.scene = parse_scene(line.text.substr(tab + 1), scenes_path, line.offset + tab + 1);
    if (!slot.emplace(item.id, data.size()).second) {
      throw FormatError(scenes_path.string(), line.offset, "duplicate id " + std::to_string(item.id));
    }
    data.push_back(std::move(item));
  }
  std::vector<std::size_t> filled(data.size(), 0);
  for (const auto& line : lines_of(captions_text, captions_path)) {
    const auto tab = line.text.find('\t');
    if (tab == std::string_view::npos) throw FormatError(captions_path.string(), line.offset, "missing tab");
    const auto id = parse_id(line.text.substr(0, tab), captions_path, line.offset);
    auto it = slot.find(id);
    if (it == slot.end()) {
      throw FormatError(captions_path.string(), line.offset, "id " + std::to_string(id) + " has no scene");
    }
    auto& n = filled[it->second];
    if (n == 2) throw FormatError(captions_path.string(), line.offset, "more than two captions for id " + std::to_string(id));
    data[it->second].captions[n++] = std::string(line.text.substr(tab + 1));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (filled[i] != 2) {
      throw FormatError(captions_path.string(), captions_text.size(),
                        "id " + std::to_string(data[i].id) + " has " + std::to_string(filled[i]) + " captions");
    }
    const auto img_path = dir / "images" / (std::to_string(data[i].id) + ".ppm");
    data[i].image = read_ppm(img_path);
    if (data[i].image.width != data[i].scene.canvas || data[i].image.height != data[i].scene.canvas) {
      throw FormatError(img_path.string(), 0, "image size does not match its scene");
    }
  }
  return data;
}

std::vector<std::string> sample_negatives(const Dataset& data, std::size_t anchor, std::size_t count, Rng& rng) {
  if (data.size() < 2) throw SamplingError("negative sampling needs at least two images");
  std::vector<std::string> out;
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > 1000 * (count + 1)) {
      throw SamplingError("no false caption found for image " + std::to_string(data[anchor].id));
    }
    std::size_t other = rng.below(data.size() - 1);
    if (other >= anchor) ++other;
    const auto& cap = data[other].captions[rng.below(2)];
    if (caption_true(cap, data[anchor].scene)) continue;
    out.push_back(cap);
  }
  return out;
}

}  // namespace soho
