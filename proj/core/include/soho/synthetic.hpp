// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "soho/encoder.hpp"
#include "soho/random.hpp"

namespace soho {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow, kWhite };

inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle};
inline constexpr std::array<Color, 5> kColors{Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow, Color::kWhite};
inline constexpr std::array<std::string_view, 4> kRelations{"left of", "right of", "above", "below"};

struct Rgb {
  std::uint8_t r, g, b;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kBackground{64, 64, 64};
Rgb palette(Color color);

std::string_view name(ShapeKind shape);
std::string_view name(Color color);

struct SceneObject {
  ShapeKind shape;
  Color color;
  std::size_t row;
  std::size_t col;
  bool operator==(const SceneObject&) const = default;
};

/// Objects on a grid x grid placement lattice over a square canvas.
struct SceneSpec {
  std::size_t grid = 4;
  std::size_t canvas = 64;
  std::vector<SceneObject> objects;

  std::size_t cell() const { return canvas / grid; }
  bool operator==(const SceneSpec&) const = default;
};

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Rgb pixel(std::size_t y, std::size_t x) const;
  Image to_image() const;
  bool operator==(const RgbImage&) const = default;
};

struct CaptionedImage {
  std::uint64_t id = 0;
  RgbImage image;
  std::array<std::string, 2> captions;
  SceneSpec scene;
  bool operator==(const CaptionedImage&) const = default;
};

using Dataset = std::vector<CaptionedImage>;

/// Circle of radius 6, 10x10 square, or upward triangle with a 12 px base,
/// centered in each object's cell on the background color.
RgbImage render(const SceneSpec& scene);

/// 1-3 objects in distinct cells, shape and color uniform.
SceneSpec sample_scene(Rng& rng, std::size_t grid = 4, std::size_t canvas = 64);

/// Every caption the grammar can say truthfully about the scene, sorted.
std::vector<std::string> true_captions(const SceneSpec& scene);

/// Parses a grammar caption and checks it against the scene. Captions outside
/// the grammar are false.
bool caption_true(std::string_view caption, const SceneSpec& scene);

/// All grammar terminals: colors, shapes, relation words and "a".
std::vector<std::string> grammar_words();

/// Item i uses an rng derived from (seed, first_id + i), so any slice can be
/// regenerated independently. Two captions per image, distinct when the scene
/// allows more than one.
Dataset generate(std::uint64_t seed, std::size_t n, std::uint64_t first_id = 0);

struct SplitSizes {
  std::size_t train = 1000;
  std::size_t val = 100;
  std::size_t test = 200;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Consecutive disjoint id ranges: train, then val, then test.
Splits generate_splits(std::uint64_t seed, const SplitSizes& sizes);

/// {dir}/images/{id}.ppm, {dir}/captions.tsv, {dir}/scenes.tsv.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Throws FormatError naming the file and byte offset of the first problem.
Dataset load_dataset(const std::filesystem::path& dir);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

/// Draws `count` captions from other images uniformly, rejecting any caption
/// true of the anchor's scene. Throws SamplingError after too many rejections.
std::vector<std::string> sample_negatives(const Dataset& data, std::size_t anchor, std::size_t count, Rng& rng);

}  // namespace soho
