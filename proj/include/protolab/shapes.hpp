#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "protolab/image.hpp"

namespace protolab {

inline constexpr int kImageSize = 128;

// The six shape kinds keep the names of the 3D vocabulary they stand in for;
// each renders as a distinct flat 2D silhouette.
enum class ShapeKind { cube, sphere, cone, cylinder, torus, icosphere };

inline constexpr std::array<ShapeKind, 6> kAllShapeKinds = {
    ShapeKind::cube, ShapeKind::sphere, ShapeKind::cone,
    ShapeKind::cylinder, ShapeKind::torus, ShapeKind::icosphere};

std::string_view to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(std::string_view name);

struct PlacedShape {
  ShapeKind kind = ShapeKind::sphere;
  double x = 0.5;         // normalized center, [0,1]
  double y = 0.5;
  double scale = 0.2;     // circumscribed diameter as a fraction of the image side, [0.1, 0.4]
  double rotation = 0.0;  // degrees
  Rgb color{200, 60, 60};
};

struct SceneSpec {
  std::vector<PlacedShape> shapes;  // 0..4 entries
  Rgb background_tint{128, 128, 128};
  std::uint64_t seed = 0;
};

struct MaskSet {
  std::vector<ShapeKind> kinds;  // kinds[i] labels masks[i]
  std::vector<Mask> masks;

  const Mask* find(ShapeKind kind) const;
  std::size_t size() const { return masks.size(); }
};

struct RenderedScene {
  Image image;
  MaskSet masks;
};

class InvalidSceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Minimum gap between circumscribed circles, in pixels.
inline constexpr double kMinShapeGapPx = 2.0;

// Validates `spec` and renders it at kImageSize x kImageSize with 4x4
// supersampling. A mask pixel is set when at least half of its samples fall
// inside the shape. Non-overlap is checked on circumscribed circles, which is
// stricter than the silhouettes themselves.
RenderedScene render_scene(const SceneSpec& spec);
void validate_scene(const SceneSpec& spec);

// True when the pixel-space point lies inside the silhouette of `shape`.
bool shape_contains(const PlacedShape& shape, double px, double py);

enum class DatasetVersion { V1, V2, Noise };
std::string_view to_string(DatasetVersion version);
DatasetVersion dataset_version_from_string(std::string_view name);

enum class Palette { training, unseen };
std::string_view to_string(Palette palette);
Palette palette_from_string(std::string_view name);

enum class Split { train, test };
std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

using ClassComposition = std::map<int, std::set<ShapeKind>>;

// Fixed class compositions. V1 classes overlap pairwise in exactly one shape,
// V2 classes are mutually exclusive.
ClassComposition class_composition(DatasetVersion version);

struct Sample {
  std::string id;
  Image image;
  int label = -1;  // -1 for unlabeled (noise) samples
  MaskSet masks;
  Split split = Split::train;
};

struct DatasetOptions {
  Palette palette = Palette::training;
  std::vector<int> classes;      // subset of class ids to emit, empty = all
  double train_fraction = 0.8;
};

struct Dataset {
  DatasetVersion version = DatasetVersion::V2;
  std::uint64_t seed = 0;
  int n_per_class = 0;
  Palette palette = Palette::training;
  ClassComposition composition;
  std::vector<Sample> samples;

  int num_classes() const { return static_cast<int>(composition.size()); }
  Dataset subset(Split split) const;
  const Sample* find(std::string_view id) const;
};

// Deterministic in (version, n_per_class, seed, options). The train/test
// assignment is a seeded stratified shuffle, train_fraction per class.
Dataset make_dataset(DatasetVersion version, int n_per_class, std::uint64_t seed,
                     const DatasetOptions& options = {});

// Uniform RGB noise images, unlabeled, all marked test.
Dataset make_noise_dataset(int count, std::uint64_t seed);

struct Transform {
  enum class Kind { rotate, center_crop };
  Kind kind = Kind::rotate;
  double value = 0.0;  // degrees for rotate, fraction for center_crop

  static Transform rotate(double degrees) { return {Kind::rotate, degrees}; }
  static Transform center_crop(double fraction) { return {Kind::center_crop, fraction}; }
  std::string name() const;
};

// Bilinear resampling, quantized back to 8 bits. Rotation is about the image
// center and fills exposed corners with image.background.
Image transform_image(const Image& image, const Transform& t);

// One of the 8 symmetries of the square (k in 0..7): k & 3 quarter turns,
// followed by a horizontal flip when k & 4. Exact, no resampling.
Image dihedral(const Image& image, int k);

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace protolab
