#include "protolab/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>

namespace protolab {

namespace {

constexpr std::array<std::string_view, 6> kShapeNames = {"cube",     "sphere", "cone",
                                                         "cylinder", "torus",  "icosphere"};

constexpr std::array<Rgb, 6> kTrainingPalette = {{{220, 50, 50},
                                                  {50, 180, 60},
                                                  {50, 80, 220},
                                                  {230, 200, 40},
                                                  {200, 60, 200},
                                                  {40, 200, 210}}};

constexpr std::array<Rgb, 6> kUnseenPalette = {{{140, 90, 40},
                                                {250, 170, 190},
                                                {170, 150, 240},
                                                {120, 130, 30},
                                                {235, 235, 235},
                                                {25, 25, 25}}};

constexpr int kSupersample = 4;

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

// Shade factor of the silhouette at a local point normalized by the
// circumradius, or nullopt when the point is outside.
std::optional<double> local_shade(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::sphere:
      if (u * u + v * v <= 1.0) return 1.0;
      return std::nullopt;
    case ShapeKind::cube: {
      constexpr double h = std::numbers::sqrt2 / 2.0;
      if (std::abs(u) <= h && std::abs(v) <= h) return 1.0;
      return std::nullopt;
    }
    case ShapeKind::cone: {
      // apex (0,-1), base corners (+-0.75, 0.66)
      const double ax = 0.0, ay = -1.0, bx = 0.75, by = 0.66, cx = -0.75, cy = 0.66;
      auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
      };
      const double e0 = edge(ax, ay, bx, by, u, v);
      const double e1 = edge(bx, by, cx, cy, u, v);
      const double e2 = edge(cx, cy, ax, ay, u, v);
      const bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      if (!inside) return std::nullopt;
      return u < 0.0 ? 0.8 : 1.0;
    }
    case ShapeKind::cylinder: {
      const double hw = 1.0 / std::sqrt(5.0);
      const double hh = 2.0 / std::sqrt(5.0);
      if (std::abs(u) > hw || std::abs(v) > hh) return std::nullopt;
      return v < -hh + 0.35 ? 1.15 : 1.0;
    }
    case ShapeKind::torus: {
      const double r2 = u * u + v * v;
      if (r2 <= 1.0 && r2 >= 0.25) return 1.0;
      return std::nullopt;
    }
    case ShapeKind::icosphere: {
      const double c30 = std::sqrt(3.0) / 2.0;
      for (int k = 0; k < 3; ++k) {
        const double a = deg_to_rad(30.0 + 60.0 * k);
        if (std::abs(u * std::cos(a) + v * std::sin(a)) > c30) return std::nullopt;
      }
      double angle = std::atan2(v, u);
      if (angle < 0) angle += 2.0 * std::numbers::pi;
      const int facet = static_cast<int>(angle / (std::numbers::pi / 3.0)) % 6;
      return facet % 2 == 0 ? 1.0 : 0.8;
    }
  }
  return std::nullopt;
}

std::optional<double> shape_shade(const PlacedShape& shape, double px, double py) {
  const double cx = shape.x * kImageSize;
  const double cy = shape.y * kImageSize;
  const double radius = shape.scale * kImageSize / 2.0;
  const double dx = px - cx;
  const double dy = py - cy;
  if (dx * dx + dy * dy > radius * radius * 1.0000001) return std::nullopt;
  const double a = deg_to_rad(shape.rotation);
  // inverse rotation into the shape frame
  const double u = (std::cos(a) * dx + std::sin(a) * dy) / radius;
  const double v = (-std::sin(a) * dx + std::cos(a) * dy) / radius;
  return local_shade(shape.kind, u, v);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t a,
                           std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

Rgb jitter(const Rgb& base, std::mt19937_64& rng, int amount) {
  std::uniform_int_distribution<int> d(-amount, amount);
  Rgb out{};
  for (int c = 0; c < 3; ++c) out[c] = to_byte(base[c] + d(rng));
  return out;
}

SceneSpec random_scene(const std::set<ShapeKind>& kinds, Palette palette, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool unseen = palette == Palette::unseen;
  const auto& colors = unseen ? kUnseenPalette : kTrainingPalette;

  SceneSpec spec;
  const int base = unseen ? 45 : 128;
  spec.background_tint = jitter(Rgb{static_cast<std::uint8_t>(base), static_cast<std::uint8_t>(base),
                                    static_cast<std::uint8_t>(base)},
                                rng, 14);
  spec.seed = rng();

  std::vector<ShapeKind> order(kinds.begin(), kinds.end());
  std::shuffle(order.begin(), order.end(), rng);

  for (int attempt = 0; attempt < 1000; ++attempt) {
    spec.shapes.clear();
    bool ok = true;
    for (ShapeKind kind : order) {
      PlacedShape s;
      s.kind = kind;
      s.scale = 0.15 + 0.15 * unit(rng);
      s.rotation = 360.0 * unit(rng);
      s.color = jitter(colors[std::uniform_int_distribution<std::size_t>(0, colors.size() - 1)(rng)],
                       rng, 20);
      const double r = s.scale * kImageSize / 2.0 + kMinShapeGapPx;
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        s.x = (r + (kImageSize - 2 * r) * unit(rng)) / kImageSize;
        s.y = (r + (kImageSize - 2 * r) * unit(rng)) / kImageSize;
        placed = true;
        for (const auto& other : spec.shapes) {
          const double ro = other.scale * kImageSize / 2.0;
          const double dist = std::hypot((s.x - other.x) * kImageSize, (s.y - other.y) * kImageSize);
          if (dist < r + ro + kMinShapeGapPx) {
            placed = false;
            break;
          }
        }
      }
      if (!placed) {
        ok = false;
        break;
      }
      spec.shapes.push_back(s);
    }
    if (ok) return spec;
  }
  throw InvalidSceneError("could not place shapes without overlap");
}

}  // namespace

std::string_view to_string(ShapeKind kind) { return kShapeNames[static_cast<std::size_t>(kind)]; }

ShapeKind shape_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i) {
    if (kShapeNames[i] == name) return static_cast<ShapeKind>(i);
  }
  throw std::invalid_argument("unknown shape kind: " + std::string(name));
}

const Mask* MaskSet::find(ShapeKind kind) const {
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (kinds[i] == kind) return &masks[i];
  }
  return nullptr;
}

bool shape_contains(const PlacedShape& shape, double px, double py) {
  return shape_shade(shape, px, py).has_value();
}

void validate_scene(const SceneSpec& spec) {
  if (spec.shapes.size() > 4) throw InvalidSceneError("scene holds more than 4 shapes");
  for (const auto& s : spec.shapes) {
    if (!(s.x >= 0.0 && s.x <= 1.0 && s.y >= 0.0 && s.y <= 1.0)) {
      throw InvalidSceneError("shape position outside [0,1]^2");
    }
    if (!(s.scale >= 0.1 && s.scale <= 0.4)) throw InvalidSceneError("shape scale outside [0.1, 0.4]");
    if (!std::isfinite(s.rotation)) throw InvalidSceneError("non-finite rotation");
  }
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.shapes.size(); ++j) {
      const auto& a = spec.shapes[i];
      const auto& b = spec.shapes[j];
      const double dist = std::hypot((a.x - b.x) * kImageSize, (a.y - b.y) * kImageSize);
      const double needed = (a.scale + b.scale) * kImageSize / 2.0 + kMinShapeGapPx;
      if (dist < needed) {
        throw InvalidSceneError("shapes " + std::to_string(i) + " and " + std::to_string(j) +
                                " overlap or are closer than 2 px");
      }
    }
  }
}

RenderedScene render_scene(const SceneSpec& spec) {
  validate_scene(spec);
  RenderedScene out;
  out.image = Image(kImageSize, kImageSize, spec.background_tint);
  const std::size_t n = spec.shapes.size();
  std::vector<Mask> masks(n, Mask(kImageSize, kImageSize));

  struct Bounds {
    int r0, r1, c0, c1;
  };
  std::vector<Bounds> bounds;
  for (const auto& s : spec.shapes) {
    const double cx = s.x * kImageSize, cy = s.y * kImageSize, r = s.scale * kImageSize / 2.0;
    bounds.push_back({std::max(0, static_cast<int>(std::floor(cy - r)) - 1),
                      std::min(kImageSize - 1, static_cast<int>(std::ceil(cy + r)) + 1),
                      std::max(0, static_cast<int>(std::floor(cx - r)) - 1),
                      std::min(kImageSize - 1, static_cast<int>(std::ceil(cx + r)) + 1)});
  }

  constexpr int samples = kSupersample * kSupersample;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& shape = spec.shapes[k];
    const auto& b = bounds[k];
    for (int row = b.r0; row <= b.r1; ++row) {
      for (int col = b.c0; col <= b.c1; ++col) {
        int covered = 0;
        std::array<double, 3> acc{0.0, 0.0, 0.0};
        for (int sy = 0; sy < kSupersample; ++sy) {
          for (int sx = 0; sx < kSupersample; ++sx) {
            const double px = col + (sx + 0.5) / kSupersample;
            const double py = row + (sy + 0.5) / kSupersample;
            if (auto shade = shape_shade(shape, px, py)) {
              ++covered;
              for (int c = 0; c < 3; ++c) acc[c] += std::min(255.0, shape.color[c] * *shade);
            } else {
              for (int c = 0; c < 3; ++c) acc[c] += spec.background_tint[c];
            }
          }
        }
        if (covered == 0) continue;
        for (int c = 0; c < 3; ++c) out.image.at(row, col, c) = to_byte(acc[c] / samples);
        if (covered * 2 >= samples) masks[k].at(row, col) = 1;
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    out.masks.kinds.push_back(spec.shapes[k].kind);
    out.masks.masks.push_back(std::move(masks[k]));
  }
  return out;
}

std::string_view to_string(DatasetVersion version) {
  switch (version) {
    case DatasetVersion::V1: return "V1";
    case DatasetVersion::V2: return "V2";
    case DatasetVersion::Noise: return "noise";
  }
  return "?";
}

DatasetVersion dataset_version_from_string(std::string_view name) {
  if (name == "V1" || name == "v1") return DatasetVersion::V1;
  if (name == "V2" || name == "v2") return DatasetVersion::V2;
  if (name == "noise") return DatasetVersion::Noise;
  throw std::invalid_argument("unknown dataset version: " + std::string(name));
}

std::string_view to_string(Palette palette) {
  return palette == Palette::training ? "training" : "unseen";
}

Palette palette_from_string(std::string_view name) {
  if (name == "training") return Palette::training;
  if (name == "unseen") return Palette::unseen;
  throw std::invalid_argument("unknown palette: " + std::string(name));
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + std::string(name));
}

ClassComposition class_composition(DatasetVersion version) {
  using S = ShapeKind;
  switch (version) {
    case DatasetVersion::V1:
      return {{0, {S::cube, S::sphere, S::cone}},
              {1, {S::sphere, S::cylinder, S::icosphere}},
              {2, {S::cone, S::torus, S::icosphere}}};
    case DatasetVersion::V2:
      return {{0, {S::cube, S::sphere}}, {1, {S::cone, S::cylinder}}, {2, {S::torus, S::icosphere}}};
    case DatasetVersion::Noise:
      break;
  }
  throw std::invalid_argument("no class composition for this dataset version");
}

Dataset Dataset::subset(Split split) const {
  Dataset out;
  out.version = version;
  out.seed = seed;
  out.n_per_class = n_per_class;
  out.palette = palette;
  out.composition = composition;
  for (const auto& s : samples) {
    if (s.split == split) out.samples.push_back(s);
  }
  return out;
}

const Sample* Dataset::find(std::string_view id) const {
  for (const auto& s : samples) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

Dataset make_dataset(DatasetVersion version, int n_per_class, std::uint64_t seed,
                     const DatasetOptions& options) {
  if (version == DatasetVersion::Noise) {
    throw std::invalid_argument("make_dataset supports V1 and V2 only");
  }
  if (n_per_class < 1) throw std::invalid_argument("n_per_class must be >= 1");
  if (!(options.train_fraction >= 0.0 && options.train_fraction <= 1.0)) {
    throw std::invalid_argument("train_fraction outside [0,1]");
  }

  Dataset ds;
  ds.version = version;
  ds.seed = seed;
  ds.n_per_class = n_per_class;
  ds.palette = options.palette;
  ds.composition = class_composition(version);

  std::vector<int> classes = options.classes;
  if (classes.empty()) {
    for (const auto& [cls, kinds] : ds.composition) classes.push_back(cls);
  }
  for (int cls : classes) {
    if (!ds.composition.contains(cls)) {
      throw std::invalid_argument("class " + std::to_string(cls) + " not in composition");
    }
  }

  const std::uint64_t version_stream = static_cast<std::uint64_t>(version) * 2 +
                                       (options.palette == Palette::unseen ? 1 : 0);
  for (int cls : classes) {
    auto split_rng = sample_rng(seed, version_stream, static_cast<std::uint64_t>(cls), 0xffffffffu);
    std::vector<int> order(static_cast<std::size_t>(n_per_class));
    for (int i = 0; i < n_per_class; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), split_rng);
    const int n_train = static_cast<int>(std::lround(options.train_fraction * n_per_class));
    std::vector<Split> splits(static_cast<std::size_t>(n_per_class), Split::test);
    for (int i = 0; i < n_train; ++i) splits[order[i]] = Split::train;

    for (int i = 0; i < n_per_class; ++i) {
      auto rng = sample_rng(seed, version_stream, static_cast<std::uint64_t>(cls),
                            static_cast<std::uint64_t>(i));
      auto spec = random_scene(ds.composition.at(cls), options.palette, rng);
      auto scene = render_scene(spec);
      Sample s;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s%s_c%d_%05d", std::string(to_string(version)).c_str(),
                    options.palette == Palette::unseen ? "u" : "", cls, i);
      s.id = buf;
      s.image = std::move(scene.image);
      s.masks = std::move(scene.masks);
      s.label = cls;
      s.split = splits[i];
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset make_noise_dataset(int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Dataset ds;
  ds.version = DatasetVersion::Noise;
  ds.seed = seed;
  ds.n_per_class = count;
  for (int i = 0; i < count; ++i) {
    auto rng = sample_rng(seed, 99, 0, static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<int> byte(0, 255);
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "noise_%05d", i);
    s.id = buf;
    s.image = Image(kImageSize, kImageSize, {128, 128, 128});
    for (auto& p : s.image.pixels) p = static_cast<std::uint8_t>(byte(rng));
    s.split = Split::test;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::string Transform::name() const {
  char buf[64];
  if (kind == Kind::rotate) {
    std::snprintf(buf, sizeof(buf), "rotate(%g)", value);
  } else {
    std::snprintf(buf, sizeof(buf), "center_crop(%g)", value);
  }
  return buf;
}

namespace {

// Bilinear sample at continuous index coordinates; neighbours outside the
// image take `fill` when given, otherwise the nearest edge pixel.
double bilinear(const Image& img, int channel, double fx, double fy, const Rgb* fill) {
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0;
  const double ay = fy - y0;
  auto px = [&](int x, int y) -> double {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) {
      if (fill) return (*fill)[channel];
      x = std::clamp(x, 0, img.width - 1);
      y = std::clamp(y, 0, img.height - 1);
    }
    return img.at(y, x, channel);
  };
  const double top = (1 - ax) * px(x0, y0) + ax * px(x0 + 1, y0);
  const double bottom = (1 - ax) * px(x0, y0 + 1) + ax * px(x0 + 1, y0 + 1);
  return (1 - ay) * top + ay * bottom;
}

}  // namespace

Image transform_image(const Image& image, const Transform& t) {
  Image out(image.width, image.height, image.background);
  const double cx = image.width / 2.0;
  const double cy = image.height / 2.0;

  if (t.kind == Transform::Kind::rotate) {
    if (!std::isfinite(t.value)) throw std::invalid_argument("non-finite rotation angle");
    const double a = deg_to_rad(t.value);
    const double ca = std::cos(a);
    const double sa = std::sin(a);
    for (int r = 0; r < image.height; ++r) {
      for (int c = 0; c < image.width; ++c) {
        const double dx = c + 0.5 - cx;
        const double dy = r + 0.5 - cy;
        const double sx = ca * dx - sa * dy + cx - 0.5;
        const double sy = sa * dx + ca * dy + cy - 0.5;
        for (int ch = 0; ch < 3; ++ch) {
          out.at(r, c, ch) = to_byte(bilinear(image, ch, sx, sy, &image.background));
        }
      }
    }
    return out;
  }

  if (!(t.value > 0.0 && t.value <= 1.0)) {
    throw std::invalid_argument("center_crop fraction must lie in (0, 1]");
  }
  const double sw = image.width * t.value;
  const double sh = image.height * t.value;
  const double x0 = cx - sw / 2.0;
  const double y0 = cy - sh / 2.0;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const double sx = x0 + (c + 0.5) * sw / image.width - 0.5;
      const double sy = y0 + (r + 0.5) * sh / image.height - 0.5;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = to_byte(bilinear(image, ch, sx, sy, nullptr));
    }
  }
  return out;
}

Image dihedral(const Image& image, int k) {
  if (image.width != image.height) throw std::invalid_argument("dihedral needs a square image");
  const int n = image.width;
  Image out = image;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      int sr = r, sc = c;
      if (k & 4) sc = n - 1 - sc;
      for (int q = 0; q < (k & 3); ++q) {
        const int t = sr;
        sr = n - 1 - sc;
        sc = t;
      }
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = image.at(sr, sc, ch);
    }
  }
  return out;
}

}  // namespace protolab
