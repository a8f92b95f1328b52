#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "protolab/explain.hpp"

using namespace protolab;
using testing::tiny_protopnet;

namespace {

SimilarityMap make_map(int h, int w, std::vector<double> scores) {
  SimilarityMap m;
  m.height = h;
  m.width = w;
  m.scores = std::move(scores);
  m.distances.assign(m.scores.size(), 0.0);
  m.argmax = static_cast<int>(std::max_element(m.scores.begin(), m.scores.end()) - m.scores.begin());
  return m;
}

// Hat-function bilinear weights on a clamped pixel-centre coordinate.
double naive_bilinear(const SimilarityMap& m, int size, int y, int x) {
  auto src = [size](int dst, int n) {
    return std::clamp((dst + 0.5) * n / size - 0.5, 0.0, double(n - 1));
  };
  const double sy = src(y, m.height), sx = src(x, m.width);
  double acc = 0.0;
  for (int r = 0; r < m.height; ++r) {
    const double wy = std::max(0.0, 1.0 - std::abs(sy - r));
    if (wy == 0.0) continue;
    for (int c = 0; c < m.width; ++c) {
      const double wx = std::max(0.0, 1.0 - std::abs(sx - c));
      acc += wy * wx * m.scores[r * m.width + c];
    }
  }
  return acc;
}

Heatmap blank(int size, double value = 0.0) {
  Heatmap h;
  h.width = h.height = size;
  h.values.assign(static_cast<std::size_t>(size) * size, value);
  return h;
}

const Sample& v2_sample(int i) {
  static const Dataset ds = make_dataset(DatasetVersion::V2, 3, 5);
  return ds.samples[static_cast<std::size_t>(i)];
}

}  // namespace

TEST_CASE("upsample matches a naive bilinear oracle") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 9.0);
  for (int h : {1, 3, 8}) {
    for (int w : {2, 8}) {
      std::vector<double> s(static_cast<std::size_t>(h) * w);
      for (auto& v : s) v = u(rng);
      const auto map = make_map(h, w, s);
      const auto hm = upsample_map(map);
      REQUIRE(hm.width == 128);
      REQUIRE(hm.height == 128);
      CHECK(hm.backend == "upsample");
      double worst = 0.0;
      for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) worst = std::max(worst, std::abs(hm.at(y, x) - naive_bilinear(map, 128, y, x)));
      }
      CHECK(worst <= 1e-5);
      const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
      for (double v : hm.values) {
        CHECK(v >= *lo - 1e-12);
        CHECK(v <= *hi + 1e-12);
      }
    }
  }
}

TEST_CASE("upsample of a constant map is constant") {
  const auto hm = upsample_map(make_map(8, 8, std::vector<double>(64, 3.25)));
  for (double v : hm.values) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("upsample keeps a single peak within one cell") {
  for (int r : {0, 3, 7}) {
    for (int c : {1, 5, 7}) {
      std::vector<double> s(64, 0.0);
      s[r * 8 + c] = 1.0;
      const auto hm = upsample_map(make_map(8, 8, s));
      const auto it = std::max_element(hm.values.begin(), hm.values.end());
      const int idx = static_cast<int>(it - hm.values.begin());
      const double py = (r + 0.5) * 16.0, px = (c + 0.5) * 16.0;
      CHECK(std::abs(idx / 128 + 0.5 - py) <= 16.0);
      CHECK(std::abs(idx % 128 + 0.5 - px) <= 16.0);
    }
  }
}

TEST_CASE("extract_patch") {
  auto h = blank(128);
  h.values[40 * 128 + 77] = 2.0;
  const auto box = extract_patch(h);
  CHECK(box == PatchBox{40, 77, 40, 77, false});
  CHECK(box.height() == 1);

  const auto full = extract_patch(blank(128, 0.7));
  CHECK(full.degenerate);
  CHECK(full == PatchBox{0, 0, 127, 127, true});

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    auto r = blank(128);
    for (auto& v : r.values) v = u(rng);
    const auto b95 = extract_patch(r, 95.0);
    const auto b99 = extract_patch(r, 99.0);
    CHECK(b95.contains(b99));
    CHECK(b99.top >= 0);
    CHECK(b99.bottom < 128);
    CHECK(b99.top <= b99.bottom);
    CHECK(b99.left <= b99.right);
  }
  auto bad = blank(4);
  bad.values[0] = std::nan("");
  CHECK_THROWS_AS(extract_patch(bad), std::invalid_argument);
}

TEST_CASE("top region size tracks the percentile") {
  auto h = blank(10);
  for (int i = 0; i < 100; ++i) h.values[i] = i;
  // Nearest rank at floor(0.95 * 99) = 94: values 95..99 lie strictly above it.
  CHECK(top_region(h, 95.0).count() == 5);
  CHECK(top_region(h, 50.0).count() == 50);
  CHECK(top_region(h, 100.0).count() == 1);
}

TEST_CASE("mass in mask") {
  auto h = blank(4);
  Mask m(4, 4);
  CHECK(mass_in_mask(h, m) == 0.0);
  h.values[0] = 3.0;
  h.values[5] = 1.0;
  m.at(0, 0) = 1;
  CHECK(mass_in_mask(h, m) == doctest::Approx(0.75));
  CHECK_THROWS(mass_in_mask(h, Mask(3, 3)));
}

TEST_CASE("PRP: positivity and conservation under the z+ chain") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ProtoPNet model(tiny_protopnet(), seed);
    for (int proto : {0, 3, 5}) {
      const auto& s = v2_sample(static_cast<int>(seed) + proto);
      const auto r = prp_relevance(model, proto, s.image);
      CHECK(r.heatmap.backend == "prp");
      CHECK(r.heatmap.width == 128);
      CHECK(r.audit.min_value >= 0.0);
      for (double v : r.heatmap.values) CHECK(v >= 0.0);
      CHECK(r.audit.max_relative_change() <= 0.01);
      double sum = 0.0;
      for (double v : r.heatmap.values) sum += v;
      CHECK(sum == doctest::Approx(r.audit.totals.front()).epsilon(0.01));
      CHECK(r.audit.layers.front() == "prototype");
      CHECK(r.audit.layers.size() == 2 + 2 * 4);

      const auto sim = model.similarity(model.encode(s.image), proto);
      CHECK(r.audit.totals.front() == doctest::Approx(sim.max_score()).epsilon(1e-6));
      CHECK(r.patch_row == sim.argmax_row());
      CHECK(r.patch_col == sim.argmax_col());
    }
  }
}

TEST_CASE("PRP: relevance comes from the receptive field of the best patch") {
  const ProtoPNet model(tiny_protopnet(), 4);
  const auto r = prp_relevance(model, 1, v2_sample(0).image);
  // Four 3x3 conv + pool2 blocks: a latent cell sees 16 px plus a 8+4+2+1 = 15 px halo.
  const int cy = r.patch_row * 16, cx = r.patch_col * 16;
  for (int y = 0; y < 128; ++y) {
    for (int x = 0; x < 128; ++x) {
      if (r.heatmap.at(y, x) == 0.0) continue;
      CHECK(y >= cy - 15);
      CHECK(y < cy + 16 + 15);
      CHECK(x >= cx - 15);
      CHECK(x < cx + 16 + 15);
    }
  }
}

TEST_CASE("PRP: rule registry") {
  const ProtoPNet model(tiny_protopnet(), 6);
  const auto& img = v2_sample(1).image;
  const auto names = conv_rule_names();
  CHECK(std::find(names.begin(), names.end(), "zplus") != names.end());
  CHECK(std::find(names.begin(), names.end(), "zbox") != names.end());

  PrpRules rules;
  rules.distance = "uniform";
  const auto u = prp_relevance(model, 0, img, rules);
  CHECK(u.audit.max_relative_change() <= 0.01);

  register_conv_rule("test_halve", [](const ConvLayer& layer, const Tensor& x, const std::vector<double>& r) {
    auto out = conv_rule("zplus")(layer, x, r);
    for (auto& v : out) v *= 0.5;
    return out;
  });
  rules = PrpRules{};
  rules.conv = "test_halve";
  const auto halved = prp_relevance(model, 0, img, rules);
  const auto base = prp_relevance(model, 0, img);
  // Three inner convolutions each halve the total.
  CHECK(halved.audit.totals.back() == doctest::Approx(base.audit.totals.back() / 8.0).epsilon(1e-6));

  rules.conv = "no_such_rule";
  CHECK_THROWS_AS(prp_relevance(model, 0, img, rules), UnknownRule);
}

TEST_CASE("PRP: errors") {
  const ProtoPNet model(tiny_protopnet(), 6);
  const auto& img = v2_sample(2).image;
  CHECK_THROWS_AS(prp_relevance(model, -1, img), std::out_of_range);
  CHECK_THROWS_AS(prp_relevance(model, 6, img), std::out_of_range);
  CHECK_THROWS_AS(prp_relevance(model, 0, ExtractorTrace{}), MissingActivations);
}
