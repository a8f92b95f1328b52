#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "protolab/checkpoint.hpp"
#include "protolab/protopnet.hpp"

using namespace protolab;
using testing::tiny_protopnet;

namespace {

const Dataset& small_v2() {
  static const Dataset ds = make_dataset(DatasetVersion::V2, 5, 11);
  return ds;
}

double patch_distance(const LatentMap& z, int row, int col, const std::vector<double>& p) {
  const auto patch = z.patch(row, col);
  double s = 0.0;
  for (std::size_t d = 0; d < p.size(); ++d) s += (double(patch[d]) - p[d]) * (double(patch[d]) - p[d]);
  return s;
}

}  // namespace

TEST_CASE("prototype count and head initialization") {
  const ProtoPNet model(tiny_protopnet(3), 5);
  REQUIRE(model.prototypes().size() == 9);
  const std::size_t m = model.prototypes().size();
  for (std::size_t j = 0; j < m; ++j) {
    CHECK(model.prototypes()[j].class_id == static_cast<int>(j / 3));
    CHECK(model.prototypes()[j].id == static_cast<int>(j));
    CHECK(model.prototypes()[j].vector.size() == 8);
    for (int c = 0; c < 3; ++c) CHECK(model.head()[c * m + j] == (static_cast<int>(j / 3) == c ? 1.0 : -0.5));
  }
}

TEST_CASE("forward: pooled similarity is the map max, logits the head product") {
  const ProtoPNet model(tiny_protopnet(), 2);
  const auto& img = small_v2().samples[0].image;
  const auto out = model.forward(img);
  const std::size_t m = model.prototypes().size();
  REQUIRE(out.maps.size() == m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& s = out.maps[j].scores;
    CHECK(out.pooled_similarity[j] == doctest::Approx(*std::max_element(s.begin(), s.end())));
  }
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += model.head()[c * m + j] * out.pooled_similarity[j];
    CHECK(out.logits[c] == doctest::Approx(acc).epsilon(1e-9));
  }
}

TEST_CASE("forward: planted prototype") {
  ProtoPNet model(tiny_protopnet(), 2);
  const auto z = model.encode(small_v2().samples[1].image);
  const auto patch = z.patch(3, 5);
  model.mutable_prototypes()[4].vector.assign(patch.begin(), patch.end());
  const auto out = model.forward(z);
  CHECK(out.pooled_similarity[4] == doctest::Approx(std::log(1.0 / model.epsilon())).epsilon(1e-6));
  CHECK(out.maps[4].argmax_row() == 3);
  CHECK(out.maps[4].argmax_col() == 5);
}

TEST_CASE("forward: permuting prototypes with head columns keeps logits") {
  const ProtoPNet model(tiny_protopnet(), 2);
  ProtoPNet permuted = model;
  const std::size_t m = model.prototypes().size();
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  for (std::size_t j = 0; j < m; ++j) {
    permuted.mutable_prototypes()[j] = model.prototypes()[perm[j]];
    for (int c = 0; c < 3; ++c) permuted.head()[c * m + j] = model.head()[c * m + perm[j]];
  }
  const auto z = model.encode(small_v2().samples[2].image);
  const auto a = model.forward(z).logits;
  const auto b = permuted.forward(z).logits;
  for (int c = 0; c < 3; ++c) CHECK(a[c] == doctest::Approx(b[c]).epsilon(1e-12));
}

TEST_CASE("forward rejects a wrong image shape") {
  const ProtoPNet model(tiny_protopnet(), 2);
  CHECK_THROWS(model.forward(Image(64, 64, Rgb{0, 0, 0})));
}

TEST_CASE("projection: fixed point, idempotence and brute-force oracle") {
  const auto& ds = small_v2();
  const ProtoPNet model(tiny_protopnet(), 3);
  const auto projected = project_prototypes(model, ds);

  for (const auto& p : projected.prototypes()) {
    REQUIRE(p.source.has_value());
    const Sample* s = ds.find(p.source->image_id);
    REQUIRE(s != nullptr);
    CHECK(s->label == p.class_id);
    CHECK(s->split == Split::train);
    const auto z = projected.encode(s->image);
    CHECK(patch_distance(z, p.source->row, p.source->col, p.vector) <= 1e-5);
  }

  // Exhaustive nearest own-class patch for each original prototype.
  for (std::size_t j = 0; j < model.prototypes().size(); ++j) {
    const auto& orig = model.prototypes()[j];
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> best_vec;
    for (const auto& s : ds.samples) {
      if (s.split != Split::train || s.label != orig.class_id) continue;
      const auto z = model.encode(s.image);
      for (int r = 0; r < z.height; ++r) {
        for (int c = 0; c < z.width; ++c) {
          const double d = patch_distance(z, r, c, orig.vector);
          if (d < best) {
            best = d;
            const auto patch = z.patch(r, c);
            best_vec.assign(patch.begin(), patch.end());
          }
        }
      }
    }
    const auto& got = projected.prototypes()[j].vector;
    REQUIRE(got.size() == best_vec.size());
    for (std::size_t d = 0; d < got.size(); ++d) CHECK(got[d] == doctest::Approx(best_vec[d]).epsilon(1e-9));
  }

  const auto twice = project_prototypes(projected, ds);
  CHECK(twice.prototypes() == projected.prototypes());
}

TEST_CASE("projection needs training images of every class") {
  DatasetOptions opt;
  opt.classes = {0, 1};
  const auto ds = make_dataset(DatasetVersion::V2, 3, 1, opt);
  const ProtoPNet model(tiny_protopnet(), 3);
  CHECK_THROWS(project_prototypes(model, ds));
}

TEST_CASE("zero-epoch schedule returns the initial model") {
  TrainConfig tc;
  tc.warmup_epochs = tc.joint_epochs = tc.last_layer_epochs = 0;
  const ProtoPNet initial(tiny_protopnet(), 9);
  const auto r = train(tc, initial, small_v2());
  CHECK(r.model == initial);
  CHECK(r.history.empty());
}

TEST_CASE("training is deterministic per seed") {
  TrainConfig tc;
  tc.warmup_epochs = 1;
  tc.joint_epochs = 1;
  tc.last_layer_epochs = 1;
  tc.seed = 4;
  const auto a = train(tc, tiny_protopnet(), small_v2());
  const auto b = train(tc, tiny_protopnet(), small_v2());
  CHECK(a.model == b.model);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].total == b.history[i].total);

  tc.seed = 5;
  const auto c = train(tc, tiny_protopnet(), small_v2());
  CHECK_FALSE(c.model == a.model);
}

TEST_CASE("smoothed loss is non-increasing on a 10-sample overfit run") {
  Dataset ds = small_v2();
  std::vector<Sample> kept;
  for (const auto& s : ds.samples) {
    if (s.split == Split::train && kept.size() < 10) kept.push_back(s);
  }
  REQUIRE(kept.size() == 10);
  ds.samples = kept;

  TrainConfig tc;
  tc.warmup_epochs = 0;
  tc.joint_epochs = 40;
  tc.last_layer_epochs = 0;
  tc.batch_size = 10;
  tc.augment = false;
  tc.seed = 1;
  const auto r = train(tc, tiny_protopnet(), ds);
  REQUIRE(r.history.size() == 40);

  std::vector<double> smooth;
  for (std::size_t i = 0; i + 5 <= r.history.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = i; k < i + 5; ++k) acc += r.history[k].total;
    smooth.push_back(acc / 5.0);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] <= smooth[i - 1] + 1e-12);
  CHECK(smooth.back() < smooth.front());
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.joint_epochs = -1;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.lambda_cluster = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testing::scratch_dir("protopnet_ckpt");
  auto model = project_prototypes(ProtoPNet(tiny_protopnet(), 6), small_v2());
  save_checkpoint(dir, model, &small_v2());
  CHECK(checkpoint_kind(dir) == ModelKind::protopnet);
  const auto loaded = load_protopnet(dir);
  CHECK(loaded == model);
  CHECK_THROWS_AS(load_prototree(dir), CheckpointError);
  CHECK_THROWS_AS(load_protopnet(dir / "missing"), CheckpointError);
}
