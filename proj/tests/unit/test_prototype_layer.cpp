#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "protolab/protopnet.hpp"

using namespace protolab;
using testing::random_latent;
using testing::random_vector;

namespace {

double brute_distance(const LatentMap& z, int r, int c, const std::vector<double>& p) {
  double s = 0.0;
  for (int d = 0; d < z.depth; ++d) {
    const double diff = double(z.values[(static_cast<std::size_t>(r) * z.width + c) * z.depth + d]) - p[d];
    s += diff * diff;
  }
  return s;
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b)); }

std::vector<Prototype> make_prototypes(std::mt19937_64& rng, int classes, int per_class, int depth) {
  std::vector<Prototype> out;
  for (int c = 0; c < classes; ++c) {
    for (int k = 0; k < per_class; ++k) {
      out.push_back({static_cast<int>(out.size()), random_vector(rng, depth), c, std::nullopt});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("squared L2 map matches brute force on 100 random instances") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = dim(rng), w = dim(rng), d = dim(rng) * 4;
    const auto z = random_latent(rng, h, w, d);
    const auto p = random_vector(rng, d);
    const auto grid = squared_l2_map(z, p);
    REQUIRE(grid.height == h);
    REQUIRE(grid.width == w);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) CHECK(std::abs(grid.values[r * w + c] - brute_distance(z, r, c, p)) <= 1e-4);
    }
  }
}

TEST_CASE("dimension mismatch") {
  std::mt19937_64 rng(1);
  const auto z = random_latent(rng, 2, 2, 4);
  CHECK_THROWS_AS(squared_l2_map(z, random_vector(rng, 5)), DimensionMismatch);
}

TEST_CASE("similarity function") {
  CHECK(similarity_from_distance(0.0, 1e-4) == doctest::Approx(std::log(1.0 / 1e-4)));
  CHECK(similarity_from_distance(3.0, 1e-4) == doctest::Approx(std::log(4.0 / (3.0 + 1e-4))));
  CHECK(similarity_from_distance(1.0, 1e-4) > similarity_from_distance(2.0, 1e-4));
  CHECK(similarity_from_distance(1e6, 1e-4) > 0.0);
  CHECK_THROWS(similarity_from_distance(-1.0, 1e-4));
  CHECK_THROWS(similarity_from_distance(1.0, 0.0));
  for (double d : {0.0, 0.3, 2.0, 10.0}) {
    // Curvature near zero is about 1/eps^2, so the one-sided step there is tiny.
    const double h = d > 0 ? 1e-6 : 1e-9;
    const double fd = (similarity_from_distance(d + h, 1e-4) - similarity_from_distance(d + (d > 0 ? -h : 0.0), 1e-4)) /
                      (d > 0 ? 2 * h : h);
    CHECK(rel_error(similarity_derivative(d, 1e-4), fd) < 1e-3);
  }
}

TEST_CASE("layer config validation") {
  PrototypeLayerConfig c;
  CHECK_NOTHROW(c.validate());
  c.per_class_count = 0;
  CHECK_THROWS(c.validate());
  c.per_class_count = 1;
  c.epsilon = 0.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("similarity map argmax is the nearest patch") {
  std::mt19937_64 rng(5);
  const auto z = random_latent(rng, 4, 5, 6);
  std::vector<double> p(z.patch(2, 3).begin(), z.patch(2, 3).end());
  const auto m = similarity_map(z, p, 1e-4);
  CHECK(m.argmax_row() == 2);
  CHECK(m.argmax_col() == 3);
  CHECK(m.min_distance() == doctest::Approx(0.0));
  CHECK(m.max_score() == doctest::Approx(std::log(1e4)));
}

TEST_CASE("activations and costs match brute force") {
  std::mt19937_64 rng(9);
  const auto z = random_latent(rng, 3, 3, 8);
  const auto protos = make_prototypes(rng, 3, 2, 8);
  const auto act = activate(z, protos, 1e-4);
  for (std::size_t j = 0; j < protos.size(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    int arg = -1;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        const double d = brute_distance(z, r, c, protos[j].vector);
        if (d < best) {
          best = d;
          arg = r * 3 + c;
        }
      }
    }
    CHECK(act.min_distance[j] == doctest::Approx(best).epsilon(1e-6));
    CHECK(act.argmin[j] == arg);
    CHECK(act.pooled_similarity[j] == doctest::Approx(similarity_from_distance(best, 1e-4)));
  }
  const int label = 1;
  const double cl = std::min(act.min_distance[2], act.min_distance[3]);
  const double sep = std::min({act.min_distance[0], act.min_distance[1], act.min_distance[4], act.min_distance[5]});
  CHECK(cluster_cost(act, protos, label) == doctest::Approx(cl));
  CHECK(separation_cost(act, protos, label) == doctest::Approx(sep));
  CHECK(cluster_loss({act, act}, {label, label}, protos) == doctest::Approx(cl));
  CHECK(separation_loss({act}, {label}, protos) == doctest::Approx(sep));
  CHECK_THROWS(cluster_cost(act, protos, 7));
}

TEST_CASE("prototype-layer gradients match central finite differences") {
  std::mt19937_64 rng(21);
  const int C = 3, D = 6;
  for (int trial = 0; trial < 5; ++trial) {
    const auto z = random_latent(rng, 3, 3, D);
    auto protos = make_prototypes(rng, C, 2, D);
    auto head = random_vector(rng, C * static_cast<int>(protos.size()), -1.0, 1.0);
    const int label = trial % C;
    const double lc = 0.8, ls = 0.08, eps = 1e-4;
    const auto obj = sample_objective(z, label, protos, head, C, eps, lc, ls, true);
    auto total = [&](const std::vector<Prototype>& ps, const std::vector<double>& hd) {
      return sample_objective(z, label, ps, hd, C, eps, lc, ls, false).total;
    };
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t j = 0; j < protos.size(); ++j) {
      for (int d = 0; d < D; ++d) {
        auto plus = protos, minus = protos;
        plus[j].vector[d] += h;
        minus[j].vector[d] -= h;
        const double fd = (total(plus, head) - total(minus, head)) / (2 * h);
        worst = std::max(worst, rel_error(obj.grad_prototypes[j * D + d], fd));
      }
    }
    for (std::size_t k = 0; k < head.size(); ++k) {
      auto plus = head, minus = head;
      plus[k] += h;
      minus[k] -= h;
      worst = std::max(worst, rel_error(obj.grad_head[k], (total(protos, plus) - total(protos, minus)) / (2 * h)));
    }
    CHECK(worst <= 1e-3);

    // Latent gradient: the latent map is stored in float, so use a larger step and tolerance.
    int good = 0, n = 0;
    for (std::size_t i = 0; i < z.values.size(); i += 3) {
      auto zp = z, zm = z;
      const float hf = 1e-2f;
      zp.values[i] += hf;
      zm.values[i] -= hf;
      const double fd = (sample_objective(zp, label, protos, head, C, eps, lc, ls, false).total -
                         sample_objective(zm, label, protos, head, C, eps, lc, ls, false).total) /
                        (double(zp.values[i]) - double(zm.values[i]));
      ++n;
      good += std::abs(fd - obj.grad_latent[i]) <= 1e-3 + 2e-2 * std::abs(fd);
    }
    CHECK(good >= n * 9 / 10);
  }
}
