#include "protolab/prototype_layer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace protolab {

void PrototypeLayerConfig::validate() const {
  if (per_class_count < 1) throw std::invalid_argument("per_class_count must be >= 1");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("epsilon must be > 0");
}

DistanceGrid squared_l2_map(const LatentMap& z, std::span<const double> prototype) {
  if (static_cast<int>(prototype.size()) != z.depth) {
    throw DimensionMismatch("prototype length " + std::to_string(prototype.size()) +
                            " does not match latent depth " + std::to_string(z.depth));
  }
  DistanceGrid grid;
  grid.height = z.height;
  grid.width = z.width;
  grid.values.resize(static_cast<std::size_t>(z.num_patches()));
  for (int p = 0; p < z.num_patches(); ++p) {
    const auto patch = z.patch(p);
    double acc = 0.0;
    for (int d = 0; d < z.depth; ++d) {
      const double diff = static_cast<double>(patch[d]) - prototype[d];
      acc += diff * diff;
    }
    grid.values[p] = acc;
  }
  return grid;
}

double similarity_from_distance(double distance, double epsilon) {
  if (!(distance >= 0.0)) throw std::domain_error("distance must be nonnegative");
  if (!(epsilon > 0.0)) throw std::domain_error("epsilon must be positive");
  return std::log((distance + 1.0) / (distance + epsilon));
}

double similarity_derivative(double distance, double epsilon) {
  return 1.0 / (distance + 1.0) - 1.0 / (distance + epsilon);
}

SimilarityMap similarity_map(const LatentMap& z, std::span<const double> prototype, double epsilon) {
  auto grid = squared_l2_map(z, prototype);
  SimilarityMap map;
  map.height = grid.height;
  map.width = grid.width;
  map.scores.resize(grid.values.size());
  for (std::size_t i = 0; i < grid.values.size(); ++i) {
    map.scores[i] = similarity_from_distance(grid.values[i], epsilon);
  }
  map.argmax = static_cast<int>(std::max_element(map.scores.begin(), map.scores.end()) - map.scores.begin());
  map.distances = std::move(grid.values);
  return map;
}

PrototypeActivations activate(const LatentMap& z, const std::vector<Prototype>& prototypes,
                              double epsilon) {
  PrototypeActivations act;
  const std::size_t m = prototypes.size();
  act.min_distance.resize(m);
  act.argmin.resize(m);
  act.pooled_similarity.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& proto = prototypes[j].vector;
    if (static_cast<int>(proto.size()) != z.depth) {
      throw DimensionMismatch("prototype " + std::to_string(j) + " does not match latent depth");
    }
    double best = std::numeric_limits<double>::infinity();
    int best_idx = 0;
    for (int p = 0; p < z.num_patches(); ++p) {
      const auto patch = z.patch(p);
      double acc = 0.0;
      for (int d = 0; d < z.depth; ++d) {
        const double diff = static_cast<double>(patch[d]) - proto[d];
        acc += diff * diff;
      }
      if (acc < best) {
        best = acc;
        best_idx = p;
      }
    }
    act.min_distance[j] = best;
    act.argmin[j] = best_idx;
    act.pooled_similarity[j] = similarity_from_distance(best, epsilon);
  }
  return act;
}

namespace {

double min_over(const PrototypeActivations& act, const std::vector<Prototype>& prototypes, int label,
                bool own) {
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < prototypes.size(); ++j) {
    if ((prototypes[j].class_id == label) != own) continue;
    any = true;
    best = std::min(best, act.min_distance[j]);
  }
  if (!any) {
    throw std::invalid_argument(own ? "class " + std::to_string(label) + " has no prototypes"
                                    : "no prototypes outside class " + std::to_string(label));
  }
  return best;
}

double batch_mean(const std::vector<PrototypeActivations>& batch, const std::vector<int>& labels,
                  const std::vector<Prototype>& prototypes, bool own) {
  if (batch.size() != labels.size()) throw std::invalid_argument("batch/label size mismatch");
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) total += min_over(batch[i], prototypes, labels[i], own);
  return total / static_cast<double>(batch.size());
}

}  // namespace

double cluster_cost(const PrototypeActivations& act, const std::vector<Prototype>& prototypes, int label) {
  return min_over(act, prototypes, label, true);
}

double separation_cost(const PrototypeActivations& act, const std::vector<Prototype>& prototypes, int label) {
  return min_over(act, prototypes, label, false);
}

double cluster_loss(const std::vector<PrototypeActivations>& batch, const std::vector<int>& labels,
                    const std::vector<Prototype>& prototypes) {
  return batch_mean(batch, labels, prototypes, true);
}

double separation_loss(const std::vector<PrototypeActivations>& batch, const std::vector<int>& labels,
                       const std::vector<Prototype>& prototypes) {
  return batch_mean(batch, labels, prototypes, false);
}

int PrototypeModel::predict(const LatentMap& z) const {
  const auto scores = class_scores(z);
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

SimilarityMap PrototypeModel::similarity(const LatentMap& z, int prototype_index) const {
  const auto& protos = prototypes();
  if (prototype_index < 0 || prototype_index >= static_cast<int>(protos.size())) {
    throw std::out_of_range("prototype index out of range");
  }
  return similarity_map(z, protos[static_cast<std::size_t>(prototype_index)].vector, epsilon());
}

}  // namespace protolab
