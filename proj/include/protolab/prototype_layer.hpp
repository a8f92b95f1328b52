#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "protolab/nn.hpp"

namespace protolab {

struct PrototypeSource {
  std::string image_id;
  int row = 0;
  int col = 0;
  bool operator==(const PrototypeSource&) const = default;
};

// One learnt latent vector of spatial size 1x1. class_id is -1 for
// class-agnostic (tree node) prototypes.
struct Prototype {
  int id = 0;
  std::vector<double> vector;
  int class_id = -1;
  std::optional<PrototypeSource> source;
  bool operator==(const Prototype&) const = default;
};

struct PrototypeLayerConfig {
  int per_class_count = 10;
  double epsilon = 1e-4;
  void validate() const;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DistanceGrid {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, >= 0
};

// Squared L2 distance between `prototype` and every latent patch.
DistanceGrid squared_l2_map(const LatentMap& z, std::span<const double> prototype);

// log((d + 1) / (d + epsilon)); d >= 0, epsilon > 0.
double similarity_from_distance(double distance, double epsilon);
// d/dd of similarity_from_distance.
double similarity_derivative(double distance, double epsilon);

struct SimilarityMap {
  int height = 0;
  int width = 0;
  std::vector<double> distances;
  std::vector<double> scores;
  int argmax = 0;  // flat index of the best patch (first on ties)

  double max_score() const { return scores[static_cast<std::size_t>(argmax)]; }
  double min_distance() const { return distances[static_cast<std::size_t>(argmax)]; }
  int argmax_row() const { return argmax / width; }
  int argmax_col() const { return argmax % width; }
};

SimilarityMap similarity_map(const LatentMap& z, std::span<const double> prototype, double epsilon);

// Per-prototype min distance over patches, its location, and the pooled similarity.
struct PrototypeActivations {
  std::vector<double> min_distance;
  std::vector<int> argmin;
  std::vector<double> pooled_similarity;
};

PrototypeActivations activate(const LatentMap& z, const std::vector<Prototype>& prototypes,
                              double epsilon);

// Min distance from the sample to prototypes of its own class (cluster) and
// to prototypes of any other class (separation). Throws when the relevant
// prototype set is empty.
double cluster_cost(const PrototypeActivations& act, const std::vector<Prototype>& prototypes, int label);
double separation_cost(const PrototypeActivations& act, const std::vector<Prototype>& prototypes, int label);

// Batch means of the two costs.
double cluster_loss(const std::vector<PrototypeActivations>& batch, const std::vector<int>& labels,
                    const std::vector<Prototype>& prototypes);
double separation_loss(const std::vector<PrototypeActivations>& batch, const std::vector<int>& labels,
                       const std::vector<Prototype>& prototypes);

// Common surface of prototype classifiers used by explanation, evaluation and OOD code.
class PrototypeModel {
 public:
  virtual ~PrototypeModel() = default;

  virtual const FeatureExtractor& extractor() const = 0;
  virtual const std::vector<Prototype>& prototypes() const = 0;
  virtual double epsilon() const = 0;
  virtual int num_classes() const = 0;
  // Per-class scores (logits or probabilities); argmax is the prediction.
  virtual std::vector<double> class_scores(const LatentMap& z) const = 0;

  LatentMap encode(const Image& image) const { return extractor().encode(image); }
  int predict(const LatentMap& z) const;
  int predict(const Image& image) const { return predict(encode(image)); }
  PrototypeActivations activations(const LatentMap& z) const {
    return activate(z, prototypes(), epsilon());
  }
  SimilarityMap similarity(const LatentMap& z, int prototype_index) const;
};

}  // namespace protolab
