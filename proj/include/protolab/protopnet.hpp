#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "protolab/prototype_layer.hpp"
#include "protolab/shapes.hpp"

namespace protolab {

struct TrainConfig {
  int warmup_epochs = 2;
  int joint_epochs = 30;
  int last_layer_epochs = 20;
  double lr_features = 1e-3;
  double lr_prototypes = 1e-2;
  double lr_head = 1e-2;
  double lambda_cluster = 0.8;
  double lambda_separation = 0.08;
  double lambda_l1 = 1e-4;  // on cross-class head weights, last-layer stage only
  int batch_size = 16;
  bool augment = true;  // random dihedral symmetry per sample in the joint stage
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossRecord {
  std::string stage;
  int epoch = 0;
  int step = 0;
  double total = 0.0;
  double cross_entropy = 0.0;
  double cluster = 0.0;
  double separation = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::string stage, int step)
      : std::runtime_error("non-finite loss in stage '" + stage + "' at step " + std::to_string(step)),
        stage_(std::move(stage)),
        step_(step) {}
  const std::string& stage() const { return stage_; }
  int step() const { return step_; }

 private:
  std::string stage_;
  int step_;
};

struct ProtoPNetConfig {
  ExtractorConfig extractor;
  PrototypeLayerConfig layer;
  int num_classes = 3;
};

class ProtoPNet final : public PrototypeModel {
 public:
  ProtoPNet() = default;
  // Prototypes start uniform in [0,1)^D; the head starts at +1 for own-class
  // and -0.5 for cross-class connections.
  ProtoPNet(const ProtoPNetConfig& config, std::uint64_t seed);

  const ProtoPNetConfig& config() const { return config_; }
  const FeatureExtractor& extractor() const override { return extractor_; }
  const std::vector<Prototype>& prototypes() const override { return prototypes_; }
  double epsilon() const override { return config_.layer.epsilon; }
  int num_classes() const override { return config_.num_classes; }
  std::vector<double> class_scores(const LatentMap& z) const override;

  FeatureExtractor& mutable_extractor() { return extractor_; }
  std::vector<Prototype>& mutable_prototypes() { return prototypes_; }
  // num_classes x num_prototypes, row-major.
  std::vector<double>& head() { return head_; }
  const std::vector<double>& head() const { return head_; }

  std::vector<double> logits(const PrototypeActivations& act) const;

  struct Output {
    std::vector<double> logits;
    std::vector<double> pooled_similarity;
    std::vector<SimilarityMap> maps;
  };
  Output forward(const Image& image) const;
  Output forward(const LatentMap& z) const;

  void reset_head();
  bool operator==(const ProtoPNet& other) const;

 private:
  ProtoPNetConfig config_;
  FeatureExtractor extractor_;
  std::vector<Prototype> prototypes_;
  std::vector<double> head_;
};

// Objective for one sample: CE + lambda_c * cluster - lambda_s * separation,
// with gradients w.r.t. prototypes (m x D), head (C x m) and, on request, the
// latent map (P x D).
struct SampleObjective {
  double total = 0.0;
  double cross_entropy = 0.0;
  double cluster = 0.0;
  double separation = 0.0;
  std::vector<double> grad_prototypes;
  std::vector<double> grad_head;
  std::vector<double> grad_latent;
};

SampleObjective sample_objective(const LatentMap& z, int label, const std::vector<Prototype>& prototypes,
                                 const std::vector<double>& head, int num_classes, double epsilon,
                                 double lambda_cluster, double lambda_separation, bool latent_grad);

struct TrainResult {
  ProtoPNet model;
  std::vector<LossRecord> history;
};

// Staged schedule: warmup (prototypes only), joint (extractor + prototypes),
// projection, last-layer refit (head only). Uses the train split of `data`.
// With zero warmup and joint epochs no projection happens.
TrainResult train(const TrainConfig& config, ProtoPNet initial, const Dataset& data);
TrainResult train(const TrainConfig& config, const ProtoPNetConfig& model_config, const Dataset& data);

// Replaces each prototype by its nearest latent patch over the train-split
// images of its own class and records the source.
ProtoPNet project_prototypes(const ProtoPNet& model, const Dataset& data);

struct ProjectionCandidate {
  const Sample* sample = nullptr;
  LatentMap latent;
};

// Shared nearest-patch search. When `restrict_to_class` is set a prototype
// only sees candidates with its class label.
void project_onto_patches(std::vector<Prototype>& prototypes,
                          const std::vector<ProjectionCandidate>& candidates, bool restrict_to_class);

double accuracy(const PrototypeModel& model, const Dataset& data);

}  // namespace protolab
