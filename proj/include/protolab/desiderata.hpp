#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "protolab/explain.hpp"
#include "protolab/shapes.hpp"

namespace protolab {

class UnsupportedDataset : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Backend { upsample, prp };
std::string to_string(Backend backend);
Backend backend_from_string(const std::string& name);

// Heatmap of prototype `index` on one image for either backend.
Heatmap prototype_heatmap(const PrototypeModel& model, int index, const Image& image, Backend backend);

// --- purity ---

// Share of the top-region mass that lies inside the best single shape mask.
double purity_for_heatmap(const Heatmap& heatmap, const MaskSet& masks, double percentile = 95.0);

// Images a prototype is scored on: own-class test images for class-bound
// prototypes, every test image for class-agnostic (tree) ones.
std::vector<const Sample*> purity_images(const Prototype& prototype, const Dataset& data, int max_images = 0);

double purity(const PrototypeModel& model, int index, const std::vector<const Sample*>& images, Backend backend,
              double percentile = 95.0);

// --- redundancy ---

struct RedundancyConfig {
  double cosine_threshold = 0.95;
  double iou_threshold = 0.5;
  double percentile = 95.0;
};

struct RedundancyResult {
  std::vector<int> prototype_ids;
  std::vector<std::vector<double>> cosine;
  std::vector<std::vector<double>> iou;     // mean over the probe set
  std::vector<std::vector<double>> scores;  // max(cosine, iou), unit diagonal
  std::vector<std::pair<int, int>> duplicate_pairs;  // prototype ids
  int duplicates() const { return static_cast<int>(duplicate_pairs.size()); }
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
double iou(const Mask& a, const Mask& b);

// regions[i][j]: top region of prototype i on probe image j.
RedundancyResult redundancy_scores(const std::vector<int>& ids, const std::vector<std::vector<double>>& vectors,
                                   const std::vector<std::vector<Mask>>& regions, const RedundancyConfig& config = {});
RedundancyResult redundancy(const PrototypeModel& model, const std::vector<int>& indices,
                            const std::vector<const Sample*>& probe, const RedundancyConfig& config = {});

// --- transformation consistency ---

// Indices of the k largest scores, ties to the lower index.
std::vector<int> top_k(const std::vector<double>& scores, int k);

struct ConsistencyCase {
  std::string image_id;
  std::vector<int> before;  // prototype ids
  std::vector<int> after;
  double same_class_fraction = 0.0;
};

struct ConsistencyRow {
  std::string transform;
  int images = 0;
  double topk_overlap = 0.0;
  // Class-bound prototypes only: |classes(before) ∩ classes(after)| / k as
  // multisets, and the share of before/after matches whose class is the
  // image's label.
  std::optional<double> same_class_fraction;
  std::optional<double> true_class_before;
  std::optional<double> true_class_after;
  std::optional<double> path_equality;  // trees only
  std::vector<ConsistencyCase> cases;   // images with same-class fraction < 1
};

std::vector<Transform> default_transforms();
std::vector<ConsistencyRow> transformation_consistency(const PrototypeModel& model, const std::vector<const Sample*>& images,
                                                       const std::vector<Transform>& transforms, int k = 3,
                                                       int max_cases = 10);

// --- task relevance ---

struct TaskRelevanceItem {
  int prototype_id = 0;
  int class_id = 0;
  std::string source_image;
  PatchBox box;
  int predicted = -1;
  bool correct = false;
};

struct TaskRelevanceResult {
  double accuracy = 0.0;
  std::vector<TaskRelevanceItem> items;
};

// The source image with everything outside `box` replaced by its background.
Image isolate_patch(const Image& image, const PatchBox& box);
// Box of the prototype's similarity heatmap on its source image.
PatchBox source_patch_box(const PrototypeModel& model, int index, const Image& source, double percentile = 95.0);
TaskRelevanceResult task_relevance(const PrototypeModel& model, const Dataset& data, double percentile = 95.0);

// --- report ---

struct EvaluationConfig {
  double percentile = 95.0;
  RedundancyConfig redundancy;
  int top_k = 3;
  std::vector<Transform> transforms = default_transforms();
  int max_images = 0;        // per prototype for purity, 0 = all
  int max_probe_images = 0;  // redundancy probe set per class, 0 = all
};

struct PurityScore {
  int prototype_id = 0;
  int class_id = -1;
  int images = 0;
  double upsample = 0.0;
  double prp = 0.0;
};

struct DesiderataReport {
  std::string model_id;
  std::string model_kind;
  nlohmann::json config;
  double test_accuracy = 0.0;
  std::vector<PurityScore> purity;
  // One entry per class for class-bound prototypes; a single entry (class -1)
  // covering every node for trees.
  std::vector<std::pair<int, RedundancyResult>> redundancy;
  std::vector<ConsistencyRow> consistency;
  std::optional<TaskRelevanceResult> task_relevance;
};

DesiderataReport evaluate_desiderata(const PrototypeModel& model, const std::string& model_id, const Dataset& data,
                                     const EvaluationConfig& config = {});
nlohmann::json to_json(const DesiderataReport& report);

}  // namespace protolab
