#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "protolab/prototype_layer.hpp"
#include "protolab/shapes.hpp"

namespace protolab {

// Smallest squared L2 distance between any prototype and any latent patch.
double ood_score(const PrototypeModel& model, const LatentMap& z);
double ood_score(const PrototypeModel& model, const Image& image);

// P(ood > id) + 0.5 P(ood == id) via the Mann-Whitney U statistic with midranks.
double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores);

struct Histogram {
  double low = 0.0;
  double high = 0.0;
  std::vector<std::string> groups;
  std::vector<std::vector<int>> counts;  // groups x bins
  int bins() const { return counts.empty() ? 0 : static_cast<int>(counts[0].size()); }
};

// Uniform bins over the pooled range of every group.
Histogram make_histogram(const std::vector<std::string>& names, const std::vector<std::vector<double>>& groups,
                         int bins = 50);

struct OodGroup {
  std::string name;
  std::vector<std::string> ids;
  std::vector<double> scores;
};

struct OodResult {
  OodGroup id;
  OodGroup near;
  OodGroup far;
  double auroc_near = 0.0;
  double auroc_far = 0.0;
  Histogram histogram;
};

// Throws std::invalid_argument when any sample id appears in two groups.
OodResult run_ood_experiment(const PrototypeModel& model, const std::vector<const Sample*>& id_test,
                             const std::vector<const Sample*>& near_ood, const std::vector<const Sample*>& far_ood,
                             int bins = 50);

nlohmann::json to_json(const OodResult& result);
// result.json, histogram.csv, histogram.png
void write_ood_outputs(const std::filesystem::path& dir, const OodResult& result);
Image render_histogram(const Histogram& histogram);

}  // namespace protolab
