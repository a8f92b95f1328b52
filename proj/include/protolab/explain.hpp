#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "protolab/image.hpp"
#include "protolab/prototype_layer.hpp"

namespace protolab {

// Full-resolution relevance / similarity grid aligned with the input image.
struct Heatmap {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major
  std::string backend;         // "upsample" or "prp"
  int prototype_id = -1;
  std::string image_id;

  double at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

// Inclusive pixel bounds.
struct PatchBox {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;
  bool degenerate = false;  // set for an all-equal heatmap (full-image box)

  int height() const { return bottom - top + 1; }
  int width() const { return right - left + 1; }
  bool contains(const PatchBox& other) const {
    return top <= other.top && left <= other.left && bottom >= other.bottom && right >= other.right;
  }
  bool operator==(const PatchBox&) const = default;
};

// Bilinear resize of a latent similarity map to size x size, sampling at pixel
// centres with edge clamping.
Heatmap upsample_map(const SimilarityMap& map, int size = 128);

// Pixels strictly above the nearest-rank value at `percentile`; falls back to
// the pixels equal to the maximum when that set is empty. Constant heatmaps
// select everything.
Mask top_region(const Heatmap& heatmap, double percentile = 95.0);
// Bounding box of top_region; degenerate (all-equal) heatmaps give the
// full-image box with `degenerate` set.
PatchBox extract_patch(const Heatmap& heatmap, double percentile = 95.0);

// Share of |relevance| that falls inside the mask (0 when the heatmap is all zero).
double mass_in_mask(const Heatmap& heatmap, const Mask& mask);

// --- PRP ---

// Redistributes relevance R of a prototype's best patch across its latent
// channels. z: patch vector, p: prototype vector.
using DistanceRule = std::function<std::vector<double>(std::span<const float> z, std::span<const double> p, double R)>;
// Maps relevance on a conv output (out x H x W) to its input (in x H x W).
using ConvRule = std::function<std::vector<double>(const ConvLayer& layer, const Tensor& input,
                                                   const std::vector<double>& relevance)>;

class UnknownRule : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Built-in distance rules: "contribution", "uniform".
// Built-in conv rules: "zplus", "zbox" (bounded input), "epsilon".
void register_distance_rule(const std::string& name, DistanceRule rule);
void register_conv_rule(const std::string& name, ConvRule rule);
const DistanceRule& distance_rule(const std::string& name);
const ConvRule& conv_rule(const std::string& name);
std::vector<std::string> conv_rule_names();

struct PrpRules {
  std::string distance = "contribution";
  std::string conv = "zplus";
  std::string input = "zbox";  // rule for the first convolution
};

// Total relevance after each propagation step, starting with the initial value.
struct RelevanceAudit {
  std::vector<std::string> layers;
  std::vector<double> totals;
  double min_value = 0.0;  // smallest relevance seen at any layer

  // Largest |total_k - total_{k-1}| / |total_{k-1}| over consecutive steps.
  double max_relative_change() const;
};

struct PrpResult {
  Heatmap heatmap;                     // sum over input channels
  std::vector<double> input_relevance;  // 3 x H x W
  RelevanceAudit audit;
  int patch_row = 0;
  int patch_col = 0;
};

class MissingActivations : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Relevance starts at the prototype's pooled similarity on its best latent
// patch, is split over channels by the distance rule, routed through max
// pooling to the winning unit, passed through ReLU and distributed through
// each convolution by the configured rule.
PrpResult prp_relevance(const PrototypeModel& model, int prototype_index, const ExtractorTrace& trace,
                        const PrpRules& rules = {});
PrpResult prp_relevance(const PrototypeModel& model, int prototype_index, const Image& image,
                        const PrpRules& rules = {});

}  // namespace protolab
