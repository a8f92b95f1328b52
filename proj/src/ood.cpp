#include "protolab/ood.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace protolab {

using nlohmann::json;

double ood_score(const PrototypeModel& model, const LatentMap& z) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : model.prototypes()) {
    const auto grid = squared_l2_map(z, p.vector);
    best = std::min(best, *std::min_element(grid.values.begin(), grid.values.end()));
  }
  return best;
}

double ood_score(const PrototypeModel& model, const Image& image) { return ood_score(model, model.encode(image)); }

double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw std::invalid_argument("auroc needs non-empty score sets");
  struct Entry {
    double v;
    bool ood;
  };
  std::vector<Entry> all;
  for (double v : id_scores) all.push_back({v, false});
  for (double v : ood_scores) all.push_back({v, true});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.v < b.v; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].ood) rank_sum += midrank;
    }
    i = j;
  }
  const double n1 = static_cast<double>(ood_scores.size());
  const double n0 = static_cast<double>(id_scores.size());
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

Histogram make_histogram(const std::vector<std::string>& names, const std::vector<std::vector<double>>& groups,
                         int bins) {
  if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
  if (names.size() != groups.size()) throw std::invalid_argument("one name per histogram group");
  Histogram h;
  h.groups = names;
  h.low = std::numeric_limits<double>::infinity();
  h.high = -std::numeric_limits<double>::infinity();
  for (const auto& g : groups) {
    for (double v : g) {
      h.low = std::min(h.low, v);
      h.high = std::max(h.high, v);
    }
  }
  if (!std::isfinite(h.low)) h.low = h.high = 0.0;
  const double width = h.high > h.low ? (h.high - h.low) / bins : 1.0;
  for (const auto& g : groups) {
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    for (double v : g) {
      const int b = std::clamp(static_cast<int>((v - h.low) / width), 0, bins - 1);
      ++counts[static_cast<std::size_t>(b)];
    }
    h.counts.push_back(std::move(counts));
  }
  return h;
}

namespace {

OodGroup score_group(const PrototypeModel& model, const std::string& name, const std::vector<const Sample*>& samples) {
  OodGroup g;
  g.name = name;
  for (const auto* s : samples) {
    g.ids.push_back(s->id);
    g.scores.push_back(ood_score(model, s->image));
  }
  return g;
}

}  // namespace

OodResult run_ood_experiment(const PrototypeModel& model, const std::vector<const Sample*>& id_test,
                             const std::vector<const Sample*>& near_ood, const std::vector<const Sample*>& far_ood,
                             int bins) {
  std::set<std::string> seen;
  for (const auto* group : {&id_test, &near_ood, &far_ood}) {
    std::set<std::string> mine;
    for (const auto* s : *group) mine.insert(s->id);
    for (const auto& id : mine) {
      if (!seen.insert(id).second) throw std::invalid_argument("sample '" + id + "' appears in more than one split");
    }
  }
  OodResult r;
  r.id = score_group(model, "id", id_test);
  r.near = score_group(model, "near_ood", near_ood);
  r.far = score_group(model, "far_ood", far_ood);
  r.auroc_near = auroc(r.id.scores, r.near.scores);
  r.auroc_far = auroc(r.id.scores, r.far.scores);
  r.histogram = make_histogram({r.id.name, r.near.name, r.far.name}, {r.id.scores, r.near.scores, r.far.scores}, bins);
  return r;
}

json to_json(const OodResult& result) {
  auto group = [](const OodGroup& g) {
    json samples = json::array();
    for (std::size_t i = 0; i < g.ids.size(); ++i) samples.push_back({{"id", g.ids[i]}, {"score", g.scores[i]}});
    return json{{"count", g.ids.size()}, {"samples", samples}};
  };
  const auto& h = result.histogram;
  return {{"schema_version", 1},
          {"score", "min squared L2 distance to any prototype over all latent patches"},
          {"auroc_near", result.auroc_near},
          {"auroc_far", result.auroc_far},
          {"id", group(result.id)},
          {"near_ood", group(result.near)},
          {"far_ood", group(result.far)},
          {"histogram", {{"low", h.low}, {"high", h.high}, {"bins", h.bins()}, {"groups", h.groups}, {"counts", h.counts}}}};
}

Image render_histogram(const Histogram& h) {
  // One panel per group, bars scaled to that group's tallest bin.
  constexpr int kBarWidth = 8, kPanelHeight = 80, kGap = 6;
  const std::array<Rgb, 3> colors{Rgb{40, 110, 200}, Rgb{230, 140, 30}, Rgb{200, 40, 40}};
  const int bins = std::max(h.bins(), 1);
  const int groups = static_cast<int>(h.counts.size());
  Image img(bins * kBarWidth + 2 * kGap, std::max(groups, 1) * (kPanelHeight + kGap) + kGap, Rgb{255, 255, 255});
  img.background = Rgb{255, 255, 255};
  for (int g = 0; g < groups; ++g) {
    const int peak = std::max(1, *std::max_element(h.counts[g].begin(), h.counts[g].end()));
    const int base = kGap + (g + 1) * (kPanelHeight + kGap) - kGap;
    const Rgb color = colors[static_cast<std::size_t>(g) % colors.size()];
    for (int x = kGap; x < kGap + bins * kBarWidth; ++x) {
      for (int ch = 0; ch < 3; ++ch) img.at(base, x, ch) = 0;
    }
    for (int b = 0; b < bins; ++b) {
      const int height = (h.counts[g][b] * (kPanelHeight - 2) + peak - 1) / peak;
      for (int y = base - height; y < base; ++y) {
        for (int x = kGap + b * kBarWidth; x < kGap + (b + 1) * kBarWidth - 1; ++x) {
          for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = color[ch];
        }
      }
    }
  }
  return img;
}

void write_ood_outputs(const std::filesystem::path& dir, const OodResult& result) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "result.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "result.json").string());
    out << to_json(result).dump(2) << '\n';
  }
  const auto& h = result.histogram;
  std::ofstream csv(dir / "histogram.csv");
  if (!csv) throw std::runtime_error("cannot write " + (dir / "histogram.csv").string());
  csv << "bin,low,high";
  for (const auto& g : h.groups) csv << ',' << g;
  csv << '\n';
  const double width = h.bins() > 0 && h.high > h.low ? (h.high - h.low) / h.bins() : 1.0;
  csv.precision(10);
  for (int b = 0; b < h.bins(); ++b) {
    csv << b << ',' << h.low + b * width << ',' << h.low + (b + 1) * width;
    for (const auto& c : h.counts) csv << ',' << c[b];
    csv << '\n';
  }
  write_png(dir / "histogram.png", render_histogram(h));
}

}  // namespace protolab
