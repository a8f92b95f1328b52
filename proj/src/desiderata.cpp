#include "protolab/desiderata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "protolab/protopnet.hpp"
#include "protolab/prototree.hpp"

namespace protolab {

using nlohmann::json;

std::string to_string(Backend backend) { return backend == Backend::upsample ? "upsample" : "prp"; }

Backend backend_from_string(const std::string& name) {
  if (name == "upsample") return Backend::upsample;
  if (name == "prp") return Backend::prp;
  throw std::invalid_argument("unknown backend '" + name + "' (expected upsample or prp)");
}

Heatmap prototype_heatmap(const PrototypeModel& model, int index, const Image& image, Backend backend) {
  if (backend == Backend::prp) return prp_relevance(model, index, image).heatmap;
  if (index < 0 || index >= static_cast<int>(model.prototypes().size())) {
    throw std::out_of_range("prototype index " + std::to_string(index) + " out of range");
  }
  auto h = upsample_map(model.similarity(model.encode(image), index), image.width);
  h.prototype_id = model.prototypes()[static_cast<std::size_t>(index)].id;
  return h;
}

double purity_for_heatmap(const Heatmap& heatmap, const MaskSet& masks, double percentile) {
  if (masks.size() == 0) throw UnsupportedDataset("purity needs ground-truth shape masks");
  const auto region = top_region(heatmap, percentile);
  double total = 0.0;
  std::vector<double> inside(masks.size(), 0.0);
  for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
    if (!region.bits[i]) continue;
    const double v = std::abs(heatmap.values[i]);
    total += v;
    for (std::size_t m = 0; m < masks.size(); ++m) {
      if (masks.masks[m].bits[i]) inside[m] += v;
    }
  }
  if (total == 0.0) return 0.0;
  return *std::max_element(inside.begin(), inside.end()) / total;
}

std::vector<const Sample*> purity_images(const Prototype& prototype, const Dataset& data, int max_images) {
  std::vector<const Sample*> out;
  for (const auto& s : data.samples) {
    if (s.split != Split::test) continue;
    if (prototype.class_id >= 0 && s.label != prototype.class_id) continue;
    out.push_back(&s);
    if (max_images > 0 && static_cast<int>(out.size()) == max_images) break;
  }
  return out;
}

double purity(const PrototypeModel& model, int index, const std::vector<const Sample*>& images, Backend backend,
              double percentile) {
  if (images.empty()) throw std::invalid_argument("purity needs at least one image");
  double sum = 0.0;
  for (const auto* s : images) {
    sum += purity_for_heatmap(prototype_heatmap(model, index, s->image, backend), s->masks, percentile);
  }
  return sum / static_cast<double>(images.size());
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("cosine of vectors with different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return dot / std::sqrt(na * nb);
}

double iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("iou of masks with different sizes");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] && b.bits[i];
    uni += a.bits[i] || b.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

RedundancyResult redundancy_scores(const std::vector<int>& ids, const std::vector<std::vector<double>>& vectors,
                                   const std::vector<std::vector<Mask>>& regions, const RedundancyConfig& config) {
  const std::size_t n = ids.size();
  if (n < 2) throw std::invalid_argument("redundancy needs at least two prototypes");
  if (vectors.size() != n || regions.size() != n) throw std::invalid_argument("redundancy inputs disagree in size");
  const std::size_t probes = regions[0].size();
  if (probes == 0) throw std::invalid_argument("redundancy needs a non-empty probe set");
  for (const auto& r : regions) {
    if (r.size() != probes) throw std::invalid_argument("every prototype needs one region per probe image");
  }
  RedundancyResult out;
  out.prototype_ids = ids;
  out.cosine.assign(n, std::vector<double>(n, 1.0));
  out.iou.assign(n, std::vector<double>(n, 1.0));
  out.scores.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double cos = cosine_similarity(vectors[i], vectors[j]);
      double overlap = 0.0;
      for (std::size_t p = 0; p < probes; ++p) overlap += iou(regions[i][p], regions[j][p]);
      overlap /= static_cast<double>(probes);
      out.cosine[i][j] = out.cosine[j][i] = cos;
      out.iou[i][j] = out.iou[j][i] = overlap;
      out.scores[i][j] = out.scores[j][i] = std::clamp(std::max(cos, overlap), 0.0, 1.0);
      if (cos > config.cosine_threshold || overlap > config.iou_threshold) out.duplicate_pairs.emplace_back(ids[i], ids[j]);
    }
  }
  return out;
}

RedundancyResult redundancy(const PrototypeModel& model, const std::vector<int>& indices,
                            const std::vector<const Sample*>& probe, const RedundancyConfig& config) {
  if (probe.empty()) throw std::invalid_argument("redundancy needs a non-empty probe set");
  std::vector<int> ids;
  std::vector<std::vector<double>> vectors;
  std::vector<std::vector<Mask>> regions(indices.size());
  for (int idx : indices) {
    ids.push_back(model.prototypes().at(static_cast<std::size_t>(idx)).id);
    vectors.push_back(model.prototypes()[static_cast<std::size_t>(idx)].vector);
  }
  for (const auto* s : probe) {
    const auto z = model.encode(s->image);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      regions[i].push_back(top_region(upsample_map(model.similarity(z, indices[i]), s->image.width), config.percentile));
    }
  }
  return redundancy_scores(ids, vectors, regions, config);
}

std::vector<int> top_k(const std::vector<double>& scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(k, 0))));
  return order;
}

std::vector<Transform> default_transforms() { return {Transform::rotate(25.0), Transform::center_crop(0.8)}; }

std::vector<ConsistencyRow> transformation_consistency(const PrototypeModel& model, const std::vector<const Sample*>& images,
                                                       const std::vector<Transform>& transforms, int k, int max_cases) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const auto& protos = model.prototypes();
  const bool class_bound = std::all_of(protos.begin(), protos.end(), [](const Prototype& p) { return p.class_id >= 0; });
  const auto* tree = dynamic_cast<const ProtoTree*>(&model);
  const int kk = std::min<int>(k, static_cast<int>(protos.size()));

  std::vector<ConsistencyRow> rows;
  for (const auto& t : transforms) {
    ConsistencyRow row;
    row.transform = t.name();
    double overlap = 0.0, same = 0.0, true_before = 0.0, true_after = 0.0, paths = 0.0;
    for (const auto* s : images) {
      const auto z0 = model.encode(s->image);
      const auto z1 = model.encode(transform_image(s->image, t));
      const auto before = top_k(model.activations(z0).pooled_similarity, kk);
      const auto after = top_k(model.activations(z1).pooled_similarity, kk);
      int shared = 0;
      for (int a : after) shared += std::count(before.begin(), before.end(), a) > 0;
      overlap += static_cast<double>(shared) / kk;
      if (tree) paths += tree->extract_decision_path(z0) == tree->extract_decision_path(z1);
      if (class_bound) {
        std::map<int, int> cls_before;
        for (int b : before) ++cls_before[protos[b].class_id];
        int common = 0, tb = 0, ta = 0;
        for (int a : after) {
          auto it = cls_before.find(protos[a].class_id);
          if (it != cls_before.end() && it->second > 0) {
            --it->second;
            ++common;
          }
          ta += protos[a].class_id == s->label;
        }
        for (int b : before) tb += protos[b].class_id == s->label;
        const double frac = static_cast<double>(common) / kk;
        same += frac;
        true_before += static_cast<double>(tb) / kk;
        true_after += static_cast<double>(ta) / kk;
        if (frac < 1.0 && static_cast<int>(row.cases.size()) < max_cases) {
          ConsistencyCase c{s->id, {}, {}, frac};
          for (int b : before) c.before.push_back(protos[b].id);
          for (int a : after) c.after.push_back(protos[a].id);
          row.cases.push_back(std::move(c));
        }
      }
    }
    const double n = images.empty() ? 1.0 : static_cast<double>(images.size());
    row.images = static_cast<int>(images.size());
    row.topk_overlap = images.empty() ? 1.0 : overlap / n;
    if (class_bound) {
      row.same_class_fraction = images.empty() ? 1.0 : same / n;
      row.true_class_before = true_before / n;
      row.true_class_after = true_after / n;
    }
    if (tree) row.path_equality = images.empty() ? 1.0 : paths / n;
    rows.push_back(std::move(row));
  }
  return rows;
}

Image isolate_patch(const Image& image, const PatchBox& box) {
  Image out(image.width, image.height, image.background);
  out.background = image.background;
  for (int r = std::max(0, box.top); r <= std::min(image.height - 1, box.bottom); ++r) {
    for (int c = std::max(0, box.left); c <= std::min(image.width - 1, box.right); ++c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = image.at(r, c, ch);
    }
  }
  return out;
}

PatchBox source_patch_box(const PrototypeModel& model, int index, const Image& source, double percentile) {
  return extract_patch(prototype_heatmap(model, index, source, Backend::upsample), percentile);
}

TaskRelevanceResult task_relevance(const PrototypeModel& model, const Dataset& data, double percentile) {
  TaskRelevanceResult out;
  const auto& protos = model.prototypes();
  int correct = 0;
  for (std::size_t i = 0; i < protos.size(); ++i) {
    const auto& p = protos[i];
    if (!p.source) throw std::invalid_argument("prototype " + std::to_string(p.id) + " is not projected");
    if (p.class_id < 0) throw std::invalid_argument("task relevance needs class-bound prototypes");
    const Sample* src = data.find(p.source->image_id);
    if (!src) throw std::invalid_argument("source image '" + p.source->image_id + "' not in dataset");
    TaskRelevanceItem item;
    item.prototype_id = p.id;
    item.class_id = p.class_id;
    item.source_image = src->id;
    item.box = source_patch_box(model, static_cast<int>(i), src->image, percentile);
    item.predicted = model.predict(isolate_patch(src->image, item.box));
    item.correct = item.predicted == p.class_id;
    correct += item.correct;
    out.items.push_back(std::move(item));
  }
  out.accuracy = protos.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(protos.size());
  return out;
}

DesiderataReport evaluate_desiderata(const PrototypeModel& model, const std::string& model_id, const Dataset& data,
                                     const EvaluationConfig& config) {
  DesiderataReport report;
  report.model_id = model_id;
  const auto* tree = dynamic_cast<const ProtoTree*>(&model);
  report.model_kind = tree ? "prototree" : "protopnet";
  report.config = {{"percentile", config.percentile},
                   {"top_k", config.top_k},
                   {"cosine_threshold", config.redundancy.cosine_threshold},
                   {"iou_threshold", config.redundancy.iou_threshold},
                   {"max_images", config.max_images},
                   {"max_probe_images", config.max_probe_images}};
  json transforms = json::array();
  for (const auto& t : config.transforms) transforms.push_back(t.name());
  report.config["transforms"] = transforms;

  const auto test = data.subset(Split::test);
  report.test_accuracy = accuracy(model, test);

  const auto& protos = model.prototypes();
  for (std::size_t i = 0; i < protos.size(); ++i) {
    const auto images = purity_images(protos[i], data, config.max_images);
    PurityScore score{protos[i].id, protos[i].class_id, static_cast<int>(images.size())};
    if (!images.empty()) {
      score.upsample = purity(model, static_cast<int>(i), images, Backend::upsample, config.percentile);
      score.prp = purity(model, static_cast<int>(i), images, Backend::prp, config.percentile);
    }
    report.purity.push_back(score);
  }

  std::map<int, std::vector<int>> groups;
  for (std::size_t i = 0; i < protos.size(); ++i) groups[protos[i].class_id].push_back(static_cast<int>(i));
  for (const auto& [cls, indices] : groups) {
    if (indices.size() < 2) continue;
    std::vector<const Sample*> probe;
    for (const auto& s : test.samples) {
      if (cls >= 0 && s.label != cls) continue;
      probe.push_back(&s);
      if (config.max_probe_images > 0 && static_cast<int>(probe.size()) == config.max_probe_images) break;
    }
    if (probe.empty()) continue;
    report.redundancy.emplace_back(cls, redundancy(model, indices, probe, config.redundancy));
  }

  std::vector<const Sample*> images;
  for (const auto& s : test.samples) images.push_back(&s);
  report.consistency = transformation_consistency(model, images, config.transforms, config.top_k);

  const bool projected = std::all_of(protos.begin(), protos.end(), [](const Prototype& p) { return p.source.has_value(); });
  if (!tree && projected) report.task_relevance = task_relevance(model, data, config.percentile);
  return report;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const DesiderataReport& report) {
  json j;
  j["schema_version"] = 1;
  j["model_id"] = report.model_id;
  j["model_kind"] = report.model_kind;
  j["note"] = "Every metric is a constructed operationalization computed against synthetic ground truth; "
              "none of them measures human interpretability.";
  j["config"] = report.config;
  j["test_accuracy"] = report.test_accuracy;

  json purity = json::array();
  for (const auto& p : report.purity) {
    purity.push_back({{"prototype", p.prototype_id}, {"class", p.class_id}, {"images", p.images},
                      {"upsample", p.upsample}, {"prp", p.prp}});
  }
  j["purity"] = purity;

  json red = json::array();
  for (const auto& [cls, r] : report.redundancy) {
    json pairs = json::array();
    for (const auto& [a, b] : r.duplicate_pairs) pairs.push_back({a, b});
    red.push_back({{"class", cls}, {"prototypes", r.prototype_ids}, {"cosine", r.cosine}, {"iou", r.iou},
                   {"scores", r.scores}, {"duplicate_pairs", pairs}, {"duplicates", r.duplicates()}});
  }
  j["redundancy"] = red;

  json cons = json::array();
  for (const auto& row : report.consistency) {
    json cases = json::array();
    for (const auto& c : row.cases) {
      cases.push_back({{"image", c.image_id}, {"before", c.before}, {"after", c.after},
                       {"same_class_fraction", c.same_class_fraction}});
    }
    cons.push_back({{"transform", row.transform}, {"images", row.images}, {"topk_overlap", row.topk_overlap},
                    {"same_class_fraction", optional_json(row.same_class_fraction)},
                    {"true_class_before", optional_json(row.true_class_before)},
                    {"true_class_after", optional_json(row.true_class_after)},
                    {"path_equality", optional_json(row.path_equality)}, {"cases", cases}});
  }
  j["transformation_consistency"] = cons;

  if (report.task_relevance) {
    json items = json::array();
    for (const auto& it : report.task_relevance->items) {
      items.push_back({{"prototype", it.prototype_id}, {"class", it.class_id}, {"source_image", it.source_image},
                       {"box", {it.box.top, it.box.left, it.box.bottom, it.box.right}},
                       {"predicted", it.predicted}, {"correct", it.correct}});
    }
    j["task_relevance"] = {{"accuracy", report.task_relevance->accuracy}, {"items", items}};
  } else {
    j["task_relevance"] = nullptr;
  }
  return j;
}

}  // namespace protolab
