#include "protolab/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "CLI11.hpp"
#include "protolab/checkpoint.hpp"
#include "protolab/config.hpp"
#include "protolab/desiderata.hpp"
#include "protolab/explain.hpp"
#include "protolab/ood.hpp"
#include "protolab/study.hpp"
#include "protolab/study_server.hpp"

namespace protolab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

json history_json(const std::vector<LossRecord>& history) {
  json arr = json::array();
  for (const auto& h : history) {
    arr.push_back({{"stage", h.stage}, {"epoch", h.epoch}, {"step", h.step}, {"total", h.total},
                   {"cross_entropy", h.cross_entropy}, {"cluster", h.cluster}, {"separation", h.separation}});
  }
  return arr;
}

// Loads either kind of checkpoint behind the common interface.
struct LoadedModel {
  ModelKind kind;
  ProtoPNet net;
  ProtoTree tree;
  const PrototypeModel& get() const {
    if (kind == ModelKind::protopnet) return net;
    return tree;
  }
};

LoadedModel load_model(const fs::path& dir) {
  LoadedModel m;
  m.kind = checkpoint_kind(dir);
  if (m.kind == ModelKind::protopnet) {
    m.net = load_protopnet(dir);
  } else {
    m.tree = load_prototree(dir);
  }
  return m;
}

std::vector<const Sample*> all_samples(const Dataset& d) {
  std::vector<const Sample*> out;
  for (const auto& s : d.samples) out.push_back(&s);
  return out;
}

// Heatmap blended over the image in red, box outlined in yellow.
Image overlay(const Image& image, const Heatmap& h, const PatchBox& box) {
  Image out = image;
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  const double range = *hi - *lo;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const double t = range > 0 ? (h.at(r, c) - *lo) / range : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double target = ch == 0 ? 255.0 : 0.0;
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::lround((1 - 0.6 * t) * image.at(r, c, ch) + 0.6 * t * target));
      }
    }
  }
  auto paint = [&](int r, int c) {
    if (r < 0 || c < 0 || r >= out.height || c >= out.width) return;
    out.at(r, c, 0) = 255;
    out.at(r, c, 1) = 230;
    out.at(r, c, 2) = 0;
  };
  for (int c = box.left; c <= box.right; ++c) {
    paint(box.top, c);
    paint(box.bottom, c);
  }
  for (int r = box.top; r <= box.bottom; ++r) {
    paint(r, box.left);
    paint(r, box.right);
  }
  return out;
}

// Crop of `box` scaled (nearest neighbour) to size x size.
Image thumbnail(const Image& image, const PatchBox& box, int size) {
  Image out(size, size, image.background);
  out.background = image.background;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const int sr = box.top + r * box.height() / size;
      const int sc = box.left + c * box.width() / size;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = image.at(sr, sc, ch);
    }
  }
  return out;
}

void paste(Image& canvas, const Image& tile, int top, int left) {
  for (int r = 0; r < tile.height && top + r < canvas.height; ++r) {
    for (int c = 0; c < tile.width && left + c < canvas.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) canvas.at(top + r, left + c, ch) = tile.at(r, c, ch);
    }
  }
}

// Source patch of a projected prototype, or a blank tile.
Image prototype_tile(const PrototypeModel& model, int index, const Dataset& data, int size) {
  const auto& p = model.prototypes()[static_cast<std::size_t>(index)];
  const Sample* src = p.source ? data.find(p.source->image_id) : nullptr;
  if (!src) return Image(size, size, Rgb{0, 0, 0});
  return thumbnail(src->image, source_patch_box(model, index, src->image), size);
}

int cmd_generate(const std::string& config_path, const std::string& out, const std::string& version, int n,
                 long long seed, const std::string& palette, const std::vector<int>& classes, int noise,
                 std::ostream& os) {
  auto cfg = config_or_default(config_path);
  if (!version.empty()) cfg.dataset.version = dataset_version_from_string(version);
  if (n > 0) cfg.dataset.n_per_class = n;
  if (seed >= 0) cfg.seeds.data = static_cast<std::uint64_t>(seed);
  if (!palette.empty()) cfg.dataset.palette = palette_from_string(palette);
  if (!classes.empty()) cfg.dataset.classes = classes;
  if (noise > 0) cfg.dataset.noise_count = noise;

  Dataset ds;
  if (cfg.dataset.noise_count > 0) {
    ds = make_noise_dataset(cfg.dataset.noise_count, cfg.seeds.data);
  } else {
    DatasetOptions opts;
    opts.palette = cfg.dataset.palette;
    opts.classes = cfg.dataset.classes;
    opts.train_fraction = cfg.dataset.train_fraction;
    ds = make_dataset(cfg.dataset.version, cfg.dataset.n_per_class, cfg.seeds.data, opts);
  }
  write_dataset(out, ds);
  // The dataset index doubles as the run manifest.
  std::ifstream in(fs::path(out) / "manifest.json");
  auto manifest = json::parse(in);
  in.close();
  manifest["run"] = run_manifest("generate-data", cfg, json::object());
  write_json_file(fs::path(out) / "manifest.json", manifest);
  os << json{{"samples", ds.samples.size()}, {"out", out}}.dump() << '\n';
  return 0;
}

int cmd_train(bool tree_mode, const std::string& data_dir, const std::string& config_path, const std::string& out,
              int depth, std::ostream& os) {
  auto cfg = config_or_default(config_path);
  if (depth > 0) cfg.model.depth = depth;
  cfg.model.kind = tree_mode ? "prototree" : "protopnet";
  const auto data = read_dataset(data_dir);
  const int classes = data.num_classes();
  json metrics;
  std::vector<LossRecord> history;
  const auto test = data.subset(Split::test);
  const auto train_set = data.subset(Split::train);
  if (tree_mode) {
    auto result = train_tree(cfg.train, cfg.prototree_config(classes), data);
    save_checkpoint(out, result.tree, &train_set);
    history = std::move(result.history);
    int agree = 0;
    for (const auto& s : test.samples) {
      const auto z = result.tree.encode(s.image);
      agree += result.tree.hard_predict(z) == result.tree.predict(z);
    }
    metrics = {{"train_accuracy", accuracy(result.tree, train_set)},
               {"test_accuracy", accuracy(result.tree, test)},
               {"hard_soft_agreement", test.samples.empty() ? 1.0 : static_cast<double>(agree) / test.samples.size()}};
  } else {
    auto result = train(cfg.train, cfg.protopnet_config(classes), data);
    save_checkpoint(out, result.model, &train_set);
    history = std::move(result.history);
    metrics = {{"train_accuracy", accuracy(result.model, train_set)}, {"test_accuracy", accuracy(result.model, test)}};
  }
  write_json_file(fs::path(out) / "history.json", history_json(history));
  write_json_file(fs::path(out) / "metrics.json", metrics);
  write_json_file(fs::path(out) / "manifest.json",
                  run_manifest(tree_mode ? "train-tree" : "train", cfg, {{"data", data_dir}}));
  os << metrics.dump() << '\n';
  return 0;
}

int cmd_project(const std::string& model_dir, const std::string& data_dir, const std::string& out, std::ostream& os) {
  const auto data = read_dataset(data_dir);
  const auto train_set = data.subset(Split::train);
  auto m = load_model(model_dir);
  if (m.kind == ModelKind::protopnet) {
    save_checkpoint(out, project_prototypes(m.net, data), &train_set);
  } else {
    save_checkpoint(out, project_prototypes(m.tree, data), &train_set);
  }
  ExperimentConfig cfg;
  write_json_file(fs::path(out) / "manifest.json",
                  run_manifest("project", cfg, {{"model", model_dir}, {"data", data_dir}}));
  os << json{{"out", out}}.dump() << '\n';
  return 0;
}

int cmd_explain(const std::string& model_dir, const std::string& image_path, int prototype, const std::string& backend_name,
                double percentile, const std::string& data_dir, const std::string& out, std::ostream& os) {
  const auto m = load_model(model_dir);
  const auto& model = m.get();
  const auto backend = backend_from_string(backend_name);
  int index = -1;
  for (std::size_t i = 0; i < model.prototypes().size(); ++i) {
    if (model.prototypes()[i].id == prototype) index = static_cast<int>(i);
  }
  if (index < 0) throw std::out_of_range("no prototype with id " + std::to_string(prototype));
  const auto image = read_png(image_path);
  const auto id = fs::path(image_path).stem().string();
  auto heatmap = prototype_heatmap(model, index, image, backend);
  heatmap.image_id = id;
  const auto box = extract_patch(heatmap, percentile);

  json result{{"backend", to_string(backend)},
              {"prototype", prototype},
              {"image", id},
              {"percentile", percentile},
              {"box", {{"top", box.top}, {"left", box.left}, {"bottom", box.bottom}, {"right", box.right}}},
              {"degenerate", box.degenerate}};
  if (box.degenerate) result["warning"] = "heatmap is constant; box covers the whole image";

  // Masks come from the dataset the image belongs to, when known.
  fs::path dataset_dir = data_dir;
  if (dataset_dir.empty() && fs::exists(fs::path(image_path).parent_path().parent_path() / "manifest.json")) {
    dataset_dir = fs::path(image_path).parent_path().parent_path();
  }
  result["mass_in_mask"] = nullptr;
  if (!dataset_dir.empty()) {
    const auto data = read_dataset(dataset_dir);
    if (const Sample* s = data.find(id); s && s->masks.size() > 0) {
      json per_shape = json::object();
      double best = 0.0;
      for (std::size_t k = 0; k < s->masks.size(); ++k) {
        const double v = mass_in_mask(heatmap, s->masks.masks[k]);
        per_shape[std::string(to_string(s->masks.kinds[k]))] = v;
        best = std::max(best, v);
      }
      result["mass_in_mask"] = {{"per_shape", per_shape}, {"best", best}};
    }
  }
  if (backend == Backend::prp) {
    const auto prp = prp_relevance(model, index, image);
    result["conservation_max_relative_change"] = prp.audit.max_relative_change();
    result["min_relevance"] = prp.audit.min_value;
  }

  fs::path png = out;
  if (png.extension() != ".png") png += ".png";
  fs::path js = png;
  js.replace_extension(".json");
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  write_png(png, overlay(image, heatmap, box));
  write_json_file(js, result);
  if (box.degenerate) std::cerr << "warning: heatmap is constant; using the full-image box\n";
  os << result.dump() << '\n';
  return 0;
}

int cmd_evaluate(const std::string& model_dir, const std::string& data_dir, const std::string& config_path,
                 const std::string& out, std::ostream& os) {
  const auto cfg = config_or_default(config_path);
  const auto m = load_model(model_dir);
  const auto data = read_dataset(data_dir);
  const auto report = evaluate_desiderata(m.get(), fs::path(model_dir).filename().string(), data, cfg.evaluation);
  write_json_file(out, to_json(report));
  fs::path manifest = out;
  manifest.replace_extension(".manifest.json");
  write_json_file(manifest, run_manifest("evaluate", cfg, {{"model", model_dir}, {"data", data_dir}}));
  os << json{{"out", out}, {"test_accuracy", report.test_accuracy}}.dump() << '\n';
  return 0;
}

int cmd_ood(const std::string& model_dir, const std::string& id_dir, const std::vector<std::string>& near_dirs,
            const std::vector<std::string>& far_dirs, const std::string& out, int bins, std::ostream& os) {
  const auto m = load_model(model_dir);
  const auto id_data = read_dataset(id_dir).subset(Split::test);
  std::vector<Dataset> near, far;
  for (const auto& d : near_dirs) near.push_back(read_dataset(d));
  for (const auto& d : far_dirs) far.push_back(read_dataset(d));
  std::vector<const Sample*> near_s, far_s;
  for (const auto& d : near) for (const auto* s : all_samples(d)) near_s.push_back(s);
  for (const auto& d : far) for (const auto* s : all_samples(d)) far_s.push_back(s);
  const auto result = run_ood_experiment(m.get(), all_samples(id_data), near_s, far_s, bins);
  write_ood_outputs(out, result);
  ExperimentConfig cfg;
  write_json_file(fs::path(out) / "manifest.json",
                  run_manifest("ood", cfg, {{"model", model_dir}, {"id", id_dir}, {"near", near_dirs}, {"far", far_dirs}}));
  os << json{{"auroc_near", result.auroc_near}, {"auroc_far", result.auroc_far}}.dump() << '\n';
  return 0;
}

int cmd_serve(const std::string& items_dir, const std::string& host, int port, const std::string& log,
              int max_items, std::ostream& os) {
  StudyConfig sc;
  sc.max_items_per_experiment = max_items;
  StudyService service(load_study_items(items_dir), log, sc);
  StudyServer server(service, fs::path(items_dir) / "assets");
  os << json{{"listening", host + ":" + std::to_string(port)}, {"log", log}}.dump() << std::endl;
  if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

// Prototype indices that explain class `cls`: own-class prototypes for
// ProtoPNet, for trees the nodes whose "present" branch leads to a leaf
// predicting `cls`.
std::vector<int> class_prototypes(const PrototypeModel& model, int cls) {
  std::vector<int> out;
  if (const auto* tree = dynamic_cast<const ProtoTree*>(&model)) {
    std::set<int> nodes;
    for (int l = 0; l < tree->num_leaves(); ++l) {
      const auto q = tree->leaf_distribution(l);
      if (std::max_element(q.begin(), q.end()) - q.begin() != cls) continue;
      int node = tree->num_internal() + l;
      while (node > 0) {
        const int parent = (node - 1) / 2;
        if (node == 2 * parent + 2) nodes.insert(parent);
        node = parent;
      }
    }
    out.assign(nodes.begin(), nodes.end());
  } else {
    for (std::size_t i = 0; i < model.prototypes().size(); ++i) {
      if (model.prototypes()[i].class_id == cls) out.push_back(static_cast<int>(i));
    }
  }
  return out;
}

void add_study_items(StudyItems& items, const std::string& method, const PrototypeModel& model, const Dataset& data,
                     const fs::path& assets) {
  for (int cls = 0; cls < data.num_classes(); ++cls) {
    const auto indices = class_prototypes(model, cls);
    if (indices.empty()) continue;
    std::vector<StudyPrototype> protos;
    for (int idx : indices) {
      const auto& p = model.prototypes()[static_cast<std::size_t>(idx)];
      const std::string name = method + "_p" + std::to_string(p.id) + ".png";
      write_png(assets / name, prototype_tile(model, idx, data, 96));
      protos.push_back({"p" + std::to_string(p.id), name});
    }
    std::vector<int> candidates(static_cast<std::size_t>(data.num_classes()));
    std::iota(candidates.begin(), candidates.end(), 0);
    items.items.push_back({method + "_guess_c" + std::to_string(cls), 1, method, cls, candidates, protos});
    items.items.push_back({method + "_rate_c" + std::to_string(cls), 2, method, cls, {}, protos});
  }
}

int cmd_report(const std::string& model_dir, const std::string& tree_dir, const std::string& data_dir,
               const std::string& study_log, const std::string& out, int examples, std::ostream& os) {
  const auto data = read_dataset(data_dir);
  const auto test = data.subset(Split::test);
  const fs::path root = out;
  fs::create_directories(root);
  json summary{{"schema_version", 1}, {"figures", json::array()}};

  std::vector<std::pair<std::string, LoadedModel>> models;
  if (!model_dir.empty()) models.emplace_back("model", load_model(model_dir));
  if (!tree_dir.empty()) models.emplace_back("tree", load_model(tree_dir));
  if (models.empty()) throw UsageError("report needs --model and/or --tree");

  StudyItems items;
  for (const auto& [name, cls] : data.composition) items.class_names.push_back("class " + std::to_string(name));

  constexpr int kTile = 96;
  for (const auto& [tag, lm] : models) {
    const auto& model = lm.get();
    const std::string method = to_string(lm.kind);
    // Nearest prototypes before and after each transform, one row per view.
    auto transforms = default_transforms();
    for (int e = 0; e < std::min<int>(examples, static_cast<int>(test.samples.size())); ++e) {
      const auto& s = test.samples[static_cast<std::size_t>(e)];
      std::vector<Image> views{s.image};
      for (const auto& t : transforms) views.push_back(transform_image(s.image, t));
      Image canvas((1 + 3) * (kTile + 4), static_cast<int>(views.size()) * (kTile + 4), Rgb{255, 255, 255});
      json rows = json::array();
      for (std::size_t v = 0; v < views.size(); ++v) {
        paste(canvas, thumbnail(views[v], {0, 0, views[v].height - 1, views[v].width - 1}, kTile), static_cast<int>(v) * (kTile + 4), 0);
        const auto top = top_k(model.activations(model.encode(views[v])).pooled_similarity, 3);
        json ids = json::array();
        for (std::size_t k = 0; k < top.size(); ++k) {
          paste(canvas, prototype_tile(model, top[k], data, kTile), static_cast<int>(v) * (kTile + 4),
                static_cast<int>(k + 1) * (kTile + 4));
          ids.push_back({{"prototype", model.prototypes()[top[k]].id}, {"class", model.prototypes()[top[k]].class_id}});
        }
        rows.push_back({{"view", v == 0 ? "identity" : transforms[v - 1].name()}, {"top3", ids}});
      }
      const auto file = method + "_nearest_" + s.id + ".png";
      write_png(root / file, canvas);
      summary["figures"].push_back({{"kind", "nearest_prototypes"}, {"file", file}, {"image", s.id}, {"label", s.label}, {"rows", rows}});
    }
    if (lm.kind == ModelKind::prototree) {
      json paths = json::array();
      for (int e = 0; e < std::min<int>(examples, static_cast<int>(test.samples.size())); ++e) {
        const auto& s = test.samples[static_cast<std::size_t>(e)];
        const auto path = lm.tree.extract_decision_path(s.image);
        json steps = json::array();
        for (const auto& st : path.steps) {
          steps.push_back({{"node", st.node}, {"p_right", st.p_right}, {"present", st.present},
                           {"match", {st.match_row, st.match_col}}});
        }
        paths.push_back({{"image", s.id}, {"label", s.label}, {"leaf", path.leaf},
                         {"predicted", path.predicted_class}, {"steps", steps}});
      }
      json leaves = json::array();
      for (int l = 0; l < lm.tree.num_leaves(); ++l) leaves.push_back(lm.tree.leaf_distribution(l));
      write_json_file(root / "tree_paths.json", {{"depth", lm.tree.depth()}, {"leaves", leaves}, {"paths", paths}});
      summary["figures"].push_back({{"kind", "decision_paths"}, {"file", "tree_paths.json"}});
    }
    add_study_items(items, method, model, data, root / "study_items" / "assets");
  }
  if (!items.items.empty()) {
    save_study_items(root / "study_items", items);
    summary["study_items"] = "study_items/items.json";
  }
  if (!study_log.empty()) {
    const auto stats = compute_stats(StudyService::read_log(study_log));
    write_json_file(root / "study_stats.json", to_json(stats));
    std::vector<std::string> names;
    std::vector<std::vector<int>> counts;
    for (const auto& [method, ms] : stats.methods) {
      names.push_back(method + " useful");
      counts.push_back(ms.useful_histogram);
      names.push_back(method + " non-redundant");
      counts.push_back(ms.non_redundant_histogram);
    }
    Histogram h{0.0, 1.0, names, counts};
    write_png(root / "study_histograms.png", render_histogram(h));
    summary["figures"].push_back({{"kind", "study_stats"}, {"file", "study_stats.json"}, {"plot", "study_histograms.png"}});
  }
  write_json_file(root / "report.json", summary);
  ExperimentConfig cfg;
  write_json_file(root / "manifest.json",
                  run_manifest("report", cfg, {{"model", model_dir}, {"tree", tree_dir}, {"data", data_dir},
                                               {"study_log", study_log}}));
  os << json{{"out", out}}.dump() << '\n';
  return 0;
}

json error_json(const std::string& type, const std::string& message) {
  return {{"error", {{"type", type}, {"message", message}}}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototype-based interpretable classification lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config, data, outp, model, image, backend = "upsample", tree, study_log, items, log, host = "127.0.0.1";
  std::string version, palette, id_dir;
  std::vector<std::string> near, far;
  std::vector<int> classes;
  int n = 0, noise = 0, depth = 0, prototype = 0, port = 8080, bins = 50, max_items = 0, examples = 3;
  long long seed = -1;
  double percentile = 95.0;

  auto* gen = app.add_subcommand("generate-data", "Render a synthetic shapes dataset");
  gen->add_option("--config", config, "Experiment config (JSON)");
  gen->add_option("--out", outp, "Output directory")->required();
  gen->add_option("--version", version, "V1 or V2");
  gen->add_option("--n-per-class", n, "Images per class");
  gen->add_option("--seed", seed, "Data seed");
  gen->add_option("--palette", palette, "training or unseen");
  gen->add_option("--classes", classes, "Subset of class ids")->delimiter(',');
  gen->add_option("--noise", noise, "Emit this many uniform-noise images instead");

  auto* tr = app.add_subcommand("train", "Train a ProtoPNet");
  auto* tt = app.add_subcommand("train-tree", "Train a ProtoTree");
  for (auto* sub : {tr, tt}) {
    sub->add_option("--data", data, "Dataset directory")->required();
    sub->add_option("--config", config, "Experiment config (JSON)");
    sub->add_option("--out", outp, "Checkpoint directory")->required();
  }
  tt->add_option("--depth", depth, "Tree depth");

  auto* pj = app.add_subcommand("project", "Project prototypes onto training patches");
  pj->add_option("--model", model, "Checkpoint directory")->required();
  pj->add_option("--data", data, "Dataset directory")->required();
  pj->add_option("--out", outp, "Output checkpoint directory")->required();

  auto* ex = app.add_subcommand("explain", "Heatmap and patch for one prototype on one image");
  ex->add_option("--model", model, "Checkpoint directory")->required();
  ex->add_option("--image", image, "PNG image")->required();
  ex->add_option("--prototype", prototype, "Prototype id")->required();
  ex->add_option("--backend", backend, "upsample or prp");
  ex->add_option("--percentile", percentile, "Patch percentile");
  ex->add_option("--data", data, "Dataset holding the image (for masks)");
  ex->add_option("--out", outp, "Output PNG (JSON written alongside)")->required();

  auto* ev = app.add_subcommand("evaluate", "Desiderata report");
  ev->add_option("--model", model, "Checkpoint directory")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--config", config, "Experiment config (JSON)");
  ev->add_option("--out", outp, "report.json path")->required();

  auto* od = app.add_subcommand("ood", "Distance-based OOD experiment");
  od->add_option("--model", model, "Checkpoint directory")->required();
  od->add_option("--id", id_dir, "In-distribution dataset (test split used)")->required();
  od->add_option("--near", near, "Near-OOD dataset(s)")->required();
  od->add_option("--far", far, "Far-OOD dataset(s)")->required();
  od->add_option("--bins", bins, "Histogram bins");
  od->add_option("--out", outp, "Output directory")->required();

  auto* sv = app.add_subcommand("serve-study", "Run the user-study HTTP service");
  sv->add_option("--items", items, "Study items directory")->required();
  sv->add_option("--port", port, "Port");
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--log", log, "NDJSON response log")->required();
  sv->add_option("--max-items", max_items, "Items per experiment per session (0 = all)");

  auto* rp = app.add_subcommand("report", "Figures, decision paths and study items");
  rp->add_option("--model", model, "ProtoPNet checkpoint");
  rp->add_option("--tree", tree, "ProtoTree checkpoint");
  rp->add_option("--data", data, "Dataset directory")->required();
  rp->add_option("--study-log", study_log, "Study log for response statistics");
  rp->add_option("--examples", examples, "Test images to illustrate");
  rp->add_option("--out", outp, "Output directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage_error", e.what()).dump() << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(config, outp, version, n, seed, palette, classes, noise, out);
    if (tr->parsed()) return cmd_train(false, data, config, outp, 0, out);
    if (tt->parsed()) return cmd_train(true, data, config, outp, depth, out);
    if (pj->parsed()) return cmd_project(model, data, outp, out);
    if (ex->parsed()) return cmd_explain(model, image, prototype, backend, percentile, data, outp, out);
    if (ev->parsed()) return cmd_evaluate(model, data, config, outp, out);
    if (od->parsed()) return cmd_ood(model, id_dir, near, far, outp, bins, out);
    if (sv->parsed()) return cmd_serve(items, host, port, log, max_items, out);
    if (rp->parsed()) return cmd_report(model, tree, data, study_log, outp, examples, out);
  } catch (const ConfigError& e) {
    auto j = error_json("config_error", e.what());
    j["error"]["key"] = e.key();
    err << j.dump() << '\n';
    return 1;
  } catch (const UsageError& e) {
    err << error_json("usage_error", e.what()).dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << error_json("runtime_error", e.what()).dump() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace protolab
