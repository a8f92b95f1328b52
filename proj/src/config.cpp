#include "protolab/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace protolab {

using nlohmann::json;

ProtoPNetConfig ExperimentConfig::protopnet_config(int num_classes) const {
  ProtoPNetConfig c;
  c.extractor.channels = model.channels;
  c.layer.per_class_count = model.per_class_count;
  c.layer.epsilon = model.epsilon;
  c.num_classes = num_classes;
  return c;
}

ProtoTreeConfig ExperimentConfig::prototree_config(int num_classes) const {
  ProtoTreeConfig c;
  c.extractor.channels = model.channels;
  c.depth = model.depth;
  c.epsilon = model.epsilon;
  c.num_classes = num_classes;
  return c;
}

namespace {

// Walks one JSON object, rejecting keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(full(key), "config key '" + full(key) + "' has the wrong type");
    }
  }

  void read_u64(const char* key, std::uint64_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(full(key), "config key '" + full(key) + "' must be a nonnegative integer");
    }
    out = j_.at(key).get<std::uint64_t>();
  }

  void read_int(const char* key, int& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number_integer()) throw ConfigError(full(key), "config key '" + full(key) + "' must be an integer");
    out = j_.at(key).get<int>();
  }

  void read_number(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number()) throw ConfigError(full(key), "config key '" + full(key) + "' must be a number");
    out = j_.at(key).get<double>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(full(key), "unknown config key '" + full(key) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "config key '" + path_ + "'"; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T, typename F>
void read_enum(Reader& r, const char* key, T& out, F parse) {
  std::string s;
  bool present = false;
  if (const json* v = r.child(key)) {
    if (!v->is_string()) throw ConfigError(r.full(key), "config key '" + r.full(key) + "' must be a string");
    s = v->get<std::string>();
    present = true;
  }
  if (!present) return;
  try {
    out = parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.full(key), "config key '" + r.full(key) + "': " + e.what());
  }
}

void check(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(key, "config key '" + key + "' " + message);
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader root(j, "");

  if (const json* d = root.child("dataset")) {
    Reader r(*d, "dataset");
    read_enum(r, "version", c.dataset.version, dataset_version_from_string);
    r.read_int("n_per_class", c.dataset.n_per_class);
    read_enum(r, "palette", c.dataset.palette, palette_from_string);
    r.read("classes", c.dataset.classes);
    r.read_number("train_fraction", c.dataset.train_fraction);
    r.read_int("noise_count", c.dataset.noise_count);
    r.finish();
    check(c.dataset.n_per_class >= 1, "dataset.n_per_class", "must be >= 1");
    check(c.dataset.train_fraction > 0.0 && c.dataset.train_fraction <= 1.0, "dataset.train_fraction", "must be in (0, 1]");
    check(c.dataset.noise_count >= 0, "dataset.noise_count", "must be >= 0");
  }

  if (const json* m = root.child("model")) {
    Reader r(*m, "model");
    r.read("kind", c.model.kind);
    r.read("channels", c.model.channels);
    r.read_int("per_class_count", c.model.per_class_count);
    r.read_number("epsilon", c.model.epsilon);
    r.read_int("depth", c.model.depth);
    r.finish();
    check(c.model.kind == "protopnet" || c.model.kind == "prototree", "model.kind", "must be protopnet or prototree");
    check(!c.model.channels.empty(), "model.channels", "must not be empty");
    for (int ch : c.model.channels) check(ch >= 1, "model.channels", "entries must be >= 1");
    check(c.model.per_class_count >= 1, "model.per_class_count", "must be >= 1");
    check(c.model.epsilon > 0.0, "model.epsilon", "must be > 0");
    check(c.model.depth >= 1 && c.model.depth <= 10, "model.depth", "must be in [1, 10]");
  }

  if (const json* t = root.child("train")) {
    Reader r(*t, "train");
    auto& tc = c.train;
    r.read_int("warmup_epochs", tc.warmup_epochs);
    r.read_int("joint_epochs", tc.joint_epochs);
    r.read_int("last_layer_epochs", tc.last_layer_epochs);
    r.read_number("lr_features", tc.lr_features);
    r.read_number("lr_prototypes", tc.lr_prototypes);
    r.read_number("lr_head", tc.lr_head);
    r.read_number("lambda_cluster", tc.lambda_cluster);
    r.read_number("lambda_separation", tc.lambda_separation);
    r.read_number("lambda_l1", tc.lambda_l1);
    r.read_int("batch_size", tc.batch_size);
    r.read("augment", tc.augment);
    r.finish();
    try {
      tc.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("train", std::string("config section 'train': ") + e.what());
    }
  }

  if (const json* e = root.child("evaluation")) {
    Reader r(*e, "evaluation");
    auto& ec = c.evaluation;
    r.read_number("percentile", ec.percentile);
    r.read_int("top_k", ec.top_k);
    r.read_number("cosine_threshold", ec.redundancy.cosine_threshold);
    r.read_number("iou_threshold", ec.redundancy.iou_threshold);
    r.read_int("max_images", ec.max_images);
    r.read_int("max_probe_images", ec.max_probe_images);
    if (const json* ts = r.child("transforms")) {
      if (!ts->is_array()) throw ConfigError("evaluation.transforms", "config key 'evaluation.transforms' must be an array");
      ec.transforms.clear();
      for (std::size_t i = 0; i < ts->size(); ++i) {
        Reader tr((*ts)[i], "evaluation.transforms[" + std::to_string(i) + "]");
        std::string kind;
        double value = 0.0;
        tr.read("kind", kind);
        tr.read_number("value", value);
        tr.finish();
        if (kind == "rotate") {
          ec.transforms.push_back(Transform::rotate(value));
        } else if (kind == "center_crop") {
          check(value > 0.0 && value <= 1.0, tr.full("value"), "must be in (0, 1]");
          ec.transforms.push_back(Transform::center_crop(value));
        } else {
          throw ConfigError(tr.full("kind"), "config key '" + tr.full("kind") + "' must be rotate or center_crop");
        }
      }
    }
    r.finish();
    check(ec.percentile >= 0.0 && ec.percentile <= 100.0, "evaluation.percentile", "must be in [0, 100]");
    check(ec.top_k >= 1, "evaluation.top_k", "must be >= 1");
  }

  if (const json* s = root.child("seeds")) {
    Reader r(*s, "seeds");
    r.read_u64("data", c.seeds.data);
    r.read_u64("train", c.seeds.train);
    r.finish();
  }
  root.finish();
  c.train.seed = c.seeds.train;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("<file>", "config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

json to_json(const ExperimentConfig& c) {
  json transforms = json::array();
  for (const auto& t : c.evaluation.transforms) {
    transforms.push_back({{"kind", t.kind == Transform::Kind::rotate ? "rotate" : "center_crop"}, {"value", t.value}});
  }
  const auto& tc = c.train;
  // nlohmann::json objects keep keys sorted, which fixes the byte layout.
  return {{"dataset",
           {{"version", to_string(c.dataset.version)},
            {"n_per_class", c.dataset.n_per_class},
            {"palette", to_string(c.dataset.palette)},
            {"classes", c.dataset.classes},
            {"train_fraction", c.dataset.train_fraction},
            {"noise_count", c.dataset.noise_count}}},
          {"model",
           {{"kind", c.model.kind},
            {"channels", c.model.channels},
            {"per_class_count", c.model.per_class_count},
            {"epsilon", c.model.epsilon},
            {"depth", c.model.depth}}},
          {"train",
           {{"warmup_epochs", tc.warmup_epochs},
            {"joint_epochs", tc.joint_epochs},
            {"last_layer_epochs", tc.last_layer_epochs},
            {"lr_features", tc.lr_features},
            {"lr_prototypes", tc.lr_prototypes},
            {"lr_head", tc.lr_head},
            {"lambda_cluster", tc.lambda_cluster},
            {"lambda_separation", tc.lambda_separation},
            {"lambda_l1", tc.lambda_l1},
            {"batch_size", tc.batch_size},
            {"augment", tc.augment}}},
          {"evaluation",
           {{"percentile", c.evaluation.percentile},
            {"top_k", c.evaluation.top_k},
            {"cosine_threshold", c.evaluation.redundancy.cosine_threshold},
            {"iou_threshold", c.evaluation.redundancy.iou_threshold},
            {"max_images", c.evaluation.max_images},
            {"max_probe_images", c.evaluation.max_probe_images},
            {"transforms", transforms}}},
          {"seeds", {{"data", c.seeds.data}, {"train", c.seeds.train}}}};
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(config).dump())));
  return buf;
}

json run_manifest(const std::string& command, const ExperimentConfig& config, const json& inputs) {
  return {{"tool", "protolab"},
          {"version", kProtolabVersion},
          {"command", command},
          {"config_hash", config_hash(config)},
          {"seeds", {{"data", config.seeds.data}, {"train", config.seeds.train}}},
          {"inputs", inputs},
          {"config", to_json(config)}};
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace protolab
