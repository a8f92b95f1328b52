#include "protolab/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace protolab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'L', 'W', '1'};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("weights blob truncated");
  return v;
}

template <typename T>
void put_array(std::ostream& out, const std::vector<T>& v) {
  put<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> get_array(std::istream& in, std::size_t expected) {
  const auto n = get<std::uint64_t>(in);
  if (n != expected) {
    throw CheckpointError("weights blob: expected " + std::to_string(expected) + " values, found " +
                          std::to_string(n));
  }
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw CheckpointError("weights blob truncated");
  return v;
}

void write_weights(const fs::path& path, const FeatureExtractor& fx, const std::vector<double>& tail) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(fx.layers().size()));
  for (const auto& layer : fx.layers()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.in_channels));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.out_channels));
    put_array(out, layer.weight);
    put_array(out, layer.bias);
  }
  put_array(out, tail);
}

std::vector<double> read_weights(const fs::path& path, FeatureExtractor& fx, std::size_t tail_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("weights blob: bad magic");
  const auto n_layers = get<std::uint32_t>(in);
  if (n_layers != fx.layers().size()) throw CheckpointError("weights blob: layer count mismatch");
  for (auto& layer : fx.layers()) {
    const auto in_ch = get<std::uint32_t>(in);
    const auto out_ch = get<std::uint32_t>(in);
    if (static_cast<int>(in_ch) != layer.in_channels || static_cast<int>(out_ch) != layer.out_channels) {
      throw CheckpointError("weights blob: layer shape mismatch");
    }
    layer.weight = get_array<float>(in, layer.weight.size());
    layer.bias = get_array<float>(in, layer.bias.size());
  }
  return get_array<double>(in, tail_size);
}

json extractor_json(const ExtractorConfig& c) {
  return {{"channels", c.channels}, {"input_size", c.input_size}};
}

ExtractorConfig extractor_from_json(const json& j) {
  ExtractorConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.input_size = j.at("input_size").get<int>();
  return c;
}

json prototypes_json(const PrototypeModel& model, const Dataset* stats_data) {
  const auto& protos = model.prototypes();
  std::vector<double> sum(protos.size(), 0.0), mx(protos.size(), 0.0);
  std::size_t n = 0;
  if (stats_data) {
    for (const auto& s : stats_data->samples) {
      const auto act = model.activations(model.encode(s.image));
      for (std::size_t k = 0; k < protos.size(); ++k) {
        sum[k] += act.pooled_similarity[k];
        mx[k] = n == 0 ? act.pooled_similarity[k] : std::max(mx[k], act.pooled_similarity[k]);
      }
      ++n;
    }
  }
  json arr = json::array();
  for (std::size_t k = 0; k < protos.size(); ++k) {
    const auto& p = protos[k];
    json j{{"id", p.id}, {"class", p.class_id}, {"vector", p.vector}};
    if (p.source) {
      j["source"] = {{"image_id", p.source->image_id}, {"row", p.source->row}, {"col", p.source->col}};
    } else {
      j["source"] = nullptr;
    }
    if (n > 0) {
      j["pooled_stats"] = {{"images", n}, {"mean", sum[k] / static_cast<double>(n)}, {"max", mx[k]}};
    } else {
      j["pooled_stats"] = nullptr;
    }
    arr.push_back(std::move(j));
  }
  return {{"prototypes", arr}};
}

void load_prototypes(const json& j, std::vector<Prototype>& protos, std::size_t depth) {
  const auto& arr = j.at("prototypes");
  if (arr.size() != protos.size()) throw CheckpointError("prototypes.json: prototype count mismatch");
  for (std::size_t k = 0; k < protos.size(); ++k) {
    const auto& e = arr[k];
    Prototype p;
    p.id = e.at("id").get<int>();
    p.class_id = e.at("class").get<int>();
    p.vector = e.at("vector").get<std::vector<double>>();
    if (p.vector.size() != depth) throw CheckpointError("prototypes.json: vector length mismatch");
    if (e.contains("source") && !e["source"].is_null()) {
      p.source = PrototypeSource{e["source"].at("image_id").get<std::string>(), e["source"].at("row").get<int>(),
                                 e["source"].at("col").get<int>()};
    }
    protos[k] = std::move(p);
  }
}

}  // namespace

std::string to_string(ModelKind kind) { return kind == ModelKind::protopnet ? "protopnet" : "prototree"; }

void save_checkpoint(const fs::path& dir, const ProtoPNet& model, const Dataset* stats_data) {
  fs::create_directories(dir);
  const auto& c = model.config();
  write_json(dir / "config.json", {{"kind", "protopnet"},
                                   {"extractor", extractor_json(c.extractor)},
                                   {"num_classes", c.num_classes},
                                   {"per_class_count", c.layer.per_class_count},
                                   {"epsilon", c.layer.epsilon}});
  write_weights(dir / "weights.bin", model.extractor(), model.head());
  write_json(dir / "prototypes.json", prototypes_json(model, stats_data));
}

void save_checkpoint(const fs::path& dir, const ProtoTree& tree, const Dataset* stats_data) {
  fs::create_directories(dir);
  const auto& c = tree.config();
  write_json(dir / "config.json", {{"kind", "prototree"},
                                   {"extractor", extractor_json(c.extractor)},
                                   {"num_classes", c.num_classes},
                                   {"depth", c.depth},
                                   {"epsilon", c.epsilon}});
  std::vector<double> leaves;
  for (const auto& row : tree.leaf_logits()) leaves.insert(leaves.end(), row.begin(), row.end());
  write_weights(dir / "weights.bin", tree.extractor(), leaves);
  write_json(dir / "prototypes.json", prototypes_json(tree, stats_data));

  json nodes = json::array();
  for (int n = 0; n < tree.num_internal(); ++n) {
    nodes.push_back({{"node", n}, {"prototype", tree.prototypes()[n].id}, {"left", 2 * n + 1}, {"right", 2 * n + 2}});
  }
  json leaf_arr = json::array();
  for (int l = 0; l < tree.num_leaves(); ++l) {
    leaf_arr.push_back({{"leaf", l}, {"node", tree.num_internal() + l}, {"distribution", tree.leaf_distribution(l)}});
  }
  write_json(dir / "tree.json", {{"depth", c.depth}, {"nodes", nodes}, {"leaves", leaf_arr}});
}

ModelKind checkpoint_kind(const fs::path& dir) {
  const auto cfg = read_json(dir / "config.json");
  const auto kind = cfg.value("kind", std::string{});
  if (kind == "protopnet") return ModelKind::protopnet;
  if (kind == "prototree") return ModelKind::prototree;
  throw CheckpointError("config.json: unknown model kind '" + kind + "'");
}

ProtoPNet load_protopnet(const fs::path& dir) {
  const auto cfg = read_json(dir / "config.json");
  if (cfg.value("kind", std::string{}) != "protopnet") throw CheckpointError("not a protopnet checkpoint");
  try {
    ProtoPNetConfig c;
    c.extractor = extractor_from_json(cfg.at("extractor"));
    c.num_classes = cfg.at("num_classes").get<int>();
    c.layer.per_class_count = cfg.at("per_class_count").get<int>();
    c.layer.epsilon = cfg.at("epsilon").get<double>();
    ProtoPNet model(c, 0);
    model.head() = read_weights(dir / "weights.bin", model.mutable_extractor(), model.head().size());
    load_prototypes(read_json(dir / "prototypes.json"), model.mutable_prototypes(),
                    static_cast<std::size_t>(model.extractor().latent_depth()));
    return model;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

ProtoTree load_prototree(const fs::path& dir) {
  const auto cfg = read_json(dir / "config.json");
  if (cfg.value("kind", std::string{}) != "prototree") throw CheckpointError("not a prototree checkpoint");
  try {
    ProtoTreeConfig c;
    c.extractor = extractor_from_json(cfg.at("extractor"));
    c.num_classes = cfg.at("num_classes").get<int>();
    c.depth = cfg.at("depth").get<int>();
    c.epsilon = cfg.at("epsilon").get<double>();
    ProtoTree tree(c, 0);
    const auto leaves = read_weights(dir / "weights.bin", tree.mutable_extractor(),
                                     static_cast<std::size_t>(tree.num_leaves() * c.num_classes));
    for (int l = 0; l < tree.num_leaves(); ++l) {
      std::copy_n(leaves.begin() + l * c.num_classes, c.num_classes, tree.leaf_logits()[l].begin());
    }
    load_prototypes(read_json(dir / "prototypes.json"), tree.mutable_prototypes(),
                    static_cast<std::size_t>(tree.extractor().latent_depth()));
    return tree;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace protolab
