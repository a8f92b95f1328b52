#include <fstream>

#include "json.hpp"
#include "protolab/shapes.hpp"

namespace protolab {

namespace fs = std::filesystem;
using nlohmann::json;

void write_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");

  json manifest;
  manifest["schema_version"] = 1;
  manifest["version"] = to_string(dataset.version);
  manifest["seed"] = dataset.seed;
  manifest["n_per_class"] = dataset.n_per_class;
  manifest["palette"] = to_string(dataset.palette);
  json comp = json::object();
  for (const auto& [cls, kinds] : dataset.composition) {
    json names = json::array();
    for (auto k : kinds) names.push_back(to_string(k));
    comp[std::to_string(cls)] = names;
  }
  manifest["class_composition"] = comp;

  json samples = json::array();
  for (const auto& s : dataset.samples) {
    const std::string image_rel = "images/" + s.id + ".png";
    write_png(dir / image_rel, s.image);
    json masks = json::array();
    for (std::size_t i = 0; i < s.masks.size(); ++i) {
      const std::string mask_rel =
          "masks/" + s.id + "_" + std::string(to_string(s.masks.kinds[i])) + ".png";
      write_mask_png(dir / mask_rel, s.masks.masks[i]);
      masks.push_back({{"shape", to_string(s.masks.kinds[i])}, {"file", mask_rel}});
    }
    samples.push_back({{"id", s.id},
                       {"image", image_rel},
                       {"label", s.label},
                       {"split", to_string(s.split)},
                       {"background", s.image.background},
                       {"masks", masks}});
  }
  manifest["samples"] = samples;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed dataset manifest: " + std::string(e.what()));
  }

  Dataset ds;
  ds.version = dataset_version_from_string(manifest.at("version").get<std::string>());
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.n_per_class = manifest.value("n_per_class", 0);
  ds.palette = palette_from_string(manifest.value("palette", std::string("training")));
  for (const auto& [key, names] : manifest.at("class_composition").items()) {
    auto& kinds = ds.composition[std::stoi(key)];
    for (const auto& n : names) kinds.insert(shape_kind_from_string(n.get<std::string>()));
  }
  for (const auto& js : manifest.at("samples")) {
    Sample s;
    s.id = js.at("id").get<std::string>();
    s.image = read_png(dir / js.at("image").get<std::string>());
    if (js.contains("background")) s.image.background = js.at("background").get<Rgb>();
    s.label = js.at("label").get<int>();
    s.split = split_from_string(js.at("split").get<std::string>());
    for (const auto& jm : js.at("masks")) {
      s.masks.kinds.push_back(shape_kind_from_string(jm.at("shape").get<std::string>()));
      s.masks.masks.push_back(read_mask_png(dir / jm.at("file").get<std::string>()));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace protolab
