#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "protolab/desiderata.hpp"
#include "protolab/protopnet.hpp"
#include "protolab/prototree.hpp"
#include "protolab/shapes.hpp"

namespace protolab {

inline constexpr const char* kProtolabVersion = "0.1.0";

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct DatasetSpec {
  DatasetVersion version = DatasetVersion::V2;
  int n_per_class = 500;
  Palette palette = Palette::training;
  std::vector<int> classes;
  double train_fraction = 0.8;
  int noise_count = 0;  // > 0 emits a noise dataset instead
};

struct ModelSpec {
  std::string kind = "protopnet";  // protopnet | prototree
  std::vector<int> channels{8, 16, 32, 64};
  int per_class_count = 2;
  double epsilon = 1e-4;
  int depth = 2;
};

struct SeedSpec {
  std::uint64_t data = 1;
  std::uint64_t train = 0;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig train;
  EvaluationConfig evaluation;
  SeedSpec seeds;

  ProtoPNetConfig protopnet_config(int num_classes) const;
  ProtoTreeConfig prototree_config(int num_classes) const;
};

// Missing keys keep their defaults; unknown keys and wrong types throw
// ConfigError naming the offending key (dotted path).
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every field, in a fixed order.
nlohmann::json to_json(const ExperimentConfig& config);

std::uint64_t fnv1a64(const std::string& bytes);
std::string config_hash(const ExperimentConfig& config);  // 16 hex digits

// manifest.json content: command, config (full), its hash, seeds, inputs and
// the tool version. No timestamps, so identical runs give identical files.
nlohmann::json run_manifest(const std::string& command, const ExperimentConfig& config,
                            const nlohmann::json& inputs);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace protolab
