#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "protolab/protopnet.hpp"
#include "protolab/prototree.hpp"

namespace protolab {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { protopnet, prototree };
std::string to_string(ModelKind kind);

// Layout of a checkpoint directory:
//   config.json      model kind and architecture
//   weights.bin      "PLW1" blob: conv layers as float32, then the head / leaf
//                    logits as float64
//   prototypes.json  id, class, vector, source and pooled stats per prototype
//   tree.json        trees only: node -> prototype id, leaf distributions
// `stats_data`, when given, fills the pooled-similarity stats.
void save_checkpoint(const std::filesystem::path& dir, const ProtoPNet& model,
                     const Dataset* stats_data = nullptr);
void save_checkpoint(const std::filesystem::path& dir, const ProtoTree& tree,
                     const Dataset* stats_data = nullptr);

ModelKind checkpoint_kind(const std::filesystem::path& dir);
ProtoPNet load_protopnet(const std::filesystem::path& dir);
ProtoTree load_prototree(const std::filesystem::path& dir);

}  // namespace protolab
