#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "protolab/protopnet.hpp"
#include "protolab/prototree.hpp"
#include "protolab/shapes.hpp"

namespace testing {

using namespace protolab;

// Narrow network so unit tests stay fast; same 4-block layout as the default.
inline ExtractorConfig tiny_extractor() {
  ExtractorConfig c;
  c.channels = {4, 6, 8, 8};
  return c;
}

inline ProtoPNetConfig tiny_protopnet(int per_class = 2) {
  ProtoPNetConfig c;
  c.extractor = tiny_extractor();
  c.layer.per_class_count = per_class;
  return c;
}

inline ProtoTreeConfig tiny_tree(int depth = 2) {
  ProtoTreeConfig c;
  c.extractor = tiny_extractor();
  c.depth = depth;
  return c;
}

inline LatentMap random_latent(std::mt19937_64& rng, int h, int w, int d) {
  std::uniform_real_distribution<float> u(0.0f, 2.0f);
  LatentMap z;
  z.height = h;
  z.width = w;
  z.depth = d;
  z.values.resize(static_cast<std::size_t>(h) * w * d);
  for (auto& v : z.values) v = u(rng);
  return z;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, int d, double lo = 0.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(d));
  for (auto& x : v) x = u(rng);
  return v;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("protolab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
