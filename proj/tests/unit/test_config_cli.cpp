#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "protolab/checkpoint.hpp"
#include "protolab/cli.hpp"
#include "protolab/config.hpp"

using namespace protolab;
using nlohmann::json;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "protolab");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json tiny_config() {
  return {{"dataset", {{"version", "V2"}, {"n_per_class", 4}}},
          {"model", {{"channels", {4, 6, 8, 8}}, {"per_class_count", 2}}},
          {"train", {{"warmup_epochs", 1}, {"joint_epochs", 1}, {"last_layer_epochs", 1}}},
          {"evaluation", {{"max_images", 2}, {"max_probe_images", 2}}},
          {"seeds", {{"data", 3}, {"train", 4}}}};
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const auto c = config_from_json(json::object());
  CHECK(c.model.kind == "protopnet");
  CHECK(c.model.per_class_count == 2);
  CHECK(c.dataset.version == DatasetVersion::V2);

  const auto t = config_from_json(tiny_config());
  CHECK(t.dataset.n_per_class == 4);
  CHECK(t.model.channels == std::vector<int>{4, 6, 8, 8});
  CHECK(t.train.seed == 4);
  CHECK(t.seeds.data == 3);
  CHECK(config_from_json(to_json(t)).train.joint_epochs == 1);
  CHECK(to_json(config_from_json(to_json(t))) == to_json(t));
}

TEST_CASE("unknown keys and wrong types name the key") {
  auto expect_key = [](const json& j, const std::string& key) {
    try {
      config_from_json(j);
      FAIL("accepted " << j.dump());
    } catch (const ConfigError& e) {
      CHECK(e.key() == key);
      CHECK(std::string(e.what()).find(key) != std::string::npos);
    }
  };
  expect_key({{"trian", json::object()}}, "trian");
  expect_key({{"train", {{"warmup", 3}}}}, "train.warmup");
  expect_key({{"model", {{"depth", "two"}}}}, "model.depth");
  expect_key({{"dataset", {{"version", "V9"}}}}, "dataset.version");
  expect_key({{"seeds", {{"data", -1}}}}, "seeds.data");
  expect_key({{"evaluation", {{"transforms", {{{"kind", "shear"}, {"value", 1}}}}}}},
             "evaluation.transforms[0].kind");
}

TEST_CASE("config hash") {
  const auto a = config_from_json(tiny_config());
  const auto b = config_from_json(tiny_config());
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  auto j = tiny_config();
  j["seeds"]["train"] = 5;
  CHECK(config_hash(config_from_json(j)) != config_hash(a));
  // Standard FNV-1a 64 test vectors.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("CLI errors are machine readable") {
  auto r = cli({"train", "--out", "x"});
  CHECK(r.code == 2);
  CHECK(json::parse(r.err)["error"]["type"] == "usage_error");

  r = cli({"frobnicate"});
  CHECK(r.code == 2);

  const auto dir = testing::scratch_dir("cli_errors");
  std::ofstream(dir / "bad.json") << R"({"train": {"joint_epochz": 1}})";
  r = cli({"generate-data", "--out", (dir / "d").string(), "--config", (dir / "bad.json").string()});
  CHECK(r.code == 1);
  const auto e = json::parse(r.err)["error"];
  CHECK(e["type"] == "config_error");
  CHECK(e["key"] == "train.joint_epochz");

  r = cli({"train", "--data", (dir / "missing").string(), "--out", (dir / "m").string()});
  CHECK(r.code == 1);
  CHECK(json::parse(r.err)["error"]["type"] == "runtime_error");
}

TEST_CASE("generate, train, evaluate end to end is reproducible") {
  const auto dir = testing::scratch_dir("cli_e2e");
  std::ofstream(dir / "config.json") << tiny_config().dump(2);
  const auto cfg = (dir / "config.json").string();

  auto r = cli({"generate-data", "--out", (dir / "data").string(), "--config", cfg});
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(dir / "data" / "manifest.json"));
  CHECK(read_dataset(dir / "data").samples.size() == 12);

  r = cli({"train", "--data", (dir / "data").string(), "--config", cfg, "--out", (dir / "model").string()});
  REQUIRE(r.code == 0);
  for (const char* f : {"config.json", "weights.bin", "prototypes.json", "manifest.json", "history.json", "metrics.json"}) {
    CHECK(std::filesystem::exists(dir / "model" / f));
  }
  const auto manifest = json::parse(slurp(dir / "model" / "manifest.json"));
  CHECK(manifest["config_hash"] == config_hash(config_from_json(tiny_config())));

  for (const char* name : {"report1.json", "report2.json"}) {
    r = cli({"evaluate", "--model", (dir / "model").string(), "--data", (dir / "data").string(), "--config", cfg,
             "--out", (dir / name).string()});
    REQUIRE(r.code == 0);
  }
  CHECK(slurp(dir / "report1.json") == slurp(dir / "report2.json"));
  CHECK(json::parse(slurp(dir / "report1.json"))["schema_version"] == 1);

  // Retraining from scratch gives the same checkpoint bytes.
  r = cli({"train", "--data", (dir / "data").string(), "--config", cfg, "--out", (dir / "model2").string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(dir / "model" / "weights.bin") == slurp(dir / "model2" / "weights.bin"));
  CHECK(slurp(dir / "model" / "manifest.json") == slurp(dir / "model2" / "manifest.json"));

  r = cli({"explain", "--model", (dir / "model").string(), "--image",
           (dir / "data" / "images" / (read_dataset(dir / "data").samples[0].id + ".png")).string(), "--prototype", "1",
           "--backend", "prp", "--data", (dir / "data").string(), "--out", (dir / "explain.png").string()});
  CHECK(r.code == 0);
  CHECK(std::filesystem::exists(dir / "explain.png"));
  CHECK(std::filesystem::exists(dir / "explain.json"));
}
