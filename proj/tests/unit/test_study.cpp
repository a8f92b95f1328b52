#include <algorithm>
#include <fstream>
#include <set>
#include <thread>

#include "doctest.h"
#include "helpers.hpp"
#include "httplib.h"
#include "protolab/study.hpp"
#include "protolab/study_server.hpp"

using namespace protolab;
using nlohmann::json;

namespace {

// Three classes, one guessing and one rating item per class and method.
StudyItems fixture_items() {
  StudyItems items;
  items.class_names = {"alpha", "beta", "gamma"};
  for (const std::string method : {"protopnet", "prototree"}) {
    for (int c = 0; c < 3; ++c) {
      for (int exp : {1, 2}) {
        StudyItem item;
        item.id = method + "-e" + std::to_string(exp) + "-c" + std::to_string(c);
        item.experiment = exp;
        item.method = method;
        item.true_class = c;
        if (exp == 1) item.candidates = {0, 1, 2};
        item.prototypes = {{"p0", item.id + "-0.png"}, {"p1", item.id + "-1.png"}};
        items.items.push_back(item);
      }
    }
  }
  return items;
}

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

json ratings_for(const json& item, bool useful, const std::string& redundancy) {
  json arr = json::array();
  for (const auto& p : item["prototypes"]) arr.push_back({{"prototype", p["id"]}, {"useful", useful}, {"redundancy", redundancy}});
  return arr;
}

// Answers every item: guesses the first candidate, rates everything useful.
void answer_all(StudyService& svc, const std::string& session) {
  for (;;) {
    const auto next = svc.next_item(session);
    if (next["done"].get<bool>()) return;
    const auto& item = next["item"];
    if (item["experiment"] == 1) {
      svc.submit_response(session, {{"item", item["id"]}, {"guess", item["candidates"][0]["id"]}});
    } else {
      svc.submit_response(session, {{"item", item["id"]}, {"ratings", ratings_for(item, true, "non_redundant")}});
    }
  }
}

}  // namespace

TEST_CASE("session order: permutation, determinism, guessing first") {
  const auto dir = testing::scratch_dir("study_order");
  StudyService svc(fixture_items(), dir / "log.ndjson", {}, fixed_clock);
  const auto a = svc.create_session("ann", 7);
  const auto b = svc.create_session("bob", 7);
  const auto c = svc.create_session("cy", 8);
  CHECK(a == "s0001");
  CHECK(svc.session_order(a) == svc.session_order(b));

  std::set<std::string> all;
  for (const auto& item : svc.items().items) all.insert(item.id);
  for (const auto& s : {a, c}) {
    const auto order = svc.session_order(s);
    CHECK(std::set<std::string>(order.begin(), order.end()) == all);
    CHECK(order.size() == all.size());
    bool seen_two = false;
    for (const auto& id : order) {
      const int exp = svc.items().find(id)->experiment;
      if (exp == 2) seen_two = true;
      CHECK_FALSE((exp == 1 && seen_two));
    }
  }
  CHECK_THROWS_AS(svc.create_session("dup", 1, a), StudyError);
}

TEST_CASE("empty study completes immediately") {
  const auto dir = testing::scratch_dir("study_empty");
  StudyItems items;
  items.class_names = {"a"};
  StudyService svc(items, dir / "log.ndjson");
  const auto s = svc.create_session("u", 1);
  CHECK(svc.next_item(s)["done"] == true);
}

TEST_CASE("next item never reveals the class of a guessing item and never repeats") {
  const auto dir = testing::scratch_dir("study_next");
  StudyService svc(fixture_items(), dir / "log.ndjson", {}, fixed_clock);
  const auto s = svc.create_session("u", 3);
  std::set<std::string> served;
  for (;;) {
    const auto next = svc.next_item(s);
    if (next["done"].get<bool>()) break;
    const auto item = next["item"];
    CHECK(served.insert(item["id"].get<std::string>()).second);
    if (item["experiment"] == 1) {
      CHECK_FALSE(item.contains("revealed_class"));
      CHECK_FALSE(item.contains("class"));
      CHECK_FALSE(item.contains("true_class"));
      svc.submit_response(s, {{"item", item["id"]}, {"guess", 0}});
    } else {
      CHECK(item["revealed_class"].contains("name"));
      svc.submit_response(s, {{"item", item["id"]}, {"ratings", ratings_for(item, false, "redundant")}});
    }
  }
  CHECK(served.size() == 12);
  CHECK_THROWS_AS(svc.next_item("nope"), StudyError);
}

TEST_CASE("submission validation") {
  const auto dir = testing::scratch_dir("study_validate");
  const auto log = dir / "log.ndjson";
  StudyService svc(fixture_items(), log, {}, fixed_clock);
  const auto s = svc.create_session("u", 1);
  const auto first = svc.next_item(s)["item"];
  const auto before = line_count(log);

  svc.submit_response(s, {{"item", first["id"]}, {"guess", 1}});
  CHECK(line_count(log) == before + 1);

  try {
    svc.submit_response(s, {{"item", first["id"]}, {"guess", 1}});
    FAIL("duplicate accepted");
  } catch (const StudyError& e) {
    CHECK(e.status() == 409);
  }
  CHECK(line_count(log) == before + 1);

  // Skip to the rating items.
  for (;;) {
    const auto item = svc.next_item(s)["item"];
    if (item["experiment"] == 2) break;
    svc.submit_response(s, {{"item", item["id"]}, {"guess", 0}});
  }
  const auto rating_item = svc.next_item(s)["item"];
  auto partial = ratings_for(rating_item, true, "redundant");
  partial.erase(1);
  try {
    svc.submit_response(s, {{"item", rating_item["id"]}, {"ratings", partial}});
    FAIL("incomplete ratings accepted");
  } catch (const StudyError& e) {
    CHECK(e.status() == 422);
    CHECK(std::string(e.what()).find("missing rating for prototype 'p1'") != std::string::npos);
  }
  try {
    svc.submit_response("nope", {{"item", "x"}});
    FAIL("unknown session accepted");
  } catch (const StudyError& e) {
    CHECK(e.status() == 404);
  }
}

TEST_CASE("stats against a hand count") {
  std::vector<StudyResponse> rs;
  auto guess = [&](const std::string& method, bool correct) {
    StudyResponse r;
    r.method = method;
    r.experiment = 1;
    r.guess = 0;
    r.correct = correct;
    rs.push_back(r);
  };
  auto rate = [&](const std::string& user, const std::string& item, std::vector<Rating> ratings) {
    StudyResponse r;
    r.user = user;
    r.method = "protopnet";
    r.item = item;
    r.experiment = 2;
    r.ratings = std::move(ratings);
    rs.push_back(r);
  };
  guess("protopnet", true);
  guess("protopnet", true);
  guess("prototree", true);
  guess("prototree", false);
  using RA = RedundancyAnswer;
  rate("u1", "i", {{"a", true, RA::redundant}, {"b", true, RA::non_redundant}});
  rate("u2", "i", {{"a", false, RA::redundant}, {"b", true, RA::not_meaningful}});

  const auto st = compute_stats(rs);
  CHECK(st.methods.at("protopnet").accuracy == 1.0);
  CHECK(st.methods.at("prototree").accuracy == 0.5);
  const auto& m = st.methods.at("protopnet");
  CHECK(m.prototypes == 2);
  // "a": useful 1/2, non-redundant 0/2. "b": useful 2/2, non-redundant 2/2 after the collapse.
  CHECK(m.totally_useful == 0.5);
  CHECK(m.totally_non_redundant == 0.5);
  REQUIRE(m.useful_histogram.size() == 10);
  CHECK(m.useful_histogram[5] == 1);
  CHECK(m.useful_histogram[9] == 1);
  CHECK(m.non_redundant_histogram[0] == 1);
  CHECK(m.non_redundant_histogram[9] == 1);
  int total = 0;
  for (int v : m.useful_histogram) total += v;
  CHECK(total == m.prototypes);
  for (const auto& a : st.prototypes) {
    if (a.prototype == "a") {
      CHECK(a.useful == 0.5);
      CHECK(a.raters == 2);
    }
  }
  CHECK(st.methods.at("prototree").prototypes == 0);
  CHECK_THROWS(compute_stats({}));
}

TEST_CASE("replaying the log reproduces the stats") {
  const auto dir = testing::scratch_dir("study_replay");
  const auto log = dir / "log.ndjson";
  json first;
  {
    StudyService svc(fixture_items(), log, {}, fixed_clock);
    answer_all(svc, svc.create_session("u1", 1));
    const auto s2 = svc.create_session("u2", 2);
    svc.submit_response(s2, {{"item", svc.next_item(s2)["item"]["id"]}, {"guess", 2}});
    first = to_json(svc.stats());
  }
  StudyService again(fixture_items(), log, {}, fixed_clock);
  CHECK(to_json(again.stats()) == first);
  CHECK(to_json(compute_stats(StudyService::read_log(log))) == first);
  // The half-done session continues where it stopped.
  CHECK(again.next_item("s0002")["progress"]["answered"] == 1);
  CHECK(again.next_item("s0001")["done"] == true);
}

TEST_CASE("per-session item cap") {
  const auto dir = testing::scratch_dir("study_cap");
  StudyConfig cfg;
  cfg.max_items_per_experiment = 2;
  StudyService svc(fixture_items(), dir / "log.ndjson", cfg);
  CHECK(svc.session_order(svc.create_session("u", 5)).size() == 4);
}

TEST_CASE("items validation and round trip") {
  auto items = fixture_items();
  const auto back = study_items_from_json(to_json(items));
  CHECK(back.items.size() == items.items.size());
  CHECK(back.items[0].candidates == items.items[0].candidates);
  items.items[0].candidates = {1, 2};
  CHECK_THROWS(items.validate());
}

TEST_CASE("HTTP round trip") {
  const auto dir = testing::scratch_dir("study_http");
  std::filesystem::create_directories(dir / "assets");
  std::ofstream(dir / "assets" / "protopnet-e1-c0-0.png") << "png-bytes";
  StudyService svc(fixture_items(), dir / "log.ndjson", {}, fixed_clock);
  StudyServer server(svc, dir / "assets");
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto stats0 = cli.Get("/stats");
  REQUIRE(stats0);
  CHECK(stats0->status == 404);

  auto created = cli.Post("/sessions", R"({"user": "web", "seed": 4})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const auto sid = json::parse(created->body)["session"].get<std::string>();
  CHECK(created->get_header_value("Access-Control-Allow-Origin") == "*");

  auto bad = cli.Post("/sessions", R"({"seed": 4})", "application/json");
  CHECK(bad->status == 422);
  CHECK(cli.Get("/sessions/zzz/next")->status == 404);

  int answered = 0;
  for (;;) {
    auto res = cli.Get("/sessions/" + sid + "/next");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto next = json::parse(res->body);
    if (next["done"].get<bool>()) break;
    const auto item = next["item"];
    json body{{"item", item["id"]}};
    if (item["experiment"] == 1) {
      CHECK(res->body.find("\"class\"") == std::string::npos);
      CHECK(res->body.find("revealed") == std::string::npos);
      body["guess"] = item["candidates"][1]["id"];
    } else {
      body["ratings"] = ratings_for(item, answered % 2 == 0, "not_meaningful");
    }
    auto posted = cli.Post("/sessions/" + sid + "/responses", body.dump(), "application/json");
    REQUIRE(posted);
    CHECK(posted->status == 201);
    if (answered == 0) {
      auto dup = cli.Post("/sessions/" + sid + "/responses", body.dump(), "application/json");
      CHECK(dup->status == 409);
    }
    ++answered;
  }
  CHECK(answered == 12);

  auto stats = cli.Get("/stats");
  REQUIRE(stats);
  CHECK(stats->status == 200);
  CHECK(json::parse(stats->body) == to_json(svc.stats()));

  auto asset = cli.Get("/assets/protopnet-e1-c0-0.png");
  REQUIRE(asset);
  CHECK(asset->status == 200);
  CHECK(asset->body == "png-bytes");
  CHECK(cli.Get("/assets/missing.png")->status == 404);

  server.stop();
  th.join();
}
