#include "protolab/study.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <random>
#include <set>

namespace protolab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int histogram_bin(double fraction) {
  return std::clamp(static_cast<int>(std::floor(fraction * kStudyHistogramBins)), 0, kStudyHistogramBins - 1);
}

}  // namespace

const StudyItem* StudyItems::find(const std::string& id) const {
  for (const auto& item : items) {
    if (item.id == id) return &item;
  }
  return nullptr;
}

void StudyItems::validate() const {
  std::set<std::string> ids;
  const int n_classes = static_cast<int>(class_names.size());
  for (const auto& item : items) {
    if (!ids.insert(item.id).second) throw std::invalid_argument("duplicate item id '" + item.id + "'");
    if (item.experiment != 1 && item.experiment != 2) {
      throw std::invalid_argument("item '" + item.id + "': experiment must be 1 or 2");
    }
    if (item.true_class < 0 || item.true_class >= n_classes) {
      throw std::invalid_argument("item '" + item.id + "': class out of range");
    }
    if (item.prototypes.empty()) throw std::invalid_argument("item '" + item.id + "' has no prototypes");
    std::set<std::string> slots;
    for (const auto& p : item.prototypes) {
      if (!slots.insert(p.id).second) throw std::invalid_argument("item '" + item.id + "': duplicate prototype '" + p.id + "'");
    }
    if (item.experiment == 1) {
      if (std::count(item.candidates.begin(), item.candidates.end(), item.true_class) != 1) {
        throw std::invalid_argument("item '" + item.id + "': candidates must contain the true class exactly once");
      }
      for (int c : item.candidates) {
        if (c < 0 || c >= n_classes) throw std::invalid_argument("item '" + item.id + "': candidate out of range");
      }
    }
  }
}

json to_json(const StudyItems& items) {
  json arr = json::array();
  for (const auto& item : items.items) {
    json protos = json::array();
    for (const auto& p : item.prototypes) protos.push_back({{"id", p.id}, {"image", p.image}});
    json j{{"id", item.id}, {"experiment", item.experiment}, {"method", item.method}, {"class", item.true_class},
           {"prototypes", protos}};
    if (item.experiment == 1) j["candidates"] = item.candidates;
    arr.push_back(std::move(j));
  }
  return {{"schema_version", kSchemaVersion}, {"classes", items.class_names}, {"items", arr}};
}

StudyItems study_items_from_json(const json& j) {
  StudyItems out;
  try {
    out.class_names = j.at("classes").get<std::vector<std::string>>();
    for (const auto& e : j.at("items")) {
      StudyItem item;
      item.id = e.at("id").get<std::string>();
      item.experiment = e.at("experiment").get<int>();
      item.method = e.at("method").get<std::string>();
      item.true_class = e.at("class").get<int>();
      if (e.contains("candidates")) item.candidates = e["candidates"].get<std::vector<int>>();
      for (const auto& p : e.at("prototypes")) {
        item.prototypes.push_back({p.at("id").get<std::string>(), p.at("image").get<std::string>()});
      }
      out.items.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed study items: ") + e.what());
  }
  out.validate();
  return out;
}

StudyItems load_study_items(const fs::path& dir) {
  std::ifstream in(dir / "items.json");
  if (!in) throw std::invalid_argument("cannot open " + (dir / "items.json").string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("items.json: ") + e.what());
  }
  return study_items_from_json(j);
}

void save_study_items(const fs::path& dir, const StudyItems& items) {
  items.validate();
  fs::create_directories(dir / "assets");
  std::ofstream out(dir / "items.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "items.json").string());
  out << to_json(items).dump(2) << '\n';
}

std::string to_string(RedundancyAnswer a) {
  switch (a) {
    case RedundancyAnswer::redundant: return "redundant";
    case RedundancyAnswer::non_redundant: return "non_redundant";
    case RedundancyAnswer::not_meaningful: return "not_meaningful";
  }
  return "?";
}

RedundancyAnswer redundancy_answer_from_string(const std::string& s) {
  if (s == "redundant") return RedundancyAnswer::redundant;
  if (s == "non_redundant") return RedundancyAnswer::non_redundant;
  if (s == "not_meaningful") return RedundancyAnswer::not_meaningful;
  throw std::invalid_argument("unknown redundancy answer '" + s + "'");
}

json to_json(const StudyResponse& r) {
  json j{{"type", "response"}, {"session", r.session}, {"user", r.user}, {"item", r.item},
         {"method", r.method}, {"experiment", r.experiment}, {"timestamp", r.timestamp}};
  if (r.guess) {
    j["guess"] = *r.guess;
    j["correct"] = r.correct;
  }
  if (!r.ratings.empty()) {
    json arr = json::array();
    for (const auto& rt : r.ratings) {
      arr.push_back({{"prototype", rt.prototype}, {"useful", rt.useful}, {"redundancy", to_string(rt.redundancy)}});
    }
    j["ratings"] = arr;
  }
  return j;
}

StudyResponse study_response_from_json(const json& j) {
  StudyResponse r;
  r.session = j.at("session").get<std::string>();
  r.user = j.value("user", std::string{});
  r.item = j.at("item").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.experiment = j.at("experiment").get<int>();
  r.timestamp = j.value("timestamp", std::string{});
  if (j.contains("guess")) {
    r.guess = j["guess"].get<int>();
    r.correct = j.at("correct").get<bool>();
  }
  if (j.contains("ratings")) {
    for (const auto& e : j["ratings"]) {
      r.ratings.push_back({e.at("prototype").get<std::string>(), e.at("useful").get<bool>(),
                           redundancy_answer_from_string(e.at("redundancy").get<std::string>())});
    }
  }
  return r;
}

StudyStats compute_stats(const std::vector<StudyResponse>& responses) {
  if (responses.empty()) throw std::invalid_argument("no study responses to summarize");
  StudyStats stats;
  std::map<std::tuple<std::string, std::string, std::string>, PrototypeAgreement> agree;
  for (const auto& r : responses) {
    auto& m = stats.methods[r.method];
    if (r.guess) {
      ++m.guesses;
      m.correct += r.correct;
    }
    for (const auto& rt : r.ratings) {
      auto& a = agree[{r.method, r.item, rt.prototype}];
      a.method = r.method;
      a.item = r.item;
      a.prototype = rt.prototype;
      ++a.raters;
      a.useful += rt.useful;
      switch (rt.redundancy) {
        case RedundancyAnswer::redundant: ++a.redundant_votes; break;
        case RedundancyAnswer::non_redundant: ++a.non_redundant_votes; break;
        case RedundancyAnswer::not_meaningful: ++a.not_meaningful_votes; break;
      }
    }
  }
  for (auto& [key, a] : agree) {
    a.useful /= a.raters;
    a.non_redundant = static_cast<double>(a.non_redundant_votes + a.not_meaningful_votes) / a.raters;
    auto& m = stats.methods[a.method];
    if (m.useful_histogram.empty()) {
      m.useful_histogram.assign(kStudyHistogramBins, 0);
      m.non_redundant_histogram.assign(kStudyHistogramBins, 0);
    }
    ++m.prototypes;
    m.totally_useful += a.useful == 1.0;
    m.totally_non_redundant += a.non_redundant == 1.0;
    ++m.useful_histogram[histogram_bin(a.useful)];
    ++m.non_redundant_histogram[histogram_bin(a.non_redundant)];
    stats.prototypes.push_back(a);
  }
  for (auto& [name, m] : stats.methods) {
    m.accuracy = m.guesses > 0 ? static_cast<double>(m.correct) / m.guesses : 0.0;
    if (m.prototypes > 0) {
      m.totally_useful /= m.prototypes;
      m.totally_non_redundant /= m.prototypes;
    } else {
      m.useful_histogram.assign(kStudyHistogramBins, 0);
      m.non_redundant_histogram.assign(kStudyHistogramBins, 0);
    }
  }
  return stats;
}

json to_json(const StudyStats& stats) {
  json methods = json::object();
  for (const auto& [name, m] : stats.methods) {
    methods[name] = {{"guesses", m.guesses},
                     {"correct", m.correct},
                     {"accuracy", m.accuracy},
                     {"prototypes", m.prototypes},
                     {"totally_useful", m.totally_useful},
                     {"totally_non_redundant", m.totally_non_redundant},
                     {"useful_histogram", m.useful_histogram},
                     {"non_redundant_histogram", m.non_redundant_histogram}};
  }
  json protos = json::array();
  for (const auto& a : stats.prototypes) {
    protos.push_back({{"method", a.method}, {"item", a.item}, {"prototype", a.prototype}, {"raters", a.raters},
                      {"useful", a.useful}, {"non_redundant", a.non_redundant},
                      {"votes", {{"redundant", a.redundant_votes}, {"non_redundant", a.non_redundant_votes},
                                 {"not_meaningful", a.not_meaningful_votes}}}});
  }
  return {{"schema_version", kSchemaVersion}, {"histogram_bins", kStudyHistogramBins}, {"methods", methods},
          {"prototypes", protos}};
}

StudyService::StudyService(StudyItems items, fs::path log_path, StudyConfig config, Clock clock)
    : items_(std::move(items)), log_path_(std::move(log_path)), config_(config), clock_(std::move(clock)) {
  items_.validate();
  if (!clock_) clock_ = utc_now;
  if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
  replay();
}

std::vector<std::string> StudyService::make_order(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<std::string> order;
  for (int exp : {1, 2}) {
    std::vector<std::string> ids;
    for (const auto& item : items_.items) {
      if (item.experiment == exp) ids.push_back(item.id);
    }
    std::shuffle(ids.begin(), ids.end(), rng);
    if (config_.max_items_per_experiment > 0 && static_cast<int>(ids.size()) > config_.max_items_per_experiment) {
      ids.resize(static_cast<std::size_t>(config_.max_items_per_experiment));
    }
    order.insert(order.end(), ids.begin(), ids.end());
  }
  return order;
}

void StudyService::append(const json& record) {
  std::ofstream out(log_path_, std::ios::app);
  if (!out) throw StudyError(500, "cannot append to study log");
  out << record.dump() << '\n';
  out.flush();
  if (!out) throw StudyError(500, "study log write failed");
}

void StudyService::replay() {
  std::ifstream in(log_path_);
  if (!in) return;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "session") {
        Session s;
        s.user = j.at("user").get<std::string>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.order = j.at("order").get<std::vector<std::string>>();
        sessions_[j.at("session").get<std::string>()] = std::move(s);
      } else if (type == "response") {
        auto r = study_response_from_json(j);
        auto it = sessions_.find(r.session);
        if (it == sessions_.end()) throw std::invalid_argument("response for unknown session " + r.session);
        it->second.answered[r.item] = true;
        responses_.push_back(std::move(r));
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("study log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

StudyService::Session& StudyService::session_or_throw(const std::string& id) {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw StudyError(404, "unknown session '" + id + "'");
  return it->second;
}

std::string StudyService::create_session(const std::string& user, std::uint64_t seed, const std::string& session_id) {
  std::lock_guard lock(mutex_);
  if (user.empty()) throw StudyError(422, "missing field 'user'");
  std::string id = session_id;
  if (id.empty()) {
    for (std::size_t n = sessions_.size() + 1;; ++n) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "s%04zu", n);
      if (!sessions_.contains(buf)) {
        id = buf;
        break;
      }
    }
  } else if (sessions_.contains(id)) {
    throw StudyError(409, "session '" + id + "' already exists");
  }
  Session s{user, seed, make_order(seed), {}};
  append({{"type", "session"}, {"session", id}, {"user", user}, {"seed", seed}, {"order", s.order},
          {"timestamp", clock_()}});
  sessions_[id] = std::move(s);
  return id;
}

namespace {

json progress(std::size_t answered, std::size_t total) { return {{"answered", answered}, {"total", total}}; }

}  // namespace

json StudyService::next_item(const std::string& session) {
  std::lock_guard lock(mutex_);
  const auto& s = session_or_throw(session);
  const auto p = progress(s.answered.size(), s.order.size());
  for (const auto& id : s.order) {
    if (s.answered.contains(id)) continue;
    const auto& item = *items_.find(id);
    json protos = json::array();
    for (std::size_t k = 0; k < item.prototypes.size(); ++k) {
      protos.push_back({{"slot", k}, {"id", item.prototypes[k].id}, {"image", "/assets/" + item.prototypes[k].image}});
    }
    json payload{{"id", item.id}, {"experiment", item.experiment}, {"method", item.method}, {"prototypes", protos}};
    if (item.experiment == 1) {
      json cands = json::array();
      for (int c : item.candidates) cands.push_back({{"id", c}, {"name", items_.class_names[c]}});
      payload["candidates"] = cands;
    } else {
      payload["revealed_class"] = {{"id", item.true_class}, {"name", items_.class_names[item.true_class]}};
    }
    return {{"schema_version", kSchemaVersion}, {"session", session}, {"done", false}, {"progress", p},
            {"item", payload}};
  }
  return {{"schema_version", kSchemaVersion}, {"session", session}, {"done", true}, {"progress", p}};
}

json StudyService::submit_response(const std::string& session, const json& body) {
  std::lock_guard lock(mutex_);
  auto& s = session_or_throw(session);
  if (!body.is_object()) throw StudyError(400, "response body must be a JSON object");
  if (!body.contains("item") || !body["item"].is_string()) throw StudyError(422, "missing field 'item'");
  const auto item_id = body["item"].get<std::string>();
  if (std::find(s.order.begin(), s.order.end(), item_id) == s.order.end()) {
    throw StudyError(422, "item '" + item_id + "' is not part of this session");
  }
  if (s.answered.contains(item_id)) {
    throw StudyError(409, "item '" + item_id + "' already answered in this session");
  }
  for (const auto& id : s.order) {
    if (s.answered.contains(id)) continue;
    if (id != item_id) throw StudyError(422, "item '" + item_id + "' is not the item currently served");
    break;
  }
  const auto& item = *items_.find(item_id);

  StudyResponse r;
  r.session = session;
  r.user = s.user;
  r.item = item.id;
  r.method = item.method;
  r.experiment = item.experiment;
  if (item.experiment == 1) {
    if (!body.contains("guess") || !body["guess"].is_number_integer()) throw StudyError(422, "missing field 'guess'");
    const int guess = body["guess"].get<int>();
    if (std::find(item.candidates.begin(), item.candidates.end(), guess) == item.candidates.end()) {
      throw StudyError(422, "guess " + std::to_string(guess) + " is not one of the candidates");
    }
    r.guess = guess;
    r.correct = guess == item.true_class;
  } else {
    if (!body.contains("ratings") || !body["ratings"].is_array()) throw StudyError(422, "missing field 'ratings'");
    std::map<std::string, json> given;
    for (const auto& e : body["ratings"]) {
      if (!e.is_object() || !e.contains("prototype") || !e["prototype"].is_string()) {
        throw StudyError(422, "every rating needs a 'prototype' field");
      }
      given[e["prototype"].get<std::string>()] = e;
    }
    for (const auto& [slot, e] : given) {
      if (std::none_of(item.prototypes.begin(), item.prototypes.end(),
                       [&](const StudyPrototype& p) { return p.id == slot; })) {
        throw StudyError(422, "rating for unknown prototype '" + slot + "'");
      }
    }
    for (const auto& p : item.prototypes) {
      auto it = given.find(p.id);
      if (it == given.end()) throw StudyError(422, "missing rating for prototype '" + p.id + "'");
      const auto& e = it->second;
      if (!e.contains("useful") || !e["useful"].is_boolean()) {
        throw StudyError(422, "missing rating for prototype '" + p.id + "': field 'useful'");
      }
      if (!e.contains("redundancy") || !e["redundancy"].is_string()) {
        throw StudyError(422, "missing rating for prototype '" + p.id + "': field 'redundancy'");
      }
      Rating rt;
      rt.prototype = p.id;
      rt.useful = e["useful"].get<bool>();
      try {
        rt.redundancy = redundancy_answer_from_string(e["redundancy"].get<std::string>());
      } catch (const std::invalid_argument& err) {
        throw StudyError(422, "prototype '" + p.id + "': " + err.what());
      }
      r.ratings.push_back(rt);
    }
  }
  r.timestamp = clock_();
  append(to_json(r));
  s.answered[item_id] = true;
  responses_.push_back(r);
  return {{"schema_version", kSchemaVersion}, {"accepted", true}, {"session", session}, {"item", item_id},
          {"progress", progress(s.answered.size(), s.order.size())}};
}

std::vector<StudyResponse> StudyService::responses() const {
  std::lock_guard lock(mutex_);
  return responses_;
}

StudyStats StudyService::stats() const { return compute_stats(responses()); }

std::vector<std::string> StudyService::session_order(const std::string& session) const {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) throw StudyError(404, "unknown session '" + session + "'");
  return it->second.order;
}

std::vector<StudyResponse> StudyService::read_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open study log " + path.string());
  std::vector<StudyResponse> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.value("type", std::string{}) == "response") out.push_back(study_response_from_json(j));
  }
  return out;
}

}  // namespace protolab
