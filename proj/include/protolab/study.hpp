#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace protolab {

// Errors carry the HTTP status the service maps them to.
class StudyError : public std::runtime_error {
 public:
  StudyError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct StudyPrototype {
  std::string id;
  std::string image;  // file name under the items' assets directory
};

struct StudyItem {
  std::string id;
  int experiment = 1;  // 1: guess the class, 2: rate prototypes
  std::string method;  // protopnet | prototree
  int true_class = 0;
  std::vector<int> candidates;  // experiment 1 only
  std::vector<StudyPrototype> prototypes;
};

struct StudyItems {
  std::vector<std::string> class_names;
  std::vector<StudyItem> items;

  const StudyItem* find(const std::string& id) const;
  // Candidates contain the true class exactly once, ids are unique, every
  // item has at least one prototype.
  void validate() const;
};

StudyItems load_study_items(const std::filesystem::path& dir);  // DIR/items.json
void save_study_items(const std::filesystem::path& dir, const StudyItems& items);
nlohmann::json to_json(const StudyItems& items);
StudyItems study_items_from_json(const nlohmann::json& j);

enum class RedundancyAnswer { redundant, non_redundant, not_meaningful };
std::string to_string(RedundancyAnswer a);
RedundancyAnswer redundancy_answer_from_string(const std::string& s);

struct Rating {
  std::string prototype;
  bool useful = false;
  RedundancyAnswer redundancy = RedundancyAnswer::non_redundant;
};

struct StudyResponse {
  std::string session;
  std::string user;
  std::string item;
  std::string method;
  int experiment = 1;
  std::string timestamp;
  std::optional<int> guess;
  bool correct = false;
  std::vector<Rating> ratings;
};

nlohmann::json to_json(const StudyResponse& r);
StudyResponse study_response_from_json(const nlohmann::json& j);

struct PrototypeAgreement {
  std::string method;
  std::string item;
  std::string prototype;
  int raters = 0;
  double useful = 0.0;         // share of raters marking it useful
  double non_redundant = 0.0;  // two-way collapse: not_meaningful counts as non-redundant
  int redundant_votes = 0;
  int non_redundant_votes = 0;
  int not_meaningful_votes = 0;
};

struct MethodStats {
  int guesses = 0;
  int correct = 0;
  double accuracy = 0.0;
  int prototypes = 0;
  double totally_useful = 0.0;         // share of prototypes every rater found useful
  double totally_non_redundant = 0.0;  // same for non-redundant (two-way)
  std::vector<int> useful_histogram;   // 10 bins over per-prototype agreement
  std::vector<int> non_redundant_histogram;
};

struct StudyStats {
  std::map<std::string, MethodStats> methods;
  std::vector<PrototypeAgreement> prototypes;
};

inline constexpr int kStudyHistogramBins = 10;
StudyStats compute_stats(const std::vector<StudyResponse>& responses);
nlohmann::json to_json(const StudyStats& stats);

struct StudyConfig {
  int max_items_per_experiment = 0;  // per session, 0 = all
};

// Session bookkeeping plus an append-only NDJSON log. Every state change is
// written and flushed before it is acknowledged; constructing the service on
// an existing log replays it.
class StudyService {
 public:
  using Clock = std::function<std::string()>;

  StudyService(StudyItems items, std::filesystem::path log_path, StudyConfig config = {}, Clock clock = {});

  // Returns the new session id. An empty `session_id` picks the next free one.
  std::string create_session(const std::string& user, std::uint64_t seed, const std::string& session_id = "");
  // Payload for the next unanswered item, or {"done": true}.
  nlohmann::json next_item(const std::string& session);
  // Validates against the currently served item, appends to the log, returns the ack.
  nlohmann::json submit_response(const std::string& session, const nlohmann::json& body);

  std::vector<StudyResponse> responses() const;
  StudyStats stats() const;
  const StudyItems& items() const { return items_; }
  std::vector<std::string> session_order(const std::string& session) const;

  // Reads every response record back from a log file.
  static std::vector<StudyResponse> read_log(const std::filesystem::path& path);

 private:
  struct Session {
    std::string user;
    std::uint64_t seed = 0;
    std::vector<std::string> order;
    std::map<std::string, bool> answered;
  };

  std::vector<std::string> make_order(std::uint64_t seed) const;
  void append(const nlohmann::json& record);
  void replay();
  Session& session_or_throw(const std::string& id);

  StudyItems items_;
  std::filesystem::path log_path_;
  StudyConfig config_;
  Clock clock_;
  std::map<std::string, Session> sessions_;
  std::vector<StudyResponse> responses_;
  mutable std::mutex mutex_;
};

}  // namespace protolab
