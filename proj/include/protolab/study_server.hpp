#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "protolab/study.hpp"

namespace protolab {

// HTTP JSON front of a StudyService:
//   POST /sessions                  {"user", "seed", optional "session_id"}
//   GET  /sessions/{id}/next
//   POST /sessions/{id}/responses   {"item", "guess"} or {"item", "ratings": [...]}
//   GET  /stats
//   GET  /assets/{image}
// Errors come back as {"error": message} with the StudyError status.
class StudyServer {
 public:
  StudyServer(StudyService& service, std::filesystem::path assets_dir);
  ~StudyServer();
  StudyServer(const StudyServer&) = delete;
  StudyServer& operator=(const StudyServer&) = delete;

  // Blocking.
  bool listen(const std::string& host, int port);
  // Binds an ephemeral port and returns it; follow with listen_after_bind().
  int bind_to_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace protolab
