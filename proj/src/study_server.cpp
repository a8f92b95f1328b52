#include "protolab/study_server.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include "httplib.h"

namespace protolab {

using nlohmann::json;

struct StudyServer::Impl {
  StudyService& service;
  std::filesystem::path assets;
  httplib::Server server;

  Impl(StudyService& s, std::filesystem::path dir) : service(s), assets(std::move(dir)) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const StudyError& e) {
    send_json(res, e.status(), {{"error", e.what()}});
  } catch (const json::exception& e) {
    send_json(res, 400, {{"error", std::string("invalid JSON: ") + e.what()}});
  } catch (const std::invalid_argument& e) {
    send_json(res, 422, {{"error", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}});
  }
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  return json::parse(req.body);
}

}  // namespace

StudyServer::StudyServer(StudyService& service, std::filesystem::path assets_dir)
    : impl_(std::make_unique<Impl>(service, std::move(assets_dir))) {
  auto& srv = impl_->server;
  Impl* impl = impl_.get();

  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  srv.Post("/sessions", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = parse_body(req);
      if (!body.is_object()) throw StudyError(400, "request body must be a JSON object");
      if (!body.contains("user") || !body["user"].is_string()) throw StudyError(422, "missing field 'user'");
      std::uint64_t seed = 0;
      if (body.contains("seed")) {
        if (!body["seed"].is_number_unsigned()) throw StudyError(422, "field 'seed' must be a nonnegative integer");
        seed = body["seed"].get<std::uint64_t>();
      }
      const auto id = impl->service.create_session(body["user"].get<std::string>(), seed,
                                                   body.value("session_id", std::string{}));
      send_json(res, 201, {{"schema_version", 1}, {"session", id},
                           {"progress", {{"answered", 0}, {"total", impl->service.session_order(id).size()}}}});
    });
  });

  srv.Get(R"(/sessions/([^/]+)/next)", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, impl->service.next_item(req.matches[1].str())); });
  });

  srv.Post(R"(/sessions/([^/]+)/responses)", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 201, impl->service.submit_response(req.matches[1].str(), parse_body(req))); });
  });

  srv.Get("/stats", [impl](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      const auto responses = impl->service.responses();
      if (responses.empty()) throw StudyError(404, "no responses recorded yet");
      send_json(res, 200, to_json(compute_stats(responses)));
    });
  });

  srv.Get(R"(/assets/([A-Za-z0-9_.\-]+))", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto name = req.matches[1].str();
      if (name.find("..") != std::string::npos) throw StudyError(404, "asset not found");
      std::ifstream in(impl->assets / name, std::ios::binary);
      if (!in) throw StudyError(404, "asset '" + name + "' not found");
      std::ostringstream buf;
      buf << in.rdbuf();
      const bool png = name.size() > 4 && name.substr(name.size() - 4) == ".png";
      res.set_content(buf.str(), png ? "image/png" : "application/octet-stream");
    });
  });
}

StudyServer::~StudyServer() { stop(); }

bool StudyServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int StudyServer::bind_to_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool StudyServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void StudyServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void StudyServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace protolab
