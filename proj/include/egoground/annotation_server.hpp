#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "egoground/annotation.hpp"
#include "httplib.h"

namespace egoground {

inline int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kForbidden: return 403;
    case ErrorCode::kLeaseExpired:
    case ErrorCode::kIllegalTransition: return 409;
    case ErrorCode::kValidation: return 422;
    case ErrorCode::kTransport:
    case ErrorCode::kCheckerFormat: return 502;
    default: return 400;
  }
}

/// JSON-over-HTTP front for an AnnotationService.
///
///   GET  /tasks/next?kind=&annotator=   200 task | 204
///   POST /tasks/{id}/decision           200 task | 403 | 404 | 409 | 422
///   POST /records/{id}/finalize         200 {state, task_id, reason, record}
///   GET  /records/{id}                  200 record | 404
///   GET  /stats                         200 pass rates and task counts
///   GET  /manifest                      200 finalized records as JSONL
///   GET  /images/{path}                 static files under image_root
///
/// The annotator may also be given in the X-Annotator-Id header.
class AnnotationServer {
 public:
  using FinalizeHook = std::function<void(const FinalizeResult&)>;

  AnnotationServer(AnnotationService& service, std::filesystem::path image_root = {}, FinalizeHook on_finalize = {})
      : service_(service), on_finalize_(std::move(on_finalize)) {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type, X-Annotator-Id"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    if (!image_root.empty() && !server_.set_mount_point("/images", image_root.string())) {
      throw Error(ErrorCode::kInvalidInput, "image root " + image_root.string() + " is not a directory");
    }
    routes();
  }

  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::kTransport, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Blocks until stop() is called.
  bool listen() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg) {
    send_json(res, status, {{"error", code}, {"message", msg}});
  }

  template <typename Fn>
  static void guarded(httplib::Response& res, Fn&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      send_error(res, http_status_for(e.code()), std::string(to_string(e.code())), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "bad_request", e.what());
    }
  }

  static std::string annotator_of(const httplib::Request& req) {
    if (req.has_param("annotator")) return req.get_param_value("annotator");
    return req.get_header_value("X-Annotator-Id");
  }

  void routes() {
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/tasks/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto annotator = annotator_of(req);
        if (annotator.empty()) throw Error(ErrorCode::kInvalidInput, "annotator is required");
        std::optional<TaskKind> kind;
        if (req.has_param("kind") && !req.get_param_value("kind").empty()) {
          kind = parse_task_kind(req.get_param_value("kind"));
        }
        const auto task = service_.lease_task(annotator, kind);
        if (!task) {
          res.status = 204;
          return;
        }
        send_json(res, 200, *task);
      });
    });

    server_.Post(R"(/tasks/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        auto d = nlohmann::json::parse(req.body).get<Decision>();
        if (d.annotator_id.empty()) d.annotator_id = req.get_header_value("X-Annotator-Id");
        send_json(res, 200, service_.submit_decision(req.matches[1].str(), std::move(d)));
      });
    });

    server_.Post(R"(/records/([^/]+)/finalize)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto r = service_.finalize(req.matches[1].str());
        if (on_finalize_ && r.state != FinalizeState::kPending) on_finalize_(r);
        send_json(res, 200,
                  {{"state", to_string(r.state)},
                   {"task_id", r.task_id},
                   {"reason", r.reason},
                   {"record", r.record ? nlohmann::json(*r.record) : nlohmann::json()}});
      });
    });

    server_.Get(R"(/records/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto r = service_.record(req.matches[1].str());
        if (!r) throw Error(ErrorCode::kNotFound, "no finalized record " + req.matches[1].str());
        send_json(res, 200, *r);
      });
    });

    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, service_.stats()); });
    });

    server_.Get("/manifest", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        std::ostringstream os;
        write_manifest(os, service_.manifest());
        res.set_content(os.str(), "application/x-ndjson");
      });
    });
  }

  AnnotationService& service_;
  FinalizeHook on_finalize_;
  httplib::Server server_;
};

}  // namespace egoground
