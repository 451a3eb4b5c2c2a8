#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include "egoground/backend.hpp"
#include "httplib.h"

namespace egoground {

namespace detail {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix, no trailing slash
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::kInvalidInput, "base_url lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl out{url.substr(0, path_start), path_start == std::string::npos ? "" : url.substr(path_start)};
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

inline httplib::Headers auth_headers(const BackendEndpoint& e) {
  httplib::Headers h;
  if (!e.auth_env_var.empty()) {
    if (const char* token = std::getenv(e.auth_env_var.c_str()); token && *token) {
      h.emplace("Authorization", std::string("Bearer ") + token);
    }
  }
  return h;
}

inline nlohmann::json post_json(const BackendEndpoint& e, const nlohmann::json& body) {
  const auto url = split_url(e.base_url);
  httplib::Client cli(url.origin);
  if (!cli.is_valid()) throw Error(ErrorCode::kTransport, "unsupported endpoint " + e.base_url);
  const auto secs = static_cast<time_t>(e.timeout_s);
  const auto usecs = static_cast<time_t>((e.timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  auto res = cli.Post(url.prefix + e.path, auth_headers(e), body.dump(), "application/json");
  if (!res) throw Error(ErrorCode::kTransport, e.base_url + ": " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw Error(ErrorCode::kTransport, e.base_url + ": HTTP " + std::to_string(res->status));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::kTransport, e.base_url + ": unparseable body: " + ex.what());
  }
}

}  // namespace detail

/// Chat wire: POST {"model", "messages":[{"role","content","image_ref"?,...}]}.
/// Accepts either {"text": "..."} or {"choices":[{"message":{"content":"..."}}]}.
class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(BackendEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

  std::string complete(const std::vector<Message>& messages) override {
    nlohmann::json body = {{"messages", messages}};
    if (!endpoint_.model.empty()) body["model"] = endpoint_.model;
    const auto reply = detail::post_json(endpoint_, body);
    if (reply.contains("text") && reply["text"].is_string()) return reply["text"].get<std::string>();
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::kTransport, endpoint_.base_url + ": reply has no text");
    }
  }

 private:
  BackendEndpoint endpoint_;
};

/// Detector wire: POST {"image_ref", "prompt"} -> {"detections":[...]}.
class HttpDetectorBackend : public DetectorBackend {
 public:
  explicit HttpDetectorBackend(BackendEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

  DetectorResult detect(const std::string& image_ref, const std::string& prompt) override {
    return parse_detector_response(
        detail::post_json(endpoint_, {{"image_ref", image_ref}, {"prompt", prompt}}));
  }

 private:
  BackendEndpoint endpoint_;
};

/// Builds a chat backend (HTTP or scripted) wrapped with the endpoint's retry policy.
inline std::shared_ptr<ChatBackend> make_chat_backend(const BackendEndpoint& e, const std::string& name,
                                                      std::shared_ptr<AuditLog> audit = nullptr,
                                                      Sleeper sleep = real_sleeper()) {
  std::shared_ptr<ChatBackend> inner;
  if (e.is_mock()) {
    inner = std::make_shared<ScriptedChatBackend>(std::make_shared<Transcript>(Transcript::load(e.mock_path())));
  } else {
    inner = std::make_shared<HttpChatBackend>(e);
  }
  return std::make_shared<RetryingChatBackend>(std::move(inner), e.retry, name, std::move(audit),
                                               std::move(sleep));
}

inline std::shared_ptr<DetectorBackend> make_detector_backend(const BackendEndpoint& e,
                                                              Sleeper sleep = real_sleeper()) {
  std::shared_ptr<DetectorBackend> inner;
  if (e.is_mock()) {
    inner = std::make_shared<ScriptedDetectorBackend>(
        std::make_shared<Transcript>(Transcript::load(e.mock_path())));
  } else {
    inner = std::make_shared<HttpDetectorBackend>(e);
  }
  return std::make_shared<RetryingDetectorBackend>(std::move(inner), e.retry, std::move(sleep));
}

}  // namespace egoground
