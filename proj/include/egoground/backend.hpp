#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "egoground/dataset.hpp"
#include "egoground/error.hpp"
#include "egoground/geometry.hpp"
#include "json.hpp"

namespace egoground {

/// Image reference attached to a chat message. `mark` outlines the target on
/// the full image; `crop` asks the backend to show only that region.
struct ImageAttachment {
  std::string image_ref;
  std::optional<BBox> mark;
  std::optional<BBox> crop;

  friend bool operator==(const ImageAttachment&, const ImageAttachment&) = default;
};

struct Message {
  std::string role;  // system | user | assistant
  std::string text;
  std::optional<ImageAttachment> image;

  friend bool operator==(const Message&, const Message&) = default;
};

inline void to_json(nlohmann::json& j, const Message& m) {
  j = {{"role", m.role}, {"content", m.text}};
  if (m.image) {
    j["image_ref"] = m.image->image_ref;
    if (m.image->mark) j["image_mark"] = *m.image->mark;
    if (m.image->crop) j["image_crop"] = *m.image->crop;
  }
}

/// Flattened request text used for audit logs and transcript matching.
inline std::string flatten(const std::vector<Message>& messages) {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += '\n';
    out += m.role + ": " + m.text;
    if (m.image) out += " [image: " + m.image->image_ref + "]";
  }
  return out;
}

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Returns the reply text; throws Error{kTransport} when the exchange fails.
  virtual std::string complete(const std::vector<Message>& messages) = 0;
};

struct Detection {
  BBox box;
  std::string phrase;
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Detections ordered by descending score (stable for equal scores).
struct DetectorResult {
  std::vector<Detection> detections;

  void sort() {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
  }
};

inline void to_json(nlohmann::json& j, const Detection& d) {
  j = {{"box", d.box}, {"phrase", d.phrase}, {"score", d.score}};
}

/// Parses {"detections":[{"box":[..],"phrase":"..","score":..}]}. Entries with
/// an invalid box, empty phrase or score outside [0,1] are rejected as a
/// transport-level protocol error.
inline DetectorResult parse_detector_response(const nlohmann::json& body) {
  DetectorResult r;
  try {
    for (const auto& d : body.at("detections")) {
      Detection det{d.at("box").get<BBox>(), d.at("phrase").get<std::string>(), d.at("score").get<double>()};
      if (!det.box.valid() || det.phrase.empty() || !(det.score >= 0.0 && det.score <= 1.0)) {
        throw Error(ErrorCode::kTransport, "detector returned an invalid detection");
      }
      r.detections.push_back(std::move(det));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kTransport, std::string("detector response: ") + e.what());
  }
  r.sort();
  return r;
}

class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;
  virtual DetectorResult detect(const std::string& image_ref, const std::string& prompt) = 0;
};

// ---------------------------------------------------------------------------
// Retry

struct RetryPolicy {
  int max_attempts = 3;  // total attempts, including the first
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds max_delay{5000};
  double jitter = 0.5;  // fraction of the delay added uniformly at random
};

/// Delay before retry number `retry` (0-based): base * 2^retry capped at
/// max_delay, plus up to `jitter` of that.
inline std::chrono::milliseconds backoff_delay(const RetryPolicy& p, int retry, std::mt19937_64& rng) {
  const double base = static_cast<double>(p.base_delay.count()) * std::pow(2.0, retry);
  const double capped = std::min(base, static_cast<double>(p.max_delay.count()));
  std::uniform_real_distribution<double> u(0.0, p.jitter);
  return std::chrono::milliseconds(static_cast<long long>(capped * (1.0 + u(rng))));
}

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Runs `fn`, retrying transport failures with exponential backoff.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, const Sleeper& sleep, Fn&& fn) -> decltype(fn()) {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransport || attempt >= attempts) throw;
      sleep(backoff_delay(policy, attempt - 1, rng));
    }
  }
}

// ---------------------------------------------------------------------------
// Audit log

struct Exchange {
  std::string endpoint;
  std::string request;
  std::string response;
  std::string error;
  double latency_ms = 0.0;
};

/// Thread-safe append-only record of every backend exchange; optionally
/// mirrored to a line-delimited file.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path) : file_(path, std::ios::app) {
    if (!file_) throw Error(ErrorCode::kLoad, "cannot open audit log " + path.string());
  }

  void append(Exchange ex) {
    std::lock_guard lock(mu_);
    if (file_.is_open()) {
      file_ << nlohmann::json{{"endpoint", ex.endpoint},
                              {"request", ex.request},
                              {"response", ex.response},
                              {"error", ex.error},
                              {"latency_ms", ex.latency_ms}}
                   .dump()
            << '\n';
      file_.flush();
    }
    entries_.push_back(std::move(ex));
  }

  std::vector<Exchange> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

 private:
  mutable std::mutex mu_;
  std::ofstream file_;
  std::vector<Exchange> entries_;
};

/// Decorator adding retry and auditing to any chat backend.
class RetryingChatBackend : public ChatBackend {
 public:
  RetryingChatBackend(std::shared_ptr<ChatBackend> inner, RetryPolicy policy, std::string name,
                      std::shared_ptr<AuditLog> audit = nullptr, Sleeper sleep = real_sleeper())
      : inner_(std::move(inner)),
        policy_(policy),
        name_(std::move(name)),
        audit_(std::move(audit)),
        sleep_(std::move(sleep)) {}

  std::string complete(const std::vector<Message>& messages) override {
    return with_retry(policy_, sleep_, [&] {
      const auto start = std::chrono::steady_clock::now();
      Exchange ex{name_, flatten(messages), "", "", 0.0};
      try {
        ex.response = inner_->complete(messages);
      } catch (const Error& e) {
        ex.error = e.what();
        ex.latency_ms = elapsed_ms(start);
        if (audit_) audit_->append(ex);
        throw;
      }
      ex.latency_ms = elapsed_ms(start);
      if (audit_) audit_->append(ex);
      return ex.response;
    });
  }

 private:
  static double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }

  std::shared_ptr<ChatBackend> inner_;
  RetryPolicy policy_;
  std::string name_;
  std::shared_ptr<AuditLog> audit_;
  Sleeper sleep_;
};

class RetryingDetectorBackend : public DetectorBackend {
 public:
  RetryingDetectorBackend(std::shared_ptr<DetectorBackend> inner, RetryPolicy policy,
                          Sleeper sleep = real_sleeper())
      : inner_(std::move(inner)), policy_(policy), sleep_(std::move(sleep)) {}

  DetectorResult detect(const std::string& image_ref, const std::string& prompt) override {
    return with_retry(policy_, sleep_, [&] { return inner_->detect(image_ref, prompt); });
  }

 private:
  std::shared_ptr<DetectorBackend> inner_;
  RetryPolicy policy_;
  Sleeper sleep_;
};

// ---------------------------------------------------------------------------
// Scripted (mock) backends

/// Ordered request-matcher -> canned response list. Each request takes the
/// first entry whose matcher accepts it and which still has uses left.
///
/// File format (JSON):
///   {"entries": [{"match": "substring", "response": "text"},
///                {"match": "^regex", "regex": true, "error": "transport"},
///                {"match": "", "response": "...", "repeat": true}]}
/// `times` (default 1) bounds how often an entry fires; `repeat: true` makes it
/// unlimited. An empty matcher accepts everything.
class Transcript {
 public:
  struct Entry {
    std::string match;
    bool regex = false;
    std::string response;
    bool transport_error = false;
    int times = 1;  // <= 0 means unlimited
  };

  Transcript() = default;
  explicit Transcript(std::vector<Entry> entries) { set_entries(std::move(entries)); }
  Transcript(Transcript&& other) noexcept {
    std::lock_guard lock(other.mu_);
    entries_ = std::move(other.entries_);
    compiled_ = std::move(other.compiled_);
    used_ = std::move(other.used_);
    served_ = other.served_;
  }

  static Transcript from_json(const nlohmann::json& j) {
    const auto& arr = j.is_array() ? j : j.at("entries");
    std::vector<Entry> entries;
    for (const auto& e : arr) {
      Entry en;
      en.match = e.value("match", std::string());
      en.regex = e.value("regex", false);
      if (e.contains("response")) {
        en.response = e["response"].is_string() ? e["response"].get<std::string>() : e["response"].dump();
      }
      en.transport_error = e.value("error", std::string()) == "transport";
      en.times = e.value("repeat", false) ? 0 : e.value("times", 1);
      entries.push_back(std::move(en));
    }
    return Transcript(std::move(entries));
  }

  static Transcript load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kLoad, "cannot open transcript " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
    }
  }

  void add(Entry e) {
    std::lock_guard lock(mu_);
    compiled_.push_back(compile(e));
    entries_.push_back(std::move(e));
    used_.push_back(0);
  }

  std::string respond(const std::string& request) {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.times > 0 && used_[i] >= e.times) continue;
      const bool hit = e.regex ? std::regex_search(request, *compiled_[i])
                               : request.find(e.match) != std::string::npos;
      if (!hit) continue;
      ++used_[i];
      ++served_;
      if (e.transport_error) throw Error(ErrorCode::kTransport, "scripted transport failure");
      return e.response;
    }
    throw Error(ErrorCode::kTransport, "no scripted response for request: " + request.substr(0, 200));
  }

  std::size_t served() const {
    std::lock_guard lock(mu_);
    return served_;
  }

 private:
  static std::shared_ptr<std::regex> compile(const Entry& e) {
    return e.regex ? std::make_shared<std::regex>(e.match) : nullptr;
  }

  void set_entries(std::vector<Entry> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  mutable std::mutex mu_;
  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<std::regex>> compiled_;
  std::vector<int> used_;
  std::size_t served_ = 0;
};

class ScriptedChatBackend : public ChatBackend {
 public:
  explicit ScriptedChatBackend(std::shared_ptr<Transcript> transcript) : transcript_(std::move(transcript)) {}

  std::string complete(const std::vector<Message>& messages) override {
    return transcript_->respond(flatten(messages));
  }

 private:
  std::shared_ptr<Transcript> transcript_;
};

/// Request text is "image_ref\nprompt"; responses are detector wire bodies.
class ScriptedDetectorBackend : public DetectorBackend {
 public:
  explicit ScriptedDetectorBackend(std::shared_ptr<Transcript> transcript)
      : transcript_(std::move(transcript)) {}

  DetectorResult detect(const std::string& image_ref, const std::string& prompt) override {
    const auto body = transcript_->respond(image_ref + "\n" + prompt);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kTransport, std::string("scripted detector body: ") + e.what());
    }
    return parse_detector_response(j);
  }

 private:
  std::shared_ptr<Transcript> transcript_;
};

/// Adapter for in-process test doubles.
class FunctionChatBackend : public ChatBackend {
 public:
  explicit FunctionChatBackend(std::function<std::string(const std::vector<Message>&)> fn)
      : fn_(std::move(fn)) {}
  std::string complete(const std::vector<Message>& messages) override { return fn_(messages); }

 private:
  std::function<std::string(const std::vector<Message>&)> fn_;
};

// ---------------------------------------------------------------------------
// Endpoint configuration

enum class EndpointKind { kChat, kDetector, kGrounder };

struct BackendEndpoint {
  EndpointKind kind = EndpointKind::kChat;
  std::string base_url;  // http(s)://host[:port][/prefix] or mock://<transcript path>
  std::string path;      // request path appended to base_url
  std::string auth_env_var;
  std::string model;
  double timeout_s = 60.0;
  RetryPolicy retry;

  bool is_mock() const { return base_url.rfind("mock://", 0) == 0; }
  std::string mock_path() const { return base_url.substr(7); }
};

inline EndpointKind parse_endpoint_kind(const std::string& s) {
  if (s == "chat") return EndpointKind::kChat;
  if (s == "detector") return EndpointKind::kDetector;
  if (s == "grounder") return EndpointKind::kGrounder;
  throw Error(ErrorCode::kInvalidInput, "unknown endpoint kind " + s);
}

inline BackendEndpoint endpoint_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  BackendEndpoint e;
  e.kind = parse_endpoint_kind(j.value("kind", std::string("chat")));
  e.base_url = j.at("base_url").get<std::string>();
  if (e.is_mock()) {
    std::filesystem::path p = e.mock_path();
    if (p.is_relative() && !base_dir.empty()) e.base_url = "mock://" + (base_dir / p).string();
  }
  e.path = j.value("path", std::string(e.kind == EndpointKind::kDetector ? "/detect" : "/v1/chat/completions"));
  e.auth_env_var = j.value("auth_env_var", std::string());
  e.model = j.value("model", std::string());
  e.timeout_s = j.value("timeout", 60.0);
  if (!(e.timeout_s > 0.0)) throw Error(ErrorCode::kInvalidInput, "endpoint timeout must be positive");
  if (j.contains("retry")) {
    const auto& r = j["retry"];
    e.retry.max_attempts = r.value("max_attempts", 3);
    e.retry.base_delay = std::chrono::milliseconds(r.value("backoff_base_ms", 200));
    e.retry.max_delay = std::chrono::milliseconds(r.value("backoff_max_ms", 5000));
    e.retry.jitter = r.value("jitter", 0.5);
    if (e.retry.max_attempts < 1) throw Error(ErrorCode::kInvalidInput, "retry.max_attempts must be >= 1");
  }
  return e;
}

/// Named endpoints from a JSON object {"name": {endpoint}, ...}. Tokens are
/// never read from this file; only the name of the variable holding one.
inline std::map<std::string, BackendEndpoint> load_endpoints(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open endpoints " + path.string());
  std::map<std::string, BackendEndpoint> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& [name, e] : j.items()) {
      if (e.contains("token") || e.contains("api_key")) {
        throw Error(ErrorCode::kInvalidInput, "endpoint " + name + ": credentials belong in auth_env_var");
      }
      out.emplace(name, endpoint_from_json(e, path.parent_path()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace egoground
