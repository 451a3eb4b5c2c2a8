#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "egoground/backend.hpp"
#include "egoground/dataset.hpp"
#include "egoground/error.hpp"
#include "egoground/generation.hpp"
#include "egoground/grammar.hpp"
#include "egoground/parallel.hpp"
#include "json.hpp"

namespace egoground {

enum class Mode { kDirect, kRog, kDr, kRd };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kDirect: return "direct";
    case Mode::kRog: return "rog";
    case Mode::kDr: return "dr";
    case Mode::kRd: return "rd";
  }
  return "direct";
}

inline Mode parse_mode(std::string_view s) {
  for (auto m : {Mode::kDirect, Mode::kRog, Mode::kDr, Mode::kRd}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown mode '" + std::string(s) + "'");
}

/// Calls each mode makes when every stage runs.
inline std::size_t expected_calls(Mode m) { return m == Mode::kDirect ? 1 : 2; }

// Prediction statuses beyond the grammar's parse statuses.
inline constexpr std::string_view kStatusOk = "ok";
inline constexpr std::string_view kNoDetections = "no_detections";
inline constexpr std::string_view kReasonerDetectorMismatch = "reasoner_detector_mismatch";
inline constexpr std::string_view kNoVocabularyMatch = "no_vocabulary_match";
inline constexpr std::string_view kTransportFailure = "transport_error";

inline std::string_view to_string(EndpointKind k) {
  switch (k) {
    case EndpointKind::kChat: return "chat";
    case EndpointKind::kDetector: return "detector";
    case EndpointKind::kGrounder: return "grounder";
  }
  return "chat";
}

struct CallRecord {
  EndpointKind kind = EndpointKind::kChat;
  std::string request;
  std::string response;
  double latency_ms = 0.0;
};

struct PipelineTrace {
  std::string record_id;
  Mode mode = Mode::kDirect;
  std::vector<CallRecord> calls;
  std::optional<BBox> final_prediction;  // absent = failure marker
  std::vector<BBox> all_boxes;           // every box the final reply parsed to
  std::string status = std::string(kStatusOk);
  bool fallback = false;                 // RoG stage 1 produced no category
  std::vector<std::string> categories;   // reasoned categories (rog, dr, rd)

  bool failed() const { return !final_prediction.has_value(); }
};

inline nlohmann::json trace_to_json(const PipelineTrace& t) {
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : t.calls) {
    calls.push_back({{"kind", to_string(c.kind)},
                     {"request", c.request},
                     {"response", c.response},
                     {"latency_ms", c.latency_ms}});
  }
  return {{"record_id", t.record_id},
          {"mode", to_string(t.mode)},
          {"calls", calls},
          {"final_prediction", t.final_prediction ? nlohmann::json(*t.final_prediction) : nlohmann::json()},
          {"status", t.status},
          {"fallback", t.fallback},
          {"categories", t.categories}};
}

/// Prompt wording for the hybrid baselines. Placeholders: {PHRASES},
/// {VOCABULARY}, {QUERY}.
struct PipelinePrompts {
  std::string detector_delimiter = " . ";
  std::size_t rd_max_categories = 2;
  PromptTemplate dr_reasoner{
      "dr-reasoner",
      std::nullopt,
      {{"system", "You help an egocentric assistant pick the object a person needs."},
       {"user",
        "Objects detected in the image: {PHRASES}.\nIntention: {QUERY}\nWhich one detected object best "
        "fulfills the intention? Answer with the object name only."}},
      {}};
  PromptTemplate rd_reasoner{
      "rd-reasoner",
      std::nullopt,
      {{"system", "You help an egocentric assistant pick the object a person needs."},
       {"user",
        "Candidate object categories: {VOCABULARY}.\nIntention: {QUERY}\nLooking at the image, name the one "
        "or two categories most likely to fulfill the intention, separated by commas."}},
      {}};
};

inline PipelinePrompts load_pipeline_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open prompts " + path.string());
  PipelinePrompts p;
  try {
    const auto j = nlohmann::json::parse(in);
    p.detector_delimiter = j.value("detector_delimiter", p.detector_delimiter);
    p.rd_max_categories = j.value("rd_max_categories", p.rd_max_categories);
    if (j.contains("dr_reasoner")) p.dr_reasoner = prompt_template_from_json(j["dr_reasoner"]);
    if (j.contains("rd_reasoner")) p.rd_reasoner = prompt_template_from_json(j["rd_reasoner"]);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
  return p;
}

inline std::string join(const std::vector<std::string>& items, std::string_view delim) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += delim;
    out += items[i];
  }
  return out;
}

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

inline std::string chat_call(PipelineTrace& trace, EndpointKind kind, ChatBackend& backend,
                             const std::vector<Message>& messages) {
  const auto start = std::chrono::steady_clock::now();
  auto reply = backend.complete(messages);
  trace.calls.push_back({kind, flatten(messages), reply, ms_since(start)});
  return reply;
}

inline DetectorResult detector_call(PipelineTrace& trace, DetectorBackend& detector,
                                    const std::string& image_ref, const std::string& prompt) {
  const auto start = std::chrono::steady_clock::now();
  auto result = detector.detect(image_ref, prompt);
  nlohmann::json dets = nlohmann::json::array();
  for (const auto& d : result.detections) dets.push_back(d);
  trace.calls.push_back({EndpointKind::kDetector, image_ref + "\n" + prompt,
                         nlohmann::json{{"detections", dets}}.dump(), ms_since(start)});
  return result;
}

inline void finish_with_reply(PipelineTrace& trace, const std::string& reply, const IntentionRecord& record,
                              const Grammar& g) {
  auto parsed = g.parse_boxes(reply, record.image_size);
  trace.status = std::string(to_string(parsed.status));
  if (parsed.status == ParseStatus::kOk) {
    trace.final_prediction = parsed.boxes.front();
    trace.all_boxes = std::move(parsed.boxes);
  }
}

inline ImageAttachment image_of(const IntentionRecord& r) { return {r.image_ref, std::nullopt, std::nullopt}; }

}  // namespace detail

/// One grounder call with the ref token and the raw query.
inline PipelineTrace run_direct(const IntentionRecord& record, ChatBackend& grounder, const Grammar& g) {
  PipelineTrace trace;
  trace.record_id = record.record_id;
  trace.mode = Mode::kDirect;
  const auto reply = detail::chat_call(trace, EndpointKind::kGrounder, grounder,
                                       {{"user", g.ref_prompt(record.query_text), detail::image_of(record)}});
  detail::finish_with_reply(trace, reply, record, g);
  return trace;
}

/// Reason-then-ground: call 1 asks for the category behind the intention,
/// call 2 grounds that category. An empty category falls back to grounding
/// the raw query and flags the trace.
inline PipelineTrace run_rog(const IntentionRecord& record, ChatBackend& grounder, const Grammar& g) {
  PipelineTrace trace;
  trace.record_id = record.record_id;
  trace.mode = Mode::kRog;
  const auto image = detail::image_of(record);
  const auto reasoned = detail::chat_call(trace, EndpointKind::kGrounder, grounder,
                                          {{"user", g.reason_prompt(record.query_text), image}});
  std::string target;
  try {
    target = extract_category(reasoned);
    trace.categories.push_back(target);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyCategory) throw;
    trace.fallback = true;
    target = record.query_text;
  }
  const auto reply =
      detail::chat_call(trace, EndpointKind::kGrounder, grounder, {{"user", g.ref_prompt(target), image}});
  detail::finish_with_reply(trace, reply, record, g);
  return trace;
}

/// Detection-then-reasoning: the detector sees the whole vocabulary, the
/// reasoner picks among the detected phrases, and the highest-scoring
/// detection with that phrase wins (exact match first, then containment).
inline PipelineTrace run_dr(const IntentionRecord& record, DetectorBackend& detector, ChatBackend& reasoner,
                            const std::vector<std::string>& vocabulary,
                            const PipelinePrompts& prompts = {}) {
  if (vocabulary.empty()) throw Error(ErrorCode::kInvalidInput, "empty vocabulary");
  PipelineTrace trace;
  trace.record_id = record.record_id;
  trace.mode = Mode::kDr;
  const auto found =
      detail::detector_call(trace, detector, record.image_ref, join(vocabulary, prompts.detector_delimiter));
  if (found.detections.empty()) {
    trace.status = std::string(kNoDetections);
    return trace;
  }
  std::vector<std::string> phrases;
  for (const auto& d : found.detections) {
    if (std::find(phrases.begin(), phrases.end(), d.phrase) == phrases.end()) phrases.push_back(d.phrase);
  }
  const auto messages = render_template(prompts.dr_reasoner,
                                        {{"PHRASES", join(phrases, ", ")}, {"QUERY", record.query_text}},
                                        detail::image_of(record));
  const auto reply = detail::chat_call(trace, EndpointKind::kChat, reasoner, messages);
  std::string chosen;
  try {
    chosen = extract_category(reply);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyCategory) throw;
    trace.status = std::string(kReasonerDetectorMismatch);
    return trace;
  }
  trace.categories.push_back(chosen);
  const Detection* pick = nullptr;
  for (const auto& d : found.detections) {
    if (lowercase(d.phrase) == chosen) {
      pick = &d;
      break;
    }
  }
  if (!pick) {
    for (const auto& d : found.detections) {
      const auto phrase = lowercase(d.phrase);
      if (phrase.find(chosen) != std::string::npos || chosen.find(phrase) != std::string::npos) {
        pick = &d;
        break;
      }
    }
  }
  if (!pick) {
    trace.status = std::string(kReasonerDetectorMismatch);
    return trace;
  }
  trace.final_prediction = pick->box;
  trace.all_boxes = {pick->box};
  return trace;
}

/// Maps a reasoned category onto the vocabulary: exact (case-insensitive)
/// match, else the longest entry related by containment in either direction.
inline std::optional<std::string> nearest_vocabulary_entry(const std::string& category,
                                                           const std::vector<std::string>& vocabulary) {
  const auto want = lowercase(category);
  for (const auto& v : vocabulary) {
    if (lowercase(v) == want) return v;
  }
  const std::string* best = nullptr;
  for (const auto& v : vocabulary) {
    const auto entry = lowercase(v);
    if (want.find(entry) != std::string::npos || entry.find(want) != std::string::npos) {
      if (!best || v.size() > best->size()) best = &v;
    }
  }
  return best ? std::optional<std::string>(*best) : std::nullopt;
}

/// Reasoning-then-detection: the reasoner narrows the vocabulary to at most
/// two categories, the detector only sees those, and the global top-scoring
/// detection wins.
inline PipelineTrace run_rd(const IntentionRecord& record, ChatBackend& reasoner, DetectorBackend& detector,
                            const std::vector<std::string>& vocabulary,
                            const PipelinePrompts& prompts = {}) {
  if (vocabulary.empty()) throw Error(ErrorCode::kInvalidInput, "empty vocabulary");
  PipelineTrace trace;
  trace.record_id = record.record_id;
  trace.mode = Mode::kRd;
  const auto messages = render_template(prompts.rd_reasoner,
                                        {{"VOCABULARY", join(vocabulary, ", ")}, {"QUERY", record.query_text}},
                                        detail::image_of(record));
  const auto reply = detail::chat_call(trace, EndpointKind::kChat, reasoner, messages);
  auto items = extract_categories(reply);
  if (items.size() > prompts.rd_max_categories) items.resize(prompts.rd_max_categories);
  for (const auto& item : items) {
    auto entry = nearest_vocabulary_entry(item, vocabulary);
    if (entry && std::find(trace.categories.begin(), trace.categories.end(), *entry) == trace.categories.end()) {
      trace.categories.push_back(*entry);
    }
  }
  if (trace.categories.empty()) {
    trace.status = std::string(kNoVocabularyMatch);
    return trace;
  }
  const auto found = detail::detector_call(trace, detector, record.image_ref,
                                           join(trace.categories, prompts.detector_delimiter));
  if (found.detections.empty()) {
    trace.status = std::string(kNoDetections);
    return trace;
  }
  trace.final_prediction = found.detections.front().box;
  trace.all_boxes = {found.detections.front().box};
  return trace;
}

// ---------------------------------------------------------------------------
// Predictions file

struct Prediction {
  std::string record_id;
  Mode mode = Mode::kDirect;
  std::optional<BBox> box;
  std::vector<BBox> boxes;
  std::string status = std::string(kStatusOk);

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline Prediction prediction_of(const PipelineTrace& t) {
  return {t.record_id, t.mode, t.final_prediction, t.all_boxes, t.status};
}

inline void to_json(nlohmann::json& j, const Prediction& p) {
  j = {{"record_id", p.record_id},
       {"mode", to_string(p.mode)},
       {"box", p.box ? nlohmann::json(*p.box) : nlohmann::json()},
       {"boxes", p.boxes},
       {"status", p.status}};
}

inline void from_json(const nlohmann::json& j, Prediction& p) {
  p.record_id = j.at("record_id").get<std::string>();
  p.mode = parse_mode(j.value("mode", std::string("direct")));
  p.box = j.contains("box") && !j["box"].is_null() ? std::optional<BBox>(j["box"].get<BBox>()) : std::nullopt;
  p.boxes = j.value("boxes", std::vector<BBox>{});
  p.status = j.value("status", std::string(p.box ? kStatusOk : "malformed"));
}

inline void write_predictions(std::ostream& out, std::vector<Prediction> preds) {
  std::sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) { return a.record_id < b.record_id; });
  for (const auto& p : preds) out << nlohmann::json(p).dump() << '\n';
}

inline std::vector<Prediction> read_predictions(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Prediction>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kLoad, origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch

struct PipelineBackends {
  std::shared_ptr<ChatBackend> grounder;
  std::shared_ptr<ChatBackend> reasoner;
  std::shared_ptr<DetectorBackend> detector;
};

struct BatchOptions {
  std::size_t concurrency = 4;
  double abort_threshold = 0.10;  // abort when transport failures exceed this fraction
  std::set<QueryType> query_types{QueryType::kContext, QueryType::kUncommon, QueryType::kObject};
  std::set<Split> splits{Split::kTrain, Split::kVal, Split::kTest};
};

struct BatchResult {
  std::vector<PipelineTrace> traces;  // sorted by record_id
  std::size_t transport_failures = 0;

  std::vector<Prediction> predictions() const {
    std::vector<Prediction> out;
    out.reserve(traces.size());
    for (const auto& t : traces) out.push_back(prediction_of(t));
    return out;
  }
};

inline PipelineTrace run_one(const IntentionRecord& r, Mode mode, const PipelineBackends& b, const Grammar& g,
                             const std::vector<std::string>& vocabulary, const PipelinePrompts& prompts) {
  const auto need = [](const auto& p, const char* what) -> decltype(*p) {
    if (!p) throw Error(ErrorCode::kInvalidInput, std::string("mode requires a ") + what + " endpoint");
    return *p;
  };
  switch (mode) {
    case Mode::kDirect: return run_direct(r, need(b.grounder, "grounder"), g);
    case Mode::kRog: return run_rog(r, need(b.grounder, "grounder"), g);
    case Mode::kDr: return run_dr(r, need(b.detector, "detector"), need(b.reasoner, "reasoner"), vocabulary, prompts);
    case Mode::kRd: return run_rd(r, need(b.reasoner, "reasoner"), need(b.detector, "detector"), vocabulary, prompts);
  }
  throw Error(ErrorCode::kInvalidInput, "unknown mode");
}

/// Runs every selected record concurrently. Records whose backends fail after
/// retries get a transport failure marker; none are dropped. Output is
/// ordered by record_id regardless of completion order.
inline BatchResult batch_run(const Manifest& manifest, Mode mode, const PipelineBackends& backends,
                             const Grammar& g, const std::vector<std::string>& vocabulary = {},
                             const PipelinePrompts& prompts = {}, const BatchOptions& opts = {}) {
  require_valid(manifest);
  if ((mode == Mode::kDr || mode == Mode::kRd) && vocabulary.empty()) {
    throw Error(ErrorCode::kInvalidInput, "hybrid modes need a vocabulary");
  }
  std::vector<const IntentionRecord*> selected;
  for (const auto& r : manifest.records) {
    if (opts.query_types.count(r.query_type) && opts.splits.count(r.split)) selected.push_back(&r);
  }
  std::sort(selected.begin(), selected.end(),
            [](const auto* a, const auto* b) { return a->record_id < b->record_id; });

  BatchResult result;
  result.traces.resize(selected.size());
  std::atomic<std::size_t> failures{0};
  parallel_for(selected.size(), opts.concurrency, [&](std::size_t i) {
    const auto& r = *selected[i];
    try {
      result.traces[i] = run_one(r, mode, backends, g, vocabulary, prompts);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransport) throw;
      PipelineTrace failed;
      failed.record_id = r.record_id;
      failed.mode = mode;
      failed.status = std::string(kTransportFailure);
      result.traces[i] = std::move(failed);
      ++failures;
    }
  });
  result.transport_failures = failures.load();
  if (!selected.empty() &&
      static_cast<double>(result.transport_failures) / static_cast<double>(selected.size()) > opts.abort_threshold) {
    throw Error(ErrorCode::kBatchAborted, std::to_string(result.transport_failures) + " of " +
                                              std::to_string(selected.size()) +
                                              " records hit transport failures");
  }
  return result;
}

}  // namespace egoground
