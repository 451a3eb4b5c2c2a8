#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "egoground/backend.hpp"
#include "egoground/dataset.hpp"
#include "egoground/error.hpp"
#include "egoground/generation.hpp"
#include "json.hpp"

namespace egoground {

enum class TaskKind { kSentenceValidation, kAltBbox };
enum class TaskState { kOpen, kLeased, kSubmitted, kFinalized, kRejected };

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::kSentenceValidation ? "sentence_validation" : "alt_bbox";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "sentence_validation") return TaskKind::kSentenceValidation;
  if (s == "alt_bbox") return TaskKind::kAltBbox;
  throw Error(ErrorCode::kInvalidInput, "unknown task kind '" + std::string(s) + "'");
}

inline std::string_view to_string(TaskState s) {
  switch (s) {
    case TaskState::kOpen: return "open";
    case TaskState::kLeased: return "leased";
    case TaskState::kSubmitted: return "submitted";
    case TaskState::kFinalized: return "finalized";
    case TaskState::kRejected: return "rejected";
  }
  return "unknown";
}

inline TaskState parse_task_state(std::string_view s) {
  for (auto st : {TaskState::kOpen, TaskState::kLeased, TaskState::kSubmitted, TaskState::kFinalized,
                  TaskState::kRejected}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown task state '" + std::string(s) + "'");
}

/// open -> leased -> {open, submitted} -> {finalized, rejected}
inline bool legal_transition(TaskState from, TaskState to) {
  switch (from) {
    case TaskState::kOpen: return to == TaskState::kLeased;
    case TaskState::kLeased: return to == TaskState::kOpen || to == TaskState::kSubmitted;
    case TaskState::kSubmitted: return to == TaskState::kFinalized || to == TaskState::kRejected;
    default: return false;
  }
}

/// Milliseconds since the epoch.
using Millis = std::int64_t;
using Clock = std::function<Millis()>;

inline Clock system_clock_ms() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

struct Lease {
  std::string annotator_id;
  Millis expires_at = 0;
};

struct LabeledBox {
  BBox box;
  std::string category;
};

/// Sentence tasks use chosen_index/edited_text/accepted; bbox tasks use
/// boxes/none_valid.
struct Decision {
  std::string annotator_id;
  Millis timestamp = 0;
  std::optional<std::size_t> chosen_index;
  std::optional<std::string> edited_text;
  bool accepted = true;  // human verdict on the chosen sentence
  std::vector<LabeledBox> boxes;
  bool none_valid = false;
};

struct AnnotationTask {
  std::string task_id;
  TaskKind kind = TaskKind::kSentenceValidation;
  std::string record_id;         // intention record the task feeds
  std::string source_record_id;  // stage-1 source object
  QueryType intention_type = QueryType::kContext;
  std::string object_category;
  std::string image_ref;
  ImageSize image_size;
  BBox primary_bbox;
  Split split = Split::kTrain;
  std::vector<std::string> candidates;  // sentence tasks
  std::vector<CheckerVerdict> verdicts;
  std::string sentence;             // bbox tasks
  std::vector<BBox> shown_boxes;    // boxes displayed to the annotator
  TaskState state = TaskState::kOpen;
  std::optional<Lease> lease;
  std::optional<Decision> decision;
  std::string reason;  // set when rejected
};

inline void to_json(nlohmann::json& j, const LabeledBox& b) { j = {{"box", b.box}, {"category", b.category}}; }

inline void from_json(const nlohmann::json& j, LabeledBox& b) {
  b.box = j.at("box").get<BBox>();
  b.category = j.value("category", std::string());
}

inline void to_json(nlohmann::json& j, const Decision& d) {
  j = {{"annotator_id", d.annotator_id}, {"timestamp", d.timestamp}};
  if (d.chosen_index) j["chosen_index"] = *d.chosen_index;
  if (d.edited_text) j["edited_text"] = *d.edited_text;
  j["accepted"] = d.accepted;
  j["boxes"] = d.boxes;
  j["none_valid"] = d.none_valid;
}

inline void from_json(const nlohmann::json& j, Decision& d) {
  d.annotator_id = j.value("annotator_id", std::string());
  d.timestamp = j.value("timestamp", Millis{0});
  d.chosen_index = j.contains("chosen_index") && !j["chosen_index"].is_null()
                       ? std::optional<std::size_t>(j["chosen_index"].get<std::size_t>())
                       : std::nullopt;
  d.edited_text = j.contains("edited_text") && !j["edited_text"].is_null()
                      ? std::optional<std::string>(j["edited_text"].get<std::string>())
                      : std::nullopt;
  d.accepted = j.value("accepted", true);
  d.boxes = j.value("boxes", std::vector<LabeledBox>{});
  d.none_valid = j.value("none_valid", false);
}

inline void to_json(nlohmann::json& j, const AnnotationTask& t) {
  j = {{"task_id", t.task_id},
       {"kind", to_string(t.kind)},
       {"record_id", t.record_id},
       {"source_record_id", t.source_record_id},
       {"intention_type", to_string(t.intention_type)},
       {"object_category", t.object_category},
       {"image_ref", t.image_ref},
       {"image_size", t.image_size},
       {"primary_bbox", t.primary_bbox},
       {"split", to_string(t.split)},
       {"candidates", t.candidates},
       {"verdicts", t.verdicts},
       {"sentence", t.sentence},
       {"shown_boxes", t.shown_boxes},
       {"state", to_string(t.state)},
       {"reason", t.reason}};
  j["lease"] = t.lease ? nlohmann::json{{"annotator_id", t.lease->annotator_id}, {"expires_at", t.lease->expires_at}}
                       : nlohmann::json();
  j["decision"] = t.decision ? nlohmann::json(*t.decision) : nlohmann::json();
}

inline void from_json(const nlohmann::json& j, AnnotationTask& t) {
  t.task_id = j.at("task_id").get<std::string>();
  t.kind = parse_task_kind(j.at("kind").get<std::string>());
  t.record_id = j.at("record_id").get<std::string>();
  t.source_record_id = j.at("source_record_id").get<std::string>();
  t.intention_type = parse_query_type(j.at("intention_type").get<std::string>());
  t.object_category = j.at("object_category").get<std::string>();
  t.image_ref = j.at("image_ref").get<std::string>();
  t.image_size = j.at("image_size").get<ImageSize>();
  t.primary_bbox = j.at("primary_bbox").get<BBox>();
  t.split = parse_split(j.at("split").get<std::string>());
  t.candidates = j.value("candidates", std::vector<std::string>{});
  t.verdicts = j.value("verdicts", std::vector<CheckerVerdict>{});
  t.sentence = j.value("sentence", std::string());
  t.shown_boxes = j.value("shown_boxes", std::vector<BBox>{});
  t.state = parse_task_state(j.value("state", std::string("open")));
  t.reason = j.value("reason", std::string());
  if (j.contains("lease") && !j["lease"].is_null()) {
    t.lease = Lease{j["lease"].at("annotator_id").get<std::string>(), j["lease"].at("expires_at").get<Millis>()};
  }
  if (j.contains("decision") && !j["decision"].is_null()) t.decision = j["decision"].get<Decision>();
}

inline std::string intention_record_id(const std::string& source_id, QueryType type) {
  return source_id + "-" + std::string(to_string(type));
}

inline std::string task_id_for(TaskKind kind, const std::string& record_id) {
  return std::string(to_string(kind)) + ":" + record_id;
}

/// Non-canonical prompt for gating one stage-3 alternative box.
inline PromptTemplate default_bbox_checker_template() {
  PromptTemplate t;
  t.template_id = "bbox-checker-default";
  t.segments = {
      {"system", "You verify alternative targets for an egocentric assistant. Answer strictly with 'yes' or 'no' "
                 "followed by a short reason."},
      {"user", "Request: {SENTENCE}\nProposed object: {OBJECT} at {BOX}\nCould the marked object satisfy the "
               "request?"}};
  return t;
}

struct AnnotationOptions {
  std::chrono::milliseconds lease_duration = std::chrono::minutes(15);
  bool show_primary_box = true;
  std::filesystem::path event_log;  // empty: in-memory only
};

struct CreateResult {
  std::size_t created = 0;
  std::vector<std::pair<std::string, std::string>> skipped;  // (record_id, reason)
};

enum class FinalizeState { kFinalized, kRejected, kPending };

inline std::string_view to_string(FinalizeState s) {
  switch (s) {
    case FinalizeState::kFinalized: return "finalized";
    case FinalizeState::kRejected: return "rejected";
    case FinalizeState::kPending: return "pending";
  }
  return "unknown";
}

struct FinalizeResult {
  FinalizeState state = FinalizeState::kPending;
  std::string task_id;
  std::string reason;
  std::optional<IntentionRecord> record;
};

/// Task queue for the human stages. Every state change is an event; the
/// event log, when configured, is replayed on construction.
class AnnotationService {
 public:
  explicit AnnotationService(AnnotationOptions opts = {}, Clock clock = system_clock_ms(),
                             std::shared_ptr<ChatBackend> checker = nullptr,
                             PromptTemplate sentence_checker = default_checker_template(),
                             PromptTemplate bbox_checker = default_bbox_checker_template())
      : opts_(std::move(opts)),
        clock_(std::move(clock)),
        checker_(std::move(checker)),
        sentence_checker_(std::move(sentence_checker)),
        bbox_checker_(std::move(bbox_checker)) {
    if (opts_.lease_duration.count() <= 0) throw Error(ErrorCode::kInvalidInput, "lease duration must be positive");
    if (!opts_.event_log.empty()) replay(opts_.event_log);
  }

  /// One sentence task per checked candidate set, plus a bbox task for every
  /// finalized record that lacks one. Sets that are not exactly five
  /// sentences, or whose source is unknown, are skipped with a reason.
  CreateResult create_tasks(const Manifest& sources, const std::vector<CheckedCandidateSet>& sets) {
    std::map<std::string, const IntentionRecord*> by_id;
    for (const auto& r : sources.records) by_id.emplace(r.record_id, &r);
    std::lock_guard lock(mu_);
    CreateResult result;
    for (const auto& checked : sets) {
      const auto& cs = checked.set;
      std::string reason;
      const auto src = by_id.find(cs.record_id);
      if (cs.sentences.size() != kCandidatesPerSet) {
        reason = "expected 5 candidates, got " + std::to_string(cs.sentences.size());
      } else if (checked.verdicts.size() != cs.sentences.size()) {
        reason = "verdict count does not match candidates";
      } else if (src == by_id.end()) {
        reason = "unknown source record";
      } else if (cs.intention_type == QueryType::kObject) {
        reason = "object queries have no sentence stage";
      }
      if (!reason.empty()) {
        result.skipped.emplace_back(cs.record_id, reason);
        continue;
      }
      const auto& s = *src->second;
      AnnotationTask t;
      t.kind = TaskKind::kSentenceValidation;
      t.record_id = intention_record_id(s.record_id, cs.intention_type);
      t.task_id = task_id_for(t.kind, t.record_id);
      if (tasks_.count(t.task_id)) continue;
      t.source_record_id = s.record_id;
      t.intention_type = cs.intention_type;
      t.object_category = cs.object_category.empty() ? s.object_category : cs.object_category;
      t.image_ref = s.image_ref;
      t.image_size = s.image_size;
      t.primary_bbox = s.primary_bbox;
      t.split = s.split;
      t.candidates = cs.sentences;
      t.verdicts = checked.verdicts;
      emit_locked({{"event", "task_created"}, {"task", t}});
      ++result.created;
    }
    for (const auto& [id, rec] : records_) {
      if (!tasks_.count(task_id_for(TaskKind::kAltBbox, id))) {
        emit_locked({{"event", "task_created"}, {"task", bbox_task_for(rec)}});
        ++result.created;
      }
    }
    return result;
  }

  /// Leases the first open task (by task id) matching the filter. Expired
  /// leases are returned to the pool first. Tasks whose source record the
  /// annotator already holds a live lease on are passed over.
  std::optional<AnnotationTask> lease_task(const std::string& annotator_id,
                                           std::optional<TaskKind> kind = std::nullopt) {
    if (annotator_id.empty()) throw Error(ErrorCode::kInvalidInput, "annotator_id is required");
    std::lock_guard lock(mu_);
    const Millis now = clock_();
    expire_locked(now);
    std::set<std::string> held;
    for (const auto& [id, t] : tasks_) {
      if (t.state == TaskState::kLeased && t.lease->annotator_id == annotator_id) held.insert(t.source_record_id);
    }
    for (const auto& [id, t] : tasks_) {
      if (t.state != TaskState::kOpen || (kind && t.kind != *kind) || held.count(t.source_record_id)) continue;
      emit_locked({{"event", "leased"},
                   {"task_id", id},
                   {"annotator_id", annotator_id},
                   {"expires_at", now + opts_.lease_duration.count()},
                   {"at", now}});
      return tasks_.at(id);
    }
    return std::nullopt;
  }

  /// Stages a decision. A malformed decision is a validation error and leaves
  /// the lease in place.
  AnnotationTask submit_decision(const std::string& task_id, Decision d) {
    std::lock_guard lock(mu_);
    const Millis now = clock_();
    auto& t = task_locked(task_id);
    if (t.state == TaskState::kLeased && t.lease->expires_at <= now) {
      emit_locked({{"event", "lease_expired"}, {"task_id", task_id}, {"at", now}});
      throw Error(ErrorCode::kLeaseExpired, task_id + ": lease expired");
    }
    if (t.state == TaskState::kOpen) throw Error(ErrorCode::kLeaseExpired, task_id + ": no live lease");
    if (t.state != TaskState::kLeased) {
      throw Error(ErrorCode::kIllegalTransition, task_id + ": cannot submit in state " + std::string(to_string(t.state)));
    }
    if (d.annotator_id != t.lease->annotator_id) {
      throw Error(ErrorCode::kForbidden, task_id + " is leased to another annotator");
    }
    validate_decision(t, d);
    d.timestamp = now;
    emit_locked({{"event", "submitted"}, {"task_id", task_id}, {"decision", d}});
    return t;
  }

  /// Applies the submitted decision for a record: the sentence task first,
  /// then its bbox task. Nothing submitted yields kPending.
  FinalizeResult finalize(const std::string& record_id) {
    std::lock_guard record_lock(record_mutex(record_id));
    AnnotationTask snapshot;
    {
      std::lock_guard lock(mu_);
      const auto* t = submitted_task_locked(record_id);
      if (!t) return {FinalizeState::kPending, "", "no submitted decision", std::nullopt};
      snapshot = *t;
    }
    // Checker calls happen outside the queue lock.
    nlohmann::json ev = snapshot.kind == TaskKind::kSentenceValidation ? sentence_outcome(snapshot)
                                                                       : bbox_outcome(snapshot);
    std::lock_guard lock(mu_);
    if (task_locked(snapshot.task_id).state != TaskState::kSubmitted) {
      throw Error(ErrorCode::kIllegalTransition, snapshot.task_id + " changed during finalize");
    }
    emit_locked(ev);
    FinalizeResult r;
    r.task_id = snapshot.task_id;
    r.state = ev["event"] == "finalized" ? FinalizeState::kFinalized : FinalizeState::kRejected;
    r.reason = ev.value("reason", std::string());
    if (const auto it = records_.find(record_id); it != records_.end()) r.record = it->second;
    if (r.state == FinalizeState::kFinalized && snapshot.kind == TaskKind::kSentenceValidation &&
        !tasks_.count(task_id_for(TaskKind::kAltBbox, record_id))) {
      emit_locked({{"event", "task_created"}, {"task", bbox_task_for(records_.at(record_id))}});
    }
    return r;
  }

  std::optional<AnnotationTask> task(const std::string& task_id) const {
    std::lock_guard lock(mu_);
    const auto it = tasks_.find(task_id);
    return it == tasks_.end() ? std::nullopt : std::optional(it->second);
  }

  std::vector<AnnotationTask> tasks() const {
    std::lock_guard lock(mu_);
    std::vector<AnnotationTask> out;
    for (const auto& [id, t] : tasks_) out.push_back(t);
    return out;
  }

  std::optional<IntentionRecord> record(const std::string& record_id) const {
    std::lock_guard lock(mu_);
    const auto it = records_.find(record_id);
    return it == records_.end() ? std::nullopt : std::optional(it->second);
  }

  /// Finalized intention records, ordered by id.
  Manifest manifest() const {
    std::lock_guard lock(mu_);
    Manifest m;
    for (const auto& [id, r] : records_) m.records.push_back(r);
    return m;
  }

  StageCounts counts(QueryType type, Stage stage) const { return ledger_.counts(type, stage); }

  nlohmann::json stats() const {
    std::lock_guard lock(mu_);
    std::map<std::string, std::size_t> by_state;
    for (const auto& [id, t] : tasks_) ++by_state[std::string(to_string(t.state))];
    return {{"pass_rates", ledger_.to_json()}, {"tasks", by_state}, {"records", records_.size()}};
  }

  std::size_t event_count() const {
    std::lock_guard lock(mu_);
    return events_;
  }

 private:
  AnnotationTask& task_locked(const std::string& task_id) {
    const auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw Error(ErrorCode::kNotFound, "no task " + task_id);
    return it->second;
  }

  const AnnotationTask* submitted_task_locked(const std::string& record_id) {
    for (auto kind : {TaskKind::kSentenceValidation, TaskKind::kAltBbox}) {
      const auto it = tasks_.find(task_id_for(kind, record_id));
      if (it != tasks_.end() && it->second.state == TaskState::kSubmitted) return &it->second;
    }
    return nullptr;
  }

  std::mutex& record_mutex(const std::string& record_id) {
    std::lock_guard lock(mu_);
    auto& m = record_mutexes_[record_id];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

  AnnotationTask bbox_task_for(const IntentionRecord& r) const {
    AnnotationTask t;
    t.kind = TaskKind::kAltBbox;
    t.record_id = r.record_id;
    t.task_id = task_id_for(t.kind, r.record_id);
    const auto src = r.provenance.is_null() ? nlohmann::json() : r.provenance.value("source_record_id", nlohmann::json());
    t.source_record_id = src.is_string() ? src.get<std::string>() : r.record_id;
    t.intention_type = r.query_type;
    t.object_category = r.object_category;
    t.image_ref = r.image_ref;
    t.image_size = r.image_size;
    t.primary_bbox = r.primary_bbox;
    t.split = r.split;
    t.sentence = r.query_text;
    if (opts_.show_primary_box) t.shown_boxes = r.ground_truth(true);
    return t;
  }

  static void validate_decision(const AnnotationTask& t, const Decision& d) {
    if (t.kind == TaskKind::kSentenceValidation) {
      if (!d.chosen_index) throw Error(ErrorCode::kValidation, "chosen_index is required");
      if (*d.chosen_index >= t.candidates.size()) throw Error(ErrorCode::kValidation, "chosen_index out of range");
      if (d.edited_text && d.edited_text->find_first_not_of(" \t\r\n") == std::string::npos) {
        throw Error(ErrorCode::kValidation, "edited_text must be nonempty");
      }
      return;
    }
    if (d.none_valid && !d.boxes.empty()) throw Error(ErrorCode::kValidation, "none_valid with boxes");
    if (!d.none_valid && d.boxes.empty()) throw Error(ErrorCode::kValidation, "no boxes and not none_valid");
    for (const auto& b : d.boxes) {
      if (!b.box.valid() || !within(b.box, t.image_size)) {
        throw Error(ErrorCode::kValidation, "box " + to_string(b.box) + " outside the image");
      }
      if (b.category.find_first_not_of(" \t") == std::string::npos) {
        throw Error(ErrorCode::kValidation, "box category must be nonempty");
      }
    }
  }

  nlohmann::json sentence_outcome(const AnnotationTask& t) const {
    const Decision& d = *t.decision;
    const std::size_t idx = *d.chosen_index;
    const std::string text = d.edited_text ? *d.edited_text : t.candidates[idx];
    CheckerVerdict verdict = t.verdicts[idx];
    std::string verdict_source = "candidate";
    if (d.edited_text && *d.edited_text != t.candidates[idx]) {
      if (checker_) {
        verdict = check_sentence(text, t.object_category, t.intention_type, *checker_, sentence_checker_);
        verdict_source = "recheck";
      } else if (t.intention_type == QueryType::kUncommon && mentions_category(text, t.object_category)) {
        verdict = {false, "leaked target object name '" + t.object_category + "'", true};
        verdict_source = "local";
      }
    }
    const bool checker_ok = verdict.accepted;
    const bool human_ok = d.accepted;
    nlohmann::json ev = {{"task_id", t.task_id},
                         {"record_id", t.record_id},
                         {"checker_accepted", checker_ok},
                         {"human_accepted", human_ok}};
    if (!checker_ok || !human_ok) {
      ev["event"] = "rejected";
      ev["reason"] = !checker_ok && !human_ok ? "checker+human" : (!checker_ok ? "checker" : "human");
      return ev;
    }
    IntentionRecord r;
    r.record_id = t.record_id;
    r.image_ref = t.image_ref;
    r.image_size = t.image_size;
    r.object_category = t.object_category;
    r.query_type = t.intention_type;
    r.query_text = text;
    r.primary_bbox = t.primary_bbox;
    r.split = t.split;
    r.provenance = {{"source_record_id", t.source_record_id},
                    {"candidate_set", {{"record_id", t.source_record_id},
                                       {"intention_type", to_string(t.intention_type)},
                                       {"candidates", t.candidates}}},
                    {"decision", d},
                    {"checker", verdict},
                    {"checker_source", verdict_source},
                    {"checker_accepted", checker_ok},
                    {"human_accepted", human_ok},
                    {"alt_bboxes", nlohmann::json::array()}};
    ev["event"] = "finalized";
    ev["record"] = r;
    return ev;
  }

  nlohmann::json bbox_outcome(const AnnotationTask& t) const {
    const Decision& d = *t.decision;
    IntentionRecord r;
    {
      std::lock_guard lock(mu_);
      r = records_.at(t.record_id);
    }
    nlohmann::json ev = {{"task_id", t.task_id}, {"record_id", t.record_id}, {"human_accepted", true}};
    std::size_t admitted = 0;
    auto& log = r.provenance["alt_bboxes"];
    if (!log.is_array()) log = nlohmann::json::array();
    for (const auto& lb : d.boxes) {
      if (!checker_) throw Error(ErrorCode::kInvalidInput, "alternative boxes need a checker endpoint");
      const auto prompt = render_template(
          bbox_checker_, {{"OBJECT", lb.category}, {"SENTENCE", t.sentence}, {"BOX", to_string(lb.box)}},
          ImageAttachment{t.image_ref, lb.box, std::nullopt});
      const auto verdict = parse_checker_reply(checker_->complete(prompt));
      if (verdict.accepted) {
        r.alternative_bboxes.push_back(lb.box);
        ++admitted;
      }
      log.push_back({{"box", lb.box},
                     {"category", lb.category},
                     {"annotator_id", d.annotator_id},
                     {"timestamp", d.timestamp},
                     {"checker", verdict},
                     {"admitted", verdict.accepted}});
    }
    if (!d.none_valid && admitted == 0) {
      ev["event"] = "rejected";
      ev["reason"] = "checker";
    } else {
      ev["event"] = "finalized";
    }
    ev["checker_accepted"] = admitted > 0;
    ev["admitted"] = admitted;
    ev["record"] = r;  // the gate log is kept even when nothing was admitted
    return ev;
  }

  void expire_locked(Millis now) {
    std::vector<std::string> expired;
    for (const auto& [id, t] : tasks_) {
      if (t.state == TaskState::kLeased && t.lease->expires_at <= now) expired.push_back(id);
    }
    for (const auto& id : expired) emit_locked({{"event", "lease_expired"}, {"task_id", id}, {"at", now}});
  }

  void transition(AnnotationTask& t, TaskState to) {
    if (!legal_transition(t.state, to)) {
      throw Error(ErrorCode::kIllegalTransition, t.task_id + ": " + std::string(to_string(t.state)) + " -> " +
                                                     std::string(to_string(to)));
    }
    t.state = to;
  }

  void apply_locked(const nlohmann::json& ev) {
    const auto type = ev.at("event").get<std::string>();
    if (type == "task_created") {
      auto t = ev.at("task").get<AnnotationTask>();
      t.state = TaskState::kOpen;
      t.lease.reset();
      t.decision.reset();
      if (t.kind == TaskKind::kSentenceValidation) {
        ledger_.record_outcome(t.intention_type, Stage::kGeneration, t.candidates.size() == kCandidatesPerSet);
        for (const auto& v : t.verdicts) ledger_.record_verdict(t.intention_type, v);
      }
      const auto id = t.task_id;
      tasks_.emplace(id, std::move(t));
      return;
    }
    auto& t = task_locked(ev.at("task_id").get<std::string>());
    if (type == "leased") {
      transition(t, TaskState::kLeased);
      t.lease = Lease{ev.at("annotator_id").get<std::string>(), ev.at("expires_at").get<Millis>()};
    } else if (type == "lease_expired") {
      transition(t, TaskState::kOpen);
      t.lease.reset();
    } else if (type == "submitted") {
      transition(t, TaskState::kSubmitted);
      t.decision = ev.at("decision").get<Decision>();
    } else if (type == "finalized" || type == "rejected") {
      transition(t, type == "finalized" ? TaskState::kFinalized : TaskState::kRejected);
      t.reason = ev.value("reason", std::string());
      if (ev.contains("record")) {
        auto r = ev["record"].get<IntentionRecord>();
        const auto id = r.record_id;
        records_.insert_or_assign(id, std::move(r));
      }
      if (t.kind == TaskKind::kSentenceValidation) {
        ledger_.record_outcome(t.intention_type, Stage::kHuman, ev.at("human_accepted").get<bool>());
      }
    } else {
      throw Error(ErrorCode::kLoad, "unknown event '" + type + "'");
    }
  }

  void emit_locked(nlohmann::json ev) {
    apply_locked(ev);
    ++events_;
    if (!opts_.event_log.empty()) {
      if (!log_.is_open()) {
        log_.open(opts_.event_log, std::ios::app);
        if (!log_) throw Error(ErrorCode::kLoad, "cannot append to " + opts_.event_log.string());
      }
      log_ << ev.dump() << '\n';
      log_.flush();
    }
  }

  void replay(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) return;
    std::lock_guard lock(mu_);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        apply_locked(nlohmann::json::parse(line));
        ++events_;
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kLoad, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  AnnotationOptions opts_;
  Clock clock_;
  std::shared_ptr<ChatBackend> checker_;
  PromptTemplate sentence_checker_;
  PromptTemplate bbox_checker_;

  mutable std::mutex mu_;
  std::map<std::string, AnnotationTask> tasks_;
  std::map<std::string, IntentionRecord> records_;
  std::map<std::string, std::unique_ptr<std::mutex>> record_mutexes_;
  PassRateLedger ledger_;
  std::ofstream log_;
  std::size_t events_ = 0;
};

}  // namespace egoground
