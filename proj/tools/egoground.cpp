// egoground: command-line front end for dataset, inference and evaluation work.
//
// Exit codes: 0 success, 1 usage or runtime error, 2 validation errors,
// 3 batch aborted on transport failures.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <mutex>

#include "CLI11.hpp"
#include "egoground/annotation_server.hpp"
#include "egoground/eval.hpp"
#include "egoground/generation.hpp"
#include "egoground/http_backend.hpp"
#include "egoground/orchestrator.hpp"
#include "egoground/parallel.hpp"

namespace eg = egoground;

namespace {

constexpr int kExitError = 1;
constexpr int kExitValidation = 2;
constexpr int kExitTransportAbort = 3;

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw eg::Error(eg::ErrorCode::kLoad, "cannot write " + path);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  open_out(path) << text;
}

const eg::BackendEndpoint& endpoint_named(const std::map<std::string, eg::BackendEndpoint>& all,
                                          const std::string& name) {
  const auto it = all.find(name);
  if (it == all.end()) throw eg::Error(eg::ErrorCode::kInvalidInput, "no endpoint named '" + name + "'");
  return it->second;
}

std::shared_ptr<eg::AuditLog> make_audit(const std::string& path) {
  return path.empty() ? std::make_shared<eg::AuditLog>() : std::make_shared<eg::AuditLog>(path);
}

void print_validation(const eg::ValidationResult& res, bool as_json) {
  if (as_json) {
    nlohmann::json issues = nlohmann::json::array();
    for (const auto& i : res.issues) {
      issues.push_back({{"kind", eg::to_string(i.kind)}, {"record_id", i.record_id}, {"message", i.message}});
    }
    std::cout << nlohmann::json{{"ok", res.ok()}, {"stats", eg::stats_to_json(res.stats)}, {"issues", issues}}.dump(2)
              << '\n';
    return;
  }
  std::cout << "split  images  context  uncommon  object\n";
  for (const auto& [split, c] : res.stats) {
    const auto n = [&](eg::QueryType t) {
      const auto it = c.boxes.find(t);
      return it == c.boxes.end() ? std::size_t{0} : it->second;
    };
    std::cout << eg::to_string(split) << "  " << c.images << "  " << n(eg::QueryType::kContext) << "  "
              << n(eg::QueryType::kUncommon) << "  " << n(eg::QueryType::kObject) << '\n';
  }
  for (const auto& i : res.issues) {
    std::cout << eg::to_string(i.kind) << (i.record_id.empty() ? "" : " [" + i.record_id + "]") << ": " << i.message
              << '\n';
  }
  std::cout << (res.ok() ? "ok" : std::to_string(res.issues.size()) + " issue(s)") << '\n';
}

template <typename T>
std::set<T> parse_set(const std::vector<std::string>& names, T (*parse)(std::string_view), std::set<T> fallback) {
  if (names.empty()) return fallback;
  std::set<T> out;
  for (const auto& n : names) out.insert(parse(n));
  return out;
}

std::atomic<eg::AnnotationServer*> g_server{nullptr};

void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Egocentric intention grounding toolkit"};
  app.require_subcommand(1);

  // validate
  auto* validate = app.add_subcommand("validate", "Check a manifest and its declared statistics");
  std::string v_manifest;
  bool v_json = false;
  validate->add_option("manifest", v_manifest, "Manifest (JSONL)")->required();
  validate->add_flag("--json", v_json, "Structured output");

  // generate
  auto* generate = app.add_subcommand("generate", "Stage 1: generate candidate intention sentences");
  std::string g_sources, g_endpoints, g_endpoint = "generator", g_context_tmpl, g_uncommon_tmpl, g_out, g_audit;
  std::size_t g_concurrency = 4;
  double g_abort = 0.10;
  generate->add_option("--sources", g_sources, "Manifest of source objects")->required();
  generate->add_option("--endpoints", g_endpoints, "Endpoints config (JSON)")->required();
  generate->add_option("--endpoint", g_endpoint, "Endpoint name")->capture_default_str();
  generate->add_option("--context-template", g_context_tmpl, "Context prompt template");
  generate->add_option("--uncommon-template", g_uncommon_tmpl, "Uncommon prompt template");
  generate->add_option("--out", g_out, "Candidate sets (JSONL)")->required();
  generate->add_option("--audit-log", g_audit, "Exchange log (JSONL)");
  generate->add_option("--concurrency", g_concurrency)->capture_default_str();
  generate->add_option("--abort-threshold", g_abort)->capture_default_str();

  // check
  auto* check = app.add_subcommand("check", "Run the checker over candidate sets");
  std::string c_candidates, c_endpoints, c_endpoint = "checker", c_template, c_out, c_audit;
  std::size_t c_concurrency = 4;
  check->add_option("--candidates", c_candidates, "Candidate sets (JSONL)")->required();
  check->add_option("--endpoints", c_endpoints, "Endpoints config (JSON)")->required();
  check->add_option("--endpoint", c_endpoint, "Endpoint name")->capture_default_str();
  check->add_option("--template", c_template, "Checker prompt template");
  check->add_option("--out", c_out, "Checked sets (JSONL)")->required();
  check->add_option("--audit-log", c_audit, "Exchange log (JSONL)");
  check->add_option("--concurrency", c_concurrency)->capture_default_str();

  // emit-tuning
  auto* emit = app.add_subcommand("emit-tuning", "Write instruction-tuning conversations");
  std::string e_manifest, e_grammar = "curly-100", e_style = "rog", e_naive_template = "{REF} {QUERY}", e_out;
  emit->add_option("--manifest", e_manifest)->required();
  emit->add_option("--grammar", e_grammar, "Preset name or JSON file")->capture_default_str();
  emit->add_option("--style", e_style)->check(CLI::IsMember({"rog", "naive"}))->capture_default_str();
  emit->add_option("--naive-template", e_naive_template)->capture_default_str();
  emit->add_option("--out", e_out)->required();

  // mix
  auto* mix = app.add_subcommand("mix", "Mix several tuning sources with a seeded shuffle");
  std::string m_spec, m_grammar = "curly-100", m_out;
  mix->add_option("--spec", m_spec, "Mix spec (JSON)")->required();
  mix->add_option("--grammar", m_grammar)->capture_default_str();
  mix->add_option("--out", m_out)->required();

  // run
  auto* run = app.add_subcommand("run", "Run an inference mode over a manifest");
  std::string r_manifest, r_mode = "direct", r_endpoints, r_grammar = "curly-100", r_vocab, r_prompts, r_out,
                          r_traces, r_audit;
  std::vector<std::string> r_splits, r_types;
  std::size_t r_concurrency = 4;
  double r_abort = 0.10;
  run->add_option("--manifest", r_manifest)->required();
  run->add_option("--mode", r_mode)->check(CLI::IsMember({"direct", "rog", "dr", "rd"}))->capture_default_str();
  run->add_option("--endpoints", r_endpoints, "Endpoints config with grounder/reasoner/detector")->required();
  run->add_option("--grammar", r_grammar)->capture_default_str();
  run->add_option("--vocabulary", r_vocab, "Category vocabulary (TSV)");
  run->add_option("--prompts", r_prompts, "Hybrid-mode prompt config (JSON)");
  run->add_option("--split", r_splits, "Restrict to splits");
  run->add_option("--query-type", r_types, "Restrict to query types");
  run->add_option("--out", r_out, "Predictions (JSONL)")->required();
  run->add_option("--traces", r_traces, "Call traces (JSONL)");
  run->add_option("--audit-log", r_audit, "Exchange log (JSONL)");
  run->add_option("--concurrency", r_concurrency)->capture_default_str();
  run->add_option("--abort-threshold", r_abort)->capture_default_str();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against a manifest");
  std::string ev_preds, ev_manifest, ev_config, ev_format = "text", ev_out, ev_previous, ev_gt_mode;
  std::vector<std::string> ev_splits, ev_types;
  evaluate->add_option("--predictions", ev_preds)->required();
  evaluate->add_option("--manifest", ev_manifest)->required();
  evaluate->add_option("--config", ev_config, "Eval config (JSON)");
  evaluate->add_option("--gt-mode", ev_gt_mode)->check(CLI::IsMember({"primary_only", "with_alternatives"}));
  evaluate->add_option("--split", ev_splits);
  evaluate->add_option("--query-type", ev_types);
  evaluate->add_option("--format", ev_format)
      ->check(CLI::IsMember({"text", "text-table", "csv", "structured", "json"}))
      ->capture_default_str();
  evaluate->add_option("--out", ev_out, "Output file (default stdout)");
  evaluate->add_option("--previous", ev_previous, "Earlier report to compare provenance against");

  // report
  auto* report = app.add_subcommand("report", "Re-render a saved report");
  std::string rp_in, rp_format = "text", rp_out;
  report->add_option("input", rp_in, "Report (csv or structured)")->required();
  report->add_option("--format", rp_format)
      ->check(CLI::IsMember({"text", "text-table", "csv", "structured", "json"}))
      ->capture_default_str();
  report->add_option("--out", rp_out);

  // serve
  auto* serve = app.add_subcommand("serve", "Run the annotation service");
  std::string s_sources, s_checked, s_log, s_images, s_host = "127.0.0.1", s_endpoints, s_endpoint = "checker",
                                                    s_manifest_out;
  int s_port = 8080;
  double s_lease_minutes = 15.0;
  bool s_hide_primary = false;
  serve->add_option("--sources", s_sources, "Manifest of source objects");
  serve->add_option("--checked", s_checked, "Checked candidate sets (JSONL)");
  serve->add_option("--event-log", s_log, "Append-only event log")->required();
  serve->add_option("--images", s_images, "Static image root");
  serve->add_option("--host", s_host)->capture_default_str();
  serve->add_option("--port", s_port)->capture_default_str();
  serve->add_option("--lease-minutes", s_lease_minutes)->capture_default_str();
  serve->add_option("--endpoints", s_endpoints, "Endpoints config holding the checker");
  serve->add_option("--endpoint", s_endpoint)->capture_default_str();
  serve->add_option("--manifest-out", s_manifest_out, "Rewritten after every finalize");
  serve->add_flag("--hide-primary-box", s_hide_primary, "Do not show the primary box on bbox tasks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      const auto m = eg::load_manifest(v_manifest);
      const auto res = eg::validate_manifest(m);
      print_validation(res, v_json);
      return res.ok() ? 0 : kExitValidation;
    }

    if (*generate) {
      const auto sources = eg::load_manifest(g_sources);
      const auto endpoints = eg::load_endpoints(g_endpoints);
      const auto backend = eg::make_chat_backend(endpoint_named(endpoints, g_endpoint), g_endpoint, make_audit(g_audit));
      std::map<eg::QueryType, eg::PromptTemplate> templates;
      if (!g_context_tmpl.empty()) templates[eg::QueryType::kContext] = eg::load_prompt_template(g_context_tmpl);
      if (!g_uncommon_tmpl.empty()) templates[eg::QueryType::kUncommon] = eg::load_prompt_template(g_uncommon_tmpl);
      if (templates.empty()) throw eg::Error(eg::ErrorCode::kInvalidInput, "give at least one template");

      std::vector<std::pair<const eg::IntentionRecord*, eg::QueryType>> jobs;
      for (const auto& r : sources.records) {
        for (const auto& [type, tmpl] : templates) jobs.emplace_back(&r, type);
      }
      std::vector<std::optional<eg::CandidateSet>> results(jobs.size());
      eg::PassRateLedger ledger;
      std::atomic<std::size_t> transport{0}, format{0};
      std::mutex err_mu;
      eg::parallel_for(jobs.size(), g_concurrency, [&](std::size_t i) {
        const auto& [rec, type] = jobs[i];
        try {
          results[i] = eg::generate_candidates(*rec, type, templates.at(type), *backend);
          ledger.record_outcome(type, eg::Stage::kGeneration, true);
        } catch (const eg::Error& e) {
          if (e.code() == eg::ErrorCode::kTransport) {
            ++transport;
          } else if (e.code() == eg::ErrorCode::kFormat) {
            ++format;
            ledger.record_outcome(type, eg::Stage::kGeneration, false);
          } else {
            throw;
          }
          std::lock_guard lock(err_mu);
          std::cerr << "skip " << rec->record_id << " (" << eg::to_string(type) << "): " << e.what() << '\n';
        }
      });
      auto out = open_out(g_out);
      for (const auto& r : results) {
        if (r) out << nlohmann::json(*r).dump() << '\n';
      }
      std::cerr << ledger.to_json().dump(2) << '\n';
      if (!jobs.empty() && static_cast<double>(transport) / static_cast<double>(jobs.size()) > g_abort) {
        return kExitTransportAbort;
      }
      return transport + format == 0 ? 0 : kExitError;
    }

    if (*check) {
      const auto sets = eg::load_candidate_sets(c_candidates);
      const auto endpoints = eg::load_endpoints(c_endpoints);
      const auto backend = eg::make_chat_backend(endpoint_named(endpoints, c_endpoint), c_endpoint, make_audit(c_audit));
      const auto tmpl = c_template.empty() ? eg::default_checker_template() : eg::load_prompt_template(c_template);
      eg::PassRateLedger ledger;
      std::vector<eg::CheckedCandidateSet> checked(sets.size());
      eg::parallel_for(sets.size(), c_concurrency,
                       [&](std::size_t i) { checked[i] = eg::check_candidates(sets[i], *backend, tmpl, &ledger); });
      auto out = open_out(c_out);
      for (const auto& c : checked) out << nlohmann::json(c).dump() << '\n';
      for (auto type : {eg::QueryType::kContext, eg::QueryType::kUncommon}) {
        const auto counts = ledger.counts(type, eg::Stage::kChecker);
        std::cout << eg::to_string(type) << " checker pass rate " << eg::format_pass_rate(counts) << " ("
                  << counts.accepted << "/" << counts.generated << ", leaked " << counts.leaked << ")\n";
      }
      return 0;
    }

    if (*emit) {
      const auto m = eg::load_manifest(e_manifest);
      const auto g = eg::load_grammar(e_grammar);
      const auto convs =
          e_style == "rog" ? eg::emit_rog_conversations(m, g) : eg::emit_naive_conversations(m, g, e_naive_template);
      auto out = open_out(e_out);
      eg::write_conversations(out, convs);
      std::cout << convs.size() << " conversation(s)\n";
      return 0;
    }

    if (*mix) {
      const auto spec = eg::load_mix_spec(m_spec);
      const auto convs = eg::mix_datasets(spec, eg::load_grammar(m_grammar));
      auto out = open_out(m_out);
      eg::write_conversations(out, convs);
      std::cout << convs.size() << " conversation(s)\n";
      return 0;
    }

    if (*run) {
      const auto m = eg::load_manifest(r_manifest);
      const auto mode = eg::parse_mode(r_mode);
      const auto endpoints = eg::load_endpoints(r_endpoints);
      const auto audit = make_audit(r_audit);
      eg::PipelineBackends backends;
      if (endpoints.count("grounder")) backends.grounder = eg::make_chat_backend(endpoints.at("grounder"), "grounder", audit);
      if (endpoints.count("reasoner")) backends.reasoner = eg::make_chat_backend(endpoints.at("reasoner"), "reasoner", audit);
      if (endpoints.count("detector")) backends.detector = eg::make_detector_backend(endpoints.at("detector"));
      std::vector<std::string> vocab;
      if (!r_vocab.empty()) vocab = eg::vocabulary_categories(eg::load_vocabulary(r_vocab));
      const auto prompts = r_prompts.empty() ? eg::PipelinePrompts{} : eg::load_pipeline_prompts(r_prompts);
      eg::BatchOptions opts;
      opts.concurrency = r_concurrency;
      opts.abort_threshold = r_abort;
      opts.splits = parse_set<eg::Split>(r_splits, eg::parse_split, opts.splits);
      opts.query_types = parse_set<eg::QueryType>(r_types, eg::parse_query_type, opts.query_types);
      const auto result = eg::batch_run(m, mode, backends, eg::load_grammar(r_grammar), vocab, prompts, opts);
      auto out = open_out(r_out);
      eg::write_predictions(out, result.predictions());
      if (!r_traces.empty()) {
        auto tr = open_out(r_traces);
        for (const auto& t : result.traces) tr << eg::trace_to_json(t).dump() << '\n';
      }
      std::size_t failed = 0;
      for (const auto& t : result.traces) failed += t.failed();
      std::cout << result.traces.size() << " record(s), " << failed << " without a box, "
                << result.transport_failures << " transport failure(s)\n";
      return result.transport_failures == 0 ? 0 : kExitError;
    }

    if (*evaluate) {
      auto cfg = ev_config.empty() ? eg::EvalConfig{} : eg::load_eval_config(ev_config);
      if (!ev_gt_mode.empty()) cfg.gt_mode = eg::parse_gt_mode(ev_gt_mode);
      cfg.splits = parse_set<eg::Split>(ev_splits, eg::parse_split, cfg.splits);
      cfg.query_types = parse_set<eg::QueryType>(ev_types, eg::parse_query_type, cfg.query_types);
      std::optional<eg::EvalReport> previous;
      if (!ev_previous.empty()) previous = eg::load_report(ev_previous);
      const auto r = eg::evaluate_files(ev_preds, ev_manifest, cfg, previous);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      write_text(ev_out, eg::render_report(r, eg::parse_report_format(ev_format)));
      return 0;
    }

    if (*report) {
      write_text(rp_out, eg::render_report(eg::load_report(rp_in), eg::parse_report_format(rp_format)));
      return 0;
    }

    if (*serve) {
      eg::AnnotationOptions opts;
      opts.event_log = s_log;
      opts.lease_duration = std::chrono::milliseconds(static_cast<long long>(s_lease_minutes * 60'000.0));
      opts.show_primary_box = !s_hide_primary;
      std::shared_ptr<eg::ChatBackend> checker;
      if (!s_endpoints.empty()) {
        checker = eg::make_chat_backend(endpoint_named(eg::load_endpoints(s_endpoints), s_endpoint), s_endpoint);
      }
      eg::AnnotationService service(opts, eg::system_clock_ms(), checker);
      if (!s_sources.empty() && !s_checked.empty()) {
        const auto created = service.create_tasks(eg::load_manifest(s_sources), eg::load_checked_sets(s_checked));
        std::cerr << created.created << " task(s) created\n";
        for (const auto& [id, why] : created.skipped) std::cerr << "skipped " << id << ": " << why << '\n';
      }
      std::mutex write_mu;
      eg::AnnotationServer server(service, s_images, [&](const eg::FinalizeResult&) {
        if (s_manifest_out.empty()) return;
        std::lock_guard lock(write_mu);
        eg::save_manifest(s_manifest_out, service.manifest());
      });
      const int port = server.bind(s_host, s_port);
      std::cerr << "listening on http://" << s_host << ":" << port << '\n';
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.listen();
      g_server = nullptr;
      return 0;
    }
  } catch (const eg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == eg::ErrorCode::kValidation) return kExitValidation;
    if (e.code() == eg::ErrorCode::kBatchAborted) return kExitTransportAbort;
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
