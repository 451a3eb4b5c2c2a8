#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "egoground/eval.hpp"

using namespace egoground;
namespace fs = std::filesystem;

namespace {

const std::string kData = EGOGROUND_DATA_DIR;

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("egoground_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the CLI with stdout/stderr captured to files; returns the exit code.
int cli(const std::string& args, std::string* out = nullptr) {
  const auto o = scratch() / "stdout.txt";
  const std::string cmd = std::string(EGOGROUND_CLI) + " " + args + " >" + o.string() + " 2>" +
                          (scratch() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  if (out) *out = read_file(o);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, ValidateDemoManifest) {
  std::string out;
  EXPECT_EQ(cli("validate " + q(kData + "/demo/manifest.jsonl"), &out), 0);
  EXPECT_EQ(cli("validate --json " + q(kData + "/demo/manifest.jsonl"), &out), 0);
  EXPECT_TRUE(nlohmann::json::parse(out)["ok"].get<bool>());
}

TEST(Cli, ValidationFailureExitsTwo) {
  const auto bad = scratch() / "bad.jsonl";
  std::ofstream(bad) << R"({"record_id": "a", "image_ref": "x.jpg", "image_size": {"width": 10, "height": 10}, )"
                        R"("object_category": "cup", "query_type": "context", "query_text": "thirsty", )"
                        R"("primary_bbox": [0, 0, 20, 5], "split": "test"})"
                     << '\n';
  EXPECT_EQ(cli("validate " + q(bad)), 2);
  EXPECT_EQ(cli("validate " + q(scratch() / "missing.jsonl")), 1);
}

TEST(Cli, RunEvaluateAndReport) {
  const auto preds = scratch() / "preds.jsonl";
  const auto csv = scratch() / "report.csv";
  ASSERT_EQ(cli("run --manifest " + q(kData + "/demo/manifest.jsonl") + " --mode rog --endpoints " +
                q(kData + "/endpoints.example.json") + " --out " + q(preds)),
            0);
  std::string table;
  ASSERT_EQ(cli("evaluate --predictions " + q(preds) + " --manifest " + q(kData + "/demo/manifest.jsonl") +
                    " --format csv --out " + q(csv)),
            0);
  const auto report = load_report(csv);
  ASSERT_TRUE(report.overall);
  EXPECT_DOUBLE_EQ(report.overall->precision_at.at(0.5), 1.0);
  EXPECT_EQ(report.provenance.predictions_sha256, sha256_file(preds));
  ASSERT_EQ(cli("report " + q(csv) + " --format text", &table), 0);
  EXPECT_NE(table.find("Overall P@0.5"), std::string::npos);
  EXPECT_NE(table.find("100.0"), std::string::npos);

  const auto preds2 = scratch() / "preds2.jsonl";
  ASSERT_EQ(cli("run --manifest " + q(kData + "/demo/manifest.jsonl") + " --mode rog --endpoints " +
                q(kData + "/endpoints.example.json") + " --out " + q(preds2) + " --concurrency 3"),
            0);
  EXPECT_EQ(read_file(preds), read_file(preds2));
}

TEST(Cli, HybridModesNeedVocabulary) {
  const auto preds = scratch() / "rd.jsonl";
  EXPECT_EQ(cli("run --manifest " + q(kData + "/demo/manifest.jsonl") + " --mode rd --endpoints " +
                q(kData + "/endpoints.example.json") + " --out " + q(preds)),
            1);
  EXPECT_EQ(cli("run --manifest " + q(kData + "/demo/manifest.jsonl") + " --mode rd --endpoints " +
                q(kData + "/endpoints.example.json") + " --vocabulary " + q(kData + "/vocabulary.tsv") +
                " --out " + q(preds)),
            0);
}

TEST(Cli, TransportAbortExitsThree) {
  const auto dir = scratch() / "down";
  fs::create_directories(dir);
  std::ofstream(dir / "down.json") << R"([{"match": "", "error": "transport", "repeat": true}])";
  std::ofstream(dir / "endpoints.json")
      << R"({"grounder": {"kind": "grounder", "base_url": "mock://down.json", "retry": {"max_attempts": 2, "backoff_base_ms": 1, "backoff_max_ms": 1}}})";
  EXPECT_EQ(cli("run --manifest " + q(kData + "/demo/manifest.jsonl") + " --mode direct --endpoints " +
                q(dir / "endpoints.json") + " --out " + q(dir / "p.jsonl")),
            3);
}

TEST(Cli, GenerateCheckAndTuningOutputs) {
  const auto cands = scratch() / "cands.jsonl";
  const auto checked = scratch() / "checked.jsonl";
  ASSERT_EQ(cli("generate --sources " + q(kData + "/demo/sources.jsonl") + " --endpoints " +
                q(kData + "/endpoints.example.json") + " --context-template " +
                q(kData + "/prompts/context_generation.json") + " --uncommon-template " +
                q(kData + "/prompts/uncommon_generation.json") + " --out " + q(cands)),
            0);
  ASSERT_EQ(cli("check --candidates " + q(cands) + " --endpoints " + q(kData + "/endpoints.example.json") +
                " --out " + q(checked)),
            0);
  EXPECT_EQ(load_checked_sets(checked).size(), 6u);

  const auto conv = scratch() / "rog.jsonl";
  ASSERT_EQ(cli("emit-tuning --manifest " + q(kData + "/demo/manifest.jsonl") + " --out " + q(conv)), 0);
  std::ifstream in(conv);
  const auto convs = read_conversations(in);
  ASSERT_EQ(convs.size(), 6u);
  for (const auto& c : convs) EXPECT_TRUE(c.well_formed());

  const auto mixed1 = scratch() / "mix1.jsonl";
  const auto mixed2 = scratch() / "mix2.jsonl";
  ASSERT_EQ(cli("mix --spec " + q(kData + "/demo/mix.json") + " --out " + q(mixed1)), 0);
  ASSERT_EQ(cli("mix --spec " + q(kData + "/demo/mix.json") + " --out " + q(mixed2)), 0);
  EXPECT_EQ(read_file(mixed1), read_file(mixed2));
}

TEST(Cli, UnknownVerbOrBadFlagIsUsageError) {
  EXPECT_NE(cli("frobnicate"), 0);
  EXPECT_NE(cli("evaluate --predictions x"), 0);
}
