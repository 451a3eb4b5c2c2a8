#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "egoground/dataset.hpp"
#include "egoground/geometry.hpp"
#include "egoground/grammar.hpp"
#include "egoground/metrics.hpp"

using namespace egoground;

namespace {

// Counts unit cells [i,i+1)x[j,j+1) covered by both / either box. Independent
// of the analytic formula; only meaningful for integer coordinates.
std::pair<long, long> cell_counts(const BBox& a, const BBox& b) {
  const int lo_x = static_cast<int>(std::min(a.x1, b.x1)), hi_x = static_cast<int>(std::max(a.x2, b.x2));
  const int lo_y = static_cast<int>(std::min(a.y1, b.y1)), hi_y = static_cast<int>(std::max(a.y2, b.y2));
  long inter = 0, uni = 0;
  const auto covers = [](const BBox& r, int x, int y) { return x >= r.x1 && x + 1 <= r.x2 && y >= r.y1 && y + 1 <= r.y2; };
  for (int x = lo_x; x < hi_x; ++x) {
    for (int y = lo_y; y < hi_y; ++y) {
      const bool in_a = covers(a, x, y), in_b = covers(b, x, y);
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return {inter, uni};
}

BBox random_int_box(std::mt19937_64& rng, int extent) {
  std::uniform_int_distribution<int> d(0, extent);
  int x1 = d(rng), x2 = d(rng), y1 = d(rng), y2 = d(rng);
  if (x1 == x2) x2 = x1 == extent ? x1 - 1 : x1 + 1;
  if (y1 == y2) y2 = y1 == extent ? y1 - 1 : y1 + 1;
  return {double(std::min(x1, x2)), double(std::min(y1, y2)), double(std::max(x1, x2)), double(std::max(y1, y2))};
}

std::vector<ScoredSample> samples_of(std::initializer_list<double> ious) {
  std::vector<ScoredSample> out;
  int i = 0;
  for (double v : ious) out.push_back({"s" + std::to_string(i++), v, 0});
  return out;
}

IntentionRecord make_record(std::string id, QueryType t, Split s, BBox box, std::string image = "img.jpg") {
  IntentionRecord r;
  r.record_id = std::move(id);
  r.image_ref = std::move(image);
  r.image_size = {640, 480};
  r.object_category = "chair";
  r.query_type = t;
  r.query_text = t == QueryType::kObject ? "chair" : "I need somewhere to sit.";
  r.primary_bbox = box;
  r.split = s;
  return r;
}

}  // namespace

// --- geometry --------------------------------------------------------------

TEST(Iou, IdenticalBoxesScoreOne) { EXPECT_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0); }

TEST(Iou, DisjointBoxesScoreZero) { EXPECT_EQ(iou({0, 0, 10, 10}, {20, 20, 30, 30}), 0.0); }

TEST(Iou, SharedEdgeIsNoOverlap) { EXPECT_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0); }

TEST(Iou, PartialOverlapMatchesCellCount) {
  const BBox a{0, 0, 10, 10}, b{5, 5, 15, 15};
  const auto [inter, uni] = cell_counts(a, b);
  EXPECT_EQ(inter, 25);
  EXPECT_EQ(uni, 175);
  EXPECT_DOUBLE_EQ(iou(a, b), 25.0 / 175.0);
}

TEST(Iou, RejectsInvalidBoxes) {
  EXPECT_THROW(iou({5, 5, 5, 10}, {0, 0, 10, 10}), Error);
  EXPECT_THROW(iou({0, 0, 10, 10}, {-1, 0, 10, 10}), Error);
  EXPECT_THROW(iou({0, 0, 10, std::nan("")}, {0, 0, 10, 10}), Error);
}

TEST(IouProperty, SymmetricBoundedAndEqualToCellOracle) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_int_box(rng, 40), b = random_int_box(rng, 40);
    const double ab = iou(a, b);
    EXPECT_EQ(ab, iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_EQ(iou(a, a), 1.0);
    const auto [inter, uni] = cell_counts(a, b);
    EXPECT_EQ(ab, static_cast<double>(inter) / static_cast<double>(uni)) << to_string(a) << " " << to_string(b);
  }
}

TEST(BestMatch, PicksExactCopy) {
  const std::vector<BBox> gts{{100, 100, 120, 120}, {0, 0, 10, 10}};
  const auto m = best_match({0, 0, 10, 10}, gts);
  EXPECT_EQ(m.best_iou, 1.0);
  EXPECT_EQ(m.index, 1u);
}

TEST(BestMatch, ZeroTieResolvesToLowestIndex) {
  const std::vector<BBox> gts{{100, 100, 120, 120}, {200, 200, 220, 220}};
  const auto m = best_match({0, 0, 10, 10}, gts);
  EXPECT_EQ(m.best_iou, 0.0);
  EXPECT_EQ(m.index, 0u);
}

TEST(BestMatch, HigherOverlapWins) {
  const std::vector<BBox> gts{{5, 5, 15, 15}, {0, 0, 10, 20}};
  const auto m = best_match({0, 0, 10, 10}, gts);
  EXPECT_DOUBLE_EQ(m.best_iou, 0.5);
  EXPECT_EQ(m.index, 1u);
}

TEST(BestMatch, EmptyGroundTruthIsAnError) { EXPECT_THROW(best_match({0, 0, 1, 1}, {}), Error); }

TEST(BestMatchProperty, SupersetNeverLowersScore) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto pred = random_int_box(rng, 50);
    std::vector<BBox> gts{random_int_box(rng, 50)};
    const double before = best_match(pred, gts).best_iou;
    gts.push_back(random_int_box(rng, 50));
    EXPECT_GE(best_match(pred, gts).best_iou, before);
  }
}

TEST(ClampToImage, ClipsNegativeCorner) {
  const auto c = clamp_to_image({-5, -5, 10, 10}, {100, 100});
  EXPECT_EQ(c.x1, 0);
  EXPECT_EQ(c.y1, 0);
  EXPECT_EQ(c.x2, 10);
  EXPECT_EQ(c.y2, 10);
}

TEST(ClampToImage, ClipsFarCorner) {
  const auto c = clamp_to_image({90, 90, 120, 120}, {100, 100});
  EXPECT_EQ(c.x2, 100);
  EXPECT_EQ(c.y2, 100);
}

TEST(ClampToImage, FullyOutsideIsDegenerate) {
  try {
    clamp_to_image({150, 150, 200, 200}, {100, 100});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateAfterClamp);
  }
}

// --- metrics ---------------------------------------------------------------

TEST(PrecisionAt, AllPerfect) { EXPECT_EQ(precision_at(samples_of({1, 1, 1}), 0.5), 1.0); }

TEST(PrecisionAt, CountsStrictlyAboveThreshold) {
  EXPECT_DOUBLE_EQ(precision_at(samples_of({0.6, 0.4, 0.2}), 0.5), 1.0 / 3.0);
}

TEST(PrecisionAt, BoundaryDependsOnStrictness) {
  EXPECT_EQ(precision_at(samples_of({0.5}), 0.5, true), 0.0);
  EXPECT_EQ(precision_at(samples_of({0.5}), 0.5, false), 1.0);
}

TEST(PrecisionAt, EmptyInputIsAnError) { EXPECT_THROW(precision_at({}, 0.5), Error); }

TEST(MeanIou, Examples) {
  EXPECT_EQ(mean_iou(samples_of({1.0, 1.0})), 1.0);
  EXPECT_DOUBLE_EQ(mean_iou(samples_of({0.2, 0.4, 0.6})), 0.4);
  std::vector<ScoredSample> s{{"a", 0.8, 0}, ScoredSample::unparseable("b")};
  EXPECT_DOUBLE_EQ(mean_iou(s), 0.4);
}

TEST(ScoreSample, MissingOrDegeneratePredictionScoresZero) {
  const std::vector<BBox> gts{{0, 0, 10, 10}};
  EXPECT_EQ(score_sample("a", std::nullopt, gts).best_iou, 0.0);
  EXPECT_FALSE(score_sample("a", std::nullopt, gts).matched_gt_index);
  EXPECT_EQ(score_sample("a", BBox{3, 3, 3, 9}, gts).best_iou, 0.0);
  EXPECT_EQ(score_sample("a", BBox{0, 0, 10, 10}, gts).best_iou, 1.0);
}

TEST(MetricProperty, AntitoneInThresholdAndPermutationInvariant) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredSample> s;
    const int n = 1 + static_cast<int>(rng() % 60);
    for (int i = 0; i < n; ++i) s.push_back({std::to_string(i), u(rng), 0});
    EXPECT_GE(precision_at(s, 0.3), precision_at(s, 0.5));
    auto shuffled = s;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(precision_at(s, 0.5), precision_at(shuffled, 0.5));
    EXPECT_EQ(mean_iou(s), mean_iou(shuffled));
  }
}

TEST(AggregateOverall, ContextUncommonMeans) {
  MetricReport c{100, {{0.5, 0.466}}, 0.4}, u{100, {{0.5, 0.236}}, 0.2};
  const auto o = aggregate_overall(c, u);
  EXPECT_EQ(format_percent(o.precision_at.at(0.5)), "35.1");
  EXPECT_EQ(o.n_samples, 200u);
  MetricReport c2{1, {{0.5, 0.188}}, 0}, u2{1, {{0.5, 0.157}}, 0};
  EXPECT_NEAR(aggregate_overall(c2, u2).precision_at.at(0.5) * 100, 17.25, 1e-9);
  EXPECT_EQ(format_percent(aggregate_overall(c2, u2).precision_at.at(0.5)), "17.2");
}

TEST(AggregateOverall, EqualInputsAreFixedPoint) {
  MetricReport x{10, {{0.3, 0.7}, {0.5, 0.45}}, 0.41};
  const auto o = aggregate_overall(x, x);
  EXPECT_EQ(o.precision_at, x.precision_at);
  EXPECT_EQ(o.miou, x.miou);
}

TEST(AggregateOverall, MismatchedThresholdsThrow) {
  EXPECT_THROW(aggregate_overall({1, {{0.5, 1}}, 1}, {1, {{0.3, 1}}, 1}), Error);
}

TEST(Rounding, HalfEvenAtOneAndTwoDecimals) {
  EXPECT_EQ(format_fixed(17.25, 1), "17.2");
  EXPECT_EQ(format_fixed(17.35, 1), "17.4");
  EXPECT_EQ(format_fixed((18.73 + 15.72) / 2, 2), "17.22");
  EXPECT_EQ(format_fixed(35.1, 1), "35.1");
  EXPECT_EQ(format_fixed(0.42499, 4), "0.4250");
}

// --- grammar ---------------------------------------------------------------

TEST(Grammar, SerializeExamples) {
  const Grammar curly(curly_100_preset()), paren(paren_1000_preset());
  const ImageSize size{640, 480};
  EXPECT_EQ(curly.quantize({0, 0, 640, 480}, size), (std::array<int, 4>{0, 0, 100, 100}));
  EXPECT_EQ(curly.quantize({64, 48, 320, 240}, size), (std::array<int, 4>{10, 10, 50, 50}));
  EXPECT_EQ(paren.quantize({64, 48, 320, 240}, size), (std::array<int, 4>{100, 100, 500, 500}));
  EXPECT_EQ(curly.serialize_box({64, 48, 320, 240}, size), "{<10><10><50><50>}");
  EXPECT_EQ(paren.serialize_box({64, 48, 320, 240}, size), "<box>(100,100),(500,500)</box>");
}

TEST(Grammar, SubBinBoxKeepsNonzeroExtent) {
  const Grammar g(curly_100_preset());
  const auto bins = g.quantize({100, 100, 101, 101}, {640, 480});
  EXPECT_LT(bins[0], bins[2]);
  EXPECT_LT(bins[1], bins[3]);
}

TEST(Grammar, ParseRecoversQuantizedBox) {
  const Grammar g(curly_100_preset());
  const ImageSize size{640, 480};
  const auto out = g.parse_boxes("The chair is at " + g.serialize_box({64, 48, 320, 240}, size) + ".", size);
  ASSERT_EQ(out.status, ParseStatus::kOk);
  ASSERT_EQ(out.boxes.size(), 1u);
  EXPECT_DOUBLE_EQ(out.boxes[0].x1, 64);
  EXPECT_DOUBLE_EQ(out.boxes[0].y2, 240);
}

TEST(Grammar, ParseStatuses) {
  const Grammar g(curly_100_preset());
  const ImageSize size{640, 480};
  EXPECT_EQ(g.parse_boxes("no box here", size).status, ParseStatus::kNoBoxFound);
  const auto inverted = g.parse_boxes("{<50><50><10><10>}", size);
  EXPECT_EQ(inverted.status, ParseStatus::kMalformed);
  EXPECT_TRUE(inverted.boxes.empty());
  EXPECT_EQ(g.parse_boxes("{<10><10><150><50>}", size).status, ParseStatus::kOutOfRange);
  EXPECT_EQ(g.parse_boxes("{<10><10><x><50>}", size).status, ParseStatus::kMalformed);
  EXPECT_EQ(g.parse_boxes("{<10><10><99999999999999999999><50>}", size).status, ParseStatus::kOutOfRange);
}

TEST(Grammar, MultipleBoxesKeepOrder) {
  const Grammar g(paren_1000_preset());
  const auto out = g.parse_boxes("<box>(0,0),(500,500)</box> and <box>(500,500),(1000,1000)</box>", {100, 100});
  ASSERT_EQ(out.boxes.size(), 2u);
  EXPECT_EQ(out.boxes[1].x1, 50);
}

TEST(GrammarProperty, ParseIsTotalOnArbitraryBytes) {
  const Grammar g(curly_100_preset());
  std::mt19937_64 rng(3);
  const std::string alphabet = "{}<>0123456789,() abcx-\n\x01\xff";
  for (int i = 0; i < 2000; ++i) {
    std::string s(rng() % 64, ' ');
    for (auto& c : s) c = alphabet[rng() % alphabet.size()];
    const auto out = g.parse_boxes(s, {640, 480});
    EXPECT_EQ(out.status == ParseStatus::kOk, !out.boxes.empty());
  }
  EXPECT_NO_THROW(g.parse_boxes(std::string(100000, '{'), {640, 480}));
}

TEST(GrammarProperty, RoundTripWithinOneBinAndIdempotent) {
  std::mt19937_64 rng(17);
  for (const auto& spec : {curly_100_preset(), paren_1000_preset()}) {
    const Grammar g(spec);
    for (int i = 0; i < 1000; ++i) {
      const ImageSize size{1 + static_cast<int>(rng() % 2000), 1 + static_cast<int>(rng() % 2000)};
      std::uniform_real_distribution<double> ux(0, size.width), uy(0, size.height);
      double x1 = ux(rng), x2 = ux(rng), y1 = uy(rng), y2 = uy(rng);
      if (x1 == x2 || y1 == y2) continue;
      const BBox b{std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
      const auto text = g.serialize_box(b, size);
      const auto parsed = g.parse_boxes(text, size);
      ASSERT_EQ(parsed.status, ParseStatus::kOk) << text;
      const double bw = double(size.width) / g.scale(), bh = double(size.height) / g.scale();
      EXPECT_LT(std::abs(parsed.boxes[0].x1 - b.x1), bw);
      EXPECT_LT(std::abs(parsed.boxes[0].x2 - b.x2), bw);
      EXPECT_LT(std::abs(parsed.boxes[0].y1 - b.y1), bh);
      EXPECT_LT(std::abs(parsed.boxes[0].y2 - b.y2), bh);
      EXPECT_EQ(g.serialize_box(parsed.boxes[0], size), text);
    }
  }
}

TEST(Grammar, RejectsBadSpecs) {
  auto s = curly_100_preset();
  s.scale = 1;
  EXPECT_THROW(Grammar{s}, Error);
  s = curly_100_preset();
  s.coord_pattern = "<{x1}><{y1}><{x2}>";
  EXPECT_THROW(Grammar{s}, Error);
  s = curly_100_preset();
  s.ref_token = s.reason_token;
  EXPECT_THROW(Grammar{s}, Error);
}

TEST(Grammar, LoadsPresetsByNameAndFile) {
  EXPECT_EQ(load_grammar("curly-100").scale(), 100);
  EXPECT_EQ(load_grammar(EGOGROUND_DATA_DIR "/grammars/paren-1000.json").scale(), 1000);
  EXPECT_THROW(load_grammar("no-such-grammar"), Error);
}

TEST(Grammar, TaskTokenPrompts) {
  const Grammar g(curly_100_preset());
  EXPECT_EQ(g.reason_prompt("I am tired."), "<reason> I am tired.");
  EXPECT_EQ(g.ref_prompt("chair"), "<ref> chair");
}

TEST(ExtractCategory, Examples) {
  EXPECT_EQ(extract_category("Chair."), "chair");
  EXPECT_EQ(extract_category("chair, stool"), "chair");
  EXPECT_EQ(extract_category("  The handbag "), "the handbag");
  EXPECT_THROW(extract_category(""), Error);
  EXPECT_THROW(extract_category(" ... "), Error);
}

TEST(ExtractCategoryProperty, Idempotent) {
  for (const char* s : {"Chair.", "chair, stool", "  The handbag ", "**Knife**", "\"Pillow\"!", "a; b"}) {
    const auto once = extract_category(s);
    EXPECT_EQ(extract_category(once), once);
  }
  EXPECT_EQ(extract_categories("Chair, stool; 42, lamp"), (std::vector<std::string>{"chair", "stool", "lamp"}));
}

// --- dataset ---------------------------------------------------------------

TEST(Manifest, RoundTripsThroughJsonl) {
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTest, {1, 2, 30, 40}));
  m.records.back().alternative_bboxes = {{5, 5, 50, 50}};
  m.records.push_back(make_record("b", QueryType::kObject, Split::kVal, {1, 2, 30, 40}));
  m.declared_stats = compute_stats(m.records);
  std::stringstream ss;
  write_manifest(ss, m);
  const auto back = read_manifest(ss);
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.declared_stats, m.declared_stats);
}

TEST(Manifest, MalformedLineIsALoadError) {
  std::stringstream ss("{\"record_id\": 1}\n");
  try {
    read_manifest(ss, "m.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLoad);
    EXPECT_NE(std::string(e.what()).find("m.jsonl:1"), std::string::npos);
  }
}

TEST(Validate, EmptyManifestIsClean) {
  const auto res = validate_manifest({});
  EXPECT_TRUE(res.ok());
  EXPECT_TRUE(res.stats.empty());
}

TEST(Validate, OutOfBoundsBoxIsSingleIssue) {
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTest, {600, 400, 700, 470}));
  const auto res = validate_manifest(m);
  ASSERT_EQ(res.issues.size(), 1u);
  EXPECT_EQ(res.issues[0].kind, IssueKind::kOutOfBounds);
}

TEST(Validate, RecordLevelIssues) {
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTest, {1, 1, 5, 5}));
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTest, {1, 1, 5, 5}));
  auto obj = make_record("o", QueryType::kObject, Split::kTest, {1, 1, 5, 5});
  obj.query_text = "stool";
  m.records.push_back(obj);
  auto empty = make_record("e", QueryType::kUncommon, Split::kTest, {5, 5, 5, 9});
  empty.query_text = "";
  m.records.push_back(empty);
  const auto res = validate_manifest(m);
  EXPECT_EQ(res.count(IssueKind::kDuplicateId), 1u);
  EXPECT_EQ(res.count(IssueKind::kObjectQueryMismatch), 1u);
  EXPECT_EQ(res.count(IssueKind::kEmptyQuery), 1u);
  EXPECT_EQ(res.count(IssueKind::kInvalidBox), 1u);
}

TEST(Validate, StatsCountImagesAndAllBoxes) {
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTrain, {1, 1, 5, 5}, "x.jpg"));
  m.records.back().alternative_bboxes = {{2, 2, 6, 6}, {3, 3, 7, 7}};
  m.records.push_back(make_record("b", QueryType::kUncommon, Split::kTrain, {1, 1, 5, 5}, "x.jpg"));
  m.records.push_back(make_record("c", QueryType::kContext, Split::kTrain, {1, 1, 5, 5}, "y.jpg"));
  const auto res = validate_manifest(m);
  ASSERT_TRUE(res.ok());
  EXPECT_EQ(res.stats.at(Split::kTrain).images, 2u);
  EXPECT_EQ(res.stats.at(Split::kTrain).boxes.at(QueryType::kContext), 4u);
  EXPECT_EQ(res.stats.at(Split::kTrain).boxes.at(QueryType::kUncommon), 1u);

  m.declared_stats = res.stats;
  EXPECT_TRUE(validate_manifest(m).ok());
  (*m.declared_stats)[Split::kTrain].boxes[QueryType::kUncommon] = 2;
  const auto bad = validate_manifest(m);
  EXPECT_EQ(bad.count(IssueKind::kStatMismatch), 1u);
  // Idempotent, no side effects.
  EXPECT_EQ(validate_manifest(m).issues.size(), bad.issues.size());
}

TEST(Tuning, RogConversationHasFourTurnsAndRoundTrips) {
  const Grammar g(curly_100_preset());
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTrain, {64, 48, 320, 240}));
  m.records.push_back(make_record("b", QueryType::kUncommon, Split::kTrain, {10, 20, 33, 77}));
  m.records.push_back(make_record("c", QueryType::kObject, Split::kTrain, {10, 20, 33, 77}));
  const auto convs = emit_rog_conversations(m, g);
  ASSERT_EQ(convs.size(), 2u);
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& c = convs[i];
    ASSERT_EQ(c.turns.size(), 4u);
    EXPECT_TRUE(c.well_formed());
    EXPECT_EQ(c.turns[0].content, "<reason> I need somewhere to sit.");
    EXPECT_EQ(c.turns[1].content, "chair");
    EXPECT_EQ(c.turns[2].content, "<ref> chair");
    const auto parsed = g.parse_boxes(c.turns[3].content, m.records[i].image_size);
    ASSERT_EQ(parsed.status, ParseStatus::kOk);
    EXPECT_LT(std::abs(parsed.boxes[0].x1 - m.records[i].primary_bbox.x1), 6.4);
    EXPECT_LT(std::abs(parsed.boxes[0].y2 - m.records[i].primary_bbox.y2), 4.8);
  }
}

TEST(Tuning, NaiveConversationPerRecord) {
  const Grammar g(paren_1000_preset());
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTrain, {64, 48, 320, 240}));
  m.records.push_back(make_record("c", QueryType::kObject, Split::kTrain, {10, 20, 33, 77}));
  const auto convs = emit_naive_conversations(m, g);
  ASSERT_EQ(convs.size(), 2u);
  for (std::size_t i = 0; i < convs.size(); ++i) {
    ASSERT_EQ(convs[i].turns.size(), 2u);
    EXPECT_NE(convs[i].turns[0].content.find(m.records[i].query_text), std::string::npos);
    EXPECT_EQ(g.parse_boxes(convs[i].turns[1].content, m.records[i].image_size).status, ParseStatus::kOk);
  }
  EXPECT_EQ(emit_naive_conversations(m, g, "Q: {QUERY}")[0].turns[0].content, "Q: I need somewhere to sit.");
}

TEST(Tuning, ConversationsRoundTripThroughJsonl) {
  const Grammar g(curly_100_preset());
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTrain, {64, 48, 320, 240}));
  const auto convs = emit_rog_conversations(m, g);
  std::stringstream ss;
  write_conversations(ss, convs);
  EXPECT_EQ(read_conversations(ss), convs);
}

TEST(Tuning, InvalidManifestIsRefused) {
  Manifest m;
  m.records.push_back(make_record("a", QueryType::kContext, Split::kTrain, {600, 400, 700, 500}));
  EXPECT_THROW(emit_rog_conversations(m, Grammar(curly_100_preset())), Error);
}

TEST(Shuffle, SeedDeterminesOrderNotContents) {
  std::vector<int> base(20);
  std::iota(base.begin(), base.end(), 0);
  auto a = base, b = base, c = base;
  deterministic_shuffle(a, 1);
  deterministic_shuffle(b, 1);
  deterministic_shuffle(c, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::sort(c.begin(), c.end());
  EXPECT_EQ(c, base);
}

TEST(Vocabulary, LoadsFixture) {
  const auto v = load_vocabulary(EGOGROUND_DATA_DIR "/vocabulary.tsv");
  ASSERT_EQ(v.size(), 11u);
  EXPECT_EQ(v.front().category, "Book");
  EXPECT_EQ(v.back().category, "Soap");
  EXPECT_EQ(v.back().primary_function, "For cleaning");
}
