#include "cfforge/generators.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <set>
#include <thread>

#include "cfforge/cfmetrics.hpp"
#include "test_util.hpp"

using namespace cfforge;

namespace {

// d unit-range continuous features, so encode() is the identity on [0,1].
FeatureSchema unit_schema(int d, std::vector<int> immutable = {}) {
  FeatureSchema s;
  for (int i = 0; i < d; ++i) {
    auto f = FeatureSpec::make_continuous("c" + std::to_string(i), "", true);
    f.observed_min = 0.0;
    f.observed_max = 1.0;
    s.features.push_back(std::move(f));
  }
  for (int i : immutable) s.features[static_cast<std::size_t>(i)].is_mutable = false;
  return s;
}

Sample pt(std::vector<double> xs, const std::string& pid = "p0", int widx = 0) {
  Sample s;
  s.patient_id = pid;
  s.window_index = widx;
  for (double x : xs) s.values.emplace_back(x);
  return s;
}

Classifier line_model(const FeatureSchema& s, std::vector<double> w, double b) {
  return Classifier::from_parts(s, {std::move(w)}, {{b}});
}

GenerationRequest make_req(const Sample& factual, int desired, const FeatureSchema& schema,
                           const Classifier& model, int budget = 200) {
  GenerationRequest r;
  r.factual = factual;
  r.desired_label = desired;
  r.schema = &schema;
  r.model = &model;
  r.budget = budget;
  return r;
}

struct StubServer {
  httplib::Server svr;
  std::thread th;
  int port = 0;
  std::atomic<int> hits{0};
  std::function<void(const httplib::Request&, httplib::Response&)> handler;

  StubServer() {
    svr.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      handler(req, res);
    });
    port = svr.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }
  ~StubServer() {
    svr.stop();
    th.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

void ok_response(httplib::Response& res, const std::string& content) {
  json j;
  j["choices"] =
      json::array({json{{"message", json{{"role", "assistant"}, {"content", content}}}}});
  res.set_content(j.dump(), "application/json");
}

EndpointConfig fast_config(const StubServer& server, const std::filesystem::path& cache) {
  EndpointConfig cfg;
  cfg.base_url = server.url();
  cfg.model_name = "m1";
  cfg.cache_path = cache;
  cfg.backoff_base_seconds = 0.002;
  cfg.timeout_seconds = 5;
  cfg.requests_per_minute = 600000;
  return cfg;
}

bool immutables_intact(const CounterfactualResult& r, const FeatureSchema& schema) {
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    if (!schema.features[i].is_mutable && !(r.cf_values[i] == r.factual.values[i])) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Prompt rendering

TEST(Prompt, ZeroShotListsEveryFeatureAndTheImmutables) {
  auto schema = testutil::mixed_schema();
  std::mt19937_64 gen(3);
  Sample factual = testutil::random_sample(schema, gen, "p0", 0);
  auto model = Classifier::from_parts(schema, {std::vector<double>(19, 0.0)}, {{-1.0}});
  auto req = make_req(factual, 1, schema, model);

  std::string prompt = render_prompt(req, PromptSpec::zero());
  for (const auto& f : schema.features) {
    EXPECT_NE(prompt.find("- " + f.name + " | "), std::string::npos) << f.name;
  }
  EXPECT_NE(prompt.find("Change the prediction from 0 to 1"), std::string::npos);
  EXPECT_NE(prompt.find("Immutable features that must not change: c6, c7, k2, k3."),
            std::string::npos);

  // required section order: instruction, table, immutable list, output contract
  auto p_task = prompt.find("Task:");
  auto p_table = prompt.find("Features (name");
  auto p_imm = prompt.find("Immutable features");
  auto p_out = prompt.find("Respond with a single JSON object");
  ASSERT_NE(p_out, std::string::npos);
  EXPECT_LT(p_task, p_table);
  EXPECT_LT(p_table, p_imm);
  EXPECT_LT(p_imm, p_out);

  EXPECT_EQ(prompt, render_prompt(req, PromptSpec::zero()));
}

TEST(Prompt, FewShotEmbedsExactlyKExemplarsBeforeTheQuery) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model);

  std::vector<std::pair<Sample, Sample>> ex;
  for (int i = 0; i < 3; ++i) {
    ex.emplace_back(pt({0.1 + 0.05 * i, 0.3}), pt({0.9, 0.3}));
  }
  std::string prompt = render_prompt(req, PromptSpec::few(ex));

  std::size_t count = 0;
  for (std::size_t pos = prompt.find("Example "); pos != std::string::npos;
       pos = prompt.find("Example ", pos + 1)) {
    ++count;
  }
  EXPECT_EQ(count, 3u);
  EXPECT_LT(prompt.find("Immutable features"), prompt.find("Example 1:"));
  EXPECT_LT(prompt.find("Example 3:"), prompt.find("Respond with a single JSON object"));
  // exemplar output follows the changed-features-only contract
  EXPECT_NE(prompt.find("Output: {\"c0\":0.9}"), std::string::npos);

  EXPECT_THROW(PromptSpec::few({}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Parse and repair

namespace {

FeatureSchema sleep_schema() {
  FeatureSchema s;
  auto add = [&](const std::string& name, const std::string& unit, double lo, double hi,
                 bool is_mutable) {
    auto f = FeatureSpec::make_continuous(name, unit, is_mutable);
    f.observed_min = lo;
    f.observed_max = hi;
    s.features.push_back(std::move(f));
  };
  add("deep_pct", "%", 0, 100, true);
  add("rem_pct", "%", 0, 100, true);
  add("mean_glucose", "mg/dL", 40, 400, true);
  add("age", "years", 30, 85, false);
  s.features.push_back(FeatureSpec::make_categorical("k0", {"low", "mid", "high"}, true));
  return s;
}

GenerationRequest sleep_request(const FeatureSchema& schema, const Classifier& model) {
  Sample f = pt({}, "p9", 4);
  f.values = {Value{30.1}, Value{15.4}, Value{210.8}, Value{81.0}, Value{0}};
  return make_req(f, 1, schema, model);
}

}  // namespace

TEST(ParseAndRepair, ChangedFeaturesOnlyContract) {
  auto schema = sleep_schema();
  auto model = Classifier::from_parts(schema, {std::vector<double>(7, 0.0)}, {{-2.0}});
  auto req = sleep_request(schema, model);

  auto cand = parse_and_repair(
      "Sure - raising deep sleep to 35% and REM to 20% while cutting glucose should do it:\n"
      "```json\n{\"deep_pct\": 35, \"rem_pct\": 20, \"mean_glucose\": 180}\n```\n",
      req);
  EXPECT_TRUE(cand.repairs.empty());
  auto changed = changed_feature_names(req.factual.values, cand.values, schema);
  EXPECT_EQ(changed, (std::vector<std::string>{"deep_pct", "rem_pct", "mean_glucose"}));
  EXPECT_DOUBLE_EQ(num(cand.values[0]), 35.0);
  EXPECT_DOUBLE_EQ(num(cand.values[1]), 20.0);
  EXPECT_DOUBLE_EQ(num(cand.values[2]), 180.0);
  EXPECT_DOUBLE_EQ(num(cand.values[3]), 81.0);  // unmentioned -> inherited
}

TEST(ParseAndRepair, ImmutableEditIsResetAndLogged) {
  auto schema = sleep_schema();
  auto model = Classifier::from_parts(schema, {std::vector<double>(7, 0.0)}, {{-2.0}});
  auto req = sleep_request(schema, model);

  auto cand = parse_and_repair(R"({"age": 40, "deep_pct": 33})", req);
  EXPECT_DOUBLE_EQ(num(cand.values[3]), 81.0);
  ASSERT_EQ(cand.repairs.size(), 1u);
  EXPECT_NE(cand.repairs[0].find("age"), std::string::npos);

  // restating the factual value of an immutable is not a repair
  auto same = parse_and_repair(R"({"age": 81.0})", req);
  EXPECT_TRUE(same.repairs.empty());
  EXPECT_TRUE(same.values == req.factual.values);
}

TEST(ParseAndRepair, FailureModes) {
  auto schema = sleep_schema();
  auto model = Classifier::from_parts(schema, {std::vector<double>(7, 0.0)}, {{-2.0}});
  auto req = sleep_request(schema, model);

  try {
    parse_and_repair("I would lower stress, mostly.", req);
    FAIL() << "expected ParseFailure";
  } catch (const ParseFailure& e) {
    EXPECT_EQ(e.reason, "no JSON");
  }
  EXPECT_THROW(parse_and_repair(R"({"bogus_feature": 1})", req), ParseFailure);
  EXPECT_THROW(parse_and_repair(R"({"deep_pct": "plenty"})", req), ParseFailure);
  EXPECT_THROW(parse_and_repair(R"({"k0": "extreme"})", req), ParseFailure);
  EXPECT_THROW(parse_and_repair(R"({"k0": 2})", req), ParseFailure);
  EXPECT_THROW(parse_and_repair(R"({"deep_pct": "nan"})", req), ParseFailure);
}

TEST(ParseAndRepair, KeepsOutOfRangeContinuousAndNumericStrings) {
  auto schema = sleep_schema();
  auto model = Classifier::from_parts(schema, {std::vector<double>(7, 0.0)}, {{-2.0}});
  auto req = sleep_request(schema, model);

  // plausibility must be able to see out-of-range proposals, so no clamping
  auto wild = parse_and_repair(R"({"mean_glucose": 900})", req);
  EXPECT_DOUBLE_EQ(num(wild.values[2]), 900.0);

  auto str = parse_and_repair(R"({"deep_pct": "35"})", req);
  EXPECT_DOUBLE_EQ(num(str.values[0]), 35.0);

  auto cat = parse_and_repair(R"({"k0": "high"})", req);
  EXPECT_TRUE(cat.values[4] == Value{2});
}

TEST(ParseAndRepair, TakesTheFirstParseableObject) {
  auto schema = sleep_schema();
  auto model = Classifier::from_parts(schema, {std::vector<double>(7, 0.0)}, {{-2.0}});
  auto req = sleep_request(schema, model);

  auto cand = parse_and_repair(
      "{broken json} then {\"deep_pct\": 40} and later {\"deep_pct\": 99}", req);
  EXPECT_DOUBLE_EQ(num(cand.values[0]), 40.0);
}

// ---------------------------------------------------------------------------
// Nearest unlike neighbor

TEST(TrainIndex, NunTiesBreakTowardLowestIndex) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {6, 6}, -6);  // boundary x0 + x1 = 1

  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.35, 0.6}, "a"), pt({0.6, 0.35}, "b")};  // both distance 0.25
  auto index = TrainIndex::build(train, model);
  ASSERT_EQ(index.predicted, (std::vector<int>{0, 0}));

  Sample factual = pt({0.6, 0.6});
  EXPECT_EQ(nearest_unlike(index, factual, 0, schema), 0);

  std::swap(train.samples[0], train.samples[1]);
  auto index2 = TrainIndex::build(train, model);
  EXPECT_EQ(nearest_unlike(index2, factual, 0, schema), 0);
}

// ---------------------------------------------------------------------------
// NICE

TEST(Nice, SingleDifferingFeatureIsOneSubstitution) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.8, 0.3}, "t0"), pt({0.1, 0.3}, "t1")};

  auto req = make_req(pt({0.2, 0.3}), 1, schema, model);
  auto r = generate_nice(req, train);
  EXPECT_TRUE(r.valid);
  EXPECT_TRUE(r.cf_values == train.samples[0].values);
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"c0"});
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(r.generator_id, "nice");
}

TEST(Nice, FlipsNearlyAlwaysOn2dWithBruteForceCrossCheck) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {6, 6}, -6);

  Dataset train;
  train.schema = schema;
  std::mt19937_64 gen(17);
  for (int i = 0; i < 50; ++i) {
    bool hi = i % 2 == 1;
    double cx = hi ? 0.7 : 0.3;
    train.samples.push_back(pt({cx + 0.08 * standard_normal(gen), cx + 0.08 * standard_normal(gen)},
                               "p" + std::to_string(i), i));
  }
  auto index = TrainIndex::build(train, model);

  int eligible = 0, nice_valid = 0, brute_reachable = 0;
  for (const auto& factual : train.samples) {
    int desired = 1 - model.predict(factual).label;
    if (nearest_unlike(index, factual, desired, schema) < 0) continue;
    ++eligible;

    auto req = make_req(factual, desired, schema, model);
    auto r = generate_nice(req, index);
    EXPECT_TRUE(immutables_intact(r, schema));
    EXPECT_EQ(r.valid,
              model.predict(detail::scratch_sample(req, r.cf_values)).label == desired);
    nice_valid += r.valid ? 1 : 0;

    // d=2: enumerate every substitution subset toward the NUN
    const Sample& nun =
        train.samples[static_cast<std::size_t>(nearest_unlike(index, factual, desired, schema))];
    bool reachable = false;
    for (int mask = 1; mask < 4; ++mask) {
      Sample s = factual;
      if (mask & 1) s.values[0] = nun.values[0];
      if (mask & 2) s.values[1] = nun.values[1];
      reachable = reachable || model.predict(s).label == desired;
    }
    brute_reachable += reachable ? 1 : 0;
    if (r.valid) EXPECT_TRUE(reachable);
  }
  ASSERT_GE(eligible, 40);
  EXPECT_GE(static_cast<double>(nice_valid) / eligible, 0.95);
  EXPECT_EQ(nice_valid, brute_reachable);
}

TEST(Nice, NoUnlikeNeighborThrows) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.1, 0.1}), pt({0.2, 0.2})};  // all predicted 0

  auto req = make_req(pt({0.3, 0.3}), 1, schema, model);
  EXPECT_THROW(generate_nice(req, train), NoUnlikeNeighbor);
}

TEST(Nice, ImmutableOnlyDifferenceIsUnreachable) {
  auto schema = unit_schema(2, {1});  // c1 immutable, and the model only reads c1
  auto model = line_model(schema, {0, 8}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.3, 0.9}, "t0")};

  auto req = make_req(pt({0.3, 0.2}), 1, schema, model);
  auto r = generate_nice(req, train);
  EXPECT_FALSE(r.valid);
  EXPECT_TRUE(r.cf_values == req.factual.values);
  EXPECT_TRUE(r.changed_features.empty());
  EXPECT_EQ(r.attempts, 0);
}

TEST(Nice, DeterministicAndWithinBudget) {
  auto schema = testutil::mixed_schema();
  auto train = testutil::random_dataset(schema, 80, 41);
  for (auto& s : train.samples) {
    s.label = num(s.values[0]) + num(s.values[1]) > 100.0 ? 1 : 0;
  }
  Hyperparams hp;
  hp.epochs = 25;
  auto model = Classifier::train(train, hp, 5);
  auto index = TrainIndex::build(train, model);

  int checked = 0;
  for (const auto& factual : train.samples) {
    int desired = 1 - model.predict(factual).label;
    if (nearest_unlike(index, factual, desired, schema) < 0) continue;
    for (int budget : {1, 2, 7}) {
      auto req = make_req(factual, desired, schema, model, budget);
      auto a = generate_nice(req, index);
      auto b = generate_nice(req, index);
      EXPECT_TRUE(a.cf_values == b.cf_values);
      EXPECT_EQ(a.valid, b.valid);
      EXPECT_LE(a.attempts, budget);
    }
    if (++checked == 8) break;
  }
  ASSERT_GE(checked, 4);
}

// ---------------------------------------------------------------------------
// Greedy two-step (CFNOW-style)

TEST(Greedy2Step, LinearBoundaryShrinksToTheMargin) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);  // boundary at c0 = 0.5
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model);

  std::vector<double> trace;
  auto r = generate_greedy2step(req, &trace);
  ASSERT_TRUE(r.valid);
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"c0"});
  EXPECT_DOUBLE_EQ(num(r.cf_values[1]), 0.5);

  // step 1 lands on +50% (c0=0.7); step 2 bisects [0.2, 0.7] eight times
  double c0 = num(r.cf_values[0]);
  EXPECT_GT(c0, 0.5);
  EXPECT_LE(c0, 0.5 + 0.5 / 256.0 + 1e-12);
  EXPECT_NEAR(c0, 0.50078125, 1e-9);

  ASSERT_GE(trace.size(), 2u);
  EXPECT_NEAR(trace.front(), 0.5, 1e-12);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] + 1e-12);

  // 1 baseline + 12 grid evals + 1 revert + 8 bisection evals
  EXPECT_EQ(r.attempts, 22);
}

TEST(Greedy2Step, BoundaryAdjacentMoveKeepsSparsityOne) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Sample factual = pt({0.45, 0.5});

  // brute-force over the declared move grid: a single move must already flip
  bool single_move_flips = false;
  for (double frac : {0.10, 0.25, 0.50}) {
    for (double sign : {+1.0, -1.0}) {
      Sample s = factual;
      s.values[0] = Value{std::clamp(0.45 + sign * frac, 0.0, 1.0)};
      single_move_flips = single_move_flips || model.predict(s).label == 1;
    }
  }
  ASSERT_TRUE(single_move_flips);

  auto r = generate_greedy2step(make_req(factual, 1, schema, model));
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"c0"});
  EXPECT_GT(num(r.cf_values[0]), 0.5);
}

TEST(Greedy2Step, AllImmutableSchemaIsUnreachable) {
  auto schema = unit_schema(2, {0, 1});
  auto model = line_model(schema, {8, 0}, -4);
  auto r = generate_greedy2step(make_req(pt({0.2, 0.5}), 1, schema, model));
  EXPECT_FALSE(r.valid);
  EXPECT_TRUE(r.changed_features.empty());
  EXPECT_EQ(r.attempts, 1);  // only the baseline evaluation
}

TEST(Greedy2Step, CategoricalAlternativeFlips) {
  FeatureSchema schema;
  schema.features.push_back(FeatureSpec::make_categorical("k0", {"A", "B"}, true));
  auto model = Classifier::from_parts(schema, {{-6, 6}}, {{0.0}});

  Sample factual = pt({});
  factual.values = {Value{0}};  // "A" -> z = -6 -> class 0
  auto r = generate_greedy2step(make_req(factual, 1, schema, model));
  ASSERT_TRUE(r.valid);
  EXPECT_TRUE(r.cf_values[0] == Value{1});
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"k0"});
  EXPECT_DOUBLE_EQ(distance(r.factual, detail::scratch_sample(make_req(factual, 1, schema, model),
                                                              r.cf_values),
                            schema),
                   1.0);
}

TEST(Greedy2Step, MultiFeatureShrinkTraceIsMonotone) {
  auto schema = unit_schema(2);
  // boundary at c0 + c1 = 1.1: two moves to flip, and the flip overshoots the
  // boundary so step 2 has real slack to claw back
  auto model = line_model(schema, {5, 5}, -5.5);
  auto req = make_req(pt({0.1, 0.1}), 1, schema, model);

  std::vector<double> trace;
  auto r = generate_greedy2step(req, &trace);
  ASSERT_TRUE(r.valid);
  EXPECT_EQ(r.changed_features.size(), 2u);
  ASSERT_GE(trace.size(), 3u);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] + 1e-12);
  EXPECT_LT(trace.back(), trace.front());
  EXPECT_LE(r.attempts, 200);
}

TEST(Greedy2Step, RespectsTinyBudgets) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Sample factual = pt({0.2, 0.5});

  auto r1 = generate_greedy2step(make_req(factual, 1, schema, model, 1));
  EXPECT_FALSE(r1.valid);
  EXPECT_EQ(r1.attempts, 1);
  EXPECT_TRUE(r1.cf_values == factual.values);

  auto r3 = generate_greedy2step(make_req(factual, 1, schema, model, 3));
  EXPECT_LE(r3.attempts, 3);

  EXPECT_THROW(generate_greedy2step(make_req(factual, 1, schema, model, 0)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Diverse (DiCE-style)

TEST(Diverse, SingleCfStaysProximalToGreedyBaseline) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 2100);

  auto greedy = generate_greedy2step(req);
  ASSERT_TRUE(greedy.valid);
  double d_greedy =
      distance(req.factual, detail::scratch_sample(req, greedy.cf_values), schema);

  auto rs = generate_diverse(req, 1, 11);
  ASSERT_EQ(rs.size(), 1u);
  ASSERT_TRUE(rs[0].valid);
  EXPECT_EQ(rs[0].generator_id, "dice");
  double d_ga = distance(req.factual, detail::scratch_sample(req, rs[0].cf_values), schema);
  EXPECT_LE(d_ga, 2.0 * d_greedy);
}

TEST(Diverse, TwoDisjointFlipPocketsYieldDistinctChangeSets) {
  auto schema = unit_schema(2);
  // flip pockets at c0 > ~0.85 and c1 > ~0.85, reachable independently
  auto model = Classifier::from_parts(schema, {{20, 0, 0, 20}, {12, 12}}, {{-17, -17}, {-1}});
  Sample factual = pt({0.2, 0.2});
  ASSERT_EQ(model.predict(factual).label, 0);

  // brute force: each pocket alone flips the prediction
  ASSERT_EQ(model.predict(pt({0.95, 0.2})).label, 1);
  ASSERT_EQ(model.predict(pt({0.2, 0.95})).label, 1);

  auto req = make_req(factual, 1, schema, model, 2100);
  auto rs = generate_diverse(req, 4, 5);
  ASSERT_EQ(rs.size(), 4u);

  std::set<std::vector<std::string>> change_sets;
  int valid = 0;
  for (const auto& r : rs) {
    if (!r.valid) continue;
    ++valid;
    EXPECT_EQ(model.predict(detail::scratch_sample(req, r.cf_values)).label, 1);
    change_sets.insert(r.changed_features);
  }
  ASSERT_GE(valid, 2);
  EXPECT_GE(change_sets.size(), 2u);
}

TEST(Diverse, SameSeedSameOutput) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {6, 6}, -6);
  auto req = make_req(pt({0.2, 0.3}), 1, schema, model, 2100);

  auto a = generate_diverse(req, 3, 99);
  auto b = generate_diverse(req, 3, 99);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].cf_values == b[i].cf_values);
    EXPECT_EQ(a[i].valid, b[i].valid);
    EXPECT_EQ(a[i].changed_features, b[i].changed_features);
  }
}

TEST(Diverse, UnreachableDesiredClassPadsWithInvalid) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {0, 0}, -5);  // constant class 0
  auto req = make_req(pt({0.4, 0.4}), 1, schema, model, 500);

  auto rs = generate_diverse(req, 3, 7);
  ASSERT_EQ(rs.size(), 3u);
  for (const auto& r : rs) {
    EXPECT_FALSE(r.valid);
    EXPECT_LE(r.attempts, 500);
  }
  EXPECT_THROW(generate_diverse(req, 0, 7), std::invalid_argument);
}

TEST(Diverse, RespectsBudget) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  for (int budget : {1, 30, 120}) {
    auto req = make_req(pt({0.2, 0.5}), 1, schema, model, budget);
    auto rs = generate_diverse(req, 2, 13);
    ASSERT_EQ(rs.size(), 2u);
    for (const auto& r : rs) EXPECT_LE(r.attempts, budget);
  }
}

// ---------------------------------------------------------------------------
// Mock

TEST(Mock, CopiesMutablesAndPreservesImmutables) {
  auto schema = unit_schema(3, {2});
  auto model = line_model(schema, {8, 0, 0}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.8, 0.1, 0.1}, "t0"), pt({0.15, 0.5, 0.5}, "t1")};

  auto req = make_req(pt({0.2, 0.4, 0.9}), 1, schema, model);
  auto r = generate_mock(req, train);
  EXPECT_TRUE(r.valid);
  EXPECT_DOUBLE_EQ(num(r.cf_values[0]), 0.8);
  EXPECT_DOUBLE_EQ(num(r.cf_values[1]), 0.1);
  EXPECT_DOUBLE_EQ(num(r.cf_values[2]), 0.9);  // immutable kept from the factual
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(r.generator_id, "mock");

  auto again = generate_mock(req, train);
  EXPECT_TRUE(again.cf_values == r.cf_values);
}

TEST(Mock, EmptyTrainThrows) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Dataset train;
  train.schema = schema;
  EXPECT_THROW(generate_mock(make_req(pt({0.2, 0.5}), 1, schema, model), train),
               NoUnlikeNeighbor);
}

// ---------------------------------------------------------------------------
// Exemplar selection

TEST(Exemplars, PairsDesiredClassSamplesWithMockFlips) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {6, 6}, -6);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.8, 0.8}, "hi0"), pt({0.9, 0.7}, "hi1"), pt({0.7, 0.9}, "hi2"),
                   pt({0.2, 0.2}, "lo0"), pt({0.3, 0.1}, "lo1")};
  auto index = TrainIndex::build(train, model);

  auto req = make_req(pt({0.25, 0.25}), 1, schema, model);
  auto ex = select_exemplars(req, index, 2);
  ASSERT_EQ(ex.size(), 2u);
  for (const auto& [before, after] : ex) {
    EXPECT_EQ(model.predict(before).label, 0);  // presented in flip order
    EXPECT_EQ(model.predict(after).label, 1);
    bool found = false;
    for (const auto& t : train.samples) found = found || t.values == after.values;
    EXPECT_TRUE(found) << "exemplar target must come from the training split";
  }
  // deterministic
  auto ex2 = select_exemplars(req, index, 2);
  ASSERT_EQ(ex2.size(), 2u);
  EXPECT_TRUE(ex[0].first.values == ex2[0].first.values);
}

// ---------------------------------------------------------------------------
// LLM generator against an in-process endpoint

TEST(Llm, OneShotValidCounterfactual) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    ok_response(res, R"(Here you go: {"c0": 0.9})");
  };

  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 3);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  auto r = generate_llm(req, PromptSpec::zero(), client);
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(r.generator_id, "llm");
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"c0"});
  ASSERT_TRUE(r.raw_llm_text.has_value());
  EXPECT_NE(r.raw_llm_text->find("{\"c0\": 0.9}"), std::string::npos);
  EXPECT_EQ(server.hits.load(), 1);
}

TEST(Llm, MalformedRepliesRetryWithDistinctPrompts) {
  testutil::TempDir tmp;
  StubServer server;
  std::vector<std::string> prompts;
  server.handler = [&](const httplib::Request& req, httplib::Response& res) {
    prompts.push_back(json::parse(req.body)["messages"][0]["content"].get<std::string>());
    int n = static_cast<int>(prompts.size());
    if (n == 1) {
      ok_response(res, "no structured answer, sorry");
    } else if (n == 2) {
      ok_response(res, R"({"not_a_feature": 1})");
    } else {
      ok_response(res, R"({"c0": 0.95})");
    }
  };

  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 3);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  auto r = generate_llm(req, PromptSpec::zero(), client);
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.attempts, 3);
  ASSERT_EQ(server.hits.load(), 3);
  // retry prompts carry a distinct suffix so cache keys cannot collide
  EXPECT_EQ(prompts[0].find("Retry"), std::string::npos);
  EXPECT_NE(prompts[1].find("Retry 2"), std::string::npos);
  EXPECT_NE(prompts[1].find("no JSON"), std::string::npos);
  EXPECT_NE(prompts[2].find("Retry 3"), std::string::npos);
  EXPECT_NE(prompts[0], prompts[1]);
  EXPECT_NE(prompts[1], prompts[2]);
}

TEST(Llm, NonFlippingCandidateIsReturnedInvalidAtBudget) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    ok_response(res, R"({"c0": 0.3})");  // parseable but does not flip
  };

  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 1);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  auto r = generate_llm(req, PromptSpec::zero(), client);
  EXPECT_FALSE(r.valid);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_DOUBLE_EQ(num(r.cf_values[0]), 0.3);
}

TEST(Llm, AllMalformedExhaustsBudget) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    ok_response(res, "still nothing useful");
  };

  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 2);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  try {
    generate_llm(req, PromptSpec::zero(), client);
    FAIL() << "expected BudgetExhausted";
  } catch (const BudgetExhausted& e) {
    EXPECT_EQ(e.attempts, 2);
    EXPECT_EQ(e.last_error, "no JSON");
  }
  EXPECT_EQ(server.hits.load(), 2);
}

TEST(Llm, ImmutableEditsAreRepairedBeforeValidityCheck) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    ok_response(res, R"({"c0": 0.9, "c1": 0.99})");
  };

  auto schema = unit_schema(2, {1});
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 1);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  auto r = generate_llm(req, PromptSpec::zero(), client);
  EXPECT_TRUE(r.valid);
  EXPECT_DOUBLE_EQ(num(r.cf_values[1]), 0.5);  // reset, not 0.99
  EXPECT_EQ(r.changed_features, std::vector<std::string>{"c0"});
  ASSERT_EQ(r.repairs.size(), 1u);
  EXPECT_NE(r.repairs[0].find("c1"), std::string::npos);
}

TEST(Llm, OfflineColdCachePropagatesCacheMiss) {
  testutil::TempDir tmp;
  EndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.offline = true;
  cfg.cache_path = tmp.path / "cold.jsonl";

  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  auto req = make_req(pt({0.2, 0.5}), 1, schema, model, 3);
  LlmClient client(cfg);
  EXPECT_THROW(generate_llm(req, PromptSpec::zero(), client), CacheMiss);
}

// ---------------------------------------------------------------------------
// Cross-generator invariants

TEST(AllGenerators, ImmutabilityValidityFlagAndBudgetHold) {
  auto schema = testutil::mixed_schema();
  auto train = testutil::random_dataset(schema, 160, 900);
  for (auto& s : train.samples) {
    s.label = num(s.values[0]) + num(s.values[1]) > 100.0 ? 1 : 0;
  }
  Hyperparams hp;
  hp.epochs = 30;
  auto model = Classifier::train(train, hp, 4);
  auto index = TrainIndex::build(train, model);

  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    ok_response(res, R"({"c0": 95.0, "c1": 95.0, "k0": "c"})");
  };
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));

  int checked = 0;
  for (const auto& factual : train.samples) {
    int desired = 1 - model.predict(factual).label;
    if (nearest_unlike(index, factual, desired, schema) < 0) continue;
    if (++checked > 12) break;

    std::vector<CounterfactualResult> results;
    results.push_back(generate_nice(make_req(factual, desired, schema, model, 40), index));
    results.push_back(generate_greedy2step(make_req(factual, desired, schema, model, 60)));
    results.push_back(generate_mock(make_req(factual, desired, schema, model, 5), index));
    for (auto& r : generate_diverse(make_req(factual, desired, schema, model, 90), 2, 31)) {
      results.push_back(std::move(r));
    }
    results.push_back(
        generate_llm(make_req(factual, desired, schema, model, 2), PromptSpec::zero(), client));

    for (const auto& r : results) {
      EXPECT_TRUE(immutables_intact(r, schema)) << r.generator_id;
      Sample cf = factual;
      cf.values = r.cf_values;
      EXPECT_EQ(r.valid, model.predict(cf).label == desired) << r.generator_id;
      EXPECT_EQ(r.changed_features,
                changed_feature_names(factual.values, r.cf_values, schema))
          << r.generator_id;
      int budget_for = r.generator_id == "nice"    ? 40
                       : r.generator_id == "cfnow" ? 60
                       : r.generator_id == "mock"  ? 5
                       : r.generator_id == "dice"  ? 90
                                                   : 2;
      EXPECT_LE(r.attempts, budget_for) << r.generator_id;
    }
  }
  ASSERT_GE(checked, 8);
}

// ---------------------------------------------------------------------------
// cfs.jsonl round trip

TEST(CfsJsonl, RoundTripsEveryField) {
  auto schema = unit_schema(3, {2});
  auto model = line_model(schema, {8, 0, 0}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.8, 0.1, 0.1}, "t0")};

  auto req = make_req(pt({0.2, 0.4, 0.9}, "pz", 7), 1, schema, model);
  std::vector<CounterfactualResult> results;
  results.push_back(generate_mock(req, train));
  results.push_back(generate_greedy2step(req));
  results[1].raw_llm_text = "line one\nline two \"quoted\"";
  results[1].repairs = {"c2: immutable, reset to factual value"};

  testutil::TempDir tmp;
  write_cfs_jsonl(results, tmp.path / "cfs.jsonl", schema);
  auto back = read_cfs_jsonl(tmp.path / "cfs.jsonl", schema);
  ASSERT_EQ(back.size(), results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    EXPECT_EQ(back[i].factual.patient_id, results[i].factual.patient_id);
    EXPECT_EQ(back[i].factual.window_index, results[i].factual.window_index);
    EXPECT_TRUE(back[i].factual.values == results[i].factual.values);
    EXPECT_TRUE(back[i].cf_values == results[i].cf_values);
    EXPECT_EQ(back[i].generator_id, results[i].generator_id);
    EXPECT_EQ(back[i].desired_label, results[i].desired_label);
    EXPECT_EQ(back[i].valid, results[i].valid);
    EXPECT_EQ(back[i].changed_features, results[i].changed_features);
    EXPECT_EQ(back[i].attempts, results[i].attempts);
    EXPECT_EQ(back[i].repairs, results[i].repairs);
    EXPECT_EQ(back[i].raw_llm_text, results[i].raw_llm_text);
  }
}

TEST(CfsJsonl, CfAsSampleCarriesTheDesiredLabel) {
  auto schema = unit_schema(2);
  auto model = line_model(schema, {8, 0}, -4);
  Dataset train;
  train.schema = schema;
  train.samples = {pt({0.9, 0.2}, "t0")};

  auto r = generate_mock(make_req(pt({0.2, 0.5}, "pq", 3), 1, schema, model), train);
  Sample s = cf_as_sample(r);
  EXPECT_EQ(s.patient_id, "pq");
  EXPECT_EQ(s.window_index, 3);
  EXPECT_EQ(s.label, 1);
  EXPECT_TRUE(s.values == r.cf_values);
}
