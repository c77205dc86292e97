#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfforge/cfmetrics.hpp"
#include "cfforge/generators.hpp"
#include "cfforge/llmclient.hpp"
#include "cfforge/model.hpp"
#include "cfforge/rng.hpp"
#include "cfforge/schema.hpp"

namespace cfforge {

struct ClassTooSmall : std::runtime_error {
  explicit ClassTooSmall(int label)
      : std::runtime_error("class " + std::to_string(label) +
                           " has fewer than 2 samples; cannot undersample") {}
};

enum class ScenarioKind { A, B, C };

inline std::string scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::A: return "A";
    case ScenarioKind::B: return "B";
    default: return "C";
  }
}

inline ScenarioKind scenario_from_name(const std::string& s) {
  if (s == "A") return ScenarioKind::A;
  if (s == "B") return ScenarioKind::B;
  if (s == "C") return ScenarioKind::C;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected A, B or C)");
}

// A = positive-class scarcity, B = negative-class, C = dual-class.
struct ScarcityScenario {
  ScenarioKind kind = ScenarioKind::A;
  double reduction_fraction = 0.5;
  std::uint64_t seed = 0;

  std::vector<int> targeted_classes() const {
    switch (kind) {
      case ScenarioKind::A: return {1};
      case ScenarioKind::B: return {0};
      default: return {0, 1};
    }
  }
};

namespace detail {

// floor(n * fraction) with a nudge against representation error in the product
inline std::size_t scaled_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

}  // namespace detail

// Removes exactly floor(n_c * fraction) seeded-uniformly chosen samples of
// each targeted class; untargeted classes and the relative order of the kept
// samples are untouched.
inline Dataset undersample(const Dataset& train, const ScarcityScenario& scenario) {
  if (!(scenario.reduction_fraction > 0.0 && scenario.reduction_fraction < 1.0)) {
    throw std::invalid_argument("reduction_fraction must be in (0, 1)");
  }
  std::vector<char> removed(train.samples.size(), 0);
  std::mt19937_64 gen(scenario.seed);
  for (int c : scenario.targeted_classes()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < train.samples.size(); ++i) {
      if (train.samples[i].label == c) idx.push_back(i);
    }
    if (idx.size() < 2) throw ClassTooSmall(c);
    seeded_shuffle(idx, gen);
    std::size_t k = detail::scaled_count(idx.size(), scenario.reduction_fraction);
    for (std::size_t j = 0; j < k; ++j) removed[idx[j]] = 1;
  }

  Dataset reduced;
  reduced.schema = train.schema;
  reduced.role = train.role;
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    if (!removed[i]) reduced.samples.push_back(train.samples[i]);
  }
  return reduced;
}

inline std::array<int, 2> removed_counts(const Dataset& train, const Dataset& reduced) {
  return {static_cast<int>(train.class_count(0) - reduced.class_count(0)),
          static_cast<int>(train.class_count(1) - reduced.class_count(1))};
}

// Pool exhaustion is a recorded condition, not an error: everything available
// is added and the shortfall is reported per class.
struct AugmentOutcome {
  Dataset augmented;
  std::array<int, 2> requested{0, 0};
  std::array<int, 2> added{0, 0};
  std::array<int, 2> shortfall{0, 0};

  bool pool_exhausted() const { return shortfall[0] > 0 || shortfall[1] > 0; }
};

// Adds floor(removed_c * ratio) valid counterfactuals of each undersampled
// class c, drawn in pool order and labeled with their desired class. The
// reduced training set is always a prefix of the augmented one.
inline AugmentOutcome augment(const Dataset& reduced,
                              const std::vector<CounterfactualResult>& cf_pool,
                              const ScarcityScenario& scenario, double ratio,
                              const std::array<int, 2>& removed) {
  if (!(ratio > 0.0)) throw std::invalid_argument("ratio must be positive");
  AugmentOutcome out;
  out.augmented = reduced;
  std::array<bool, 2> targeted{false, false};
  for (int c : scenario.targeted_classes()) {
    targeted[static_cast<std::size_t>(c)] = true;
    out.requested[static_cast<std::size_t>(c)] = static_cast<int>(
        detail::scaled_count(static_cast<std::size_t>(removed[static_cast<std::size_t>(c)]), ratio));
  }
  for (const auto& r : cf_pool) {
    const auto c = static_cast<std::size_t>(r.desired_label);
    if (!r.valid || !targeted[c] || out.added[c] >= out.requested[c]) continue;
    out.augmented.samples.push_back(cf_as_sample(r));
    ++out.added[c];
  }
  for (std::size_t c = 0; c < 2; ++c) out.shortfall[c] = out.requested[c] - out.added[c];
  return out;
}

// ---------------------------------------------------------------------------
// Scenario runs

struct MetricDeltas {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
};

inline double pct_delta(double from, double to) {
  return from == 0.0 ? 0.0 : (to - from) / from * 100.0;
}

inline MetricDeltas deltas_between(const ClassificationReport& from,
                                   const ClassificationReport& to) {
  MetricDeltas d;
  d.accuracy = pct_delta(from.accuracy, to.accuracy);
  d.precision = pct_delta(from.precision, to.precision);
  d.recall = pct_delta(from.recall, to.recall);
  d.f1 = pct_delta(from.f1, to.f1);
  d.auc = pct_delta(from.auc, to.auc);
  return d;
}

// Fixed two-decimal signed percentage, e.g. "-14.71%" / "+22.41%".
inline std::string format_signed_pct(double pct) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, pct, std::chars_format::fixed, 2);
  if (ec != std::errc()) throw std::runtime_error("format_signed_pct failed");
  std::string s(buf, p);
  if (s == "-0.00") s = "0.00";
  if (s[0] != '-') s = "+" + s;
  return s + "%";
}

struct AugmentationRun {
  ScenarioKind kind = ScenarioKind::A;
  double reduction_fraction = 0.5;
  std::string generator_id;
  double ratio = 1.0;
  std::uint64_t seed = 0;
  std::string test_fingerprint;

  ClassificationReport baseline_report;
  ClassificationReport reduced_report;
  ClassificationReport augmented_report;
  MetricDeltas drop;      // reduced vs baseline
  MetricDeltas recovery;  // augmented vs reduced

  std::array<int, 2> removed{0, 0};
  std::array<int, 2> added{0, 0};
  std::array<int, 2> shortfall{0, 0};
  int pool_size = 0;
  int pool_valid = 0;

  nlohmann::json to_json() const {
    auto deltas = [](const MetricDeltas& d) {
      return nlohmann::json{{"accuracy", d.accuracy},
                            {"precision", d.precision},
                            {"recall", d.recall},
                            {"f1", d.f1},
                            {"auc", d.auc}};
    };
    auto pair = [](const std::array<int, 2>& a) { return nlohmann::json::array({a[0], a[1]}); };
    nlohmann::json j;
    j["scenario"] = scenario_name(kind);
    j["reduction_fraction"] = reduction_fraction;
    j["generator_id"] = generator_id;
    j["ratio"] = ratio;
    j["seed"] = seed;
    j["test_fingerprint"] = test_fingerprint;
    j["baseline"] = baseline_report.to_json();
    j["reduced"] = reduced_report.to_json();
    j["augmented"] = augmented_report.to_json();
    j["drop_pct"] = deltas(drop);
    j["recovery_pct"] = deltas(recovery);
    j["removed"] = pair(removed);
    j["added"] = pair(added);
    j["shortfall"] = pair(shortfall);
    j["pool_size"] = pool_size;
    j["pool_valid"] = pool_valid;
    return j;
  }
};

// One counterfactual pool per (scenario, seed), scored against the reduced
// model that generated it.
struct PoolRecord {
  ScenarioKind kind = ScenarioKind::A;
  std::uint64_t seed = 0;
  std::string generator_id;
  CFBatch batch;
  CFBatchReport report;
};

struct HarnessResult {
  FeatureSchema schema;
  std::vector<AugmentationRun> runs;
  std::vector<PoolRecord> pools;

  void merge(HarnessResult other) {
    if (runs.empty() && pools.empty()) {
      schema = other.schema;
    } else if (!(schema == other.schema)) {
      throw std::invalid_argument("cannot merge harness results with different schemas");
    }
    runs.insert(runs.end(), std::make_move_iterator(other.runs.begin()),
                std::make_move_iterator(other.runs.end()));
    pools.insert(pools.end(), std::make_move_iterator(other.pools.begin()),
                 std::make_move_iterator(other.pools.end()));
  }
};

struct HarnessConfig {
  Hyperparams hyperparams;
  int cf_budget = 2100;    // optimizer generators
  int llm_attempts = 3;    // llm generator budget = attempts
  int diverse_k = 4;
  PromptMode prompt_mode = PromptMode::zero_shot;
  int few_shot_k = 3;
  const EndpointConfig* endpoint = nullptr;  // required for the llm generator
};

namespace detail {

inline std::string fingerprint_hex(const Dataset& ds) {
  char buf[17];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, dataset_fingerprint(ds), 16);
  if (ec != std::errc()) throw std::runtime_error("fingerprint format failed");
  return std::string(buf, p);
}

}  // namespace detail

// Runs the label-scarcity experiment for one scenario shape and one generator
// over the (ratio, seed) grid. Per seed: baseline model on the full training
// split, reduced model after undersampling, a counterfactual pool generated
// from reduced-train samples predicted as the opposite class (desired label =
// the scarce class, validity judged by the reduced model), then one retrained
// model per ratio on the augmented set. All three models are evaluated on the
// fixed test split. `on_run` (when set) sees each run as it completes.
inline HarnessResult run_scenario(
    const Dataset& train, const Dataset& test, ScenarioKind kind, double reduction_fraction,
    const std::string& generator_id, const std::vector<double>& ratios,
    const std::vector<std::uint64_t>& seeds, const HarnessConfig& cfg = {},
    const std::function<void(const AugmentationRun&)>& on_run = nullptr) {
  if (ratios.empty() || seeds.empty()) throw std::invalid_argument("need ratios and seeds");
  if (generator_id == "llm" && !cfg.endpoint) {
    throw std::invalid_argument("llm generator needs an endpoint config");
  }

  HarnessResult result;
  result.schema = train.schema;
  const std::string test_fp = detail::fingerprint_hex(test);
  const double max_ratio = *std::max_element(ratios.begin(), ratios.end());

  std::optional<LlmClient> client;
  if (generator_id == "llm") client.emplace(*cfg.endpoint);

  for (std::uint64_t seed : seeds) {
    Classifier baseline = Classifier::train(train, cfg.hyperparams, seed);
    ClassificationReport baseline_report = evaluate(baseline, test);

    ScarcityScenario scenario{kind, reduction_fraction, seed};
    Dataset reduced = undersample(train, scenario);
    std::array<int, 2> removed = removed_counts(train, reduced);
    Classifier reduced_model = Classifier::train(reduced, cfg.hyperparams, seed);
    ClassificationReport reduced_report = evaluate(reduced_model, test);

    TrainIndex index = TrainIndex::build(reduced, reduced_model);

    std::vector<CounterfactualResult> pool;
    CFBatch batch;
    std::array<int, 2> pool_valid{0, 0};
    for (int c : scenario.targeted_classes()) {
      const int needed = static_cast<int>(detail::scaled_count(
          static_cast<std::size_t>(removed[static_cast<std::size_t>(c)]), max_ratio));
      for (std::size_t i = 0;
           i < reduced.samples.size() && pool_valid[static_cast<std::size_t>(c)] < needed; ++i) {
        const Sample& src = reduced.samples[i];
        if (index.predicted[i] != 1 - c) continue;

        GenerationRequest req;
        req.factual = src;
        req.desired_label = c;
        req.schema = &train.schema;
        req.model = &reduced_model;
        req.budget = generator_id == "llm" ? cfg.llm_attempts : cfg.cf_budget;

        std::vector<CounterfactualResult> results;
        try {
          if (generator_id == "nice") {
            results.push_back(generate_nice(req, index));
          } else if (generator_id == "cfnow") {
            results.push_back(generate_greedy2step(req));
          } else if (generator_id == "dice") {
            results = generate_diverse(req, cfg.diverse_k, seed);
          } else if (generator_id == "mock") {
            results.push_back(generate_mock(req, index));
          } else if (generator_id == "llm") {
            PromptSpec spec = PromptSpec::zero();
            if (cfg.prompt_mode == PromptMode::few_shot) {
              auto ex = select_exemplars(req, index, cfg.few_shot_k);
              if (!ex.empty()) spec = PromptSpec::few(std::move(ex));
            }
            results.push_back(generate_llm(req, spec, *client));
          } else {
            throw std::invalid_argument("unknown generator '" + generator_id + "'");
          }
        } catch (const NoUnlikeNeighbor&) {
          continue;
        } catch (const BudgetExhausted&) {
          continue;
        }

        for (auto& r : results) {
          batch.push_back(CFRecord{r.factual, cf_as_sample(r), r.desired_label});
          if (r.valid) ++pool_valid[static_cast<std::size_t>(c)];
          pool.push_back(std::move(r));
        }
      }
    }

    if (!batch.empty()) {
      PoolRecord rec;
      rec.kind = kind;
      rec.seed = seed;
      rec.generator_id = generator_id;
      rec.report = batch_report(batch, reduced_model, train.schema, generator_id);
      rec.batch = std::move(batch);
      result.pools.push_back(std::move(rec));
    }

    for (double ratio : ratios) {
      AugmentOutcome outcome = augment(reduced, pool, scenario, ratio, removed);
      Classifier aug_model = Classifier::train(outcome.augmented, cfg.hyperparams, seed);

      AugmentationRun run;
      run.kind = kind;
      run.reduction_fraction = reduction_fraction;
      run.generator_id = generator_id;
      run.ratio = ratio;
      run.seed = seed;
      run.test_fingerprint = test_fp;
      run.baseline_report = baseline_report;
      run.reduced_report = reduced_report;
      run.augmented_report = evaluate(aug_model, test);
      run.drop = deltas_between(run.baseline_report, run.reduced_report);
      run.recovery = deltas_between(run.reduced_report, run.augmented_report);
      run.removed = removed;
      run.added = outcome.added;
      run.shortfall = outcome.shortfall;
      run.pool_size = static_cast<int>(pool.size());
      run.pool_valid = pool_valid[0] + pool_valid[1];
      if (on_run) on_run(run);
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reduction sweep (training-set size vs classifier performance)

struct SweepRow {
  double fraction = 1.0;
  std::uint64_t seed = 0;
  ClassificationReport report;
};

// Retrains on a seeded fraction of the training split (dual-class, so class
// balance is preserved in expectation) and evaluates on the fixed test split.
inline std::vector<SweepRow> reduction_sweep(const Dataset& train, const Dataset& test,
                                             const std::vector<double>& fractions,
                                             const std::vector<std::uint64_t>& seeds,
                                             const Hyperparams& hp = {}) {
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("fractions must lie in (0, 1]");
  }
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    for (std::uint64_t seed : seeds) {
      Dataset subset;
      if (f == 1.0) {
        subset = train;
      } else {
        subset = undersample(train, ScarcityScenario{ScenarioKind::C, 1.0 - f, seed});
      }
      Classifier model = Classifier::train(subset, hp, seed);
      rows.push_back(SweepRow{f, seed, evaluate(model, test)});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report rendering

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::ofstream open_report(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace detail

// Writes runs.jsonl, table3.csv, table5.csv, diversity.csv and sweep.csv into
// `dir`. Rendering is deterministic: fixed column orders, two-decimal signed
// percentages, no timestamps; re-rendering the same inputs is byte-identical.
inline void render_reports(const HarnessResult& result, const std::filesystem::path& dir,
                           const std::vector<SweepRow>& sweep = {}) {
  if (result.runs.empty()) throw std::invalid_argument("need at least one run");
  std::filesystem::create_directories(dir);

  {
    auto out = detail::open_report(dir / "runs.jsonl");
    for (const auto& run : result.runs) out << run.to_json().dump() << "\n";
  }

  {
    auto out = detail::open_report(dir / "table3.csv");
    out << "scenario,seed,generator,validity_c0,distance_c0,sparsity_c0,plausibility_c0,"
           "validity_c1,distance_c1,sparsity_c1,plausibility_c1,n_c0,n_c1\n";
    for (const auto& p : result.pools) {
      out << scenario_name(p.kind) << "," << p.seed << "," << p.generator_id;
      for (const auto& m : p.report.per_class) {
        out << "," << format_double(m.validity) << "," << format_double(m.mean_distance) << ","
            << format_double(m.mean_sparsity) << "," << format_double(m.plausibility);
      }
      out << "," << p.report.per_class[0].n_cf << "," << p.report.per_class[1].n_cf << "\n";
    }
  }

  {
    // group runs by (scenario, generator, ratio); report per-seed medians
    std::map<std::tuple<std::string, std::string, double>, std::vector<const AugmentationRun*>>
        groups;
    for (const auto& run : result.runs) {
      groups[{scenario_name(run.kind), run.generator_id, run.ratio}].push_back(&run);
    }
    auto out = detail::open_report(dir / "table5.csv");
    out << "scenario,generator,ratio,seeds";
    for (const char* m : {"acc", "pre", "rec", "f1", "auc"}) {
      out << "," << m << "_baseline," << m << "_reduced," << m << "_augmented," << m << "_drop,"
          << m << "_recovery";
    }
    out << "\n";
    for (const auto& [key, runs] : groups) {
      const auto& [scen, gen, ratio] = key;
      out << scen << "," << gen << "," << format_double(ratio) << "," << runs.size();
      struct Extract {
        double (*stage)(const ClassificationReport&);
        double (*delta)(const MetricDeltas&);
        double scale;
      };
      const Extract metrics[] = {
          {[](const ClassificationReport& r) { return r.accuracy; },
           [](const MetricDeltas& d) { return d.accuracy; }, 100.0},
          {[](const ClassificationReport& r) { return r.precision; },
           [](const MetricDeltas& d) { return d.precision; }, 1.0},
          {[](const ClassificationReport& r) { return r.recall; },
           [](const MetricDeltas& d) { return d.recall; }, 1.0},
          {[](const ClassificationReport& r) { return r.f1; },
           [](const MetricDeltas& d) { return d.f1; }, 1.0},
          {[](const ClassificationReport& r) { return r.auc; },
           [](const MetricDeltas& d) { return d.auc; }, 1.0},
      };
      for (const auto& m : metrics) {
        std::vector<double> base, red, aug, drop, rec;
        for (const auto* r : runs) {
          base.push_back(m.stage(r->baseline_report) * m.scale);
          red.push_back(m.stage(r->reduced_report) * m.scale);
          aug.push_back(m.stage(r->augmented_report) * m.scale);
          drop.push_back(m.delta(r->drop));
          rec.push_back(m.delta(r->recovery));
        }
        out << "," << format_double(detail::median(base)) << ","
            << format_double(detail::median(red)) << "," << format_double(detail::median(aug))
            << "," << format_signed_pct(detail::median(drop)) << ","
            << format_signed_pct(detail::median(rec));
      }
      out << "\n";
    }
  }

  {
    // change frequencies per generator over the union of its pools
    std::map<std::string, CFBatch> by_generator;
    for (const auto& p : result.pools) {
      auto& merged = by_generator[p.generator_id];
      merged.insert(merged.end(), p.batch.begin(), p.batch.end());
    }
    std::vector<std::pair<std::string, DiversityProfile>> rows;
    for (const auto& [gen, merged] : by_generator) {
      rows.emplace_back(gen, diversity_profile(merged, result.schema));
    }
    write_diversity_csv(rows, dir / "diversity.csv");
  }

  {
    auto out = detail::open_report(dir / "sweep.csv");
    out << "fraction,seed,accuracy,precision,recall,f1,auc\n";
    for (const auto& row : sweep) {
      out << format_double(row.fraction) << "," << row.seed << ","
          << format_double(row.report.accuracy) << "," << format_double(row.report.precision)
          << "," << format_double(row.report.recall) << "," << format_double(row.report.f1) << ","
          << format_double(row.report.auc) << "\n";
    }
  }
}

}  // namespace cfforge
