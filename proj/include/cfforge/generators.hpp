#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfforge/cfmetrics.hpp"
#include "cfforge/llmclient.hpp"
#include "cfforge/model.hpp"
#include "cfforge/rng.hpp"
#include "cfforge/schema.hpp"

namespace cfforge {

struct NoUnlikeNeighbor : std::runtime_error {
  NoUnlikeNeighbor() : std::runtime_error("no training instance predicted as the desired class") {}
};

struct ParseFailure : std::runtime_error {
  std::string reason;
  explicit ParseFailure(std::string r) : std::runtime_error("parse failure: " + r), reason(std::move(r)) {}
};

// Thrown by the LLM generator only when the whole budget was burned without a
// single parseable candidate; an unparseable-but-flipless run instead returns
// the last candidate with valid=false so validity statistics stay honest.
struct BudgetExhausted : std::runtime_error {
  std::string last_error;
  int attempts = 0;
  BudgetExhausted(std::string err, int n)
      : std::runtime_error("budget exhausted after " + std::to_string(n) + " attempts: " + err),
        last_error(std::move(err)),
        attempts(n) {}
};

// Counts classifier evaluations so every generator provably stays within
// request.budget. Exhaustion is a quiet stop signal, not an error.
class EvalBudget {
 public:
  explicit EvalBudget(int limit) : limit_(limit) {}
  int limit() const { return limit_; }
  int used() const { return used_; }
  bool exhausted() const { return used_ >= limit_; }
  bool try_consume() {
    if (used_ >= limit_) return false;
    ++used_;
    return true;
  }

 private:
  int limit_ = 0;
  int used_ = 0;
};

struct GenerationRequest {
  Sample factual;
  int desired_label = 1;
  const FeatureSchema* schema = nullptr;
  const Classifier* model = nullptr;
  int budget = 200;
};

inline void validate_request(const GenerationRequest& req) {
  if (!req.schema || !req.model) throw std::invalid_argument("request needs schema and model");
  if (req.desired_label != 0 && req.desired_label != 1) {
    throw std::invalid_argument("desired_label must be 0 or 1");
  }
  if (req.budget < 1) throw std::invalid_argument("budget must be >= 1");
  if (req.factual.values.size() != req.schema->dimension()) {
    throw std::invalid_argument("factual width does not match schema");
  }
  if (req.model->predict(req.factual).label == req.desired_label) {
    throw std::invalid_argument("desired_label must differ from the model's prediction");
  }
}

struct CounterfactualResult {
  Sample factual;
  std::vector<Value> cf_values;
  std::string generator_id;
  int desired_label = 1;
  bool valid = false;
  std::vector<std::string> changed_features;  // feature-index order
  int attempts = 0;                           // LLM attempts or classifier evals used
  std::vector<std::string> repairs;
  std::optional<std::string> raw_llm_text;
};

inline std::vector<std::string> changed_feature_names(const std::vector<Value>& factual,
                                                      const std::vector<Value>& cf,
                                                      const FeatureSchema& schema) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    if (!(factual.at(i) == cf.at(i))) out.push_back(schema.features[i].name);
  }
  return out;
}

// The counterfactual as a labeled sample, ready for dataset augmentation.
inline Sample cf_as_sample(const CounterfactualResult& r) {
  Sample s = r.factual;
  s.values = r.cf_values;
  s.label = r.desired_label;
  return s;
}

namespace detail {

inline Sample scratch_sample(const GenerationRequest& req, const std::vector<Value>& values) {
  Sample s = req.factual;
  s.values = values;
  return s;
}

inline int label_from_raw(double raw_p) { return raw_p >= 0.5 ? 1 : 0; }

// Raw P(class 1) for a candidate vector; nullopt once the budget is spent.
inline std::optional<double> eval_raw(const GenerationRequest& req, const std::vector<Value>& values,
                                      EvalBudget& budget) {
  if (!budget.try_consume()) return std::nullopt;
  return req.model->predict(scratch_sample(req, values)).probability;
}

inline double desired_p(double raw, int desired) { return desired == 1 ? raw : 1.0 - raw; }

inline CounterfactualResult make_result(const GenerationRequest& req, std::vector<Value> values,
                                        std::string generator_id, bool valid, int attempts) {
  CounterfactualResult r;
  r.factual = req.factual;
  r.cf_values = std::move(values);
  r.generator_id = std::move(generator_id);
  r.desired_label = req.desired_label;
  r.valid = valid;
  r.changed_features = changed_feature_names(req.factual.values, r.cf_values, *req.schema);
  r.attempts = attempts;
  return r;
}

}  // namespace detail

// Training predictions computed once per (model, dataset) so that neighbor
// searches and exemplar selection never bill the per-request budget.
struct TrainIndex {
  const Dataset* train = nullptr;
  std::vector<int> predicted;

  static TrainIndex build(const Dataset& train, const Classifier& model) {
    TrainIndex idx;
    idx.train = &train;
    idx.predicted.reserve(train.samples.size());
    for (const auto& s : train.samples) idx.predicted.push_back(model.predict(s).label);
    return idx;
  }
};

// Nearest training instance predicted as `desired`; ties go to the lowest
// training index. Returns -1 when the class is absent.
inline int nearest_unlike(const TrainIndex& index, const Sample& factual, int desired,
                          const FeatureSchema& schema) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < index.train->samples.size(); ++i) {
    if (index.predicted[i] != desired) continue;
    double d = distance(factual, index.train->samples[i], schema);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Prompting

enum class PromptMode { zero_shot, few_shot };

struct PromptSpec {
  PromptMode mode = PromptMode::zero_shot;
  int k = 0;
  std::vector<std::pair<Sample, Sample>> exemplars;  // (factual, counterfactual)
  std::string template_id = "cf-v1";

  static PromptSpec zero() { return PromptSpec{}; }

  static PromptSpec few(std::vector<std::pair<Sample, Sample>> ex) {
    if (ex.empty()) throw std::invalid_argument("few-shot needs at least one exemplar");
    PromptSpec s;
    s.mode = PromptMode::few_shot;
    s.k = static_cast<int>(ex.size());
    s.exemplars = std::move(ex);
    return s;
  }
};

namespace detail {

inline nlohmann::json value_to_json(const FeatureSpec& f, const Value& v) {
  if (is_continuous_value(v)) return num(v);
  return f.categories.at(static_cast<std::size_t>(cat(v)));
}

inline nlohmann::json values_object(const std::vector<Value>& values, const FeatureSchema& schema) {
  nlohmann::json o = nlohmann::json::object();
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    o[schema.features[i].name] = value_to_json(schema.features[i], values.at(i));
  }
  return o;
}

inline nlohmann::json changed_object(const std::vector<Value>& factual, const std::vector<Value>& cf,
                                     const FeatureSchema& schema) {
  nlohmann::json o = nlohmann::json::object();
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    if (!(factual.at(i) == cf.at(i))) {
      o[schema.features[i].name] = value_to_json(schema.features[i], cf.at(i));
    }
  }
  return o;
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace detail

inline std::string render_prompt(const GenerationRequest& req, const PromptSpec& spec) {
  validate_request(req);
  if (spec.mode == PromptMode::few_shot &&
      (spec.exemplars.empty() || spec.k != static_cast<int>(spec.exemplars.size()))) {
    throw std::invalid_argument("few-shot spec must carry exactly k >= 1 exemplars");
  }
  const FeatureSchema& schema = *req.schema;
  const int predicted = 1 - req.desired_label;

  std::string s;
  s += "Task: a binary stress classifier currently predicts class " + std::to_string(predicted) +
       " for the patient window below. Change the prediction from " + std::to_string(predicted) +
       " to " + std::to_string(req.desired_label) +
       " with as few and as small feature changes as possible.\n\n";

  s += "Features (name | current value | unit | allowed range | mutable):\n";
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    const FeatureSpec& f = schema.features[i];
    const Value& v = req.factual.values.at(i);
    std::string value = is_continuous_value(v) ? format_double(num(v))
                                               : f.categories.at(static_cast<std::size_t>(cat(v)));
    std::string unit = f.unit.empty() ? "-" : f.unit;
    std::string range;
    if (f.type == FeatureType::continuous) {
      range = f.fitted() ? format_double(*f.observed_min) + " to " + format_double(*f.observed_max)
                         : "unknown";
    } else {
      range = "one of [" + detail::join(f.allowed_values(), ", ") + "]";
    }
    s += "- " + f.name + " | " + value + " | " + unit + " | " + range + " | " +
         (f.is_mutable ? "yes" : "no") + "\n";
  }

  std::vector<std::string> immutable;
  for (const auto& f : schema.features) {
    if (!f.is_mutable) immutable.push_back(f.name);
  }
  s += "\nImmutable features that must not change: " +
       (immutable.empty() ? std::string("(none)") : detail::join(immutable, ", ")) + ".\n";

  if (spec.mode == PromptMode::few_shot) {
    s += "\nExamples of valid responses:\n";
    for (std::size_t j = 0; j < spec.exemplars.size(); ++j) {
      const auto& [ex_factual, ex_cf] = spec.exemplars[j];
      s += "Example " + std::to_string(j + 1) + ":\n";
      s += "Input: " + detail::values_object(ex_factual.values, schema).dump() + "\n";
      s += "Output: " + detail::changed_object(ex_factual.values, ex_cf.values, schema).dump() + "\n";
    }
  }

  s += "\nRespond with a single JSON object mapping each changed feature name to its new value. "
       "Mention only the features you change, use feature names exactly as listed, and do not "
       "change immutable features. Output no text outside the JSON object.\n";
  return s;
}

struct ParsedCandidate {
  std::vector<Value> values;
  std::vector<std::string> repairs;
};

namespace detail {

// First parseable JSON object in free-form text; tolerates fences and prose.
inline std::optional<nlohmann::json> first_json_object(const std::string& text) {
  for (std::size_t start = text.find('{'); start != std::string::npos;
       start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      char c = text[i];
      if (in_string) {
        if (escaped) {
          escaped = false;
        } else if (c == '\\') {
          escaped = true;
        } else if (c == '"') {
          in_string = false;
        }
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) {
          nlohmann::json j = nlohmann::json::parse(text.substr(start, i - start + 1), nullptr, false);
          if (!j.is_discarded() && j.is_object()) return j;
          break;
        }
      }
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Applies the "changed features only" output contract: unmentioned features
// inherit the factual value, immutable edits are reset (and recorded), and
// continuous values pass through unclamped so plausibility can see them.
inline ParsedCandidate parse_and_repair(const std::string& response_text,
                                        const GenerationRequest& req) {
  auto obj = detail::first_json_object(response_text);
  if (!obj) throw ParseFailure("no JSON");

  const FeatureSchema& schema = *req.schema;
  ParsedCandidate out;
  out.values = req.factual.values;

  for (auto it = obj->begin(); it != obj->end(); ++it) {
    const std::string& key = it.key();
    int idx = schema.index_of(key);
    if (idx < 0) throw ParseFailure("unknown feature: " + key);
    const FeatureSpec& f = schema.features[static_cast<std::size_t>(idx)];
    const Value& factual_v = req.factual.values.at(static_cast<std::size_t>(idx));

    if (!f.is_mutable) {
      // Silent reset; only an actual attempted change is worth a repair note.
      bool same = false;
      if (f.type == FeatureType::continuous && it->is_number()) {
        same = Value{it->get<double>()} == factual_v;
      } else if (f.type == FeatureType::categorical && it->is_string()) {
        auto code = f.code_of(it->get<std::string>());
        same = code && Value{*code} == factual_v;
      }
      if (!same) out.repairs.push_back(key + ": immutable, reset to factual value");
      continue;
    }

    if (f.type == FeatureType::continuous) {
      double v = 0.0;
      if (it->is_number()) {
        v = it->get<double>();
      } else if (it->is_string() && parse_double(it->get<std::string>(), v)) {
        // numeric strings like "35" are a common LLM habit; accept them
      } else {
        throw ParseFailure("non-numeric value for " + key);
      }
      if (!std::isfinite(v)) throw ParseFailure("non-finite value for " + key);
      out.values[static_cast<std::size_t>(idx)] = Value{v};
    } else {
      if (!it->is_string()) throw ParseFailure("categorical value for " + key + " must be a string");
      auto code = f.code_of(it->get<std::string>());
      if (!code || !f.code_allowed(*code)) {
        throw ParseFailure("value for " + key + " is not in the allowed set");
      }
      out.values[static_cast<std::size_t>(idx)] = Value{*code};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generators

// LLM-backed generation: render -> complete -> parse/repair -> validity check,
// retrying with a distinct prompt suffix until a flip or the attempt budget is
// gone. The suffix keeps retry cache keys apart from the original request.
inline CounterfactualResult generate_llm(const GenerationRequest& req, const PromptSpec& spec,
                                         LlmClient& client) {
  validate_request(req);
  const std::string base_prompt = render_prompt(req, spec);

  std::optional<CounterfactualResult> last_candidate;
  std::string last_error = "no attempts made";
  int attempts = 0;
  for (int attempt = 1; attempt <= req.budget; ++attempt) {
    attempts = attempt;
    std::string prompt = base_prompt;
    if (attempt > 1) {
      prompt += "\nRetry " + std::to_string(attempt) + ": the previous attempt failed (" +
                last_error + "). Follow the output contract exactly and make sure the " +
                "prediction flips to class " + std::to_string(req.desired_label) + ".\n";
    }

    std::string text;
    try {
      text = client.complete(prompt);
    } catch (const CacheMiss&) {
      throw;  // offline with a cold key cannot be retried into existence
    } catch (const LlmError& e) {
      last_error = std::string("transport error: ") + e.what();
      continue;
    }

    ParsedCandidate cand;
    try {
      cand = parse_and_repair(text, req);
    } catch (const ParseFailure& e) {
      last_error = e.reason;
      continue;
    }

    CounterfactualResult r =
        detail::make_result(req, std::move(cand.values), "llm", false, attempt);
    r.repairs = std::move(cand.repairs);
    r.raw_llm_text = text;
    r.valid = req.model->predict(detail::scratch_sample(req, r.cf_values)).label == req.desired_label;
    if (r.valid) return r;
    last_candidate = std::move(r);
    last_error = "the counterfactual did not flip the prediction";
  }

  if (last_candidate) {
    last_candidate->attempts = attempts;
    return *last_candidate;
  }
  throw BudgetExhausted(last_error, attempts);
}

inline CounterfactualResult generate_llm(const GenerationRequest& req, const PromptSpec& spec,
                                         const EndpointConfig& endpoint) {
  LlmClient client(endpoint);
  return generate_llm(req, spec, client);
}

// NICE-style: nearest unlike neighbor, then greedy single-feature value
// substitutions that maximize the desired-class probability until the
// prediction flips. Deterministic; ties break toward the lowest index.
inline CounterfactualResult generate_nice(const GenerationRequest& req, const TrainIndex& index) {
  validate_request(req);
  int nun_idx = nearest_unlike(index, req.factual, req.desired_label, *req.schema);
  if (nun_idx < 0) throw NoUnlikeNeighbor();
  const Sample& nun = index.train->samples[static_cast<std::size_t>(nun_idx)];

  EvalBudget budget(req.budget);
  std::vector<Value> current = req.factual.values;
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < req.schema->dimension(); ++i) {
    if (req.schema->features[i].is_mutable && !(current[i] == nun.values[i])) pending.push_back(i);
  }

  bool valid = false;
  while (!pending.empty() && !valid) {
    std::size_t best_j = pending.size();
    double best_p = -1.0;
    bool out_of_budget = false;
    for (std::size_t j = 0; j < pending.size(); ++j) {
      std::vector<Value> trial = current;
      trial[pending[j]] = nun.values[pending[j]];
      auto raw = detail::eval_raw(req, trial, budget);
      if (!raw) {
        out_of_budget = true;
        break;
      }
      double p = detail::desired_p(*raw, req.desired_label);
      if (p > best_p) {  // strict: first (lowest-index) candidate wins ties
        best_p = p;
        best_j = j;
        valid = detail::label_from_raw(*raw) == req.desired_label;
      }
    }
    if (out_of_budget || best_j == pending.size()) break;
    current[pending[best_j]] = nun.values[pending[best_j]];
    pending.erase(pending.begin() + static_cast<std::ptrdiff_t>(best_j));
  }

  return detail::make_result(req, std::move(current), "nice", valid, budget.used());
}

inline CounterfactualResult generate_nice(const GenerationRequest& req, const Dataset& train) {
  if (!req.model) throw std::invalid_argument("request needs a model");
  TrainIndex index = TrainIndex::build(train, *req.model);
  return generate_nice(req, index);
}

// Move grid for the greedy two-step search: fractions of the training range
// tried in both directions, coarse on purpose — step 2 refines the winner.
inline constexpr double kMoveGrid[] = {0.10, 0.25, 0.50};
inline constexpr int kShrinkIterations = 8;

// CFNOW-style greedy two-step search. Step 1 applies the single grid move with
// the largest desired-probability gain until the prediction flips; step 2
// shrinks each changed feature back toward the factual (full revert, else an
// 8-step binary search) without ever breaking validity. `shrink_trace`, when
// given, records the counterfactual distance after step 1 and after each
// shrink commit — it is non-increasing by construction.
inline CounterfactualResult generate_greedy2step(const GenerationRequest& req,
                                                 std::vector<double>* shrink_trace = nullptr) {
  validate_request(req);
  const FeatureSchema& schema = *req.schema;
  EvalBudget budget(req.budget);

  std::vector<Value> current = req.factual.values;
  auto raw0 = detail::eval_raw(req, current, budget);
  if (!raw0) return detail::make_result(req, std::move(current), "cfnow", false, budget.used());
  double current_p = detail::desired_p(*raw0, req.desired_label);
  bool valid = detail::label_from_raw(*raw0) == req.desired_label;

  // Step 1: find a flip.
  while (!valid) {
    double best_gain = 0.0;  // a move must strictly improve to be applied
    std::vector<Value> best_values;
    double best_raw = 0.0;
    bool out_of_budget = false;

    for (std::size_t i = 0; i < schema.dimension() && !out_of_budget; ++i) {
      const FeatureSpec& f = schema.features[i];
      if (!f.is_mutable) continue;

      std::vector<Value> candidates;
      if (f.type == FeatureType::continuous) {
        if (!f.fitted()) throw UnfittedSchema(f.name);
        double cur = num(current[i]);
        double r = f.range();
        for (double frac : kMoveGrid) {
          for (double sign : {+1.0, -1.0}) {
            double v = std::clamp(cur + sign * frac * r, *f.observed_min, *f.observed_max);
            if (v != cur) candidates.push_back(Value{v});
          }
        }
      } else {
        for (int code : f.allowed_codes) {
          if (!(Value{code} == current[i])) candidates.push_back(Value{code});
        }
      }

      for (const Value& cand : candidates) {
        std::vector<Value> trial = current;
        trial[i] = cand;
        auto raw = detail::eval_raw(req, trial, budget);
        if (!raw) {
          out_of_budget = true;
          break;
        }
        double gain = detail::desired_p(*raw, req.desired_label) - current_p;
        if (gain > best_gain) {
          best_gain = gain;
          best_values = std::move(trial);
          best_raw = *raw;
        }
      }
    }

    if (out_of_budget || best_values.empty()) break;  // budget gone or plateau
    current = std::move(best_values);
    current_p = detail::desired_p(best_raw, req.desired_label);
    valid = detail::label_from_raw(best_raw) == req.desired_label;
  }

  // Step 2: shrink while preserving the flip.
  if (valid) {
    if (shrink_trace) {
      shrink_trace->push_back(
          distance(req.factual, detail::scratch_sample(req, current), schema));
    }
    std::vector<std::size_t> changed;
    for (std::size_t i = 0; i < schema.dimension(); ++i) {
      if (!(current[i] == req.factual.values[i])) changed.push_back(i);
    }

    bool out_of_budget = false;
    for (std::size_t i : changed) {
      if (out_of_budget) break;
      std::vector<Value> trial = current;
      trial[i] = req.factual.values[i];
      auto raw = detail::eval_raw(req, trial, budget);
      if (!raw) break;
      if (detail::label_from_raw(*raw) == req.desired_label) {
        current = std::move(trial);  // full revert stays valid
      } else if (schema.features[i].type == FeatureType::continuous) {
        double lo = num(req.factual.values[i]);  // invalid side (just checked)
        double hi = num(current[i]);             // valid side
        for (int it = 0; it < kShrinkIterations; ++it) {
          double mid = 0.5 * (lo + hi);
          std::vector<Value> probe = current;
          probe[i] = Value{mid};
          auto mid_raw = detail::eval_raw(req, probe, budget);
          if (!mid_raw) {
            out_of_budget = true;
            break;
          }
          if (detail::label_from_raw(*mid_raw) == req.desired_label) {
            hi = mid;
          } else {
            lo = mid;
          }
        }
        current[i] = Value{hi};  // hi is the tightest value observed valid
      }
      if (shrink_trace) {
        shrink_trace->push_back(
            distance(req.factual, detail::scratch_sample(req, current), schema));
      }
    }
  }

  return detail::make_result(req, std::move(current), "cfnow", valid, budget.used());
}

// Genetic hyperparameters, fixed for reproducibility rather than tuned.
inline constexpr int kGaPopulation = 50;
inline constexpr int kGaGenerations = 40;
inline constexpr double kGaLambda1 = 0.5;   // proximity penalty
inline constexpr double kGaLambda2 = 0.2;   // diversity bonus among the selected set
inline constexpr int kGaTournament = 3;

namespace detail {

struct GaIndividual {
  std::vector<Value> values;
  double raw_p = 0.0;
  double dist = 0.0;
  bool evaluated = false;
};

inline double ga_base_fitness(const GaIndividual& ind, int desired) {
  if (!ind.evaluated) return -std::numeric_limits<double>::infinity();
  double validity = label_from_raw(ind.raw_p) == desired ? 1.0 : 0.0;
  return validity - kGaLambda1 * ind.dist;
}

inline void ga_perturb_feature(std::vector<Value>& values, std::size_t i, const FeatureSpec& f,
                               std::mt19937_64& gen) {
  if (f.type == FeatureType::continuous) {
    if (!f.fitted()) throw UnfittedSchema(f.name);
    values[i] = Value{uniform(gen, *f.observed_min, *f.observed_max)};
  } else {
    values[i] = Value{f.allowed_codes[uniform_index(gen, f.allowed_codes.size())]};
  }
}

}  // namespace detail

// DiCE-style diverse generation: a seeded genetic search over mutable-feature
// perturbations (population 50, 40 generations). Fitness combines a validity
// indicator, a proximity penalty (λ1) and — at selection time — a pairwise
// diversity bonus (λ2) over the growing selected set. Returns the k fittest
// valid individuals, padded with the fittest invalid ones when scarce.
inline std::vector<CounterfactualResult> generate_diverse(const GenerationRequest& req, int k,
                                                          std::uint64_t seed) {
  validate_request(req);
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const FeatureSchema& schema = *req.schema;
  EvalBudget budget(req.budget);
  std::mt19937_64 gen(seed);

  std::vector<std::size_t> mutable_idx;
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    if (schema.features[i].is_mutable) mutable_idx.push_back(i);
  }

  auto measure = [&](detail::GaIndividual& ind) {
    ind.dist = distance(req.factual, detail::scratch_sample(req, ind.values), schema);
    auto raw = detail::eval_raw(req, ind.values, budget);
    if (raw) {
      ind.raw_p = *raw;
      ind.evaluated = true;
    }
  };

  std::vector<detail::GaIndividual> pop;
  pop.reserve(kGaPopulation);
  for (int n = 0; n < kGaPopulation; ++n) {
    detail::GaIndividual ind;
    ind.values = req.factual.values;
    for (std::size_t i : mutable_idx) {
      if (uniform01(gen) < 0.5) {
        detail::ga_perturb_feature(ind.values, i, schema.features[i], gen);
      }
    }
    measure(ind);
    pop.push_back(std::move(ind));
  }

  auto rank = [&](const std::vector<detail::GaIndividual>& p) {
    std::vector<std::size_t> order(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return detail::ga_base_fitness(p[a], req.desired_label) >
             detail::ga_base_fitness(p[b], req.desired_label);
    });
    return order;
  };

  for (int g = 0; g < kGaGenerations && !budget.exhausted(); ++g) {
    std::vector<std::size_t> order = rank(pop);
    std::size_t keep = std::min<std::size_t>(kGaPopulation / 2, order.size());
    std::vector<detail::GaIndividual> next;
    next.reserve(kGaPopulation);
    for (std::size_t i = 0; i < keep; ++i) next.push_back(pop[order[i]]);

    auto pick_parent = [&]() -> const detail::GaIndividual& {
      std::size_t best = uniform_index(gen, keep);
      for (int t = 1; t < kGaTournament; ++t) {
        std::size_t c = uniform_index(gen, keep);
        if (detail::ga_base_fitness(next[c], req.desired_label) >
            detail::ga_base_fitness(next[best], req.desired_label)) {
          best = c;
        }
      }
      return next[best];
    };

    bool starved = false;
    while (next.size() < kGaPopulation && !starved) {
      const detail::GaIndividual& pa = pick_parent();
      const detail::GaIndividual& pb = pick_parent();
      detail::GaIndividual child;
      child.values = req.factual.values;
      for (std::size_t i : mutable_idx) {
        child.values[i] = uniform01(gen) < 0.5 ? pa.values[i] : pb.values[i];
      }
      for (std::size_t i : mutable_idx) {
        const FeatureSpec& f = schema.features[i];
        double u = uniform01(gen);
        if (f.type == FeatureType::continuous) {
          if (u < 0.15) {
            detail::ga_perturb_feature(child.values, i, f, gen);
          } else if (u < 0.30) {
            // contract toward the factual to sharpen proximity
            double fact = num(req.factual.values[i]);
            double cur = num(child.values[i]);
            child.values[i] = Value{fact + uniform01(gen) * (cur - fact)};
          }
        } else {
          if (u < 0.10) {
            detail::ga_perturb_feature(child.values, i, f, gen);
          } else if (u < 0.20) {
            child.values[i] = req.factual.values[i];
          }
        }
      }
      measure(child);
      if (!child.evaluated) starved = true;
      next.push_back(std::move(child));
    }
    pop = std::move(next);
    if (starved) break;
  }

  // Final selection: greedy over evaluated, deduplicated individuals with the
  // diversity bonus applied against everything already selected.
  std::vector<detail::GaIndividual> candidates;
  for (std::size_t i : rank(pop)) {
    if (!pop[i].evaluated) continue;
    bool dup = false;
    for (const auto& c : candidates) dup = dup || c.values == pop[i].values;
    if (!dup) candidates.push_back(pop[i]);
  }

  std::vector<detail::GaIndividual> valids, invalids;
  for (auto& c : candidates) {
    (detail::label_from_raw(c.raw_p) == req.desired_label ? valids : invalids)
        .push_back(std::move(c));
  }

  std::vector<detail::GaIndividual> selected;
  std::vector<char> taken(valids.size(), 0);
  while (selected.size() < static_cast<std::size_t>(k) && selected.size() < valids.size()) {
    std::size_t best = valids.size();
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < valids.size(); ++i) {
      if (taken[i]) continue;
      double score = detail::ga_base_fitness(valids[i], req.desired_label);
      if (!selected.empty()) {
        double min_pair = std::numeric_limits<double>::infinity();
        for (const auto& s : selected) {
          min_pair = std::min(min_pair, distance(detail::scratch_sample(req, valids[i].values),
                                                 detail::scratch_sample(req, s.values), schema));
        }
        score += kGaLambda2 * min_pair;
      }
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    if (best == valids.size()) break;
    taken[best] = 1;
    selected.push_back(valids[best]);
  }

  std::vector<CounterfactualResult> out;
  for (const auto& s : selected) {
    out.push_back(detail::make_result(req, s.values, "dice", true, budget.used()));
  }
  for (std::size_t i = 0; i < invalids.size() && out.size() < static_cast<std::size_t>(k); ++i) {
    out.push_back(detail::make_result(req, invalids[i].values, "dice", false, budget.used()));
  }
  while (out.size() < static_cast<std::size_t>(k)) {
    // degenerate fallback: nothing evaluated at all (tiny budgets)
    out.push_back(detail::make_result(req, req.factual.values, "dice", false, budget.used()));
  }
  return out;
}

// Offline test double: copy every mutable feature from the nearest unlike
// neighbor. Valid exactly when that hybrid flips the model.
inline CounterfactualResult generate_mock(const GenerationRequest& req, const TrainIndex& index) {
  validate_request(req);
  int nun_idx = nearest_unlike(index, req.factual, req.desired_label, *req.schema);
  if (nun_idx < 0) throw NoUnlikeNeighbor();
  const Sample& nun = index.train->samples[static_cast<std::size_t>(nun_idx)];

  std::vector<Value> values = req.factual.values;
  for (std::size_t i = 0; i < req.schema->dimension(); ++i) {
    if (req.schema->features[i].is_mutable) values[i] = nun.values[i];
  }
  EvalBudget budget(req.budget);
  auto raw = detail::eval_raw(req, values, budget);
  bool valid = raw && detail::label_from_raw(*raw) == req.desired_label;
  return detail::make_result(req, std::move(values), "mock", valid, budget.used());
}

inline CounterfactualResult generate_mock(const GenerationRequest& req, const Dataset& train) {
  if (!req.model) throw std::invalid_argument("request needs a model");
  TrainIndex index = TrainIndex::build(train, *req.model);
  return generate_mock(req, index);
}

// Few-shot exemplars: take the k nearest training samples predicted as the
// desired class and pair each with its mock counterfactual toward the other
// class, presented in flip order (mock hybrid as the "input", the real
// desired-class sample as the "output"). All values originate in the training
// split; exemplar preparation never bills the request budget.
inline std::vector<std::pair<Sample, Sample>> select_exemplars(const GenerationRequest& req,
                                                               const TrainIndex& index, int k) {
  validate_request(req);
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const FeatureSchema& schema = *req.schema;

  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t i = 0; i < index.train->samples.size(); ++i) {
    if (index.predicted[i] != req.desired_label) continue;
    order.emplace_back(distance(req.factual, index.train->samples[i], schema), i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::pair<Sample, Sample>> out;
  const int other = 1 - req.desired_label;
  for (const auto& [d, ti] : order) {
    if (out.size() == static_cast<std::size_t>(k)) break;
    const Sample& target = index.train->samples[ti];
    int nun_idx = nearest_unlike(index, target, other, schema);
    if (nun_idx < 0) continue;
    Sample hybrid = target;
    for (std::size_t i = 0; i < schema.dimension(); ++i) {
      if (schema.features[i].is_mutable) {
        hybrid.values[i] = index.train->samples[static_cast<std::size_t>(nun_idx)].values[i];
      }
    }
    if (req.model->predict(hybrid).label != other) continue;  // exemplar must really flip
    hybrid.label = other;
    out.emplace_back(std::move(hybrid), target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// cfs.jsonl

namespace detail {

inline nlohmann::json result_to_json(const CounterfactualResult& r, const FeatureSchema& schema) {
  nlohmann::json j;
  j["factual_ref"] = {{"patient_id", r.factual.patient_id},
                      {"window_index", r.factual.window_index}};
  j["factual_label"] = r.factual.label;
  nlohmann::json fv = nlohmann::json::array();
  nlohmann::json cv = nlohmann::json::array();
  for (std::size_t i = 0; i < schema.dimension(); ++i) {
    fv.push_back(value_to_json(schema.features[i], r.factual.values.at(i)));
    cv.push_back(value_to_json(schema.features[i], r.cf_values.at(i)));
  }
  j["factual_values"] = std::move(fv);
  j["cf_values"] = std::move(cv);
  j["generator_id"] = r.generator_id;
  j["desired_label"] = r.desired_label;
  j["valid"] = r.valid;
  j["changed_features"] = r.changed_features;
  j["attempts"] = r.attempts;
  j["repairs"] = r.repairs;
  j["raw_llm_text"] = r.raw_llm_text ? nlohmann::json(*r.raw_llm_text) : nlohmann::json(nullptr);
  return j;
}

inline Value value_from_json(const FeatureSpec& f, const nlohmann::json& v) {
  if (f.type == FeatureType::continuous) {
    if (!v.is_number()) throw std::runtime_error("expected number for " + f.name);
    return Value{v.get<double>()};
  }
  if (!v.is_string()) throw std::runtime_error("expected string for " + f.name);
  auto code = f.code_of(v.get<std::string>());
  if (!code) throw std::runtime_error("unknown category for " + f.name);
  return Value{*code};
}

}  // namespace detail

inline void write_cfs_jsonl(const std::vector<CounterfactualResult>& results,
                            const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : results) out << detail::result_to_json(r, schema).dump() << "\n";
}

inline std::vector<CounterfactualResult> read_cfs_jsonl(const std::filesystem::path& path,
                                                        const FeatureSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<CounterfactualResult> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    CounterfactualResult r;
    r.factual.patient_id = j.at("factual_ref").at("patient_id").get<std::string>();
    r.factual.window_index = j.at("factual_ref").at("window_index").get<int>();
    r.factual.label = j.at("factual_label").get<int>();
    for (std::size_t i = 0; i < schema.dimension(); ++i) {
      r.factual.values.push_back(
          detail::value_from_json(schema.features[i], j.at("factual_values").at(i)));
      r.cf_values.push_back(detail::value_from_json(schema.features[i], j.at("cf_values").at(i)));
    }
    r.generator_id = j.at("generator_id").get<std::string>();
    r.desired_label = j.at("desired_label").get<int>();
    r.valid = j.at("valid").get<bool>();
    r.changed_features = j.at("changed_features").get<std::vector<std::string>>();
    r.attempts = j.at("attempts").get<int>();
    r.repairs = j.at("repairs").get<std::vector<std::string>>();
    if (!j.at("raw_llm_text").is_null()) r.raw_llm_text = j.at("raw_llm_text").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cfforge
