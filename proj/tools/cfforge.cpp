#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cfforge/config.hpp"
#include "cfforge/generators.hpp"
#include "cfforge/harness.hpp"
#include "cfforge/simdata.hpp"

namespace fs = std::filesystem;
using namespace cfforge;

namespace {

// split CSVs carry a per-split sidecar (train.schema.json); fall back to the
// directory-level schema.json
Dataset read_split(const fs::path& csv) {
  fs::path named = csv.parent_path() / (csv.stem().string() + ".schema.json");
  if (fs::exists(named)) return read_dataset(csv, named);
  return read_dataset(csv);
}

void write_split(const Dataset& ds, const fs::path& csv) {
  write_dataset(ds, csv, csv.parent_path() / (csv.stem().string() + ".schema.json"));
}

PromptMode parse_prompt_flag(const std::string& s, int& few_k) {
  if (s == "zero") return PromptMode::zero_shot;
  if (s == "few") return PromptMode::few_shot;
  if (s.rfind("few:", 0) == 0) {
    few_k = std::stoi(s.substr(4));
    if (few_k < 1) throw std::invalid_argument("--prompt few:K needs K >= 1");
    return PromptMode::few_shot;
  }
  throw std::invalid_argument("--prompt expects zero, few or few:K, got '" + s + "'");
}

struct EndpointFlags {
  std::string base_url, model_name, cache;
  bool offline = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--endpoint", base_url, "chat-completion base URL");
    cmd->add_option("--llm-model", model_name, "model name sent on the wire");
    cmd->add_option("--cache", cache, "response cache path (JSONL)");
    cmd->add_flag("--offline", offline, "serve only from the cache; never dial out");
  }

  void apply(EndpointConfig& cfg) const {
    if (!base_url.empty()) cfg.base_url = base_url;
    if (!model_name.empty()) cfg.model_name = model_name;
    if (!cache.empty()) cfg.cache_path = cache;
    if (offline) cfg.offline = true;
  }
};

int run_simdata(const fs::path& out, std::uint64_t seed, int patients, int days) {
  SimConfig cfg;
  cfg.patients = patients;
  cfg.days = days;
  cfg.seed = seed;
  SensorBundle bundle = generate_bundle(cfg);
  fs::create_directories(out);
  write_bundle_csvs(bundle, out);
  std::cout << "wrote sensor streams for " << patients << " patients x " << days << " days to "
            << out.string() << "\n";
  return 0;
}

int run_featurize(const fs::path& in, const fs::path& out, std::uint64_t seed,
                  const RunConfig& cfg) {
  SensorReadStats read_stats;
  SensorBundle bundle = read_sensor_bundle(in, &read_stats);
  BuildStats stats;
  auto [train, test] = build_dataset(bundle, cfg.window, seed, &stats);
  fs::create_directories(out);
  write_split(train, out / "train.csv");
  write_split(test, out / "test.csv");
  std::cout << "train: " << train.samples.size() << " samples, test: " << test.samples.size()
            << " samples (windows " << stats.windows_total << ", dropped cgm="
            << stats.dropped_cgm << " steps=" << stats.dropped_steps << " sleep="
            << stats.dropped_sleep << " stress=" << stats.dropped_stress << ")\n";
  return 0;
}

int run_train(const fs::path& data, const fs::path& out, std::uint64_t seed,
              const RunConfig& cfg) {
  Dataset train = read_split(data / "train.csv");
  Classifier model = Classifier::train(train, cfg.model, seed);
  model.save(out);
  std::cout << "wrote " << out.string();
  fs::path test_csv = data / "test.csv";
  if (fs::exists(test_csv)) {
    auto report = evaluate(model, read_split(test_csv));
    std::cout << "; test acc=" << format_double(report.accuracy)
              << " f1=" << format_double(report.f1) << " auc=" << format_double(report.auc);
  }
  std::cout << "\n";
  return 0;
}

int run_gencf(const fs::path& model_path, const fs::path& data_csv,
              std::optional<fs::path> train_csv, const std::string& generator,
              const std::string& desired, const fs::path& out, int k, int budget,
              const std::string& prompt, RunConfig cfg, const EndpointFlags& ep) {
  if (desired != "flip") {
    throw std::invalid_argument("--desired supports only 'flip' (request the opposite class)");
  }
  Classifier model = Classifier::load(model_path);
  Dataset data = read_split(data_csv);
  ep.apply(cfg.endpoint);

  fs::path train_path = train_csv.value_or(data_csv.parent_path() / "train.csv");
  std::optional<Dataset> train;
  std::optional<TrainIndex> index;
  const bool needs_train = generator == "nice" || generator == "mock" || generator == "llm";
  if (needs_train) {
    if (!fs::exists(train_path)) {
      throw std::runtime_error("generator '" + generator + "' needs training data; " +
                               train_path.string() + " not found (pass --train)");
    }
    train.emplace(read_split(train_path));
    index.emplace(TrainIndex::build(*train, model));
  }

  int few_k = cfg.few_shot_k;
  PromptMode mode = parse_prompt_flag(prompt, few_k);
  std::optional<LlmClient> client;
  if (generator == "llm") client.emplace(cfg.endpoint);

  std::vector<CounterfactualResult> results;
  int requests = 0, skipped = 0;
  for (const Sample& s : data.samples) {
    GenerationRequest req;
    req.factual = s;
    req.desired_label = 1 - model.predict(s).label;
    req.schema = &model.schema();
    req.model = &model;
    req.budget = budget;
    ++requests;
    try {
      if (generator == "nice") {
        results.push_back(generate_nice(req, *index));
      } else if (generator == "cfnow") {
        results.push_back(generate_greedy2step(req));
      } else if (generator == "dice") {
        auto batch = generate_diverse(req, k, /*seed=*/static_cast<std::uint64_t>(requests));
        results.insert(results.end(), batch.begin(), batch.end());
      } else if (generator == "mock") {
        results.push_back(generate_mock(req, *index));
      } else if (generator == "llm") {
        PromptSpec spec = PromptSpec::zero();
        if (mode == PromptMode::few_shot) {
          auto ex = select_exemplars(req, *index, few_k);
          if (!ex.empty()) spec = PromptSpec::few(std::move(ex));
        }
        results.push_back(generate_llm(req, spec, *client));
      } else {
        throw CLI::ValidationError("--generator",
                                   "expected one of llm|nice|cfnow|dice|mock, got " + generator);
      }
    } catch (const NoUnlikeNeighbor&) {
      ++skipped;
    } catch (const BudgetExhausted&) {
      ++skipped;
    }
  }

  write_cfs_jsonl(results, out, model.schema());
  int valid = 0;
  for (const auto& r : results) valid += r.valid ? 1 : 0;
  std::cout << "wrote " << out.string() << ": " << results.size() << " counterfactuals ("
            << valid << " valid) from " << requests << " requests, " << skipped << " skipped\n";
  return 0;
}

int run_augment(const fs::path& data, const fs::path& config_path, const std::string& scenario,
                const std::string& generator, std::vector<double> ratios, int seed_count,
                const fs::path& out, const EndpointFlags& ep) {
  RunConfig cfg = parse_config_file(config_path);
  ep.apply(cfg.endpoint);
  Dataset train = read_split(data / "train.csv");
  Dataset test = read_split(data / "test.csv");

  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < seed_count; ++i) seeds.push_back(static_cast<std::uint64_t>(i));

  std::vector<ScenarioKind> kinds;
  if (scenario == "all") {
    kinds = {ScenarioKind::A, ScenarioKind::B, ScenarioKind::C};
  } else {
    kinds = {scenario_from_name(scenario)};
  }

  HarnessConfig hcfg;
  hcfg.hyperparams = cfg.model;
  hcfg.cf_budget = cfg.budget;
  hcfg.llm_attempts = cfg.llm_attempts;
  hcfg.diverse_k = cfg.diverse_k;
  hcfg.prompt_mode = cfg.prompt_mode;
  hcfg.few_shot_k = cfg.few_shot_k;
  if (generator == "llm") hcfg.endpoint = &cfg.endpoint;

  fs::create_directories(out);
  // stream runs out as they finish so an interrupted grid keeps its progress
  std::ofstream stream(out / "runs.jsonl", std::ios::binary);
  if (!stream) throw std::runtime_error("cannot write " + (out / "runs.jsonl").string());
  auto on_run = [&stream](const AugmentationRun& run) {
    stream << run.to_json().dump() << "\n" << std::flush;
  };

  HarnessResult total;
  for (ScenarioKind kind : kinds) {
    total.merge(run_scenario(train, test, kind, cfg.reduction_fraction, generator, ratios, seeds,
                             hcfg, on_run));
  }
  stream.close();

  auto sweep = reduction_sweep(train, test, cfg.sweep_fractions, seeds, cfg.model);
  render_reports(total, out, sweep);
  std::cout << "wrote " << out.string() << ": " << total.runs.size() << " runs over "
            << kinds.size() << " scenario(s), " << sweep.size() << " sweep rows\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual explanation toolkit for wearable stress classifiers"};
  app.require_subcommand(1);

  // simdata
  auto* sim = app.add_subcommand("simdata", "generate synthetic sensor streams");
  fs::path sim_out;
  std::uint64_t sim_seed = 7;
  int sim_patients = 12, sim_days = 5;
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->add_option("--seed", sim_seed, "rng seed");
  sim->add_option("--patients", sim_patients, "cohort size");
  sim->add_option("--days", sim_days, "days per patient");

  // featurize
  auto* feat = app.add_subcommand("featurize", "extract the windowed feature dataset");
  fs::path feat_in, feat_out, feat_config;
  std::uint64_t feat_seed = 0;
  double window_hours = 2.0, overlap = 0.5, stress_threshold = 75.0;
  feat->add_option("--in", feat_in, "directory with sensor stream CSVs")->required();
  feat->add_option("--out", feat_out, "output directory")->required();
  feat->add_option("--seed", feat_seed, "split seed")->required();
  feat->add_option("--window-hours", window_hours, "window length in hours");
  feat->add_option("--overlap", overlap, "window overlap fraction [0,1)");
  feat->add_option("--stress-threshold", stress_threshold, "mean daily stress label cut");
  feat->add_option("--config", feat_config, "key=value config file ([window] section)");

  // train
  auto* tr = app.add_subcommand("train", "train the stress classifier");
  fs::path train_data, train_out, train_config;
  std::uint64_t train_seed = 0;
  tr->add_option("--data", train_data, "directory with train.csv/test.csv")->required();
  tr->add_option("--out", train_out, "model JSON path")->required();
  tr->add_option("--seed", train_seed, "training seed")->required();
  tr->add_option("--config", train_config, "key=value config file ([model] section)");

  // gencf
  auto* gen = app.add_subcommand("gencf", "generate counterfactuals for a dataset");
  fs::path gen_model, gen_data, gen_out, gen_config;
  std::optional<fs::path> gen_train;
  std::string gen_generator, gen_desired = "flip", gen_prompt = "zero";
  int gen_k = 4, gen_budget = 200;
  EndpointFlags gen_ep;
  gen->add_option("--model", gen_model, "trained model JSON")->required();
  gen->add_option("--data", gen_data, "CSV of factual samples")->required();
  gen->add_option("--train", gen_train, "training split CSV (defaults to sibling train.csv)");
  gen->add_option("--generator", gen_generator, "llm|nice|cfnow|dice|mock")->required();
  gen->add_option("--desired", gen_desired, "target class rule (only: flip)");
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--k", gen_k, "counterfactuals per request (dice)");
  gen->add_option("--budget", gen_budget, "evaluation/attempt budget per request");
  gen->add_option("--prompt", gen_prompt, "zero, few or few:K");
  gen->add_option("--config", gen_config, "key=value config file ([endpoint] section)");
  gen_ep.add_to(gen);

  // augment
  auto* aug = app.add_subcommand("augment", "run the label-scarcity augmentation experiment");
  fs::path aug_data, aug_config, aug_out;
  std::string aug_scenario, aug_generator;
  std::vector<double> aug_ratios = {0.2, 0.4, 0.6, 0.8, 1.0};
  int aug_seeds = 10;
  EndpointFlags aug_ep;
  aug->add_option("--data", aug_data, "directory with train.csv/test.csv")->required();
  aug->add_option("--model-config", aug_config, "key=value config file")->required();
  aug->add_option("--scenario", aug_scenario, "A, B, C or all")->required();
  aug->add_option("--generator", aug_generator, "llm|nice|cfnow|dice|mock")->required();
  aug->add_option("--ratios", aug_ratios, "augmentation ratios")->delimiter(',');
  aug->add_option("--seeds", aug_seeds, "number of seeds (0..N-1)");
  aug->add_option("--out", aug_out, "results directory")->required();
  aug_ep.add_to(aug);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return run_simdata(sim_out, sim_seed, sim_patients, sim_days);
    if (feat->parsed()) {
      RunConfig cfg;
      if (!feat_config.empty()) cfg = parse_config_file(feat_config);
      if (feat->count("--window-hours") != 0) {
        cfg.window.window_length_s =
            static_cast<std::int64_t>(std::llround(window_hours * 3600.0));
      }
      if (feat->count("--overlap") != 0) cfg.window.overlap_fraction = overlap;
      if (feat->count("--stress-threshold") != 0) {
        cfg.window.stress_high_threshold = stress_threshold;
      }
      return run_featurize(feat_in, feat_out, feat_seed, cfg);
    }
    if (tr->parsed()) {
      RunConfig cfg;
      if (!train_config.empty()) cfg = parse_config_file(train_config);
      return run_train(train_data, train_out, train_seed, cfg);
    }
    if (gen->parsed()) {
      RunConfig cfg;
      if (!gen_config.empty()) cfg = parse_config_file(gen_config);
      return run_gencf(gen_model, gen_data, gen_train, gen_generator, gen_desired, gen_out,
                       gen_k, gen_budget, gen_prompt, std::move(cfg), gen_ep);
    }
    if (aug->parsed()) {
      return run_augment(aug_data, aug_config, aug_scenario, aug_generator, aug_ratios,
                         aug_seeds, aug_out, aug_ep);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
