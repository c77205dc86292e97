#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cfforge/rng.hpp"
#include "cfforge/schema.hpp"
#include "cfforge/timeutil.hpp"

namespace cfforge {

struct TimedReading {
  std::int64_t ts = 0;  // unix seconds
  double value = 0.0;
};

// Stage minutes for one (patient, night). `night_day` is the civil date the
// night is filed under, in days since the epoch; its midnight is the anchor
// used when pairing nights with daytime windows.
struct SleepNight {
  std::int64_t night_day = 0;
  double awake_min = 0, light_min = 0, deep_min = 0, rem_min = 0;
};

struct Demographics {
  double age = 0;
  std::string gender, medication, subgroup;
};

struct SensorBundle {
  std::map<std::string, std::vector<SleepNight>> sleep;
  std::map<std::string, std::vector<TimedReading>> cgm;
  std::map<std::string, std::vector<TimedReading>> steps;
  std::map<std::string, std::vector<TimedReading>> stress;
  std::map<std::string, Demographics> demographics;

  void sort_streams() {
    auto by_ts = [](const TimedReading& a, const TimedReading& b) { return a.ts < b.ts; };
    for (auto& [_, v] : cgm) std::stable_sort(v.begin(), v.end(), by_ts);
    for (auto& [_, v] : steps) std::stable_sort(v.begin(), v.end(), by_ts);
    for (auto& [_, v] : stress) std::stable_sort(v.begin(), v.end(), by_ts);
    for (auto& [_, v] : sleep) {
      std::stable_sort(v.begin(), v.end(),
                       [](const SleepNight& a, const SleepNight& b) { return a.night_day < b.night_day; });
    }
  }
};

struct WindowConfig {
  std::int64_t window_length_s = 2 * 3600;
  double overlap_fraction = 0.5;
  int min_cgm_readings = 6;
  double hyper_threshold = 180.0;
  double tir_low = 70.0;
  double tir_high = 180.0;
  double stress_high_threshold = 75.0;

  std::int64_t stride_s() const {
    auto s = static_cast<std::int64_t>(std::llround(window_length_s * (1.0 - overlap_fraction)));
    if (s <= 0) throw std::invalid_argument("window stride must be positive");
    return s;
  }
};

struct Interval {
  std::int64_t begin = 0, end = 0;  // half-open [begin, end)
  bool contains(std::int64_t ts) const { return ts >= begin && ts < end; }
};

struct InsufficientPatients : std::runtime_error {
  InsufficientPatients() : std::runtime_error("need at least 2 patients with usable windows") {}
};

// Grid of [t, t+W) windows fully inside [stream_start, stream_end].
inline std::vector<Interval> enumerate_windows(std::int64_t stream_start, std::int64_t stream_end,
                                               const WindowConfig& config) {
  if (stream_end < stream_start) throw std::invalid_argument("stream_end < stream_start");
  std::vector<Interval> out;
  const std::int64_t stride = config.stride_s();
  for (std::int64_t t = stream_start; t + config.window_length_s <= stream_end; t += stride) {
    out.push_back({t, t + config.window_length_s});
  }
  return out;
}

struct WindowFeatures {
  double mean_steps = 0, mean_glucose = 0, tir_pct = 0;
  int hyper_events = 0;
};

struct Dropped {
  std::string reason;
};

using WindowResult = std::variant<WindowFeatures, Dropped>;

namespace detail {
inline std::vector<double> values_in(const std::vector<TimedReading>& stream, Interval w) {
  std::vector<double> out;
  auto lo = std::lower_bound(stream.begin(), stream.end(), w.begin,
                             [](const TimedReading& r, std::int64_t t) { return r.ts < t; });
  for (auto it = lo; it != stream.end() && it->ts < w.end; ++it) out.push_back(it->value);
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
}  // namespace detail

// Number of maximal runs of consecutive readings strictly above the threshold.
inline int count_hyper_events(const std::vector<double>& glucose, double threshold) {
  int events = 0;
  bool in_run = false;
  for (double g : glucose) {
    if (g > threshold) {
      if (!in_run) ++events;
      in_run = true;
    } else {
      in_run = false;
    }
  }
  return events;
}

inline WindowResult extract_window_features(const SensorBundle& bundle, const std::string& patient,
                                            Interval window, const WindowConfig& config) {
  auto cgm_it = bundle.cgm.find(patient);
  std::vector<double> glucose =
      cgm_it == bundle.cgm.end() ? std::vector<double>{} : detail::values_in(cgm_it->second, window);
  if (static_cast<int>(glucose.size()) < config.min_cgm_readings) {
    return Dropped{"insufficient CGM"};
  }
  auto steps_it = bundle.steps.find(patient);
  std::vector<double> steps =
      steps_it == bundle.steps.end() ? std::vector<double>{} : detail::values_in(steps_it->second, window);
  if (steps.empty()) return Dropped{"no step readings"};

  WindowFeatures f;
  f.mean_steps = detail::mean_of(steps);
  f.mean_glucose = detail::mean_of(glucose);
  f.hyper_events = count_hyper_events(glucose, config.hyper_threshold);
  std::size_t in_range = 0;
  for (double g : glucose) in_range += (g >= config.tir_low && g <= config.tir_high) ? 1 : 0;
  f.tir_pct = 100.0 * static_cast<double>(in_range) / static_cast<double>(glucose.size());
  return f;
}

struct SleepFeatures {
  double awake_pct = 0, light_pct = 0, deep_pct = 0, rem_pct = 0;
};

// Empty optional when the night is absent or has zero total duration.
inline std::optional<SleepFeatures> extract_sleep_features(const SensorBundle& bundle,
                                                           const std::string& patient,
                                                           std::int64_t night_day) {
  auto it = bundle.sleep.find(patient);
  if (it == bundle.sleep.end()) return std::nullopt;
  for (const SleepNight& n : it->second) {
    if (n.night_day != night_day) continue;
    double total = n.awake_min + n.light_min + n.deep_min + n.rem_min;
    if (total <= 0) return std::nullopt;
    return SleepFeatures{100.0 * n.awake_min / total, 100.0 * n.light_min / total,
                         100.0 * n.deep_min / total, 100.0 * n.rem_min / total};
  }
  return std::nullopt;
}

// High-stress day label: 1 iff the mean of all stress readings on that UTC
// day is strictly above the threshold. Empty optional when the day has no
// stress readings.
inline std::optional<int> label_windows(const SensorBundle& bundle, const std::string& patient,
                                        std::int64_t day, const WindowConfig& config) {
  auto it = bundle.stress.find(patient);
  if (it == bundle.stress.end()) return std::nullopt;
  double sum = 0;
  std::size_t n = 0;
  for (const TimedReading& r : it->second) {
    if (utc_day_of(r.ts) == day) {
      sum += r.value;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return (sum / static_cast<double>(n)) > config.stress_high_threshold ? 1 : 0;
}

inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = {
      "awake_pct",  "light_pct",    "deep_pct",    "rem_pct", "mean_steps", "mean_glucose",
      "hyper_events", "tir_pct",    "age",         "gender",  "medication", "subgroup"};
  return names;
}

inline FeatureSchema sensor_feature_schema() {
  FeatureSchema schema;
  auto cont = [&](const char* name, const char* unit) {
    schema.features.push_back(FeatureSpec::make_continuous(name, unit, true));
  };
  cont("awake_pct", "pct");
  cont("light_pct", "pct");
  cont("deep_pct", "pct");
  cont("rem_pct", "pct");
  cont("mean_steps", "steps");
  cont("mean_glucose", "mg/dL");
  cont("hyper_events", "events");
  cont("tir_pct", "pct");
  auto age = FeatureSpec::make_continuous("age", "years", false);
  schema.features.push_back(std::move(age));
  for (const char* name : {"gender", "medication", "subgroup"}) {
    FeatureSpec f;
    f.name = name;
    f.type = FeatureType::categorical;
    f.is_mutable = false;
    schema.features.push_back(std::move(f));
  }
  return schema;
}

struct BuildStats {
  std::size_t windows_total = 0;
  std::size_t dropped_cgm = 0, dropped_steps = 0, dropped_sleep = 0, dropped_stress = 0;
  std::size_t patients_skipped = 0;
  std::size_t samples = 0;
};

// Assembles the 12-feature windowed dataset and splits it 80/20 by patient.
// The schema attached to both splits carries ranges fitted on the train split
// only.
inline std::pair<Dataset, Dataset> build_dataset(const SensorBundle& bundle,
                                                 const WindowConfig& config, std::uint64_t seed,
                                                 BuildStats* stats = nullptr) {
  BuildStats local;
  FeatureSchema schema = sensor_feature_schema();
  const int gender_idx = schema.index_of("gender");
  const int med_idx = schema.index_of("medication");
  const int sub_idx = schema.index_of("subgroup");

  std::map<std::string, std::vector<Sample>> per_patient;
  constexpr std::int64_t kMaxNightGap = 36 * 3600;

  for (const auto& [pid, demo] : bundle.demographics) {
    auto cgm_it = bundle.cgm.find(pid);
    if (cgm_it == bundle.cgm.end() || cgm_it->second.empty()) {
      ++local.patients_skipped;
      continue;
    }
    const std::int64_t start = cgm_it->second.front().ts;
    const std::int64_t end = cgm_it->second.back().ts;
    auto windows = enumerate_windows(start, end, config);
    local.windows_total += windows.size();

    const auto* nights = bundle.sleep.count(pid) ? &bundle.sleep.at(pid) : nullptr;
    std::vector<Sample>& out = per_patient[pid];

    for (std::size_t k = 0; k < windows.size(); ++k) {
      const Interval w = windows[k];
      auto wr = extract_window_features(bundle, pid, w, config);
      if (std::holds_alternative<Dropped>(wr)) {
        const std::string& reason = std::get<Dropped>(wr).reason;
        (reason == "insufficient CGM" ? local.dropped_cgm : local.dropped_steps) += 1;
        continue;
      }
      const WindowFeatures& wf = std::get<WindowFeatures>(wr);

      // most recent completed night, at most 36h before the window start
      std::optional<SleepFeatures> sf;
      if (nights) {
        for (auto it = nights->rbegin(); it != nights->rend(); ++it) {
          std::int64_t anchor = it->night_day * 86400;
          if (anchor > w.begin) continue;
          if (w.begin - anchor > kMaxNightGap) break;
          sf = extract_sleep_features(bundle, pid, it->night_day);
          if (sf) break;
        }
      }
      if (!sf) {
        ++local.dropped_sleep;
        continue;
      }
      auto label = label_windows(bundle, pid, utc_day_of(w.begin), config);
      if (!label) {
        ++local.dropped_stress;
        continue;
      }

      Sample s;
      s.patient_id = pid;
      s.window_index = static_cast<int>(k);
      s.label = *label;
      s.values = {Value{sf->awake_pct},
                  Value{sf->light_pct},
                  Value{sf->deep_pct},
                  Value{sf->rem_pct},
                  Value{wf.mean_steps},
                  Value{wf.mean_glucose},
                  Value{static_cast<double>(wf.hyper_events)},
                  Value{wf.tir_pct},
                  Value{demo.age},
                  Value{schema.features[static_cast<std::size_t>(gender_idx)].intern(demo.gender)},
                  Value{schema.features[static_cast<std::size_t>(med_idx)].intern(demo.medication)},
                  Value{schema.features[static_cast<std::size_t>(sub_idx)].intern(demo.subgroup)}};
      out.push_back(std::move(s));
    }
    if (out.empty()) per_patient.erase(pid);
  }

  std::vector<std::string> patients;
  for (const auto& [pid, _] : per_patient) patients.push_back(pid);
  if (patients.size() < 2) throw InsufficientPatients();

  std::mt19937_64 gen(seed);
  seeded_shuffle(patients, gen);
  std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(patients.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, patients.size() - 1);

  Dataset train, test;
  train.role = DatasetRole::train;
  test.role = DatasetRole::test;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    Dataset& dst = i < n_train ? train : test;
    for (auto& s : per_patient[patients[i]]) dst.samples.push_back(s);
  }
  auto by_key = [](const Sample& a, const Sample& b) {
    return std::tie(a.patient_id, a.window_index) < std::tie(b.patient_id, b.window_index);
  };
  std::sort(train.samples.begin(), train.samples.end(), by_key);
  std::sort(test.samples.begin(), test.samples.end(), by_key);

  train.schema = schema;
  train.schema = fit_ranges(train);
  test.schema = train.schema;
  local.samples = train.samples.size() + test.samples.size();
  if (stats) *stats = local;
  return {std::move(train), std::move(test)};
}

// ---- sensor CSV input ----------------------------------------------------

struct SensorReadStats {
  std::map<std::string, std::size_t> dropped_rows;  // per file
};

namespace detail {
inline bool next_row(std::ifstream& in, std::vector<std::string>& fields) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    fields = split_csv_line(line);
    return true;
  }
  return false;
}
}  // namespace detail

// Reads sleep.csv / cgm.csv / steps.csv / stress.csv / demographics.csv from
// a directory. Malformed or out-of-range rows are dropped and counted, not
// fatal.
inline SensorBundle read_sensor_bundle(const std::filesystem::path& dir,
                                       SensorReadStats* stats = nullptr) {
  SensorBundle bundle;
  SensorReadStats local;

  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw std::runtime_error("cannot read " + (dir / name).string());
    std::string header;
    std::getline(in, header);  // header is documentation, not data
    return in;
  };

  {
    auto in = open("sleep.csv");
    std::map<std::pair<std::string, std::int64_t>, SleepNight> nights;
    std::vector<std::string> f;
    while (detail::next_row(in, f)) {
      double minutes;
      if (f.size() != 4 || !parse_double(f[3], minutes) || minutes < 0) {
        ++local.dropped_rows["sleep.csv"];
        continue;
      }
      const std::string& stage = f[2];
      if (stage != "Awake" && stage != "Light" && stage != "Deep" && stage != "REM") {
        ++local.dropped_rows["sleep.csv"];
        continue;
      }
      std::int64_t day;
      try {
        day = parse_date(f[1]);
      } catch (const std::exception&) {
        ++local.dropped_rows["sleep.csv"];
        continue;
      }
      SleepNight& n = nights[{f[0], day}];
      n.night_day = day;
      if (stage == "Awake") n.awake_min += minutes;
      else if (stage == "Light") n.light_min += minutes;
      else if (stage == "Deep") n.deep_min += minutes;
      else n.rem_min += minutes;
    }
    for (auto& [key, night] : nights) bundle.sleep[key.first].push_back(night);
  }

  auto read_stream = [&](const char* name, auto accept,
                         std::map<std::string, std::vector<TimedReading>>& dst) {
    auto in = open(name);
    std::vector<std::string> f;
    while (detail::next_row(in, f)) {
      double v;
      std::int64_t ts;
      if (f.size() != 3 || !parse_double(f[2], v) || !accept(v)) {
        ++local.dropped_rows[name];
        continue;
      }
      try {
        ts = parse_iso8601(f[1]);
      } catch (const std::exception&) {
        ++local.dropped_rows[name];
        continue;
      }
      dst[f[0]].push_back({ts, v});
    }
  };
  read_stream("cgm.csv", [](double v) { return v > 0; }, bundle.cgm);
  read_stream("steps.csv", [](double v) { return v >= 0; }, bundle.steps);
  read_stream("stress.csv", [](double v) { return v >= 0 && v <= 100; }, bundle.stress);

  {
    auto in = open("demographics.csv");
    std::vector<std::string> f;
    while (detail::next_row(in, f)) {
      double age;
      if (f.size() != 5 || !parse_double(f[1], age) || age < 0) {
        ++local.dropped_rows["demographics.csv"];
        continue;
      }
      bundle.demographics[f[0]] = Demographics{age, f[2], f[3], f[4]};
    }
  }

  bundle.sort_streams();
  if (stats) *stats = local;
  return bundle;
}

}  // namespace cfforge
