#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "cfforge/featurize.hpp"
#include "cfforge/rng.hpp"
#include "cfforge/schema.hpp"
#include "cfforge/timeutil.hpp"

namespace cfforge {

// Synthetic sensor streams standing in for the access-gated cohort data.
// High-stress days push glucose up and steps down and degrade sleep, so the
// downstream label is learnable but noisy.
struct SimConfig {
  int patients = 12;
  int days = 5;
  std::uint64_t seed = 7;
  double high_stress_day_fraction = 0.35;
  std::int64_t start_day = days_from_civil(2023, 3, 1);
};

inline SensorBundle generate_bundle(const SimConfig& cfg) {
  if (cfg.patients < 1 || cfg.days < 1) throw std::invalid_argument("simdata: empty cohort");
  SensorBundle bundle;
  std::mt19937_64 gen(cfg.seed);

  const char* genders[] = {"M", "F"};
  const char* medications[] = {"none", "metformin", "insulin"};
  const char* subgroups[] = {"healthy", "prediabetes", "type2"};

  for (int p = 0; p < cfg.patients; ++p) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "p%03d", p + 1);
    std::string pid = idbuf;

    Demographics demo;
    demo.age = std::floor(uniform(gen, 30.0, 86.0));
    demo.gender = genders[uniform_index(gen, 2)];
    demo.medication = medications[uniform_index(gen, 3)];
    demo.subgroup = subgroups[uniform_index(gen, 3)];
    bundle.demographics[pid] = demo;

    double base_glucose = demo.subgroup == std::string("healthy")      ? 112.0
                          : demo.subgroup == std::string("prediabetes") ? 138.0
                                                                        : 165.0;

    for (int d = 0; d < cfg.days; ++d) {
      const std::int64_t day = cfg.start_day + d;
      const std::int64_t midnight = day * 86400;
      const bool high = uniform01(gen) < cfg.high_stress_day_fraction;

      // stress: hourly 08:00-20:00
      for (int h = 8; h <= 20; ++h) {
        double v = (high ? 83.0 : 46.0) + uniform(gen, -9.0, 9.0);
        bundle.stress[pid].push_back({midnight + h * 3600, std::clamp(v, 0.0, 100.0)});
      }
      // CGM: every 15 min, with meal bumps and a stress offset
      for (int m = 0; m < 24 * 60; m += 15) {
        double t_h = m / 60.0;
        double meals = 28.0 * (std::exp(-0.5 * std::pow((t_h - 8.0) / 1.1, 2)) +
                               std::exp(-0.5 * std::pow((t_h - 13.0) / 1.3, 2)) +
                               std::exp(-0.5 * std::pow((t_h - 19.0) / 1.2, 2)));
        double v = base_glucose + meals + (high ? 24.0 : 0.0) + 13.0 * standard_normal(gen);
        bundle.cgm[pid].push_back({midnight + m * 60, std::clamp(v, 40.0, 400.0)});
      }
      // steps: every 30 min, 07:00-22:00
      for (int m = 7 * 60; m < 22 * 60; m += 30) {
        double v = uniform(gen, 0.0, 1150.0) * (high ? 0.55 : 1.0);
        bundle.steps[pid].push_back({midnight + m * 60, std::floor(v)});
      }
      // the night filed under this morning's date
      double total = uniform(gen, 380.0, 520.0);
      double awake_f = high ? 0.13 : 0.06;
      double deep_f = high ? 0.10 : 0.18;
      double rem_f = high ? 0.12 : 0.22;
      SleepNight night;
      night.night_day = day;
      night.awake_min = total * awake_f;
      night.deep_min = total * deep_f;
      night.rem_min = total * rem_f;
      night.light_min = total - night.awake_min - night.deep_min - night.rem_min;
      bundle.sleep[pid].push_back(night);
    }
  }
  bundle.sort_streams();
  return bundle;
}

inline void write_bundle_csvs(const SensorBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name, const char* header) {
    std::ofstream out(dir / name);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << header << '\n';
    return out;
  };

  {
    auto out = open("sleep.csv", "patient_id,night_date,stage,duration_min");
    for (const auto& [pid, nights] : bundle.sleep) {
      for (const SleepNight& n : nights) {
        const std::string date = format_date(n.night_day);
        out << pid << ',' << date << ",Awake," << format_double(n.awake_min) << '\n';
        out << pid << ',' << date << ",Light," << format_double(n.light_min) << '\n';
        out << pid << ',' << date << ",Deep," << format_double(n.deep_min) << '\n';
        out << pid << ',' << date << ",REM," << format_double(n.rem_min) << '\n';
      }
    }
  }
  auto write_stream = [&](const char* name, const char* header,
                          const std::map<std::string, std::vector<TimedReading>>& src) {
    auto out = open(name, header);
    for (const auto& [pid, readings] : src) {
      for (const TimedReading& r : readings) {
        out << pid << ',' << format_iso8601(r.ts) << ',' << format_double(r.value) << '\n';
      }
    }
  };
  write_stream("cgm.csv", "patient_id,timestamp_iso8601,glucose_mg_dl", bundle.cgm);
  write_stream("steps.csv", "patient_id,timestamp,steps", bundle.steps);
  write_stream("stress.csv", "patient_id,timestamp,stress_0_100", bundle.stress);
  {
    auto out = open("demographics.csv", "patient_id,age,gender,medication,subgroup");
    for (const auto& [pid, d] : bundle.demographics) {
      out << pid << ',' << format_double(d.age) << ',' << d.gender << ',' << d.medication << ','
          << d.subgroup << '\n';
    }
  }
}

}  // namespace cfforge
