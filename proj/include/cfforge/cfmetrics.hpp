#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfforge/model.hpp"
#include "cfforge/schema.hpp"

namespace cfforge {

struct EmptyBatch : std::runtime_error {
  EmptyBatch() : std::runtime_error("counterfactual batch is empty") {}
};

struct UnfittedSchema : std::runtime_error {
  explicit UnfittedSchema(const std::string& feature)
      : std::runtime_error("schema ranges not fitted for feature '" + feature + "'") {}
};

// One factual/counterfactual pair as consumed by the metrics.
struct CFRecord {
  Sample factual;
  Sample counterfactual;
  int desired_label = 0;
};

using CFBatch = std::vector<CFRecord>;

// Fraction of CFs whose model prediction differs from the factual's model
// prediction.
inline double validity(const CFBatch& batch, const Classifier& model) {
  if (batch.empty()) throw EmptyBatch();
  std::size_t flips = 0;
  for (const auto& r : batch) {
    flips += model.predict(r.counterfactual).label != model.predict(r.factual).label ? 1 : 0;
  }
  return static_cast<double>(flips) / static_cast<double>(batch.size());
}

// L2 over min-max-scaled continuous differences plus the fraction of
// categorical features that differ, combined by plain sum. A zero-width
// training range counts a differing value as a full range apart.
inline double distance(const Sample& factual, const Sample& cf, const FeatureSchema& schema) {
  if (factual.values.size() != schema.dimension() || cf.values.size() != schema.dimension()) {
    throw std::invalid_argument("distance: sample/schema dimension mismatch");
  }
  double sq = 0;
  std::size_t cat_total = 0, cat_diff = 0;
  for (std::size_t i = 0; i < schema.features.size(); ++i) {
    const FeatureSpec& f = schema.features[i];
    if (f.type == FeatureType::continuous) {
      double r = f.range();
      double d;
      if (r > 0) {
        d = (num(cf.values[i]) - num(factual.values[i])) / r;
      } else {
        d = num(cf.values[i]) == num(factual.values[i]) ? 0.0 : 1.0;
      }
      sq += d * d;
    } else {
      ++cat_total;
      cat_diff += cat(cf.values[i]) != cat(factual.values[i]) ? 1 : 0;
    }
  }
  double hamming = cat_total > 0 ? static_cast<double>(cat_diff) / static_cast<double>(cat_total) : 0.0;
  return std::sqrt(sq) + hamming;
}

inline std::size_t changed_feature_count(const Sample& factual, const Sample& cf) {
  if (factual.values.size() != cf.values.size()) {
    throw std::invalid_argument("changed_feature_count: dimension mismatch");
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < factual.values.size(); ++i) {
    n += factual.values[i] == cf.values[i] ? 0 : 1;
  }
  return n;
}

// Mean number of changed features per CF, over every returned CF — invalid
// ones included.
inline double sparsity(const CFBatch& batch, const FeatureSchema& schema) {
  if (batch.empty()) throw EmptyBatch();
  (void)schema;
  std::size_t total = 0;
  for (const auto& r : batch) total += changed_feature_count(r.factual, r.counterfactual);
  return static_cast<double>(total) / static_cast<double>(batch.size());
}

inline bool in_training_ranges(const Sample& s, const FeatureSchema& schema) {
  for (std::size_t i = 0; i < schema.features.size(); ++i) {
    const FeatureSpec& f = schema.features[i];
    if (!f.fitted()) throw UnfittedSchema(f.name);
    if (f.type == FeatureType::continuous) {
      double v = num(s.values.at(i));
      if (!(v >= *f.observed_min && v <= *f.observed_max)) return false;
    } else {
      if (!f.code_allowed(cat(s.values.at(i)))) return false;
    }
  }
  return true;
}

// Percentage (0-100) of CFs whose every value lies inside the training
// ranges / allowed category sets.
inline double plausibility(const CFBatch& batch, const FeatureSchema& schema) {
  if (batch.empty()) throw EmptyBatch();
  std::size_t good = 0;
  for (const auto& r : batch) good += in_training_ranges(r.counterfactual, schema) ? 1 : 0;
  return 100.0 * static_cast<double>(good) / static_cast<double>(batch.size());
}

struct DiversityProfile {
  std::vector<std::string> feature;
  std::vector<double> change_frequency;
};

inline DiversityProfile diversity_profile(const CFBatch& batch, const FeatureSchema& schema) {
  if (batch.empty()) throw EmptyBatch();
  DiversityProfile p;
  p.feature.reserve(schema.dimension());
  p.change_frequency.assign(schema.dimension(), 0.0);
  for (const auto& f : schema.features) p.feature.push_back(f.name);
  for (const auto& r : batch) {
    for (std::size_t i = 0; i < schema.dimension(); ++i) {
      if (!(r.factual.values.at(i) == r.counterfactual.values.at(i))) p.change_frequency[i] += 1.0;
    }
  }
  for (double& f : p.change_frequency) f /= static_cast<double>(batch.size());
  return p;
}

struct ClassMetrics {
  std::size_t n_cf = 0;
  double validity = 0, mean_distance = 0, mean_sparsity = 0, plausibility = 0;
};

// Per-desired-class metric block (class 0 and class 1 rows of the report).
struct CFBatchReport {
  std::string generator_id;
  std::array<ClassMetrics, 2> per_class;

  json to_json() const {
    json j;
    j["generator"] = generator_id;
    for (int c = 0; c < 2; ++c) {
      json m;
      m["n_cf"] = per_class[static_cast<std::size_t>(c)].n_cf;
      m["validity"] = per_class[static_cast<std::size_t>(c)].validity;
      m["mean_distance"] = per_class[static_cast<std::size_t>(c)].mean_distance;
      m["mean_sparsity"] = per_class[static_cast<std::size_t>(c)].mean_sparsity;
      m["plausibility"] = per_class[static_cast<std::size_t>(c)].plausibility;
      j["class_" + std::to_string(c)] = std::move(m);
    }
    return j;
  }
};

inline CFBatchReport batch_report(const CFBatch& batch, const Classifier& model,
                                  const FeatureSchema& schema, const std::string& generator_id) {
  if (batch.empty()) throw EmptyBatch();
  CFBatchReport report;
  report.generator_id = generator_id;
  for (int c = 0; c < 2; ++c) {
    CFBatch group;
    for (const auto& r : batch) {
      if (r.desired_label == c) group.push_back(r);
    }
    ClassMetrics& m = report.per_class[static_cast<std::size_t>(c)];
    m.n_cf = group.size();
    if (group.empty()) continue;
    m.validity = validity(group, model);
    double dist = 0;
    for (const auto& r : group) dist += distance(r.factual, r.counterfactual, schema);
    m.mean_distance = dist / static_cast<double>(group.size());
    m.mean_sparsity = sparsity(group, schema);
    m.plausibility = plausibility(group, schema);
  }
  return report;
}

// Table layout: one row per generator, class-0 metric block then class-1.
inline void write_report_csv(const std::vector<CFBatchReport>& reports,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "generator,validity_c0,distance_c0,sparsity_c0,plausibility_c0,"
         "validity_c1,distance_c1,sparsity_c1,plausibility_c1,n_c0,n_c1\n";
  for (const auto& r : reports) {
    out << r.generator_id;
    for (int c = 0; c < 2; ++c) {
      const auto& m = r.per_class[static_cast<std::size_t>(c)];
      out << ',' << format_double(m.validity) << ',' << format_double(m.mean_distance) << ','
          << format_double(m.mean_sparsity) << ',' << format_double(m.plausibility);
    }
    out << ',' << r.per_class[0].n_cf << ',' << r.per_class[1].n_cf << '\n';
  }
}

inline void write_report_json(const std::vector<CFBatchReport>& reports,
                              const std::filesystem::path& path) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

inline void write_diversity_csv(const std::vector<std::pair<std::string, DiversityProfile>>& rows,
                                const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "feature,change_frequency,generator\n";
  for (const auto& [generator, profile] : rows) {
    for (std::size_t i = 0; i < profile.feature.size(); ++i) {
      out << profile.feature[i] << ',' << format_double(profile.change_frequency[i]) << ','
          << generator << '\n';
    }
  }
}

}  // namespace cfforge
