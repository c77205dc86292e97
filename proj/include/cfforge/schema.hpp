#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace cfforge {

using json = nlohmann::json;

enum class FeatureType { continuous, categorical };
enum class DatasetRole { train, test, augmented };

// A cell is either a continuous reading or an interned category code.
// Codes index into the owning FeatureSpec's category table.
using Value = std::variant<double, int>;

inline bool is_continuous_value(const Value& v) { return v.index() == 0; }
inline double num(const Value& v) { return std::get<double>(v); }
inline int cat(const Value& v) { return std::get<int>(v); }

struct EmptyDataset : std::runtime_error {
  EmptyDataset() : std::runtime_error("dataset is empty") {}
};

struct NoFiniteObservations : std::runtime_error {
  explicit NoFiniteObservations(const std::string& feature)
      : std::runtime_error("feature '" + feature + "' has no finite observations") {}
};

struct ParseError : std::runtime_error {
  std::size_t line;
  ParseError(std::size_t line_, const std::string& what_)
      : std::runtime_error("line " + std::to_string(line_) + ": " + what_), line(line_) {}
};

struct SchemaMismatch : std::runtime_error {
  explicit SchemaMismatch(const std::string& what_) : std::runtime_error(what_) {}
};

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf.data(), ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

struct FeatureSpec {
  std::string name;
  FeatureType type = FeatureType::continuous;
  bool is_mutable = true;

  // continuous
  std::string unit;
  std::optional<double> observed_min;
  std::optional<double> observed_max;

  // categorical: `categories` is the interning table and can grow past the
  // allowed set when rogue values are read; `allowed_codes` is the declared
  // or training-fitted subset used for validation, one-hot layout and
  // plausibility.
  std::vector<std::string> categories;
  std::vector<int> allowed_codes;

  static FeatureSpec make_continuous(std::string name, std::string unit, bool is_mutable) {
    FeatureSpec s;
    s.name = std::move(name);
    s.type = FeatureType::continuous;
    s.unit = std::move(unit);
    s.is_mutable = is_mutable;
    return s;
  }

  static FeatureSpec make_categorical(std::string name, std::vector<std::string> values,
                                      bool is_mutable) {
    if (values.empty()) throw std::invalid_argument("categorical feature needs values");
    FeatureSpec s;
    s.name = std::move(name);
    s.type = FeatureType::categorical;
    s.is_mutable = is_mutable;
    for (const auto& v : values) {
      if (std::find(s.categories.begin(), s.categories.end(), v) != s.categories.end()) {
        throw std::invalid_argument("duplicate category '" + v + "'");
      }
      s.categories.push_back(v);
      s.allowed_codes.push_back(static_cast<int>(s.categories.size()) - 1);
    }
    return s;
  }

  bool fitted() const {
    return type == FeatureType::continuous ? observed_min.has_value() && observed_max.has_value()
                                           : !allowed_codes.empty();
  }

  double range() const {
    if (!observed_min || !observed_max) throw std::runtime_error("ranges not fitted: " + name);
    return *observed_max - *observed_min;
  }

  int intern(std::string_view category) {
    for (std::size_t i = 0; i < categories.size(); ++i) {
      if (categories[i] == category) return static_cast<int>(i);
    }
    categories.emplace_back(category);
    return static_cast<int>(categories.size()) - 1;
  }

  std::optional<int> code_of(std::string_view category) const {
    for (std::size_t i = 0; i < categories.size(); ++i) {
      if (categories[i] == category) return static_cast<int>(i);
    }
    return std::nullopt;
  }

  bool code_allowed(int code) const {
    return std::find(allowed_codes.begin(), allowed_codes.end(), code) != allowed_codes.end();
  }

  std::vector<std::string> allowed_values() const {
    std::vector<std::string> out;
    out.reserve(allowed_codes.size());
    for (int c : allowed_codes) out.push_back(categories.at(static_cast<std::size_t>(c)));
    return out;
  }

  bool operator==(const FeatureSpec& o) const {
    return name == o.name && type == o.type && is_mutable == o.is_mutable && unit == o.unit &&
           observed_min == o.observed_min && observed_max == o.observed_max &&
           allowed_values() == o.allowed_values();
  }
};

struct FeatureSchema {
  std::vector<FeatureSpec> features;

  std::size_t dimension() const { return features.size(); }

  int index_of(std::string_view name) const {
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }

  std::size_t mutable_count() const {
    std::size_t n = 0;
    for (const auto& f : features) n += f.is_mutable ? 1 : 0;
    return n;
  }

  void check_names_unique() const {
    std::set<std::string> seen;
    for (const auto& f : features) {
      if (!seen.insert(f.name).second) {
        throw std::invalid_argument("duplicate feature name '" + f.name + "'");
      }
    }
  }

  bool operator==(const FeatureSchema& o) const { return features == o.features; }
};

struct Sample {
  std::string patient_id;
  int window_index = 0;
  std::vector<Value> values;
  int label = 0;

  bool operator==(const Sample& o) const {
    return patient_id == o.patient_id && window_index == o.window_index && values == o.values &&
           label == o.label;
  }
};

struct Dataset {
  FeatureSchema schema;
  std::vector<Sample> samples;
  DatasetRole role = DatasetRole::train;

  std::size_t class_count(int label) const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.label == label ? 1 : 0;
    return n;
  }

  bool operator==(const Dataset& o) const {
    return schema == o.schema && samples == o.samples && role == o.role;
  }
};

struct ConformanceReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline ConformanceReport validate_sample(const Sample& sample, const FeatureSchema& schema) {
  ConformanceReport report;
  if (sample.values.size() != schema.dimension()) {
    report.violations.push_back("length mismatch: " + std::to_string(sample.values.size()) +
                                " values against d=" + std::to_string(schema.dimension()));
    return report;
  }
  for (std::size_t i = 0; i < schema.features.size(); ++i) {
    const FeatureSpec& spec = schema.features[i];
    const Value& v = sample.values[i];
    if (spec.type == FeatureType::continuous) {
      if (!is_continuous_value(v)) {
        report.violations.push_back("kind mismatch for feature '" + spec.name + "'");
      } else if (!std::isfinite(num(v))) {
        report.violations.push_back("non-finite value for feature '" + spec.name + "'");
      }
    } else {
      if (is_continuous_value(v)) {
        report.violations.push_back("kind mismatch for feature '" + spec.name + "'");
      } else {
        int code = cat(v);
        if (code < 0 || code >= static_cast<int>(spec.categories.size())) {
          report.violations.push_back("invalid category code for feature '" + spec.name + "'");
        } else if (!spec.code_allowed(code)) {
          report.violations.push_back("unknown category '" +
                                      spec.categories[static_cast<std::size_t>(code)] +
                                      "' for feature '" + spec.name + "'");
        }
      }
    }
  }
  return report;
}

// Training extrema / observed category sets. Non-finite values are skipped;
// a continuous feature with nothing finite is an error because plausibility
// would be undefined for it.
inline FeatureSchema fit_ranges(const Dataset& train) {
  if (train.role != DatasetRole::train) {
    throw std::invalid_argument("fit_ranges expects a train-role dataset");
  }
  if (train.samples.empty()) throw EmptyDataset();
  FeatureSchema fitted = train.schema;
  for (std::size_t i = 0; i < fitted.features.size(); ++i) {
    FeatureSpec& spec = fitted.features[i];
    if (spec.type == FeatureType::continuous) {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (const auto& s : train.samples) {
        double v = num(s.values.at(i));
        if (!std::isfinite(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        any = true;
      }
      if (!any) throw NoFiniteObservations(spec.name);
      spec.observed_min = lo;
      spec.observed_max = hi;
    } else {
      std::set<int> seen;
      for (const auto& s : train.samples) seen.insert(cat(s.values.at(i)));
      spec.allowed_codes.assign(seen.begin(), seen.end());
    }
  }
  return fitted;
}

inline json schema_to_json(const FeatureSchema& schema) {
  json arr = json::array();
  for (const auto& f : schema.features) {
    json o;
    o["name"] = f.name;
    o["kind"] = f.type == FeatureType::continuous ? "continuous" : "categorical";
    if (f.type == FeatureType::continuous) {
      if (!f.unit.empty()) o["unit"] = f.unit;
      if (f.observed_min) o["observed_min"] = *f.observed_min;
      if (f.observed_max) o["observed_max"] = *f.observed_max;
    } else {
      o["allowed_values"] = f.allowed_values();
    }
    o["mutable"] = f.is_mutable;
    arr.push_back(std::move(o));
  }
  return arr;
}

inline FeatureSchema schema_from_json(const json& arr) {
  if (!arr.is_array()) throw SchemaMismatch("schema json must be an array");
  FeatureSchema schema;
  for (const auto& o : arr) {
    FeatureSpec f;
    f.name = o.at("name").get<std::string>();
    std::string kind = o.at("kind").get<std::string>();
    f.is_mutable = o.at("mutable").get<bool>();
    if (kind == "continuous") {
      f.type = FeatureType::continuous;
      if (o.contains("unit")) f.unit = o["unit"].get<std::string>();
      if (o.contains("observed_min")) f.observed_min = o["observed_min"].get<double>();
      if (o.contains("observed_max")) f.observed_max = o["observed_max"].get<double>();
      if (f.observed_min && f.observed_max && *f.observed_min > *f.observed_max) {
        throw SchemaMismatch("observed_min > observed_max for '" + f.name + "'");
      }
    } else if (kind == "categorical") {
      f.type = FeatureType::categorical;
      for (const auto& v : o.at("allowed_values")) {
        f.intern(v.get<std::string>());
        f.allowed_codes.push_back(static_cast<int>(f.categories.size()) - 1);
      }
      if (f.allowed_codes.empty()) {
        throw SchemaMismatch("categorical feature '" + f.name + "' has no allowed_values");
      }
    } else {
      throw SchemaMismatch("unknown kind '" + kind + "'");
    }
    schema.features.push_back(std::move(f));
  }
  schema.check_names_unique();
  return schema;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline void check_plain_cell(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) {
    throw std::invalid_argument("cell contains CSV metacharacters: '" + s + "'");
  }
}
}  // namespace detail

inline std::string role_name(DatasetRole role) {
  switch (role) {
    case DatasetRole::train: return "train";
    case DatasetRole::test: return "test";
    default: return "augmented";
  }
}

inline DatasetRole role_from_name(const std::string& s) {
  if (s == "train") return DatasetRole::train;
  if (s == "test") return DatasetRole::test;
  if (s == "augmented") return DatasetRole::augmented;
  throw std::invalid_argument("unknown dataset role '" + s + "'");
}

// dataset.csv: header `patient_id,window_index,<features in schema order>,label`.
// The schema sidecar is JSON; the dataset role is stored there as well so the
// round trip is lossless.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& csv_path,
                          const std::filesystem::path& schema_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv << "patient_id,window_index";
  for (const auto& f : ds.schema.features) {
    detail::check_plain_cell(f.name);
    csv << ',' << f.name;
  }
  csv << ",label\n";
  for (const auto& s : ds.samples) {
    detail::check_plain_cell(s.patient_id);
    csv << s.patient_id << ',' << s.window_index;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      csv << ',';
      if (ds.schema.features[i].type == FeatureType::continuous) {
        csv << format_double(num(s.values[i]));
      } else {
        const auto& cell =
            ds.schema.features[i].categories.at(static_cast<std::size_t>(cat(s.values[i])));
        detail::check_plain_cell(cell);
        csv << cell;
      }
    }
    csv << ',' << s.label << '\n';
  }
  std::ofstream sj(schema_path);
  if (!sj) throw std::runtime_error("cannot write " + schema_path.string());
  json doc;
  doc["features"] = schema_to_json(ds.schema);
  doc["role"] = role_name(ds.role);
  sj << doc.dump(2) << '\n';
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& csv_path) {
  write_dataset(ds, csv_path, csv_path.parent_path() / "schema.json");
}

inline Dataset read_dataset(const std::filesystem::path& csv_path,
                            const std::filesystem::path& schema_path) {
  std::ifstream sj(schema_path);
  if (!sj) throw std::runtime_error("cannot read " + schema_path.string());
  json doc = json::parse(sj);
  Dataset ds;
  if (doc.is_array()) {  // bare schema array, no role wrapper
    ds.schema = schema_from_json(doc);
  } else {
    ds.schema = schema_from_json(doc.at("features"));
    if (doc.contains("role")) ds.role = role_from_name(doc["role"].get<std::string>());
  }

  std::ifstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot read " + csv_path.string());
  std::string line;
  if (!std::getline(csv, line)) throw ParseError(1, "missing header");
  auto header = detail::split_csv_line(line);
  const std::size_t d = ds.schema.dimension();
  if (header.size() != d + 3 || header.front() != "patient_id" || header[1] != "window_index" ||
      header.back() != "label") {
    throw SchemaMismatch("header does not match patient_id,window_index,<features>,label");
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (header[i + 2] != ds.schema.features[i].name) {
      throw SchemaMismatch("column '" + header[i + 2] + "' does not match schema feature '" +
                           ds.schema.features[i].name + "'");
    }
  }

  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != d + 3) {
      throw ParseError(lineno, "expected " + std::to_string(d + 3) + " fields, got " +
                                   std::to_string(fields.size()));
    }
    Sample s;
    s.patient_id = fields[0];
    double widx;
    if (!parse_double(fields[1], widx) || widx < 0 || widx != std::floor(widx)) {
      throw ParseError(lineno, "bad window_index '" + fields[1] + "'");
    }
    s.window_index = static_cast<int>(widx);
    s.values.reserve(d);
    for (std::size_t i = 0; i < d; ++i) {
      FeatureSpec& spec = ds.schema.features[i];
      const std::string& cell = fields[i + 2];
      if (spec.type == FeatureType::continuous) {
        double v;
        if (!parse_double(cell, v)) {
          throw ParseError(lineno, "non-numeric value '" + cell + "' for feature '" + spec.name +
                                       "'");
        }
        s.values.emplace_back(v);
      } else {
        s.values.emplace_back(spec.intern(cell));
      }
    }
    const std::string& lab = fields.back();
    if (lab != "0" && lab != "1") throw ParseError(lineno, "bad label '" + lab + "'");
    s.label = lab == "1" ? 1 : 0;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& csv_path) {
  auto sidecar = csv_path.parent_path() / "schema.json";
  return read_dataset(csv_path, sidecar);
}

// FNV-1a over the canonical CSV serialization; used to assert that the test
// split stays fixed across harness stages.
inline std::uint64_t dataset_fingerprint(const Dataset& ds) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0x1f;
    h *= 1099511628211ull;
  };
  for (const auto& f : ds.schema.features) mix(f.name);
  for (const auto& s : ds.samples) {
    mix(s.patient_id);
    mix(std::to_string(s.window_index));
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (ds.schema.features[i].type == FeatureType::continuous) {
        mix(format_double(num(s.values[i])));
      } else {
        mix(ds.schema.features[i].categories.at(static_cast<std::size_t>(cat(s.values[i]))));
      }
    }
    mix(std::to_string(s.label));
  }
  return h;
}

}  // namespace cfforge
