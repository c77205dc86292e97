#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfforge/featurize.hpp"
#include "cfforge/generators.hpp"
#include "cfforge/llmclient.hpp"
#include "cfforge/model.hpp"

namespace cfforge {

// Everything the CLI reads from a key=value config file, with the same
// defaults the library uses. Sections: [window], [model], [generators],
// [endpoint], [harness].
struct RunConfig {
  WindowConfig window;
  Hyperparams model;

  int budget = 2100;
  int llm_attempts = 3;
  int diverse_k = 4;
  PromptMode prompt_mode = PromptMode::zero_shot;
  int few_shot_k = 3;

  EndpointConfig endpoint;

  double reduction_fraction = 0.5;
  std::vector<double> sweep_fractions = {0.25, 0.5, 0.75, 1.0};
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double config_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  if (!parse_double(value, out)) {
    throw std::invalid_argument("config: " + key + " wants a number, got '" + value + "'");
  }
  return out;
}

inline int config_int(const std::string& key, const std::string& value) {
  double d = config_double(key, value);
  int i = static_cast<int>(d);
  if (static_cast<double>(i) != d) {
    throw std::invalid_argument("config: " + key + " wants an integer, got '" + value + "'");
  }
  return i;
}

inline bool config_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: " + key + " wants true/false, got '" + value + "'");
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : value) {
    if (ch == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

inline std::vector<double> config_doubles(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& p : split_list(value)) out.push_back(config_double(key, p));
  return out;
}

}  // namespace detail

inline PromptMode prompt_mode_from_name(const std::string& s) {
  if (s == "zero") return PromptMode::zero_shot;
  if (s == "few") return PromptMode::few_shot;
  throw std::invalid_argument("unknown prompt mode '" + s + "' (expected zero or few)");
}

// Strict INI-style parser: unknown sections or keys are errors, values are
// validated as they are assigned. '#' and ';' start comment lines.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unterminated section header");
      }
      section = detail::trim(t.substr(1, t.size() - 2));
      if (section != "window" && section != "model" && section != "generators" &&
          section != "endpoint" && section != "harness") {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unknown section [" + section + "]");
      }
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value, got '" + t + "'");
    }
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    std::string where = section + "." + key;

    if (section == "window") {
      if (key == "window_hours") {
        cfg.window.window_length_s =
            static_cast<std::int64_t>(std::llround(detail::config_double(where, value) * 3600.0));
      } else if (key == "overlap") {
        cfg.window.overlap_fraction = detail::config_double(where, value);
      } else if (key == "min_cgm_readings") {
        cfg.window.min_cgm_readings = detail::config_int(where, value);
      } else if (key == "hyper_threshold") {
        cfg.window.hyper_threshold = detail::config_double(where, value);
      } else if (key == "tir_low") {
        cfg.window.tir_low = detail::config_double(where, value);
      } else if (key == "tir_high") {
        cfg.window.tir_high = detail::config_double(where, value);
      } else if (key == "stress_threshold") {
        cfg.window.stress_high_threshold = detail::config_double(where, value);
      } else {
        throw std::invalid_argument("config: unknown key " + where);
      }
    } else if (section == "model") {
      if (key == "learning_rate") {
        cfg.model.learning_rate = detail::config_double(where, value);
      } else if (key == "epochs") {
        cfg.model.epochs = detail::config_int(where, value);
      } else if (key == "batch_size") {
        cfg.model.batch_size = detail::config_int(where, value);
      } else if (key == "hidden") {
        cfg.model.hidden.clear();
        for (double d : detail::config_doubles(where, value)) {
          cfg.model.hidden.push_back(static_cast<int>(d));
        }
      } else {
        throw std::invalid_argument("config: unknown key " + where);
      }
    } else if (section == "generators") {
      if (key == "budget") {
        cfg.budget = detail::config_int(where, value);
      } else if (key == "llm_attempts") {
        cfg.llm_attempts = detail::config_int(where, value);
      } else if (key == "k") {
        cfg.diverse_k = detail::config_int(where, value);
      } else if (key == "prompt") {
        cfg.prompt_mode = prompt_mode_from_name(value);
      } else if (key == "few_k") {
        cfg.few_shot_k = detail::config_int(where, value);
      } else {
        throw std::invalid_argument("config: unknown key " + where);
      }
    } else if (section == "endpoint") {
      if (key == "base_url") {
        cfg.endpoint.base_url = value;
      } else if (key == "model") {
        cfg.endpoint.model_name = value;
      } else if (key == "temperature") {
        cfg.endpoint.temperature = detail::config_double(where, value);
      } else if (key == "max_retries") {
        cfg.endpoint.max_retries = detail::config_int(where, value);
      } else if (key == "timeout_seconds") {
        cfg.endpoint.timeout_seconds = detail::config_int(where, value);
      } else if (key == "cache") {
        cfg.endpoint.cache_path = value;
      } else if (key == "offline") {
        cfg.endpoint.offline = detail::config_bool(where, value);
      } else if (key == "requests_per_minute") {
        cfg.endpoint.requests_per_minute = detail::config_double(where, value);
      } else if (key == "backoff_base_seconds") {
        cfg.endpoint.backoff_base_seconds = detail::config_double(where, value);
      } else if (key == "api_key_env") {
        cfg.endpoint.api_key_env = value;
      } else {
        throw std::invalid_argument("config: unknown key " + where);
      }
    } else if (section == "harness") {
      if (key == "reduction_fraction") {
        cfg.reduction_fraction = detail::config_double(where, value);
      } else if (key == "sweep_fractions") {
        cfg.sweep_fractions = detail::config_doubles(where, value);
      } else {
        throw std::invalid_argument("config: unknown key " + where);
      }
    } else {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": key '" + key + "' appears before any [section]");
    }
  }
  return cfg;
}

inline RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace cfforge
