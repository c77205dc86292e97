#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cfforge/schema.hpp"

namespace cfforge {

struct LlmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct Timeout : LlmError {
  using LlmError::LlmError;
};
struct HttpError : LlmError {
  int status;
  HttpError(int status_, const std::string& what_)
      : LlmError("HTTP " + std::to_string(status_) + ": " + what_), status(status_) {}
};
struct RateLimited : LlmError {
  using LlmError::LlmError;
};
struct CacheMiss : LlmError {
  using LlmError::LlmError;
};

struct EndpointConfig {
  std::string base_url = "http://localhost:8080";
  std::string model_name = "local-model";
  double temperature = 0.2;
  int max_retries = 3;
  int timeout_seconds = 60;
  std::filesystem::path cache_path = "llm_cache.jsonl";
  bool offline = false;
  double requests_per_minute = 600.0;
  double backoff_base_seconds = 1.0;  // 1s, 2s, 4s, ...
  std::string api_key_env = "CFFORGE_API_KEY";

  void validate() const {
    if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
    if (temperature < 0) throw std::invalid_argument("temperature must be >= 0");
    if (timeout_seconds <= 0) throw std::invalid_argument("timeout must be positive");
    if (requests_per_minute <= 0) throw std::invalid_argument("rate limit must be positive");
  }
};

inline std::string request_hash(const std::string& model, double temperature,
                                const std::string& prompt) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0x1f;
    h *= 1099511628211ull;
  };
  mix(model);
  mix(format_double(temperature));
  mix(prompt);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Continuous-refill token bucket. reserve() hands back the number of seconds
// the caller must sleep before its request may go out; the token is already
// booked, so concurrent callers queue up deterministically. The clock is
// injectable for tests.
class TokenBucket {
 public:
  TokenBucket(double rate_per_second, double burst,
              std::function<double()> now = default_clock)
      : rate_(rate_per_second), burst_(burst), now_(std::move(now)) {
    tokens_ = burst_;
    last_ = now_();
  }

  // (tokens_, last_) is the bucket state at time last_, which may sit in the
  // future when earlier callers have already booked tokens they are still
  // sleeping toward.
  double reserve() {
    std::lock_guard<std::mutex> lock(mu_);
    double t = now_();
    if (t > last_) {
      tokens_ = std::min(burst_, tokens_ + (t - last_) * rate_);
      last_ = t;
    }
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return last_ - t;
    }
    last_ += (1.0 - tokens_) / rate_;
    tokens_ = 0.0;
    return last_ - t;
  }

  static double default_clock() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }

 private:
  std::mutex mu_;
  double rate_, burst_, tokens_, last_;
  std::function<double()> now_;
};

struct CacheEntry {
  std::string request_hash;
  std::string model;
  double temperature = 0;
  std::string prompt;
  std::string response_text;
  std::int64_t timestamp = 0;
  int attempt_count = 0;
};

// Chat-completion transport with an append-only JSONL response cache. A hit
// requires both the hash and the full stored prompt/model/temperature to
// match, so collisions (or forged cache lines) can never impersonate a
// response. Offline mode never touches the network.
class LlmClient {
 public:
  explicit LlmClient(EndpointConfig config)
      : cfg_(std::move(config)),
        bucket_(cfg_.requests_per_minute / 60.0, std::max(1.0, cfg_.requests_per_minute / 60.0)) {
    cfg_.validate();
    load_cache();
  }

  std::string complete(const std::string& prompt) {
    const std::string h = request_hash(cfg_.model_name, cfg_.temperature, prompt);
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (const CacheEntry* e = find_locked(h, prompt)) {
        ++cache_hits_;
        return e->response_text;
      }
    }
    if (cfg_.offline) {
      throw CacheMiss("offline mode and no cache entry for this prompt");
    }

    std::exception_ptr last;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        double backoff = cfg_.backoff_base_seconds * std::pow(2.0, attempt - 1);
        std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      }
      double wait = bucket_.reserve();
      if (wait > 0) std::this_thread::sleep_for(std::chrono::duration<double>(wait));

      {
        std::lock_guard<std::mutex> lock(mu_);
        ++network_requests_;
      }
      httplib::Client cli(cfg_.base_url);
      cli.set_connection_timeout(cfg_.timeout_seconds, 0);
      cli.set_read_timeout(cfg_.timeout_seconds, 0);
      cli.set_write_timeout(cfg_.timeout_seconds, 0);
      httplib::Headers headers;
      if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
        headers.emplace("Authorization", std::string("Bearer ") + key);
      }
      json body;
      body["model"] = cfg_.model_name;
      body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
      body["temperature"] = cfg_.temperature;

      auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
      if (!res) {
        last = std::make_exception_ptr(
            Timeout("no response from " + cfg_.base_url + " (" + httplib::to_string(res.error()) + ")"));
        continue;
      }
      if (res->status == 200) {
        std::string text = extract_content(res->body);
        store(h, prompt, text, attempt + 1);
        return text;
      }
      if (res->status == 429) {
        last = std::make_exception_ptr(RateLimited("429 from endpoint"));
        continue;
      }
      if (res->status >= 500) {
        last = std::make_exception_ptr(HttpError(res->status, "server error"));
        continue;
      }
      throw HttpError(res->status, res->body.substr(0, 200));
    }
    std::rethrow_exception(last);
  }

  std::size_t network_requests() const {
    std::lock_guard<std::mutex> lock(mu_);
    return network_requests_;
  }
  std::size_t cache_hits() const {
    std::lock_guard<std::mutex> lock(mu_);
    return cache_hits_;
  }
  std::size_t cache_size() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::size_t n = 0;
    for (const auto& [_, v] : cache_) n += v.size();
    return n;
  }
  const EndpointConfig& config() const { return cfg_; }

 private:
  EndpointConfig cfg_;
  TokenBucket bucket_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<CacheEntry>> cache_;
  std::size_t network_requests_ = 0;
  std::size_t cache_hits_ = 0;

  const CacheEntry* find_locked(const std::string& h, const std::string& prompt) const {
    auto it = cache_.find(h);
    if (it == cache_.end()) return nullptr;
    for (const auto& e : it->second) {
      if (e.prompt == prompt && e.model == cfg_.model_name && e.temperature == cfg_.temperature) {
        return &e;
      }
    }
    return nullptr;
  }

  static std::string extract_content(const std::string& body) {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::exception&) {
      throw HttpError(200, "response body is not JSON");
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
      throw HttpError(200, "response has no choices");
    }
    const json& msg = j["choices"][0];
    if (!msg.contains("message") || !msg["message"].contains("content") ||
        !msg["message"]["content"].is_string()) {
      throw HttpError(200, "response has no message content");
    }
    return msg["message"]["content"].get<std::string>();
  }

  void load_cache() {
    std::ifstream in(cfg_.cache_path);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        json j = json::parse(line);
        CacheEntry e;
        e.request_hash = j.at("request_hash").get<std::string>();
        e.model = j.at("model").get<std::string>();
        e.temperature = j.at("temperature").get<double>();
        e.prompt = j.at("prompt").get<std::string>();
        e.response_text = j.at("response_text").get<std::string>();
        e.timestamp = j.value("timestamp", 0ll);
        e.attempt_count = j.value("attempt_count", 1);
        cache_[e.request_hash].push_back(std::move(e));
      } catch (const json::exception&) {
        // a truncated trailing line (crash mid-append) is not fatal
      }
    }
  }

  void store(const std::string& h, const std::string& prompt, const std::string& text,
             int attempts) {
    CacheEntry e;
    e.request_hash = h;
    e.model = cfg_.model_name;
    e.temperature = cfg_.temperature;
    e.prompt = prompt;
    e.response_text = text;
    e.timestamp = static_cast<std::int64_t>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    e.attempt_count = attempts;

    json j;
    j["request_hash"] = e.request_hash;
    j["model"] = e.model;
    j["temperature"] = e.temperature;
    j["prompt"] = e.prompt;
    j["response_text"] = e.response_text;
    j["timestamp"] = e.timestamp;
    j["attempt_count"] = e.attempt_count;

    std::lock_guard<std::mutex> lock(mu_);
    if (find_locked(h, prompt)) return;  // another caller beat us to it
    std::ofstream out(cfg_.cache_path, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + cfg_.cache_path.string());
    out << j.dump() << '\n';
    cache_[h].push_back(std::move(e));
  }
};

}  // namespace cfforge
