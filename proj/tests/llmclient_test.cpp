#include "cfforge/llmclient.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "test_util.hpp"

using namespace cfforge;

namespace {

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

}  // namespace

TEST(LlmClient, WireFormatAndBearerAuth) {
  testutil::TempDir tmp;
  StubServer server;
  json seen_body;
  std::string seen_auth;
  server.handler = [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = json::parse(req.body);
    auto it = req.headers.find("Authorization");
    seen_auth = it == req.headers.end() ? "" : it->second;
    ok_response(res, "pong");
  };
  setenv("CFFORGE_API_KEY", "sk-test", 1);
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));
  EXPECT_EQ(client.complete("ping"), "pong");
  unsetenv("CFFORGE_API_KEY");
  EXPECT_EQ(seen_auth, "Bearer sk-test");
  EXPECT_EQ(seen_body["model"], "m1");
  EXPECT_DOUBLE_EQ(seen_body["temperature"].get<double>(), 0.2);
  ASSERT_EQ(seen_body["messages"].size(), 1u);
  EXPECT_EQ(seen_body["messages"][0]["role"], "user");
  EXPECT_EQ(seen_body["messages"][0]["content"], "ping");
  EXPECT_EQ(client.network_requests(), 1u);
}

TEST(LlmClient, NoAuthHeaderWithoutKey) {
  testutil::TempDir tmp;
  StubServer server;
  bool had_auth = true;
  server.handler = [&](const httplib::Request& req, httplib::Response& res) {
    had_auth = req.headers.count("Authorization") > 0;
    ok_response(res, "ok");
  };
  unsetenv("CFFORGE_API_KEY");
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));
  client.complete("x");
  EXPECT_FALSE(had_auth);
}

TEST(LlmClient, SecondIdenticalCallIsServedFromCache) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) { ok_response(res, "answer"); };
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));
  EXPECT_EQ(client.complete("q"), "answer");
  EXPECT_EQ(client.complete("q"), "answer");
  EXPECT_EQ(server.hits.load(), 1);
  EXPECT_EQ(client.cache_hits(), 1u);
  // a different prompt is a different request
  EXPECT_EQ(client.complete("q2"), "answer");
  EXPECT_EQ(server.hits.load(), 2);
}

TEST(LlmClient, WarmCacheReplaysOfflineByteIdentical) {
  testutil::TempDir tmp;
  auto cache = tmp.path / "cache.jsonl";
  std::string text = "line1\nline2 with \"quotes\" and \xF0\x9F\x8C\x8D";
  {
    StubServer server;
    server.handler = [&](const httplib::Request&, httplib::Response& res) { ok_response(res, text); };
    LlmClient warm(fast_config(server, cache));
    EXPECT_EQ(warm.complete("experiment prompt"), text);
  }
  EndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";  // nothing listens; must never be contacted
  cfg.model_name = "m1";
  cfg.cache_path = cache;
  cfg.offline = true;
  LlmClient replay(cfg);
  EXPECT_EQ(replay.complete("experiment prompt"), text);
  EXPECT_EQ(replay.network_requests(), 0u);
  EXPECT_THROW(replay.complete("never seen"), CacheMiss);
}

TEST(LlmClient, RetriesThroughTransient429) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    if (server.hits.load() <= 3) {
      res.status = 429;
      return;
    }
    ok_response(res, "finally");
  };
  auto cfg = fast_config(server, tmp.path / "cache.jsonl");
  cfg.max_retries = 3;
  LlmClient client(cfg);
  EXPECT_EQ(client.complete("p"), "finally");
  EXPECT_EQ(server.hits.load(), 4);
  // attempt_count lands in the cache entry
  std::ifstream in(tmp.path / "cache.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  json entry = json::parse(line);
  EXPECT_EQ(entry["attempt_count"].get<int>(), 4);
  EXPECT_EQ(entry["request_hash"].get<std::string>(), request_hash("m1", 0.2, "p"));
}

TEST(LlmClient, RateLimitedOnceRetriesExhaust) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) { res.status = 429; };
  auto cfg = fast_config(server, tmp.path / "cache.jsonl");
  cfg.max_retries = 2;
  LlmClient client(cfg);
  EXPECT_THROW(client.complete("p"), RateLimited);
  EXPECT_EQ(server.hits.load(), 3);
}

TEST(LlmClient, ServerErrorsRetryThenSurface) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) { res.status = 503; };
  auto cfg = fast_config(server, tmp.path / "cache.jsonl");
  cfg.max_retries = 1;
  LlmClient client(cfg);
  try {
    client.complete("p");
    FAIL() << "expected HttpError";
  } catch (const HttpError& e) {
    EXPECT_EQ(e.status, 503);
  }
  EXPECT_EQ(server.hits.load(), 2);
}

TEST(LlmClient, ClientErrorsAreNotRetried) {
  testutil::TempDir tmp;
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    res.status = 404;
    res.set_content("nope", "text/plain");
  };
  auto cfg = fast_config(server, tmp.path / "cache.jsonl");
  cfg.max_retries = 3;
  LlmClient client(cfg);
  try {
    client.complete("p");
    FAIL() << "expected HttpError";
  } catch (const HttpError& e) {
    EXPECT_EQ(e.status, 404);
  }
  EXPECT_EQ(server.hits.load(), 1);
}

TEST(LlmClient, MalformedSuccessBodyRaises) {
  testutil::TempDir tmp;
  StubServer server;
  int mode = 0;
  server.handler = [&](const httplib::Request&, httplib::Response& res) {
    if (mode == 0) res.set_content("this is not json", "text/plain");
    else res.set_content("{\"choices\":[]}", "application/json");
  };
  LlmClient client(fast_config(server, tmp.path / "cache.jsonl"));
  EXPECT_THROW(client.complete("a"), HttpError);
  mode = 1;
  EXPECT_THROW(client.complete("b"), HttpError);
}

TEST(LlmClient, ConnectionFailureBecomesTimeout) {
  testutil::TempDir tmp;
  EndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";  // closed port
  cfg.cache_path = tmp.path / "cache.jsonl";
  cfg.max_retries = 1;
  cfg.backoff_base_seconds = 0.002;
  cfg.timeout_seconds = 1;
  LlmClient client(cfg);
  EXPECT_THROW(client.complete("p"), Timeout);
}

TEST(LlmClient, ForgedHashCollisionIsNotAHit) {
  testutil::TempDir tmp;
  auto cache = tmp.path / "cache.jsonl";
  {
    std::ofstream out(cache);
    json forged;
    forged["request_hash"] = request_hash("m1", 0.2, "A");  // hash of A...
    forged["model"] = "m1";
    forged["temperature"] = 0.2;
    forged["prompt"] = "B";  // ...but body claims B
    forged["response_text"] = "evil";
    forged["timestamp"] = 0;
    forged["attempt_count"] = 1;
    out << forged.dump() << '\n';
    json good;
    good["request_hash"] = request_hash("m1", 0.2, "C");
    good["model"] = "m1";
    good["temperature"] = 0.2;
    good["prompt"] = "C";
    good["response_text"] = "cached";
    good["timestamp"] = 0;
    good["attempt_count"] = 1;
    out << good.dump() << '\n';
    out << "{truncated garbage line\n";
  }
  EndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.model_name = "m1";
  cfg.cache_path = cache;
  cfg.offline = true;
  LlmClient client(cfg);
  EXPECT_THROW(client.complete("A"), CacheMiss);  // full-text verification fails
  EXPECT_THROW(client.complete("B"), CacheMiss);  // hash of B matches nothing
  EXPECT_EQ(client.complete("C"), "cached");
  // model and temperature are part of the identity too
  EndpointConfig other = cfg;
  other.model_name = "m2";
  EXPECT_THROW(LlmClient(other).complete("C"), CacheMiss);
}

TEST(LlmClient, CacheFileStaysAppendOnly) {
  testutil::TempDir tmp;
  auto cache = tmp.path / "cache.jsonl";
  StubServer server;
  server.handler = [&](const httplib::Request&, httplib::Response& res) { ok_response(res, "r"); };
  {
    LlmClient client(fast_config(server, cache));
    client.complete("p1");
    client.complete("p2");
    client.complete("p1");
  }
  {
    LlmClient again(fast_config(server, cache));
    again.complete("p1");
    again.complete("p2");
  }
  std::ifstream in(cache);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 2);
  EXPECT_EQ(server.hits.load(), 2);
}

TEST(TokenBucket, DeterministicQueueingUnderFakeClock) {
  double t = 0.0;
  TokenBucket bucket(1.0, 2.0, [&t] { return t; });
  EXPECT_DOUBLE_EQ(bucket.reserve(), 0.0);  // burst token 1
  EXPECT_DOUBLE_EQ(bucket.reserve(), 0.0);  // burst token 2
  EXPECT_DOUBLE_EQ(bucket.reserve(), 1.0);  // queued at t=1
  EXPECT_DOUBLE_EQ(bucket.reserve(), 2.0);  // queued at t=2
  t = 2.0;
  EXPECT_DOUBLE_EQ(bucket.reserve(), 1.0);  // next free slot is t=3
  t = 10.0;
  EXPECT_DOUBLE_EQ(bucket.reserve(), 0.0);  // bucket refilled (capped at burst)
  EXPECT_DOUBLE_EQ(bucket.reserve(), 0.0);
  EXPECT_DOUBLE_EQ(bucket.reserve(), 1.0);
}

TEST(EndpointConfig, ValidationCatchesBadValues) {
  EndpointConfig cfg;
  cfg.max_retries = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = EndpointConfig{};
  cfg.temperature = -0.1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = EndpointConfig{};
  cfg.requests_per_minute = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
