#pragma once

#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "apo/errors.hpp"
#include "apo/log.hpp"
#include "apo/providers.hpp"
#include "apo/rng.hpp"

namespace apo {

// OpenAI-compatible JSON-over-HTTP configuration. The api key resolves from
// api_key_env when api_key itself is empty.
struct HttpEndpointConfig {
  std::string base_url = "http://localhost:8000";
  std::string model = "default";
  std::string api_key;
  std::string api_key_env = "APO_API_KEY";
  std::string api_style = "completions";  // "completions" | "chat"
  std::string completions_path = "/v1/completions";
  std::string chat_path = "/v1/chat/completions";
  std::string embeddings_path = "/v1/embeddings";
  int timeout_s = 120;
  int max_attempts = 5;
  int backoff_base_ms = 1000;
  double quota_backoff_factor = 4.0;  // 429s wait this much longer
  bool sleep_between_attempts = true;  // tests turn this off

  std::string resolved_key() const {
    if (!api_key.empty()) return api_key;
    if (!api_key_env.empty()) {
      if (const char* v = std::getenv(api_key_env.c_str())) return v;
    }
    return "";
  }
};

namespace detail {

// shared retry loop: 5 attempts, exponential backoff from 1s, jittered;
// connection failures and 5xx retry, 429 retries with a longer wait, other
// 4xx and unparsable bodies do not retry
class HttpRequester {
 public:
  explicit HttpRequester(const HttpEndpointConfig& config)
      : config_(config),
        client_(config.base_url),
        jitter_rng_(std::random_device{}()) {
    client_.set_connection_timeout(config.timeout_s, 0);
    client_.set_read_timeout(config.timeout_s, 0);
    client_.set_write_timeout(config.timeout_s, 0);
    const std::string key = config.resolved_key();
    if (!key.empty()) {
      client_.set_default_headers({{"Authorization", "Bearer " + key}});
    }
  }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) {
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      bool quota = false;
      try {
        return attempt_once(path, body);
      } catch (const QuotaError& e) {
        last_error = e.what();
        quota = true;
      } catch (const TransportError& e) {
        last_error = e.what();
      }
      if (attempt == config_.max_attempts) break;
      back_off(attempt, quota);
    }
    throw ExhaustedRetries("request to " + path + " failed after " +
                           std::to_string(config_.max_attempts) + " attempts; last: " +
                           last_error);
  }

 private:
  nlohmann::json attempt_once(const std::string& path, const nlohmann::json& body) {
    httplib::Result res = [&] {
      std::lock_guard<std::mutex> lock(mu_);
      return client_.Post(path, body.dump(), "application/json");
    }();
    if (!res) {
      throw TransportError("connection failure: " + httplib::to_string(res.error()));
    }
    if (res->status == 429) {
      throw QuotaError("quota/rate limit (429): " + res->body.substr(0, 200));
    }
    if (res->status >= 500) {
      throw TransportError("server error " + std::to_string(res->status) + ": " +
                           res->body.substr(0, 200));
    }
    if (res->status < 200 || res->status >= 300) {
      throw MalformedResponse("http " + std::to_string(res->status) + ": " +
                              res->body.substr(0, 200));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("response is not JSON: ") + e.what());
    }
  }

  void back_off(int attempt, bool quota) {
    double factor = 1.0;
    for (int i = 1; i < attempt; ++i) factor *= 2.0;
    if (quota) factor *= config_.quota_backoff_factor;
    double jitter = 0.5 + jitter_rng_.next_double();  // 0.5x .. 1.5x
    auto wait = std::chrono::milliseconds(
        static_cast<long long>(config_.backoff_base_ms * factor * jitter));
    log_info("retrying in " + std::to_string(wait.count()) + "ms");
    if (config_.sleep_between_attempts) std::this_thread::sleep_for(wait);
  }

  HttpEndpointConfig config_;
  httplib::Client client_;
  SplitMix64 jitter_rng_;
  std::mutex mu_;
};

}  // namespace detail

class HttpGenerationEndpoint : public GenerationEndpoint {
 public:
  explicit HttpGenerationEndpoint(HttpEndpointConfig config)
      : config_(std::move(config)), requester_(config_) {}

  std::string generate(const std::string& prompt_text, const DecodingParams& params) override {
    nlohmann::json body;
    body["model"] = config_.model;
    body["temperature"] = params.temperature;
    body["max_tokens"] = params.max_output_tokens;
    if (params.top_p) body["top_p"] = *params.top_p;
    if (params.top_k) body["top_k"] = *params.top_k;

    const bool chat = config_.api_style == "chat";
    if (chat) {
      body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt_text}}});
    } else {
      body["prompt"] = prompt_text;
    }
    nlohmann::json reply =
        requester_.post_json(chat ? config_.chat_path : config_.completions_path, body);

    try {
      if (chat) return reply.at("choices").at(0).at("message").at("content").get<std::string>();
      return reply.at("choices").at(0).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("unexpected completion shape: ") + e.what());
    }
  }

  std::string identity() const override { return config_.model + "@" + config_.base_url; }

 private:
  HttpEndpointConfig config_;
  detail::HttpRequester requester_;
};

class HttpEmbeddingEndpoint : public EmbeddingEndpoint {
 public:
  explicit HttpEmbeddingEndpoint(HttpEndpointConfig config)
      : config_(std::move(config)), requester_(config_) {}

  std::vector<double> embed(const std::string& text) override {
    nlohmann::json body;
    body["model"] = config_.model;
    body["input"] = text;
    nlohmann::json reply = requester_.post_json(config_.embeddings_path, body);

    std::vector<double> vec;
    try {
      for (const auto& x : reply.at("data").at(0).at("embedding")) {
        vec.push_back(x.get<double>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("unexpected embedding shape: ") + e.what());
    }
    std::lock_guard<std::mutex> lock(mu_);
    if (dim_ == 0) {
      dim_ = vec.size();
    } else if (dim_ != vec.size()) {
      throw MalformedResponse("embedding dimension drifted: " + std::to_string(vec.size()) +
                              " vs " + std::to_string(dim_));
    }
    return vec;
  }

  std::size_t dimension() const override {
    std::lock_guard<std::mutex> lock(mu_);
    return dim_;
  }

 private:
  HttpEndpointConfig config_;
  detail::HttpRequester requester_;
  mutable std::mutex mu_;
  std::size_t dim_ = 0;
};

}  // namespace apo
