#pragma once

// Clients for OpenAI-compatible chat-completion and embedding endpoints.
// Needs httplib.h; define CPPHTTPLIB_OPENSSL_SUPPORT before including for
// https URLs.

#include <chrono>
#include <cstdlib>
#include <string>
#include <utility>
#include <vector>

// Eigen goes first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "llmkt/profiles.hpp"
#include "json.hpp"
#include "httplib.h"

namespace llmkt {

struct HttpEndpoint {
  std::string base_url;  // e.g. https://api.openai.com/v1
  std::string model;
  std::string api_key;
  std::chrono::seconds timeout{60};

  // Reads the key from the named environment variable; empty name means no
  // key.
  static std::string key_from_env(const std::string& var) {
    if (var.empty()) return {};
    const char* v = std::getenv(var.c_str());
    if (!v || !*v) throw ValidationError("environment variable " + var + " is not set");
    return v;
  }
};

namespace detail {

// Splits "scheme://host[:port]/prefix" into the origin and the path prefix.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("base_url needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

inline nlohmann::json post_json(const HttpEndpoint& ep, const std::string& route, const nlohmann::json& body) {
  const auto [origin, prefix] = split_url(ep.base_url);
  httplib::Client cli(origin);
  cli.set_connection_timeout(ep.timeout);
  cli.set_read_timeout(ep.timeout);
  cli.set_write_timeout(ep.timeout);
  httplib::Headers headers;
  if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);
  auto res = cli.Post(prefix + route, headers, body.dump(), "application/json");
  if (!res) throw ClientError("request to " + origin + prefix + route + " failed: " + httplib::to_string(res.error()), true);
  if (res->status == 429 || res->status >= 500) {
    throw ClientError("HTTP " + std::to_string(res->status) + " from " + route, true);
  }
  if (res->status != 200) throw ClientError("HTTP " + std::to_string(res->status) + " from " + route + ": " + res->body, false);
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw ClientError("malformed response from " + route + ": " + e.what(), false);
  }
}

}  // namespace detail

class HttpLlmClient final : public LlmClient {
 public:
  explicit HttpLlmClient(HttpEndpoint ep) : ep_(std::move(ep)) {}
  std::string id() const override { return "openai:" + ep_.model; }

  std::string complete(const std::string& prompt) const override {
    nlohmann::json body{{"model", ep_.model}, {"messages", {{{"role", "user"}, {"content", prompt}}}}};
    auto j = detail::post_json(ep_, "/chat/completions", body);
    try {
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw ClientError("chat response has no choices[0].message.content", false);
    }
  }

 private:
  HttpEndpoint ep_;
};

class HttpEmbeddingClient final : public EmbeddingClient {
 public:
  HttpEmbeddingClient(HttpEndpoint ep, std::size_t dim) : ep_(std::move(ep)), dim_(dim) {
    if (dim_ == 0) throw ValidationError("embedding dimension must be positive");
  }
  std::string id() const override { return "openai:" + ep_.model; }
  std::size_t dim() const override { return dim_; }

  std::vector<double> embed(const std::string& text) const override {
    auto j = detail::post_json(ep_, "/embeddings", {{"model", ep_.model}, {"input", text}});
    try {
      return j.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
      throw ClientError("embedding response has no data[0].embedding", false);
    }
  }

 private:
  HttpEndpoint ep_;
  std::size_t dim_;
};

}  // namespace llmkt
