// Eigen must come before httplib: resolv.h defines a _res macro that breaks
// Eigen's product kernels.
#include "oslo/synthesis.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

namespace oslo {

namespace {

std::atomic<std::uint64_t> g_network_calls{0};

std::string read_credential(const std::string& env) {
  if (env.empty()) return {};
  const char* v = std::getenv(env.c_str());
  if (v == nullptr || *v == '\0') {
    throw ConfigError(fmt::format("credential environment variable {} is not set", env));
  }
  return v;
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError(fmt::format("service url '{}' has no scheme", url));
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

std::vector<unsigned char> base64_decode(const std::string& in) {
  std::string s;
  s.reserve(in.size());
  for (char c : in) {
    if (c != '\n' && c != '\r' && c != ' ') s.push_back(c);
  }
  if (s.size() % 4 != 0) throw ServiceError("image payload is not valid base64");
  std::vector<unsigned char> out(s.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0) throw ServiceError("image payload is not valid base64");
  size_t pad = 0;
  if (!s.empty() && s.back() == '=') ++pad;
  if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

// POSTs a JSON body with rate limiting and retries on transport errors, 429
// and 5xx. Other statuses fail immediately.
nlohmann::json post_json(const HttpServiceConfig& cfg, const std::string& key, RateLimiter& limiter,
                         const nlohmann::json& body) {
  const SplitUrl url = split_url(cfg.url);
  httplib::Headers headers;
  if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
  auto backoff = cfg.retry.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= std::max(1, cfg.retry.max_attempts); ++attempt) {
    limiter.acquire();
    httplib::Client client(url.origin);
    client.set_connection_timeout(cfg.timeout_seconds, 0);
    client.set_read_timeout(cfg.timeout_seconds, 0);
    ++g_network_calls;
    auto res = client.Post(url.path, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw ServiceError(fmt::format("{} returned malformed JSON: {}", cfg.url, e.what()));
      }
    }
    if (res && res->status != 429 && res->status < 500) {
      throw ServiceError(fmt::format("{} answered HTTP {}: {}", cfg.url, res->status, res->body.substr(0, 200)));
    }
    last_error = res ? fmt::format("HTTP {}", res->status) : httplib::to_string(res.error());
    spdlog::warn("{} attempt {}/{} failed: {}", cfg.url, attempt, cfg.retry.max_attempts, last_error);
    if (attempt < cfg.retry.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::duration_cast<std::chrono::milliseconds>(backoff * cfg.retry.backoff_factor);
    }
  }
  throw ServiceError(fmt::format("{} failed after {} attempts: {}", cfg.url, cfg.retry.max_attempts, last_error));
}

}  // namespace

std::uint64_t network_call_count() { return g_network_calls.load(); }

RateLimiter::RateLimiter(double requests_per_second)
    : interval_(requests_per_second > 0.0
                    ? std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                          std::chrono::duration<double>(1.0 / requests_per_second))
                    : std::chrono::steady_clock::duration::zero()),
      next_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mutex_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + interval_;
  }
  std::this_thread::sleep_until(slot);
}

HttpLlmClient::HttpLlmClient(HttpServiceConfig config)
    : config_(std::move(config)), key_(read_credential(config_.credential_env)), limiter_(config_.requests_per_second) {
  split_url(config_.url);
}

std::string HttpLlmClient::complete(const std::string& prompt, std::uint64_t seed) {
  nlohmann::json body{{"model", config_.model},
                      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                      {"seed", seed}};
  const auto reply = post_json(config_, key_, limiter_, body);
  try {
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(fmt::format("{} reply lacks choices[0].message.content: {}", config_.url, e.what()));
  }
}

HttpDiffusionClient::HttpDiffusionClient(HttpServiceConfig config)
    : config_(std::move(config)), key_(read_credential(config_.credential_env)), limiter_(config_.requests_per_second) {
  split_url(config_.url);
}

Image HttpDiffusionClient::generate(const std::string& prompt, std::uint64_t seed) {
  nlohmann::json body{{"prompt", prompt},
                      {"seed", seed},
                      {"width", config_.image_size},
                      {"height", config_.image_size},
                      {"model", config_.model}};
  const auto reply = post_json(config_, key_, limiter_, body);
  std::string encoded;
  try {
    encoded = reply.at("images").at(0).get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(fmt::format("{} reply lacks images[0]: {}", config_.url, e.what()));
  }
  const auto bytes = base64_decode(encoded);
  return to_rgb(decode_image(bytes));
}

ReplayLlmClient::ReplayLlmClient(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open replay file '{}'", path.string()));
  try {
    const auto j = nlohmann::json::parse(in);
    id_ = j.value("generator_id", "replay");
    for (const auto& r : j.at("responses")) {
      responses_[r.at("prompt").get<std::string>()] = r.at("response").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

ReplayLlmClient::ReplayLlmClient(std::string generator_id, std::map<std::string, std::string> responses)
    : id_(std::move(generator_id)), responses_(std::move(responses)) {}

std::string ReplayLlmClient::complete(const std::string& prompt, std::uint64_t) {
  auto it = responses_.find(prompt);
  if (it == responses_.end()) throw ServiceError(fmt::format("no recorded response for prompt '{}'", prompt));
  return it->second;
}

ReplayImageClient::ReplayImageClient(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open replay index '{}'", path.string()));
  const auto base = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    id_ = j.value("generator_id", "replay");
    for (const auto& e : j.at("images")) {
      const std::int64_t seed = e.contains("seed") ? e.at("seed").get<std::int64_t>() : -1;
      entries_[{e.at("prompt").get<std::string>(), seed}] = base / e.at("path").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

Image ReplayImageClient::generate(const std::string& prompt, std::uint64_t seed) {
  auto it = entries_.find({prompt, static_cast<std::int64_t>(seed)});
  if (it == entries_.end()) it = entries_.find({prompt, -1});
  if (it == entries_.end()) throw ServiceError(fmt::format("no recorded image for '{}' seed {}", prompt, seed));
  return to_rgb(load_image(it->second));
}

std::string CachingLlmClient::complete(const std::string& prompt, std::uint64_t seed) {
  const auto key = std::make_pair(prompt, seed);
  {
    std::shared_lock lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  ++upstream_calls_;
  std::string reply = inner_->complete(prompt, seed);
  std::unique_lock lock(mutex_);
  return cache_.emplace(key, std::move(reply)).first->second;
}

Image CachingImageClient::generate(const std::string& prompt, std::uint64_t seed) {
  const auto key = std::make_pair(prompt, seed);
  {
    std::shared_lock lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  ++upstream_calls_;
  Image img = inner_->generate(prompt, seed);
  std::unique_lock lock(mutex_);
  return cache_.emplace(key, std::move(img)).first->second;
}

}  // namespace oslo
