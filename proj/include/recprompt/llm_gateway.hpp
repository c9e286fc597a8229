#pragma once

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "recprompt/errors.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

enum class RoleTag { recommender, optimizer, evaluator };

inline const char* role_tag_name(RoleTag t) {
    switch (t) {
        case RoleTag::recommender: return "recommender";
        case RoleTag::optimizer: return "optimizer";
        default: return "evaluator";
    }
}

enum class MessageRole { system, user, assistant };

inline const char* message_role_name(MessageRole r) {
    switch (r) {
        case MessageRole::system: return "system";
        case MessageRole::user: return "user";
        default: return "assistant";
    }
}

struct ChatMessage {
    MessageRole role = MessageRole::user;
    std::string content;
};

struct ChatRequest {
    RoleTag role_tag = RoleTag::recommender;
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
};

inline void validate_request(const ChatRequest& req) {
    if (req.messages.empty()) throw ValidationError("chat request has no messages");
    if (!std::isfinite(req.temperature) || req.temperature < 0)
        throw ValidationError("chat request temperature must be finite and >= 0");
    if (req.max_tokens <= 0) throw ValidationError("chat request max_tokens must be positive");
    if (req.model.empty()) throw ValidationError("chat request has no model");
}

enum class ResponseSource { live, mock, cache };

inline const char* response_source_name(ResponseSource s) {
    switch (s) {
        case ResponseSource::live: return "live";
        case ResponseSource::mock: return "mock";
        default: return "cache";
    }
}

struct ChatResponse {
    std::string content;
    long prompt_tokens = 0;
    long completion_tokens = 0;
    long latency_ms = 0;
    ResponseSource source = ResponseSource::mock;
};

/// Content-addressed key over the canonicalized request. The role tag is
/// excluded (the same logical call is shared across roles); model,
/// temperature, max_tokens, and message order are significant; trailing
/// whitespace in message contents is not.
inline std::string canonical_key(const ChatRequest& req) {
    validate_request(req);
    std::string canon;
    canon += "model=";
    canon += req.model;
    canon += '\x1e';
    char tbuf[40];
    std::snprintf(tbuf, sizeof(tbuf), "temp=%.17g", req.temperature);
    canon += tbuf;
    canon += '\x1e';
    canon += "max_tokens=" + std::to_string(req.max_tokens);
    canon += '\x1e';
    for (const auto& m : req.messages) {
        canon += message_role_name(m.role);
        canon += '\x1f';
        canon += rtrim(m.content);
        canon += '\x1e';
    }
    return hash_hex128(canon);
}

enum class Backend { live, mock, replay };

inline Backend backend_from_string(const std::string& s) {
    if (s == "live") return Backend::live;
    if (s == "mock") return Backend::mock;
    if (s == "replay") return Backend::replay;
    throw ConfigError("unknown backend '" + s + "' (expected live, mock, or replay)");
}

struct GatewayConfig {
    Backend backend = Backend::mock;
    std::string base_url = "https://api.openai.com";
    std::string api_key_env = "RECPROMPT_API_KEY";
    std::string cache_path;             // empty: in-memory cache only
    double rate_limit_per_min = 30.0;   // <= 0 disables rate limiting
    int max_inflight = 4;               // concurrent transport operations
    int max_attempts = 5;
    std::chrono::milliseconds backoff_base{1000};
    double backoff_factor = 2.0;
    std::chrono::milliseconds timeout{60000};
};

struct HttpReply {
    int status = 0; // 0 = transport failure
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;

    std::string header(const std::string& name) const {
        for (const auto& [k, v] : headers)
            if (to_lower(k) == to_lower(name)) return v;
        return {};
    }
};

/// Minimal HTTP surface the live backend needs; swapped out in tests.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpReply post_json(const std::string& base_url, const std::string& path,
                                const std::string& body,
                                const std::vector<std::pair<std::string, std::string>>& headers,
                                std::chrono::milliseconds timeout) = 0;
};

using MockFn = std::function<std::string(const ChatRequest&)>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

namespace detail {

struct CachedCall {
    std::string content;
    long prompt_tokens = 0;
    long completion_tokens = 0;
};

/// Append-only JSONL call cache with an in-memory index. Reads are lock-free
/// after load; writes are serialized and idempotent per key.
class CallCache {
public:
    explicit CallCache(std::string path) : path_(std::move(path)) {
        if (path_.empty()) return;
        std::ifstream in(path_);
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("key") || !j.contains("response")) continue;
            CachedCall c;
            c.content = j["response"].value("content", "");
            c.prompt_tokens = j["response"].value("prompt_tokens", 0L);
            c.completion_tokens = j["response"].value("completion_tokens", 0L);
            entries_[j["key"].get<std::string>()] = std::move(c);
        }
    }

    bool get(const std::string& key, CachedCall& out) const {
        std::lock_guard lock(mutex_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return false;
        out = it->second;
        return true;
    }

    /// Stores the entry unless the key is already present.
    void put(const std::string& key, const std::string& model, const CachedCall& call) {
        std::lock_guard lock(mutex_);
        if (!entries_.emplace(key, call).second) return;
        if (path_.empty()) return;
        nlohmann::json j{{"key", key},
                         {"model", model},
                         {"stored_at", iso8601_utc_now()},
                         {"response",
                          {{"content", call.content},
                           {"prompt_tokens", call.prompt_tokens},
                           {"completion_tokens", call.completion_tokens}}}};
        std::ofstream out(path_, std::ios::app);
        out << j.dump() << '\n';
    }

    size_t size() const {
        std::lock_guard lock(mutex_);
        return entries_.size();
    }

private:
    std::string path_;
    mutable std::mutex mutex_;
    std::unordered_map<std::string, CachedCall> entries_;
};

class TokenBucket {
public:
    TokenBucket(double per_min, Sleeper sleeper)
        : rate_per_sec_(per_min / 60.0), tokens_(per_min), capacity_(per_min),
          last_(std::chrono::steady_clock::now()), sleeper_(std::move(sleeper)) {}

    void acquire() {
        for (;;) {
            std::chrono::milliseconds wait{0};
            {
                std::lock_guard lock(mutex_);
                refill();
                if (tokens_ >= 1.0) {
                    tokens_ -= 1.0;
                    return;
                }
                double missing = 1.0 - tokens_;
                wait = std::chrono::milliseconds(
                    static_cast<long>(std::ceil(missing / rate_per_sec_ * 1000.0)));
            }
            sleeper_(wait);
        }
    }

private:
    void refill() {
        auto now = std::chrono::steady_clock::now();
        double elapsed = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        tokens_ = std::min(capacity_, tokens_ + elapsed * rate_per_sec_);
    }

    double rate_per_sec_;
    double tokens_;
    double capacity_;
    std::chrono::steady_clock::time_point last_;
    Sleeper sleeper_;
    std::mutex mutex_;
};

class InflightLimiter {
public:
    explicit InflightLimiter(int capacity) : capacity_(capacity < 1 ? 1 : capacity) {}

    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return in_use_ < capacity_; });
        ++in_use_;
    }

    void release() {
        {
            std::lock_guard lock(mutex_);
            --in_use_;
        }
        cv_.notify_one();
    }

private:
    int capacity_;
    int in_use_ = 0;
    std::mutex mutex_;
    std::condition_variable cv_;
};

struct InflightGuard {
    explicit InflightGuard(InflightLimiter& l) : limiter(l) { limiter.acquire(); }
    ~InflightGuard() { limiter.release(); }
    InflightLimiter& limiter;
};

inline long estimate_tokens(const std::string& text) {
    return static_cast<long>(text.size() / 4);
}

} // namespace detail

/// Uniform chat-completion access over three backends: live HTTP
/// (OpenAI-compatible), registered deterministic mock, and cache replay.
/// Successful live and mock calls are recorded in the call cache, so any
/// recorded run replays byte-identically later.
class LlmGateway {
public:
    explicit LlmGateway(GatewayConfig cfg, std::shared_ptr<Transport> transport = nullptr,
                        Sleeper sleeper = nullptr)
        : cfg_(std::move(cfg)),
          transport_(std::move(transport)),
          sleeper_(sleeper ? std::move(sleeper)
                           : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }),
          cache_(cfg_.cache_path),
          limiter_(cfg_.max_inflight),
          bucket_(cfg_.rate_limit_per_min > 0
                      ? std::make_unique<detail::TokenBucket>(cfg_.rate_limit_per_min, sleeper_)
                      : nullptr) {}

    void set_mock(MockFn fn) { mock_ = std::move(fn); }

    const GatewayConfig& config() const { return cfg_; }
    size_t cache_size() const { return cache_.size(); }

    ChatResponse complete(const ChatRequest& req) {
        validate_request(req);
        std::string key = canonical_key(req);
        switch (cfg_.backend) {
            case Backend::mock: return complete_mock(req, key);
            case Backend::replay: return complete_replay(key);
            default: return complete_live(req, key);
        }
    }

private:
    ChatResponse complete_mock(const ChatRequest& req, const std::string& key) {
        if (!mock_) throw ConfigError("mock backend has no registered mock function");
        auto t0 = std::chrono::steady_clock::now();
        std::string content = mock_(req);
        auto t1 = std::chrono::steady_clock::now();

        detail::CachedCall call;
        call.content = content;
        for (const auto& m : req.messages) call.prompt_tokens += detail::estimate_tokens(m.content);
        call.completion_tokens = detail::estimate_tokens(content);
        cache_.put(key, req.model, call);

        ChatResponse resp;
        resp.content = std::move(content);
        resp.prompt_tokens = call.prompt_tokens;
        resp.completion_tokens = call.completion_tokens;
        resp.latency_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
        resp.source = ResponseSource::mock;
        return resp;
    }

    ChatResponse complete_replay(const std::string& key) {
        detail::CachedCall call;
        if (!cache_.get(key, call)) throw CacheMissError(key);
        return from_cached(call);
    }

    ChatResponse complete_live(const ChatRequest& req, const std::string& key) {
        const char* api_key = std::getenv(cfg_.api_key_env.c_str());
        if (api_key == nullptr || *api_key == '\0')
            throw ConfigError("live backend requires credential in $" + cfg_.api_key_env);

        detail::CachedCall cached;
        if (cache_.get(key, cached)) return from_cached(cached);

        nlohmann::json body;
        body["model"] = req.model;
        body["temperature"] = req.temperature;
        body["max_tokens"] = req.max_tokens;
        auto& msgs = body["messages"] = nlohmann::json::array();
        for (const auto& m : req.messages)
            msgs.push_back({{"role", message_role_name(m.role)}, {"content", m.content}});
        std::string payload = body.dump();
        std::vector<std::pair<std::string, std::string>> headers{
            {"Authorization", std::string("Bearer ") + api_key}};

        HttpReply reply;
        std::string last_error;
        for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
            if (bucket_) bucket_->acquire();
            try {
                detail::InflightGuard guard(limiter_);
                auto t0 = std::chrono::steady_clock::now();
                reply = transport().post_json(cfg_.base_url, "/v1/chat/completions", payload,
                                              headers, cfg_.timeout);
                auto t1 = std::chrono::steady_clock::now();
                if (reply.status == 200) {
                    auto resp = parse_openai_response(reply.body);
                    resp.latency_ms =
                        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
                    detail::CachedCall call{resp.content, resp.prompt_tokens,
                                            resp.completion_tokens};
                    cache_.put(key, req.model, call);
                    return resp;
                }
                last_error = "HTTP " + std::to_string(reply.status);
            } catch (const GatewayError&) {
                throw;
            } catch (const std::exception& e) {
                reply = HttpReply{};
                last_error = e.what();
            }

            bool retryable = reply.status == 0 || reply.status == 429 || reply.status >= 500;
            if (!retryable)
                throw GatewayError("chat completion failed: " + last_error + " " +
                                   snippet(reply.body));
            if (attempt == cfg_.max_attempts) break;
            sleeper_(retry_delay(attempt, reply));
        }
        throw GatewayError("chat completion failed after " + std::to_string(cfg_.max_attempts) +
                           " attempts: " + last_error);
    }

    std::chrono::milliseconds retry_delay(int attempt, const HttpReply& reply) const {
        if (reply.status == 429) {
            std::string hint = reply.header("Retry-After");
            if (!hint.empty()) {
                char* end = nullptr;
                double secs = std::strtod(hint.c_str(), &end);
                if (end != hint.c_str() && secs >= 0)
                    return std::chrono::milliseconds(static_cast<long>(secs * 1000));
            }
        }
        double factor = std::pow(cfg_.backoff_factor, attempt - 1);
        return std::chrono::milliseconds(
            static_cast<long>(cfg_.backoff_base.count() * factor));
    }

    static ChatResponse parse_openai_response(const std::string& body) {
        auto j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.contains("choices") || j["choices"].empty())
            throw GatewayError("malformed chat completion response: " + snippet(body));
        ChatResponse resp;
        resp.content = j["choices"][0].at("message").value("content", "");
        if (j.contains("usage")) {
            resp.prompt_tokens = j["usage"].value("prompt_tokens", 0L);
            resp.completion_tokens = j["usage"].value("completion_tokens", 0L);
        }
        resp.source = ResponseSource::live;
        return resp;
    }

    static ChatResponse from_cached(const detail::CachedCall& call) {
        ChatResponse resp;
        resp.content = call.content;
        resp.prompt_tokens = call.prompt_tokens;
        resp.completion_tokens = call.completion_tokens;
        resp.latency_ms = 0;
        resp.source = ResponseSource::cache;
        return resp;
    }

    static std::string snippet(const std::string& s) {
        return s.size() <= 200 ? s : s.substr(0, 200) + "...";
    }

    Transport& transport();

    GatewayConfig cfg_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleeper_;
    detail::CallCache cache_;
    detail::InflightLimiter limiter_;
    std::unique_ptr<detail::TokenBucket> bucket_;
    MockFn mock_;
    std::once_flag transport_once_;
};

} // namespace recprompt

// The default transport lives in http_transport.hpp, which completes
// LlmGateway::transport(). Including it here keeps the gateway usable from a
// single include while letting the HTTP stack stay in its own header.
#include "recprompt/http_transport.hpp"
