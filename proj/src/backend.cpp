// SPDX-License-Identifier: Apache-2.0
#include "evo/backend.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "evo/errors.hpp"

namespace evo::backend {

std::string to_string(Role role) {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

namespace {

void validate_request(const std::vector<ChatMessage>& messages,
                      const GenerationParams& params) {
    if (messages.empty()) {
        throw ValidationError("chat requires at least one message");
    }
    for (const auto& m : messages) {
        if (m.content.empty() && m.role != Role::system) {
            throw ValidationError("empty content in " + to_string(m.role) + " message");
        }
    }
    if (params.max_tokens < 1) {
        throw ValidationError("max_tokens must be >= 1");
    }
    if (params.temperature < 0.0) {
        throw ValidationError("temperature must be >= 0");
    }
}

std::string join_contents(const std::vector<ChatMessage>& messages) {
    std::string joined;
    for (const auto& m : messages) {
        if (!joined.empty()) {
            joined += '\n';
        }
        joined += m.content;
    }
    return joined;
}

} // namespace

// ---------------------------------------------------------------------------
// ScriptedBackend
// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::string name) : name_(std::move(name)) {}

void ScriptedBackend::register_rule(std::string matcher, std::string response) {
    register_rule(std::move(matcher),
                  ResponseFn([response = std::move(response)](const ScriptedCall&) {
                      return response;
                  }));
}

void ScriptedBackend::register_rule(std::string matcher, std::vector<std::string> sequence) {
    if (sequence.empty()) {
        throw ValidationError("scripted response sequence must be non-empty");
    }
    register_rule(std::move(matcher),
                  ResponseFn([seq = std::move(sequence)](const ScriptedCall& call) {
                      std::size_t i = std::min<std::size_t>(
                          static_cast<std::size_t>(call.rule_hits), seq.size() - 1);
                      return seq[i];
                  }));
}

void ScriptedBackend::register_rule(std::string matcher, ResponseFn fn) {
    std::lock_guard<std::mutex> lock(mutex_);
    rules_.push_back(Rule{std::move(matcher), std::move(fn), 0});
}

std::string ScriptedBackend::chat(const std::vector<ChatMessage>& messages,
                                  const GenerationParams& params) {
    validate_request(messages, params);
    std::lock_guard<std::mutex> lock(mutex_);
    std::string joined = join_contents(messages);
    int call_index = calls_++;
    // Later registrations win on overlap.
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) {
        if (joined.find(it->matcher) != std::string::npos) {
            ScriptedCall call{messages, joined, it->hits, call_index};
            ++it->hits;
            std::string response = it->respond(call);
            if (response.empty()) {
                throw BackendError("scripted backend \"" + name_ +
                                   "\" produced an empty completion");
            }
            return response;
        }
    }
    std::string preview = joined.substr(0, 160);
    throw BackendError("scripted backend \"" + name_ + "\" has no rule matching prompt: " +
                       preview);
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

nlohmann::ordered_json build_chat_request(const std::string& model,
                                          const std::vector<ChatMessage>& messages,
                                          const GenerationParams& params) {
    nlohmann::ordered_json msgs = nlohmann::ordered_json::array();
    for (const auto& m : messages) {
        msgs.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    }
    nlohmann::ordered_json req{
        {"model", model},
        {"messages", std::move(msgs)},
        {"max_tokens", params.max_tokens},
        {"temperature", params.temperature},
    };
    if (params.seed) {
        req["seed"] = *params.seed;
    }
    return req;
}

std::string parse_chat_response(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) {
        throw BackendError("chat response is not valid JSON");
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw BackendError("chat response has no choices");
    }
    const auto& choice = j["choices"][0];
    if (!choice.contains("message") || !choice["message"].contains("content")) {
        throw BackendError("chat response choice has no message content");
    }
    std::string content = choice["message"]["content"].get<std::string>();
    if (content.empty()) {
        throw BackendError("chat response completion is empty");
    }
    return content;
}

std::vector<int> backoff_schedule_ms(int initial_ms, int max_attempts) {
    std::vector<int> delays;
    int delay = initial_ms;
    for (int i = 1; i < max_attempts; ++i) {
        delays.push_back(delay);
        if (delay <= (1 << 24)) {
            delay *= 2;
        }
    }
    return delays;
}

// ---------------------------------------------------------------------------
// HttpBackend
// ---------------------------------------------------------------------------

struct HttpBackend::Impl {
    void acquire_slot(int cap) {
        std::unique_lock<std::mutex> lock(mutex);
        cv.wait(lock, [&] { return inflight < cap; });
        ++inflight;
    }

    void release_slot() {
        {
            std::lock_guard<std::mutex> lock(mutex);
            --inflight;
        }
        cv.notify_one();
    }

    std::mutex mutex;
    std::condition_variable cv;
    int inflight = 0;
};

HttpBackend::HttpBackend(RemoteConfig config)
    : config_(std::move(config)), impl_(std::make_unique<Impl>()) {
    if (config_.max_attempts < 1) {
        throw ValidationError("max_attempts must be >= 1");
    }
    if (config_.inflight_cap < 1) {
        throw ValidationError("inflight_cap must be >= 1");
    }
}

HttpBackend::~HttpBackend() = default;

std::string HttpBackend::chat(const std::vector<ChatMessage>& messages,
                              const GenerationParams& params) {
    validate_request(messages, params);
    std::string body = build_chat_request(config_.model, messages, params).dump();

    httplib::Headers headers{{"Content-Type", "application/json"}};
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key) {
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    impl_->acquire_slot(config_.inflight_cap);
    struct SlotGuard {
        Impl* impl;
        ~SlotGuard() { impl->release_slot(); }
    } guard{impl_.get()};

    // One client per call: httplib serializes requests on a shared client,
    // which would collapse the in-flight cap to one.
    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_sec, 0);
    client.set_read_timeout(config_.timeout_sec, 0);

    std::vector<int> delays = backoff_schedule_ms(config_.backoff_initial_ms,
                                                  config_.max_attempts);
    std::string last_error;
    for (int attempt = 0; attempt < config_.max_attempts; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(delays[attempt - 1]));
        }
        httplib::Result res = client.Post(config_.path, headers, body,
                                          "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue; // retryable
        }
        if (res->status >= 500) {
            last_error = "server error: HTTP " + std::to_string(res->status);
            continue; // retryable
        }
        if (res->status != 200) {
            throw BackendError(config_.base_url + ": HTTP " + std::to_string(res->status) +
                               ": " + res->body.substr(0, 200));
        }
        return parse_chat_response(res->body);
    }
    throw BackendError(config_.base_url + ": " + last_error + " after " +
                       std::to_string(config_.max_attempts) + " attempts");
}

} // namespace evo::backend
