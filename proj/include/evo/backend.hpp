// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace evo::backend {

enum class Role { system, user, assistant };

struct ChatMessage {
    Role role = Role::user;
    std::string content;
};

std::string to_string(Role role);

struct GenerationParams {
    int max_tokens = 4096;
    double temperature = 0.0;
    std::optional<std::int64_t> seed;
};

enum class BackendKind { remote, scripted, toy };

/// Uniform surface over text generation endpoints. chat() is the only
/// operation that may perform network activity.
class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string chat(const std::vector<ChatMessage>& messages,
                             const GenerationParams& params) = 0;
    virtual BackendKind kind() const = 0;
    virtual const std::string& identity() const = 0;
};

using BackendHandle = std::shared_ptr<Backend>;

/// Context handed to scripted response functions.
struct ScriptedCall {
    const std::vector<ChatMessage>& messages;
    std::string joined; // all message contents joined with '\n'
    int rule_hits = 0;  // how many times this rule matched before, 0-based
    int call_index = 0; // global chat() count on this backend, 0-based
};

using ResponseFn = std::function<std::string(const ScriptedCall&)>;

/// Deterministic test backend: substring rules registered in order, later
/// registrations take precedence. Rule state (hit counts) is serialized under
/// a mutex so call-count semantics stay well-defined under concurrency.
class ScriptedBackend : public Backend {
public:
    explicit ScriptedBackend(std::string name = "scripted");

    void register_rule(std::string matcher, std::string response);
    /// Responses indexed by per-rule hit count; the last entry repeats.
    void register_rule(std::string matcher, std::vector<std::string> sequence);
    void register_rule(std::string matcher, ResponseFn fn);

    std::string chat(const std::vector<ChatMessage>& messages,
                     const GenerationParams& params) override;
    BackendKind kind() const override { return BackendKind::scripted; }
    const std::string& identity() const override { return name_; }

private:
    struct Rule {
        std::string matcher;
        ResponseFn respond;
        int hits = 0;
    };
    std::string name_;
    std::vector<Rule> rules_;
    int calls_ = 0;
    std::mutex mutex_;
};

struct RemoteConfig {
    std::string base_url;                         // e.g. http://127.0.0.1:8080
    std::string path = "/v1/chat/completions";
    std::string model;
    int max_attempts = 3;                         // total attempts, not extra retries
    int backoff_initial_ms = 1000;                // doubles per retry
    int inflight_cap = 4;
    std::string api_key_env = "EVO_API_KEY";      // credentials come from env only
    int timeout_sec = 60;
};

/// JSON-over-HTTP chat-completion client. Retries transport failures and
/// 5xx responses with exponential backoff; 4xx and malformed bodies fail
/// immediately.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(RemoteConfig config);
    ~HttpBackend() override;

    std::string chat(const std::vector<ChatMessage>& messages,
                     const GenerationParams& params) override;
    BackendKind kind() const override { return BackendKind::remote; }
    const std::string& identity() const override { return config_.base_url; }

    const RemoteConfig& config() const { return config_; }

private:
    struct Impl;
    RemoteConfig config_;
    std::unique_ptr<Impl> impl_;
};

// Wire format, exposed for direct testing without a transport.
nlohmann::ordered_json build_chat_request(const std::string& model,
                                          const std::vector<ChatMessage>& messages,
                                          const GenerationParams& params);
std::string parse_chat_response(const std::string& body);

/// Backoff delays for attempts 1..max_attempts-1; monotone non-decreasing.
std::vector<int> backoff_schedule_ms(int initial_ms, int max_attempts);

} // namespace evo::backend
