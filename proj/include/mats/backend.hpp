#pragma once

#include <chrono>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/common.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Request / result
// ---------------------------------------------------------------------------

struct GenerationRequest {
    std::string prompt;
    int n = 1;
    double temperature = 0.0;  // 0 means greedy
    int max_new_tokens = 512;
    std::vector<std::string> stop;

    void validate() const {
        if (n < 1) throw ValidationError("generation request: n must be >= 1");
        if (temperature < 0.0) throw ValidationError("generation request: temperature must be >= 0");
        if (temperature == 0.0 && n != 1)
            throw ValidationError("generation request: greedy decoding is deterministic, n must be 1");
    }
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;
};

struct GenerationResult {
    std::vector<std::string> completions;
    // Parallel to completions when present; empty when the backend does not
    // report log-probabilities.
    std::vector<std::vector<TokenLogprob>> token_logprobs;
};

/// Generation seam shared by every agent. Implementations must tolerate
/// concurrent complete() calls.
class Backend {
public:
    virtual ~Backend() = default;
    virtual GenerationResult complete(const GenerationRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Scripted backend (fixtures)
// ---------------------------------------------------------------------------

/// Lookup key for fixtures: prompt digest, n and a temperature bucket.
/// Temperature 0 buckets as "greedy"; positive temperatures round to two
/// decimals so float noise cannot split a key.
inline std::string fixture_key(const GenerationRequest& request) {
    std::string bucket;
    if (request.temperature <= 0.0) {
        bucket = "greedy";
    } else {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", request.temperature);
        bucket = buf;
    }
    return digest_hex(request.prompt) + "|n=" + std::to_string(request.n) + "|t=" + bucket;
}

/// In-memory fixture: per key, a queue of responses where each response is
/// the full completion list for one call.
struct ScriptedFixture {
    std::map<std::string, std::deque<std::vector<std::string>>> responses;
    // Pretty manifest written beside fixtures so humans can author keys
    // without computing digests: key -> full prompt text.
    std::map<std::string, std::string> prompts;

    /// Queues one call's worth of completions for the given request shape.
    void enqueue(const GenerationRequest& request, std::vector<std::string> completions) {
        std::string key = fixture_key(request);
        prompts[key] = request.prompt;
        responses[key].push_back(std::move(completions));
    }

    void save(const std::string& path, const std::string& manifest_path = "") const {
        nlohmann::ordered_json doc = nlohmann::ordered_json::object();
        for (const auto& [key, queue] : responses) {
            nlohmann::ordered_json entries = nlohmann::ordered_json::array();
            for (const auto& completions : queue) entries.push_back(completions);
            doc[key] = std::move(entries);
        }
        std::ofstream out(path);
        if (!out) throw SetupError("cannot write fixture file: " + path);
        out << doc.dump(2) << "\n";
        if (!manifest_path.empty()) {
            nlohmann::ordered_json man = nlohmann::ordered_json::object();
            for (const auto& [key, prompt] : prompts) man[key] = prompt;
            std::ofstream mout(manifest_path);
            if (!mout) throw SetupError("cannot write fixture manifest: " + manifest_path);
            mout << man.dump(2) << "\n";
        }
    }

    static ScriptedFixture load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw SetupError("cannot open fixture file: " + path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("cannot parse fixture file: ") + e.what());
        }
        if (!doc.is_object()) throw ValidationError("fixture file must be a JSON object");
        ScriptedFixture fixture;
        for (const auto& [key, queue] : doc.items()) {
            std::deque<std::vector<std::string>> entries;
            if (!queue.is_array())
                throw ValidationError("fixture key '" + key + "' must map to an array");
            for (const auto& entry : queue) {
                if (entry.is_string())
                    entries.push_back({entry.get<std::string>()});
                else if (entry.is_array())
                    entries.push_back(entry.get<std::vector<std::string>>());
                else
                    throw ValidationError("fixture key '" + key +
                                          "': entries must be strings or string arrays");
            }
            fixture.responses[key] = std::move(entries);
        }
        return fixture;
    }
};

/// Deterministic backend answering by exact fixture-key lookup. Each call
/// consumes the head of its key's queue; a missing or exhausted key raises a
/// fixture-miss error naming the digest so the fixture can be extended.
class ScriptedBackend : public Backend {
public:
    ScriptedBackend() = default;
    explicit ScriptedBackend(ScriptedFixture fixture) : fixture_(std::move(fixture)) {}

    static std::shared_ptr<ScriptedBackend> from_file(const std::string& path) {
        return std::make_shared<ScriptedBackend>(ScriptedFixture::load(path));
    }

    GenerationResult complete(const GenerationRequest& request) override {
        request.validate();
        std::lock_guard<std::mutex> lock(mutex_);
        calls_.push_back(request);
        const std::string key = fixture_key(request);
        auto it = fixture_.responses.find(key);
        if (it == fixture_.responses.end() || it->second.empty())
            throw FixtureMissError("no scripted response for key " + key +
                                   " (prompt digest " + digest_hex(request.prompt) + ")");
        std::vector<std::string> completions = std::move(it->second.front());
        it->second.pop_front();
        if (static_cast<int>(completions.size()) != request.n)
            throw FixtureMissError("scripted response for key " + key + " has " +
                                   std::to_string(completions.size()) + " completions, request wants " +
                                   std::to_string(request.n));
        GenerationResult result;
        result.completions = std::move(completions);
        return result;
    }

    /// Every request seen, in arrival order. Test spy.
    std::vector<GenerationRequest> calls() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return calls_;
    }

    std::size_t remaining() const {
        std::lock_guard<std::mutex> lock(mutex_);
        std::size_t count = 0;
        for (const auto& [key, queue] : fixture_.responses) count += queue.size();
        return count;
    }

private:
    ScriptedFixture fixture_;
    std::vector<GenerationRequest> calls_;
    mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

struct HttpBackendConfig {
    std::string base_url;          // e.g. http://host:port
    std::string completion_path = "/v1/completions";
    std::string model;
    std::string auth_token;        // sent as Bearer when nonempty
    bool request_logprobs = false;
    int max_attempts = 3;
    int backoff_base_ms = 200;
    int timeout_s = 120;
};

namespace detail {

inline nlohmann::json completion_payload(const HttpBackendConfig& config,
                                         const GenerationRequest& request) {
    nlohmann::json payload{{"model", config.model},
                           {"prompt", request.prompt},
                           {"n", request.n},
                           {"temperature", request.temperature},
                           {"max_tokens", request.max_new_tokens}};
    if (!request.stop.empty()) payload["stop"] = request.stop;
    if (config.request_logprobs) payload["logprobs"] = 1;
    return payload;
}

inline GenerationResult parse_completion_reply(const std::string& body, int expected_n) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("malformed backend reply: ") + e.what());
    }
    if (!doc.contains("choices") || !doc["choices"].is_array())
        throw BackendError("backend reply has no choices array");
    GenerationResult result;
    for (const auto& choice : doc["choices"]) {
        if (!choice.contains("text") || !choice["text"].is_string())
            throw BackendError("backend choice has no text field");
        result.completions.push_back(choice["text"].get<std::string>());
        std::vector<TokenLogprob> lps;
        if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
            const auto& lp = choice["logprobs"];
            if (lp.contains("tokens") && lp.contains("token_logprobs") &&
                lp["tokens"].is_array() && lp["token_logprobs"].is_array()) {
                const auto& toks = lp["tokens"];
                const auto& vals = lp["token_logprobs"];
                for (std::size_t i = 0; i < toks.size() && i < vals.size(); ++i) {
                    if (!vals[i].is_number()) continue;  // leading null for the first token
                    lps.push_back({toks[i].get<std::string>(), vals[i].get<double>()});
                }
            }
        }
        result.token_logprobs.push_back(std::move(lps));
    }
    if (static_cast<int>(result.completions.size()) != expected_n)
        throw BackendError("backend returned " + std::to_string(result.completions.size()) +
                           " completions, requested " + std::to_string(expected_n));
    bool any_lps = false;
    for (const auto& lps : result.token_logprobs)
        if (!lps.empty()) any_lps = true;
    if (!any_lps) result.token_logprobs.clear();
    return result;
}

}  // namespace detail

/// OpenAI-compatible completion client with bounded retry on transport
/// failures. HTTP 4xx replies are treated as request rejections and are not
/// retried; connection errors and 5xx replies are.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
        if (config_.base_url.empty()) throw SetupError("http backend needs a base URL");
        if (config_.max_attempts < 1) throw SetupError("http backend needs max_attempts >= 1");
    }

    GenerationResult complete(const GenerationRequest& request) override;

private:
    HttpBackendConfig config_;
};

}  // namespace mats

// Translation units that construct a live HttpBackend must also include
// "mats/http_backend_impl.hpp", which defines complete() and pulls in the
// HTTP client library. Scripted-only users skip that cost.
