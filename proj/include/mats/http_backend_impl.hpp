#pragma once

#include <httplib.h>

#include "mats/backend.hpp"

namespace mats {

inline GenerationResult HttpBackend::complete(const GenerationRequest& request) {
    request.validate();
    const nlohmann::json payload = detail::completion_payload(config_, request);
    const std::string body = payload.dump();

    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
        if (attempt > 1) {
            const int delay_ms = config_.backoff_base_ms * (1 << (attempt - 2));
            std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        }
        httplib::Client client(config_.base_url);
        client.set_connection_timeout(config_.timeout_s, 0);
        client.set_read_timeout(config_.timeout_s, 0);
        httplib::Headers headers;
        if (!config_.auth_token.empty())
            headers.emplace("Authorization", "Bearer " + config_.auth_token);

        auto res = client.Post(config_.completion_path, headers, body, "application/json");
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 200 && res->status < 300)
            return detail::parse_completion_reply(res->body, request.n);
        if (res->status >= 400 && res->status < 500)
            throw BackendError("backend rejected request (HTTP " + std::to_string(res->status) +
                               "): " + res->body);
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
    }
    throw TransportError("backend unreachable after " + std::to_string(config_.max_attempts) +
                         " attempts; last error: " + last_error);
}

}  // namespace mats
