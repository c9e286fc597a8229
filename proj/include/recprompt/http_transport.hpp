#pragma once

#include "recprompt/llm_gateway.hpp"

#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>

namespace recprompt {

class HttplibTransport : public Transport {
public:
    HttpReply post_json(const std::string& base_url, const std::string& path,
                        const std::string& body,
                        const std::vector<std::pair<std::string, std::string>>& headers,
                        std::chrono::milliseconds timeout) override {
        httplib::Client client(base_url);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);
        httplib::Headers hdrs;
        for (const auto& [k, v] : headers) hdrs.emplace(k, v);
        auto res = client.Post(path, hdrs, body, "application/json");
        HttpReply reply;
        if (!res) {
            reply.status = 0;
            reply.body = "transport error: " + httplib::to_string(res.error());
            return reply;
        }
        reply.status = res->status;
        reply.body = res->body;
        for (const auto& [k, v] : res->headers) reply.headers.emplace_back(k, v);
        return reply;
    }
};

inline Transport& LlmGateway::transport() {
    std::call_once(transport_once_, [&] {
        if (!transport_) transport_ = std::make_shared<HttplibTransport>();
    });
    return *transport_;
}

} // namespace recprompt
