#pragma once

#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "driforge/chat.hpp"
#include "driforge/embedding.hpp"
#include "driforge/errors.hpp"

namespace driforge {

namespace detail {

struct SplitUrl {
    std::string base; // scheme://host[:port]
    std::string path; // /v1/embeddings
};

inline SplitUrl split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline httplib::Headers auth_headers(const std::string& key) {
    httplib::Headers h;
    if (!key.empty()) h.emplace("Authorization", "Bearer " + key);
    return h;
}

} // namespace detail

// OpenAI-compatible embeddings endpoint:
//   POST {"model": str, "input": [str]} -> {"data": [{"embedding": [float]}]}
class HttpEmbeddingProvider : public EmbeddingProvider {
public:
    HttpEmbeddingProvider(const std::string& url, std::string model, std::size_t dim,
                          std::string api_key = {})
        : url_(detail::split_url(url)), model_(std::move(model)), dim_(dim), api_key_(std::move(api_key)),
          client_(url_.base) {
        client_.set_connection_timeout(10);
        client_.set_read_timeout(120);
    }

    std::string provider_id() const override { return "http:" + url_.base; }
    std::string model_id() const override { return model_; }
    std::size_t dim() const override { return dim_; }

    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
        nlohmann::json body{{"model", model_}, {"input", texts}};
        auto res = client_.Post(url_.path, detail::auth_headers(api_key_), body.dump(), "application/json");
        if (!res) throw TransportError("embeddings endpoint unreachable: " + url_.base + url_.path);
        if (res->status != 200)
            throw TransportError("embeddings endpoint returned HTTP " + std::to_string(res->status) + ": " +
                                 res->body.substr(0, 200));
        nlohmann::json doc = nlohmann::json::parse(res->body, nullptr, false);
        if (doc.is_discarded() || !doc.contains("data") || !doc["data"].is_array())
            throw TransportError("embeddings endpoint returned an unexpected body");
        const auto& data = doc["data"];
        if (data.size() != texts.size())
            throw TransportError("embeddings endpoint returned " + std::to_string(data.size()) +
                                 " vectors for " + std::to_string(texts.size()) + " inputs");
        std::vector<Vec> out(texts.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto& item = data[i];
            // Honor explicit indices when the server provides them.
            std::size_t slot = item.contains("index") ? item["index"].get<std::size_t>() : i;
            if (slot >= out.size() || !item.contains("embedding"))
                throw TransportError("embeddings endpoint returned a malformed data item");
            out[slot] = item["embedding"].get<Vec>();
        }
        return out;
    }

private:
    detail::SplitUrl url_;
    std::string model_;
    std::size_t dim_;
    std::string api_key_;
    httplib::Client client_;
};

// OpenAI-compatible chat completions endpoint:
//   POST {"model", "messages": [{role, content}], "temperature"}
//     -> {"choices": [{"message": {"content": str}}]}
class HttpChatClient : public ChatClient {
public:
    HttpChatClient(const std::string& url, std::string model, std::string api_key = {},
                   double temperature = 0.2)
        : url_(detail::split_url(url)), model_(std::move(model)), api_key_(std::move(api_key)),
          temperature_(temperature), client_(url_.base) {
        client_.set_connection_timeout(10);
        client_.set_read_timeout(300);
    }

    std::string model_id() const override { return model_; }

    std::string complete(const std::vector<ChatMessage>& messages) override {
        nlohmann::json msgs = nlohmann::json::array();
        for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
        nlohmann::json body{{"model", model_}, {"messages", msgs}, {"temperature", temperature_}};
        auto res = client_.Post(url_.path, detail::auth_headers(api_key_), body.dump(), "application/json");
        if (!res) throw TransportError("chat endpoint unreachable: " + url_.base + url_.path);
        if (res->status != 200)
            throw TransportError("chat endpoint returned HTTP " + std::to_string(res->status) + ": " +
                                 res->body.substr(0, 200));
        nlohmann::json doc = nlohmann::json::parse(res->body, nullptr, false);
        if (doc.is_discarded() || !doc.contains("choices") || !doc["choices"].is_array() ||
            doc["choices"].empty() || !doc["choices"][0].contains("message") ||
            !doc["choices"][0]["message"].contains("content"))
            throw TransportError("chat endpoint returned an unexpected body");
        return doc["choices"][0]["message"]["content"].get<std::string>();
    }

private:
    detail::SplitUrl url_;
    std::string model_;
    std::string api_key_;
    double temperature_;
    httplib::Client client_;
};

} // namespace driforge
