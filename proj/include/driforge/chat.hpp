#pragma once

#include <deque>
#include <string>
#include <vector>

#include "driforge/errors.hpp"
#include "driforge/hash.hpp"

namespace driforge {

struct ChatMessage {
    std::string role; // "system" | "user" | "assistant"
    std::string content;
};

class TransportError : public Error {
public:
    explicit TransportError(const std::string& msg) : Error(msg) {}
};

class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual std::string model_id() const = 0;
    // Returns the assistant message content for one completion request.
    virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

// Replays a fixed transcript of responses, one per call, and records every
// request. Used to script retry scenarios in tests.
class ScriptedChatClient : public ChatClient {
public:
    explicit ScriptedChatClient(std::vector<std::string> responses)
        : responses_(responses.begin(), responses.end()) {}

    std::string model_id() const override { return "scripted"; }

    std::string complete(const std::vector<ChatMessage>& messages) override {
        requests_.push_back(messages);
        if (responses_.empty()) throw TransportError("scripted chat client ran out of responses");
        std::string r = std::move(responses_.front());
        responses_.pop_front();
        return r;
    }

    const std::vector<std::vector<ChatMessage>>& requests() const { return requests_; }
    std::size_t calls() const { return requests_.size(); }

private:
    std::deque<std::string> responses_;
    std::vector<std::vector<ChatMessage>> requests_;
};

// Offline stand-in for a hosted model: emits a valid JSON array of
// `statement_count` distinct statements derived from the prompt hash, so
// pipeline runs are fully reproducible. `salt` lets multi-run sampling
// produce different (still deterministic) outputs per run.
class DeterministicChatClient : public ChatClient {
public:
    explicit DeterministicChatClient(std::size_t statement_count = 5, std::string salt = {})
        : statement_count_(statement_count), salt_(std::move(salt)) {}

    std::string model_id() const override { return "mock-chat"; }

    std::string complete(const std::vector<ChatMessage>& messages) override {
        ++calls_;
        std::string prompt;
        for (const auto& m : messages) {
            prompt += m.role;
            prompt += '\x1f';
            prompt += m.content;
            prompt += '\x1e';
        }
        std::string seed = short_hash(salt_ + "\x1f" + prompt);
        std::string out = "[";
        for (std::size_t i = 0; i < statement_count_; ++i) {
            if (i) out += ", ";
            out += "\"Mock statement " + seed + "-" + std::to_string(i + 1) + "\"";
        }
        out += "]";
        return out;
    }

    std::size_t calls() const { return calls_; }

private:
    std::size_t statement_count_;
    std::string salt_;
    std::size_t calls_ = 0;
};

} // namespace driforge
