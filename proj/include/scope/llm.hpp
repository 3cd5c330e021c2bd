#pragma once

// Chat-completion access for the monitor. Two backends share one calling
// convention (system text + user text in, raw model text out): LlmClient
// speaks the usual HTTP chat API with bounded retries and a concurrency
// cap, StubLlm answers offline by actually reading the rendered prompt.

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "scope/correction.hpp"
#include "scope/detail.hpp"
#include "scope/embed.hpp"

namespace scope {

// Request gave up waiting on the connection.
struct TimeoutError : RemoteError {
    using RemoteError::RemoteError;
};

// Socket-level failure before any HTTP status arrived.
struct TransportError : RemoteError {
    using RemoteError::RemoteError;
};

// The server answered, but not with a usable completion.
struct ProtocolError : RemoteError {
    using RemoteError::RemoteError;
};

struct LlmConfig {
    std::string base_url;  // full chat-completions endpoint
    std::string model = "readback-monitor";
    double temperature = 0.0;
    // Name of the environment variable holding the key. The key itself is
    // read at request time and never stored or serialized.
    std::string api_key_env = "SCOPE_LLM_API_KEY";
    int max_retries = 3;       // retries after the first attempt
    int timeout_ms = 30000;
    int max_in_flight = 4;     // concurrent requests across threads
    int backoff_base_ms = 500; // 0 disables sleeping (tests)
    double backoff_factor = 2.0;
    std::uint64_t jitter_seed = 42;
};

struct LlmResult {
    std::string content;
    int attempts = 1;
    double latency_ms = 0.0;  // wall time across all attempts
};

// Retries only what might heal on its own: 5xx statuses, timeouts and
// transport failures, with exponential backoff and full jitter. Anything
// else the server said deliberately (4xx, malformed success bodies) is a
// ProtocolError on the spot.
class LlmClient {
public:
    explicit LlmClient(LlmConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.jitter_seed) {
        if (cfg_.base_url.empty()) throw ContractError("LlmClient: base_url is required");
        if (cfg_.max_in_flight < 1) throw ContractError("LlmClient: max_in_flight must be >= 1");
        if (cfg_.max_retries < 0) throw ContractError("LlmClient: max_retries must be >= 0");
    }

    LlmResult complete(const std::string& system_text, const std::string& user_text) {
        nlohmann::json body;
        body["model"] = cfg_.model;
        body["temperature"] = cfg_.temperature;
        body["messages"] = {{{"role", "system"}, {"content", system_text}},
                            {{"role", "user"}, {"content", user_text}}};
        const std::string payload = body.dump();

        const auto started = std::chrono::steady_clock::now();
        auto elapsed_ms = [&] {
            return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                             started)
                .count();
        };

        std::string last_error;
        bool last_was_timeout = false;
        bool last_was_transport = false;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            httplib::Result res = post_once(payload);
            if (res) {
                if (res->status >= 200 && res->status < 300) {
                    LlmResult out;
                    out.content = extract_content(res->body);
                    out.attempts = attempt + 1;
                    out.latency_ms = elapsed_ms();
                    return out;
                }
                const std::string detail = "HTTP " + std::to_string(res->status) + ": " +
                                           res->body.substr(0, 200);
                if (res->status < 500)
                    throw ProtocolError("chat request rejected: " + detail);
                last_error = detail;
                last_was_timeout = last_was_transport = false;
            } else {
                last_was_timeout = res.error() == httplib::Error::ConnectionTimeout;
                last_was_transport = !last_was_timeout;
                last_error = "transport error " +
                             std::to_string(static_cast<int>(res.error()));
            }
            if (attempt < cfg_.max_retries) backoff(attempt);
        }
        const std::string suffix =
            " after " + std::to_string(cfg_.max_retries + 1) + " attempts: " + last_error;
        if (last_was_timeout) throw TimeoutError("chat request timed out" + suffix);
        if (last_was_transport) throw TransportError("chat request failed" + suffix);
        throw ProtocolError("chat request failed" + suffix);
    }

private:
    struct SlotGuard {
        LlmClient& c;
        explicit SlotGuard(LlmClient& client) : c(client) {
            std::unique_lock lock(c.mu_);
            c.cv_.wait(lock, [&] { return c.in_flight_ < c.cfg_.max_in_flight; });
            ++c.in_flight_;
        }
        ~SlotGuard() {
            {
                std::lock_guard lock(c.mu_);
                --c.in_flight_;
            }
            c.cv_.notify_one();
        }
    };

    httplib::Result post_once(const std::string& payload) {
        SlotGuard slot(*this);
        auto [host, path] = split_url(cfg_.base_url);
        httplib::Client client(host);
        client.set_connection_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);
        return client.Post(path, headers, payload, "application/json");
    }

    static std::string extract_content(const std::string& body) {
        try {
            const auto j = nlohmann::json::parse(body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("chat response malformed: ") + e.what() + ": " +
                                body.substr(0, 200));
        }
    }

    void backoff(int attempt) {
        if (cfg_.backoff_base_ms <= 0) return;
        double ceiling = cfg_.backoff_base_ms;
        for (int i = 0; i < attempt; ++i) ceiling *= cfg_.backoff_factor;
        double wait_ms;
        {
            std::lock_guard lock(mu_);
            wait_ms = rng_.real() * ceiling;
        }
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(wait_ms));
    }

    static std::pair<std::string, std::string> split_url(const std::string& url) {
        const std::size_t scheme = url.find("://");
        const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
        const std::size_t slash = url.find('/', host_start);
        if (slash == std::string::npos) return {url, "/"};
        return {url.substr(0, slash), url.substr(slash)};
    }

    LlmConfig cfg_;
    detail::Rng rng_;
    std::mutex mu_;
    std::condition_variable cv_;
    int in_flight_ = 0;
};

namespace llm_detail {

// First line in `text` starting with `prefix`; value runs to end of line.
inline std::optional<std::string> line_value(const std::string& text, std::string_view prefix) {
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t eol = text.find('\n', pos);
        const std::size_t len = (eol == std::string::npos ? text.size() : eol) - pos;
        if (len >= prefix.size() && text.compare(pos, prefix.size(), prefix) == 0)
            return text.substr(pos + prefix.size(), len - prefix.size());
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    return std::nullopt;
}

// Parses "intent=<i>; slots=[a=x; b=y]" back into an annotation shape.
// Spans are unknown here and stay zero.
inline std::optional<SemanticAnnotation> parse_semantics_line(const std::string& line) {
    const std::size_t intent_at = line.find("intent=");
    const std::size_t slots_at = line.find("; slots=[");
    if (intent_at == std::string::npos || slots_at == std::string::npos ||
        slots_at < intent_at || !line.ends_with("]"))
        return std::nullopt;
    SemanticAnnotation ann;
    ann.intent = line.substr(intent_at + 7, slots_at - intent_at - 7);
    const std::string inner =
        line.substr(slots_at + 9, line.size() - slots_at - 10);
    if (!inner.empty()) {
        std::size_t pos = 0;
        while (pos < inner.size()) {
            std::size_t sep = inner.find("; ", pos);
            if (sep == std::string::npos) sep = inner.size();
            const std::string entry = inner.substr(pos, sep - pos);
            const std::size_t eq = entry.find('=');
            if (eq == std::string::npos || eq == 0) return std::nullopt;
            ann.slots.push_back({entry.substr(0, eq), entry.substr(eq + 1), 0, 0});
            pos = sep + 2;
        }
    }
    return ann;
}

// value -> slot name, harvested from every semantics line in the examples
// region. Callsigns are excluded; designators already cover them.
inline std::map<std::string, std::string> harvest_dictionary(const std::string& examples_region) {
    std::map<std::string, std::string> dict;
    std::size_t pos = 0;
    while (pos <= examples_region.size()) {
        const std::size_t eol = examples_region.find('\n', pos);
        const std::string line =
            examples_region.substr(pos, (eol == std::string::npos ? examples_region.size() : eol) - pos);
        const std::size_t mark = line.find("semantics: ");
        if (mark != std::string::npos) {
            if (const auto ann = parse_semantics_line(line.substr(mark + 11))) {
                for (const auto& slot : ann->slots)
                    if (slot.name != "callsign" && !slot.value.empty())
                        dict.emplace(slot.value, slot.name);
            }
        }
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    return dict;
}

inline bool word_boundary(const std::string& text, std::size_t start, std::size_t end) {
    auto alnum = [&](std::size_t i) {
        return std::isalnum(static_cast<unsigned char>(text[i])) != 0;
    };
    if (start > 0 && alnum(start - 1)) return false;
    if (end < text.size() && alnum(end)) return false;
    return true;
}

// Lexicon extraction plus dictionary lookups for slot kinds the lexicon
// has no pattern for (named fixes and the like).
inline std::vector<SlotValue> extract_with_dictionary(
    const std::string& text, const Lexicon& lex,
    const std::map<std::string, std::string>& dict) {
    std::vector<SlotValue> slots = extract_slots(text, lex);
    auto overlaps = [&](std::size_t s, std::size_t e) {
        for (const auto& sv : slots)
            if (s < sv.end && sv.start < e) return true;
        return false;
    };
    for (const auto& [value, name] : dict) {
        std::size_t from = 0;
        while ((from = text.find(value, from)) != std::string::npos) {
            const std::size_t to = from + value.size();
            if (word_boundary(text, from, to) && !overlaps(from, to)) {
                slots.push_back({name, value, from, to});
                from = to;
            } else {
                ++from;
            }
        }
    }
    std::sort(slots.begin(), slots.end(),
              [](const SlotValue& a, const SlotValue& b) { return a.start < b.start; });
    return slots;
}

// Keyword-to-intent table. Order matters: the first keyword found in the
// utterance names the intent, so compound phrases come before their parts
// and "climb and maintain" resolves to climb.
inline std::string infer_intent(const std::string& text) {
    static const std::vector<std::pair<std::string, std::string>> table = {
        {"climb", "climb"},          {"come up", "climb"},
        {"descend", "descend"},      {"come down", "descend"},
        {"cleared to land", "land"}, {"land", "land"},
        {"line up", "lineup"},       {"taxi", "taxi"},
        {"hold", "hold"},            {"heading", "turn"},
        {"turn", "turn"},            {"contact", "contact"},
        {"call", "contact"},         {"speed", "speed"},
        {"reduce", "speed"},         {"increase", "speed"},
        {"proceed", "proceed"},      {"direct", "proceed"},
        {"go ", "proceed"},          {"maintain", "maintain"},
        {"keep", "maintain"},        {"report", "report"},
    };
    const std::string low = detail::lower(text);
    std::size_t best_pos = std::string::npos;
    std::string best_intent;
    for (const auto& [keyword, intent] : table) {
        std::size_t from = 0;
        while (true) {
            const std::size_t at = low.find(keyword, from);
            if (at == std::string::npos) break;
            const std::size_t end = at + keyword.size();
            if (word_boundary(low, at, keyword.back() == ' ' ? end - 1 : end)) {
                if (at < best_pos) {
                    best_pos = at;
                    best_intent = intent;
                }
                break;
            }
            from = at + 1;
        }
    }
    return best_pos == std::string::npos ? "other" : best_intent;
}

inline std::set<std::string> token_set(const std::string& text) {
    std::set<std::string> out;
    for (const auto& tok : correction_detail::tokenize(text)) out.insert(detail::lower(tok.text));
    return out;
}

}  // namespace llm_detail

// Offline model double. It reads the rendered prompt the way the real
// model would have to: grounds both utterances into slots (lexicon plus a
// dictionary harvested from the example semantics lines), then decides by
// comparison. Same prompt bytes in, same verdict bytes out.
//
// Decision order, first hit wins:
//   1. gold test semantics present in the prompt are used verbatim
//   2. shared slot name with differing values        -> incorrect
//   3. instructed slot missing from the readback     -> incomplete
//   4. readback slot never instructed                -> incorrect
//   5. echo-like readback with novel wording or a
//      leading callsign                              -> non_standard
//   6. nothing groundable in the instruction         -> plug-in label,
//                                                       or unknown without one
//   7. otherwise                                     -> correct
class StubLlm {
public:
    explicit StubLlm(Lexicon lexicon) : lexicon_(std::move(lexicon)) {}

    std::string complete(const std::string& /*system_text*/, const std::string& user_text) const {
        using namespace llm_detail;
        static constexpr std::string_view kTestMarker = "## Test exchange (id: ";
        const std::size_t marker = user_text.find(kTestMarker);
        if (marker == std::string::npos)
            return answer(OpenLabel::Unknown, "other", {}, "other", {},
                          "prompt has no test exchange block");
        const std::string examples_region = user_text.substr(0, marker);
        const std::string test_region = user_text.substr(marker);

        const auto instruction = line_value(test_region, "ATCo instruction: ");
        const auto readback = line_value(test_region, "Pilot readback: ");
        if (!instruction || !readback)
            return answer(OpenLabel::Unknown, "other", {}, "other", {},
                          "test block is missing an utterance");

        std::optional<OpenLabel> plugin;
        if (const auto plugin_line = line_value(test_region, "Plug-in label: "))
            plugin = label_from_string(detail::trim(*plugin_line));

        // Gold semantics in the test block short-circuit extraction.
        std::string intent_1, intent_2;
        std::vector<SlotValue> slots_1, slots_2;
        const auto given_instr = line_value(test_region, "Instruction semantics: ");
        const auto given_read = line_value(test_region, "Readback semantics: ");
        std::optional<SemanticAnnotation> parsed_instr, parsed_read;
        if (given_instr) parsed_instr = parse_semantics_line(*given_instr);
        if (given_read) parsed_read = parse_semantics_line(*given_read);
        if (parsed_instr && parsed_read) {
            intent_1 = parsed_instr->intent;
            intent_2 = parsed_read->intent;
            slots_1 = parsed_instr->slots;
            slots_2 = parsed_read->slots;
        } else {
            const auto dict = harvest_dictionary(examples_region);
            slots_1 = extract_with_dictionary(*instruction, lexicon_, dict);
            slots_2 = extract_with_dictionary(*readback, lexicon_, dict);
            intent_1 = infer_intent(*instruction);
            intent_2 = infer_intent(*readback);
        }

        auto content_values = [](const std::vector<SlotValue>& slots) {
            std::map<std::string, std::vector<std::string>> by_name;
            for (const auto& s : slots)
                if (s.name != "callsign") by_name[s.name].push_back(s.value);
            for (auto& [name, values] : by_name) std::sort(values.begin(), values.end());
            return by_name;
        };
        const auto instr_content = content_values(slots_1);
        const auto read_content = content_values(slots_2);

        auto verdict = [&](OpenLabel label, std::string why) {
            return answer(label, intent_1, slots_1, intent_2, slots_2, std::move(why));
        };

        for (const auto& [name, values] : instr_content) {
            const auto it = read_content.find(name);
            if (it != read_content.end() && it->second != values)
                return verdict(OpenLabel::Incorrect,
                               "slot " + name + " mismatch: instruction says " +
                                   detail::join(values, "/") + ", readback says " +
                                   detail::join(it->second, "/"));
        }
        for (const auto& [name, values] : instr_content)
            if (!read_content.contains(name))
                return verdict(OpenLabel::Incomplete, "readback omits slot " + name);
        for (const auto& [name, values] : read_content)
            if (!instr_content.contains(name))
                return verdict(OpenLabel::Incorrect,
                               "readback adds slot " + name + "=" +
                                   detail::join(values, "/") + " that was never instructed");

        const auto instr_tokens = token_set(*instruction);
        const auto read_tokens = token_set(*readback);
        std::vector<std::string> novel;
        std::size_t shared = 0;
        for (const auto& tok : read_tokens) {
            if (instr_tokens.contains(tok))
                ++shared;
            else
                novel.push_back(tok);
        }
        const double overlap =
            read_tokens.empty() ? 0.0 : double(shared) / double(read_tokens.size());
        // Structural check on the raw text, independent of how the slots
        // were obtained: a readback should close with the callsign.
        bool fronted = false;
        for (const auto& s : extract_slots(*readback, lexicon_))
            if (s.name == "callsign" && s.start == 0 && s.end < readback->size()) fronted = true;
        if (overlap >= 0.5 && (fronted || !novel.empty())) {
            if (fronted)
                return verdict(OpenLabel::NonStandard,
                               "callsign opens the readback instead of closing it");
            return verdict(OpenLabel::NonStandard,
                           "non-standard phraseology: " + detail::join(novel, ", "));
        }

        if (instr_content.empty()) {
            if (plugin)
                return verdict(*plugin, "no groundable slots; deferring to the plug-in label");
            return verdict(OpenLabel::Unknown,
                           "no groundable slots and no plug-in label; out of scope");
        }

        return verdict(OpenLabel::Correct, "all instructed slots are read back consistently");
    }

private:
    static std::string answer(OpenLabel label, const std::string& intent_1,
                              const std::vector<SlotValue>& slots_1, const std::string& intent_2,
                              const std::vector<SlotValue>& slots_2, std::string explanation) {
        auto slot_array = [](const std::vector<SlotValue>& slots) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& s : slots)
                arr.push_back({{"name", s.name}, {"value", s.value}});
            return arr;
        };
        nlohmann::json j;
        j["intent_1"] = intent_1;
        j["slots_1"] = slot_array(slots_1);
        j["intent_2"] = intent_2;
        j["slots_2"] = slot_array(slots_2);
        j["label"] = to_string(label);
        j["explanation"] = std::move(explanation);
        return j.dump();
    }

    Lexicon lexicon_;
};

}  // namespace scope
