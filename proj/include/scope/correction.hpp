#pragma once

// Deterministic correction of anomalous readbacks by semantic reordering:
// locate the callsign in the instruction, move it to the end, keep every
// other token in place. Also home of the phraseology lexicon used for
// callsign and slot extraction.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/atcot.hpp"
#include "scope/corpus.hpp"
#include "scope/detail.hpp"

namespace scope {

// Raised when no callsign can be located and the caller demanded one.
struct CallsignNotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SlotPattern {
    std::string kind;  // "digits" or "keyword_digits"
    std::vector<std::string> keywords;
    int digits_min = 1;
    int digits_max = 6;
    bool require_decimal = false;       // digits kind: token must contain '.'
    std::vector<std::string> suffixes;  // allowed trailing letters, e.g. runway L/R/C
    int window = 2;                     // keyword_digits: max token distance
};

struct Lexicon {
    std::map<std::string, std::string> airline_designators;  // spoken/compact -> canonical
    std::map<std::string, SlotPattern> slot_patterns;
};

inline constexpr int kLexiconFormatVersion = 1;

inline nlohmann::json lexicon_to_json(const Lexicon& lex) {
    nlohmann::json j;
    j["format_version"] = kLexiconFormatVersion;
    j["airline_designators"] = lex.airline_designators;
    nlohmann::json patterns = nlohmann::json::object();
    for (const auto& [name, p] : lex.slot_patterns) {
        nlohmann::json jp;
        jp["kind"] = p.kind;
        jp["digits_min"] = p.digits_min;
        jp["digits_max"] = p.digits_max;
        if (p.kind == "keyword_digits") {
            jp["keywords"] = p.keywords;
            jp["window"] = p.window;
        }
        if (p.require_decimal) jp["require_decimal"] = true;
        if (!p.suffixes.empty()) jp["suffixes"] = p.suffixes;
        patterns[name] = std::move(jp);
    }
    j["slot_patterns"] = std::move(patterns);
    return j;
}

inline Lexicon lexicon_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kLexiconFormatVersion)
            throw ParseError("lexicon: unsupported format version " + std::to_string(version));
        Lexicon lex;
        lex.airline_designators =
            j.at("airline_designators").get<std::map<std::string, std::string>>();
        for (const auto& [name, jp] : j.at("slot_patterns").items()) {
            SlotPattern p;
            p.kind = jp.at("kind").get<std::string>();
            if (p.kind != "digits" && p.kind != "keyword_digits")
                throw ValidationError("lexicon: pattern '" + name + "' has unknown kind '" +
                                      p.kind + "'");
            p.digits_min = jp.at("digits_min").get<int>();
            p.digits_max = jp.at("digits_max").get<int>();
            if (p.kind == "keyword_digits") {
                p.keywords = jp.at("keywords").get<std::vector<std::string>>();
                if (p.keywords.empty())
                    throw ValidationError("lexicon: pattern '" + name + "' needs keywords");
                p.window = jp.value("window", 2);
            }
            p.require_decimal = jp.value("require_decimal", false);
            if (jp.contains("suffixes"))
                p.suffixes = jp.at("suffixes").get<std::vector<std::string>>();
            lex.slot_patterns[name] = std::move(p);
        }
        if (lex.airline_designators.empty())
            throw ValidationError("lexicon: designator map must be non-empty");
        if (lex.slot_patterns.empty())
            throw ValidationError("lexicon: slot patterns must be non-empty");
        return lex;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("lexicon: ") + e.what());
    }
}

inline void save_lexicon(const Lexicon& lex, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write lexicon file: " + path);
    out << lexicon_to_json(lex).dump(2) << "\n";
}

inline Lexicon load_lexicon(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open lexicon file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("lexicon: ") + e.what());
    }
    return lexicon_from_json(j);
}

namespace correction_detail {

struct Token {
    std::string text;
    std::size_t start = 0;
    std::size_t end = 0;
};

// Maximal runs of [alnum or '.'], with leading/trailing dots stripped so
// sentence punctuation never sticks to a number.
inline std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    std::size_t i = 0;
    auto is_word = [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '.';
    };
    while (i < text.size()) {
        while (i < text.size() && !is_word(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && is_word(text[j])) ++j;
        if (j > i) {
            std::size_t b = i, e = j;
            while (b < e && text[b] == '.') ++b;
            while (e > b && text[e - 1] == '.') --e;
            if (e > b) out.push_back({text.substr(b, e - b), b, e});
        }
        i = j;
    }
    return out;
}

inline bool all_digits(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    return true;
}

inline int digit_count(std::string_view s) {
    int n = 0;
    for (char c : s)
        if (std::isdigit(static_cast<unsigned char>(c))) ++n;
    return n;
}

// Whether a token is a value for the given pattern (keyword context aside).
inline bool token_matches_pattern(const std::string& tok, const SlotPattern& p) {
    std::string digits = tok;
    if (!p.suffixes.empty()) {
        for (const auto& suffix : p.suffixes) {
            if (tok.size() > suffix.size() && tok.ends_with(suffix) &&
                all_digits(std::string_view(tok).substr(0, tok.size() - suffix.size()))) {
                digits = tok.substr(0, tok.size() - suffix.size());
                break;
            }
        }
    }
    if (p.require_decimal) {
        const std::size_t dot = digits.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == digits.size()) return false;
        if (digits.find('.', dot + 1) != std::string::npos) return false;
        if (!all_digits(digits.substr(0, dot)) || !all_digits(digits.substr(dot + 1)))
            return false;
    } else if (!all_digits(digits)) {
        return false;
    }
    const int n = digit_count(digits);
    return n >= p.digits_min && n <= p.digits_max;
}

inline std::string lower_token(const std::string& s) { return detail::lower(s); }

}  // namespace correction_detail

// Lexicon-driven slot extraction: "digits" patterns match standalone numeric
// tokens, "keyword_digits" patterns need a keyword within `window` tokens on
// either side. Callsigns are matched via the designator map, either compact
// ("CCA1234") or spoken ("Air China 1234"). Slots are returned sorted by
// span; each token is claimed at most once (patterns in name order).
inline std::vector<SlotValue> extract_slots(const std::string& text, const Lexicon& lex) {
    using namespace correction_detail;
    const std::vector<Token> tokens = tokenize(text);
    std::vector<SlotValue> out;
    std::vector<bool> claimed(tokens.size(), false);

    // Callsigns first so their digits can never be read as values.
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (claimed[i]) continue;
        for (const auto& [designator, canonical] : lex.airline_designators) {
            const auto words = detail::split_ws(designator);
            // Compact form: one token equal to designator + digits.
            if (words.size() == 1 && tokens[i].text.size() > words[0].size() &&
                tokens[i].text.rfind(words[0], 0) == 0 &&
                all_digits(std::string_view(tokens[i].text).substr(words[0].size()))) {
                out.push_back({"callsign", tokens[i].text, tokens[i].start, tokens[i].end});
                claimed[i] = true;
                break;
            }
            // Spoken form: designator words followed by a digit token.
            if (i + words.size() < tokens.size()) {
                bool match = true;
                for (std::size_t w = 0; w < words.size(); ++w)
                    if (lower_token(tokens[i + w].text) != lower_token(words[w])) match = false;
                const Token& digits = tokens[i + words.size()];
                if (match && all_digits(digits.text)) {
                    out.push_back({"callsign", text.substr(tokens[i].start,
                                                           digits.end - tokens[i].start),
                                   tokens[i].start, digits.end});
                    for (std::size_t w = 0; w <= words.size(); ++w) claimed[i + w] = true;
                    break;
                }
            }
        }
    }

    for (const auto& [name, pattern] : lex.slot_patterns) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (claimed[i]) continue;
            if (!token_matches_pattern(tokens[i].text, pattern)) continue;
            if (pattern.kind == "keyword_digits") {
                bool keyword_near = false;
                const std::size_t lo = i >= std::size_t(pattern.window) ? i - pattern.window : 0;
                const std::size_t hi = std::min(tokens.size(), i + std::size_t(pattern.window) + 1);
                for (std::size_t k = lo; k < hi && !keyword_near; ++k) {
                    if (k == i) continue;
                    for (const auto& kw : pattern.keywords)
                        if (lower_token(tokens[k].text) == lower_token(kw)) keyword_near = true;
                }
                if (!keyword_near) continue;
            }
            out.push_back({name, tokens[i].text, tokens[i].start, tokens[i].end});
            claimed[i] = true;
        }
    }

    std::sort(out.begin(), out.end(),
              [](const SlotValue& a, const SlotValue& b) { return a.start < b.start; });
    return out;
}

struct CallsignSpan {
    std::string value;
    std::size_t start = 0;
    std::size_t end = 0;
};

// Locates the callsign in an utterance. An annotation with a callsign slot
// dominates: a valid span is used as-is, otherwise the annotated value is
// searched leftmost. Without an annotation the lexicon designators drive a
// leftmost designator-plus-digits match. Throws CallsignNotFound otherwise.
inline CallsignSpan parse_callsign(const std::string& text,
                                   const std::optional<SemanticAnnotation>& annotation,
                                   const Lexicon& lex) {
    if (annotation) {
        for (const auto& slot : annotation->slots) {
            if (slot.name != "callsign") continue;
            if (slot.end <= text.size() &&
                text.substr(slot.start, slot.end - slot.start) == slot.value)
                return {slot.value, slot.start, slot.end};
            const std::size_t at = text.find(slot.value);
            if (at != std::string::npos) return {slot.value, at, at + slot.value.size()};
        }
    }
    const CallsignSpan best = [&]() -> CallsignSpan {
        CallsignSpan found{"", std::string::npos, 0};
        for (const auto& slot : extract_slots(text, lex)) {
            if (slot.name == "callsign" && slot.start < found.start)
                found = {slot.value, slot.start, slot.end};
        }
        return found;
    }();
    if (best.start == std::string::npos)
        throw CallsignNotFound("no callsign found in: " + text);
    return best;
}

struct CorrectionOutcome {
    bool applied = false;
    std::string corrected;  // verbatim input when not applied
    std::string callsign;
};

// The reordering operator: remove the callsign span (with one adjacent
// comma separator), normalize whitespace, append ", <callsign>". Idempotent;
// when no callsign can be located the instruction passes through verbatim.
inline CorrectionOutcome reorder_correct(const std::string& instruction,
                                         const std::optional<SemanticAnnotation>& annotation,
                                         const Lexicon& lex) {
    CallsignSpan span;
    try {
        span = parse_callsign(instruction, annotation, lex);
    } catch (const CallsignNotFound&) {
        return {false, instruction, ""};
    }

    std::size_t s = span.start, e = span.end;
    if (s >= 2 && instruction.compare(s - 2, 2, ", ") == 0) {
        s -= 2;
    } else {
        if (e < instruction.size() && instruction[e] == ',') ++e;
        while (e < instruction.size() && instruction[e] == ' ') ++e;
    }
    std::string base = instruction.substr(0, s) + instruction.substr(e);
    while (true) {
        const std::size_t dbl = base.find("  ");
        if (dbl == std::string::npos) break;
        base.erase(dbl, 1);
    }
    base = detail::trim(base);
    while (!base.empty() && (base.back() == ',' || base.back() == ' ')) base.pop_back();
    return {true, base + ", " + span.value, span.value};
}

// Per-pair envelope carried to the verdict file and the evaluator.
struct MonitorReport {
    std::string id;
    std::optional<OpenLabel> gold;
    OpenLabel plugin_label = OpenLabel::Unknown;
    LlmVerdict verdict;
    std::optional<CorrectionOutcome> correction;
};

// Assembles the report and enforces the correction gate: anomalous labels
// (Incorrect, Incomplete, NonStandard) must come with a correction outcome;
// Correct and Unknown must not carry one.
inline MonitorReport package_report(std::string id, std::optional<OpenLabel> gold,
                                    OpenLabel plugin_label, LlmVerdict verdict,
                                    std::optional<CorrectionOutcome> correction) {
    const OpenLabel final_label = decide_final(verdict);
    const bool anomalous =
        final_label != OpenLabel::Correct && final_label != OpenLabel::Unknown;
    if (anomalous && !correction)
        throw ContractError("package_report: anomalous label for '" + id +
                            "' requires a correction outcome");
    MonitorReport report;
    report.id = std::move(id);
    report.gold = gold;
    report.plugin_label = plugin_label;
    report.verdict = std::move(verdict);
    if (anomalous) report.correction = std::move(correction);
    return report;
}

inline nlohmann::json report_to_json(const MonitorReport& r) {
    nlohmann::json j;
    j["id"] = r.id;
    if (r.gold)
        j["gold"] = to_string(*r.gold);
    else
        j["gold"] = nullptr;
    j["plugin_label"] = to_string(r.plugin_label);
    j["final_label"] = to_string(r.verdict.label);
    j["parse_ok"] = r.verdict.parse_ok;
    j["intent_1"] = r.verdict.intent_instruction;
    j["intent_2"] = r.verdict.intent_readback;
    auto slots = [](const std::vector<std::pair<std::string, std::string>>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [name, value] : v) arr.push_back({{"name", name}, {"value", value}});
        return arr;
    };
    j["slots_1"] = slots(r.verdict.slots_instruction);
    j["slots_2"] = slots(r.verdict.slots_readback);
    j["explanation"] = r.verdict.explanation;
    if (r.correction) {
        j["correction"] = {{"applied", r.correction->applied},
                           {"corrected", r.correction->corrected},
                           {"callsign", r.correction->callsign}};
    } else {
        j["correction"] = nullptr;
    }
    return j;
}

inline MonitorReport report_from_json(const nlohmann::json& j) {
    try {
        MonitorReport r;
        r.id = j.at("id").get<std::string>();
        if (!j.at("gold").is_null()) {
            const auto gold = label_from_string(j.at("gold").get<std::string>());
            if (!gold) throw ValidationError("report: bad gold label");
            r.gold = *gold;
        }
        const auto plugin = label_from_string(j.at("plugin_label").get<std::string>());
        const auto final_label = label_from_string(j.at("final_label").get<std::string>());
        if (!plugin || !final_label) throw ValidationError("report: bad label");
        r.plugin_label = *plugin;
        r.verdict.label = *final_label;
        r.verdict.parse_ok = j.at("parse_ok").get<bool>();
        r.verdict.intent_instruction = j.at("intent_1").get<std::string>();
        r.verdict.intent_readback = j.at("intent_2").get<std::string>();
        for (const auto& s : j.at("slots_1"))
            r.verdict.slots_instruction.emplace_back(s.at("name").get<std::string>(),
                                                     s.at("value").get<std::string>());
        for (const auto& s : j.at("slots_2"))
            r.verdict.slots_readback.emplace_back(s.at("name").get<std::string>(),
                                                  s.at("value").get<std::string>());
        r.verdict.explanation = j.at("explanation").get<std::string>();
        if (!j.at("correction").is_null()) {
            const auto& jc = j.at("correction");
            r.correction = CorrectionOutcome{jc.at("applied").get<bool>(),
                                             jc.at("corrected").get<std::string>(),
                                             jc.at("callsign").get<std::string>()};
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
}

}  // namespace scope
