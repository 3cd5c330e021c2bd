#pragma once

// Chain-of-thought prompting for readback judgment: semantic enrichment of
// retrieved support examples, deterministic prompt rendering from a
// versioned template, and tolerant parsing of model verdicts.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/corpus.hpp"
#include "scope/dear.hpp"
#include "scope/detail.hpp"

namespace scope {

struct PromptTemplate {
    std::string version;
    std::string system_text;
    std::string user_text;  // carries the {{...}} placeholders
};

// Template files: first line "template_version: <v>", then "--- system ---"
// and "--- user ---" sections.
inline PromptTemplate parse_template(const std::string& text) {
    PromptTemplate tpl;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("template_version:", 0) != 0)
        throw ParseError("template: first line must be 'template_version: <v>'");
    tpl.version = detail::trim(line.substr(std::string("template_version:").size()));
    if (tpl.version.empty()) throw ParseError("template: empty version");

    std::string* section = nullptr;
    std::string system_text, user_text;
    while (std::getline(in, line)) {
        if (line == "--- system ---") {
            section = &system_text;
        } else if (line == "--- user ---") {
            section = &user_text;
        } else {
            if (!section) throw ParseError("template: content before any section marker");
            *section += line;
            *section += '\n';
        }
    }
    if (user_text.empty()) throw ParseError("template: missing user section");
    tpl.system_text = system_text;
    tpl.user_text = user_text;
    return tpl;
}

inline PromptTemplate load_template(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open template file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_template(buf.str());
}

// The JSON shape the model must answer with. Field _1 refers to the
// instruction, _2 to the readback.
inline const std::string& verdict_schema() {
    static const std::string schema =
        R"({"intent_1": "...", "slots_1": [{"name": "...", "value": "..."}], )"
        R"("intent_2": "...", "slots_2": [{"name": "...", "value": "..."}], )"
        R"("label": "correct|incorrect|incomplete|non_standard|unknown", "explanation": "..."})";
    return schema;
}

// A support example paired with the open-set classifier's label for it.
struct EnrichedExample {
    UtterancePair pair;
    OpenLabel plugin = OpenLabel::Unknown;
    double anchor_sim = 0.0;
};

// Resolves support items against the corpus and attaches plug-in labels.
// Every support pair must exist, carry both annotations, and have a plug-in
// label entry; violations name the offending pair id.
inline std::vector<EnrichedExample> enrich_support(
    const std::vector<SupportItem>& support, const std::map<std::string, UtterancePair>& by_id,
    const std::map<std::string, OpenLabel>& plugin_labels) {
    std::vector<EnrichedExample> out;
    out.reserve(support.size());
    for (const auto& item : support) {
        const auto pair_it = by_id.find(item.id);
        if (pair_it == by_id.end())
            throw ContractError("enrich_support: pair '" + item.id + "' not in corpus");
        const UtterancePair& pair = pair_it->second;
        if (!pair.annotation_instruction || !pair.annotation_readback)
            throw ContractError("enrich_support: pair '" + item.id + "' lacks annotations");
        const auto plugin_it = plugin_labels.find(item.id);
        if (plugin_it == plugin_labels.end())
            throw ContractError("enrich_support: pair '" + item.id + "' has no plug-in label");
        out.push_back({pair, plugin_it->second, item.anchor_sim});
    }
    return out;
}

struct AtcotOptions {
    bool include_plugin = true;     // false: omit plug-in lines everywhere
    bool example_semantics = true;  // false: omit semantics lines in examples
    bool test_semantics = false;    // true: reveal gold test semantics
};

struct PromptBundle {
    std::string system_text;
    std::string user_text;
    std::string template_version;
    std::string test_id;
    OpenLabel fallback_label = OpenLabel::Unknown;  // plug-in label or Unknown
};

namespace atcot_detail {

// "intent=<intent>; slots=[a=x; b=y]" - machine-parseable on purpose.
inline std::string semantics_line(const SemanticAnnotation& ann) {
    std::string out = "intent=" + ann.intent + "; slots=[";
    for (std::size_t i = 0; i < ann.slots.size(); ++i) {
        if (i) out += "; ";
        out += ann.slots[i].name + "=" + ann.slots[i].value;
    }
    out += "]";
    return out;
}

inline void strip_placeholder_lines(std::string& text, std::string_view placeholder) {
    std::size_t pos;
    while ((pos = text.find(placeholder)) != std::string::npos) {
        std::size_t line_start = text.rfind('\n', pos);
        line_start = line_start == std::string::npos ? 0 : line_start + 1;
        std::size_t line_end = text.find('\n', pos);
        line_end = line_end == std::string::npos ? text.size() : line_end + 1;
        text.erase(line_start, line_end - line_start);
    }
}

}  // namespace atcot_detail

// Deterministic rendering. Pair ids are embedded in every block, so
// differing support sets or test pairs always yield differing bytes.
inline PromptBundle render_prompt(const PromptTemplate& tpl,
                                  const std::vector<EnrichedExample>& examples,
                                  const UtterancePair& test, OpenLabel test_plugin,
                                  const AtcotOptions& opts) {
    std::string blocks;
    if (!examples.empty()) {
        blocks += "Reference examples, most relevant first:\n\n";
        for (std::size_t i = 0; i < examples.size(); ++i) {
            const auto& ex = examples[i];
            blocks += "### Example " + std::to_string(i + 1) + " (id: " + ex.pair.id + ")\n";
            blocks += "ATCo instruction: " + ex.pair.instruction + "\n";
            if (opts.example_semantics)
                blocks += "Instruction semantics: " +
                          atcot_detail::semantics_line(*ex.pair.annotation_instruction) + "\n";
            blocks += "Pilot readback: " + ex.pair.readback + "\n";
            if (opts.example_semantics)
                blocks += "Readback semantics: " +
                          atcot_detail::semantics_line(*ex.pair.annotation_readback) + "\n";
            if (opts.include_plugin)
                blocks += "Plug-in label: " + to_string(ex.plugin) + "\n";
            blocks += "Gold label: " + to_string(*ex.pair.label) + "\n\n";
        }
    }

    std::string test_semantics;
    if (opts.test_semantics) {
        if (!test.annotation_instruction || !test.annotation_readback)
            throw ContractError("render_prompt: test pair '" + test.id +
                                "' lacks annotations for test-semantics mode");
        test_semantics =
            "Instruction semantics: " +
            atcot_detail::semantics_line(*test.annotation_instruction) + "\n" +
            "Readback semantics: " + atcot_detail::semantics_line(*test.annotation_readback) +
            "\n" + "The semantics above are given; infer only the label.\n";
    }

    std::string user = tpl.user_text;
    if (!opts.include_plugin)
        atcot_detail::strip_placeholder_lines(user, "{{plugin_label}}");
    detail::replace_all(user, "{{examples}}", blocks);
    detail::replace_all(user, "{{test_id}}", test.id);
    detail::replace_all(user, "{{instruction}}", test.instruction);
    detail::replace_all(user, "{{readback}}", test.readback);
    detail::replace_all(user, "{{test_semantics}}", test_semantics);
    detail::replace_all(user, "{{plugin_label}}", to_string(test_plugin));
    detail::replace_all(user, "{{schema}}", verdict_schema());
    if (user.find("{{") != std::string::npos)
        throw ContractError("render_prompt: unresolved placeholder in template '" +
                            tpl.version + "'");

    PromptBundle bundle;
    bundle.system_text = tpl.system_text;
    bundle.user_text = user;
    bundle.template_version = tpl.version;
    bundle.test_id = test.id;
    bundle.fallback_label = opts.include_plugin ? test_plugin : OpenLabel::Unknown;
    return bundle;
}

struct LlmVerdict {
    OpenLabel label = OpenLabel::Unknown;
    std::string intent_instruction;
    std::string intent_readback;
    std::vector<std::pair<std::string, std::string>> slots_instruction;  // name, value
    std::vector<std::pair<std::string, std::string>> slots_readback;
    std::string explanation;
    bool parse_ok = false;
    std::string raw;  // verbatim model output the verdict was read from
};

namespace atcot_detail {

// First balanced top-level {...} region starting at or after `from`,
// honoring JSON string and escape rules. Returns false when none exists.
inline bool next_object_span(const std::string& text, std::size_t from, std::size_t& start,
                             std::size_t& end) {
    std::size_t open = text.find('{', from);
    while (open != std::string::npos) {
        int depth = 0;
        bool in_string = false, escaped = false;
        for (std::size_t i = open; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (escaped)
                    escaped = false;
                else if (c == '\\')
                    escaped = true;
                else if (c == '"')
                    in_string = false;
            } else if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                --depth;
                if (depth == 0) {
                    start = open;
                    end = i + 1;
                    return true;
                }
            }
        }
        open = text.find('{', open + 1);
    }
    return false;
}

inline std::vector<std::pair<std::string, std::string>> read_slots(const nlohmann::json& j,
                                                                   const char* key) {
    std::vector<std::pair<std::string, std::string>> out;
    if (!j.contains(key) || !j.at(key).is_array()) return out;
    for (const auto& s : j.at(key)) {
        if (!s.is_object()) continue;
        std::string name, value;
        if (s.contains("name") && s.at("name").is_string()) name = s.at("name").get<std::string>();
        if (s.contains("value")) {
            const auto& v = s.at("value");
            value = v.is_string() ? v.get<std::string>() : v.dump();
        }
        if (!name.empty()) out.emplace_back(std::move(name), std::move(value));
    }
    return out;
}

}  // namespace atcot_detail

// Extracts the first well-formed verdict object from raw model output.
// Never throws: any failure falls back to the plug-in label with
// parse_ok=false and an explanation noting the fallback.
inline LlmVerdict parse_verdict(const std::string& raw, OpenLabel fallback) {
    std::size_t from = 0, start = 0, end = 0;
    while (atcot_detail::next_object_span(raw, from, start, end)) {
        from = start + 1;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(raw.substr(start, end - start));
        } catch (const nlohmann::json::exception&) {
            continue;
        }
        if (!j.is_object() || !j.contains("label") || !j.at("label").is_string()) continue;
        const auto label = label_from_string(j.at("label").get<std::string>());
        if (!label) continue;

        LlmVerdict v;
        v.raw = raw;
        v.label = *label;
        v.parse_ok = true;
        if (j.contains("intent_1") && j.at("intent_1").is_string())
            v.intent_instruction = j.at("intent_1").get<std::string>();
        if (j.contains("intent_2") && j.at("intent_2").is_string())
            v.intent_readback = j.at("intent_2").get<std::string>();
        v.slots_instruction = atcot_detail::read_slots(j, "slots_1");
        v.slots_readback = atcot_detail::read_slots(j, "slots_2");
        if (j.contains("explanation") && j.at("explanation").is_string())
            v.explanation = j.at("explanation").get<std::string>();
        return v;
    }
    LlmVerdict v;
    v.raw = raw;
    v.label = fallback;
    v.parse_ok = false;
    v.explanation = "fallback: model output had no parseable verdict; using plug-in label";
    return v;
}

// The verdict's label is the pipeline's final answer.
inline OpenLabel decide_final(const LlmVerdict& verdict) { return verdict.label; }

}  // namespace scope
