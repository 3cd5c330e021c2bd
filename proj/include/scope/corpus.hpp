#pragma once

// Corpus model for instruction/readback pairs: JSONL loading and saving,
// per-split class distributions, and seeded synthesis of anomalous readbacks
// (Incorrect / Incomplete / NonStandard) from Correct pairs.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/detail.hpp"

namespace scope {

// Known classes 1..4; Unknown is reserved for open-set rejection and never
// appears as a training label.
enum class OpenLabel : int {
    Correct = 1,
    Incorrect = 2,
    Incomplete = 3,
    NonStandard = 4,
    Unknown = 5,
};

inline constexpr int kKnownClassCount = 4;

inline std::string to_string(OpenLabel label) {
    switch (label) {
        case OpenLabel::Correct: return "correct";
        case OpenLabel::Incorrect: return "incorrect";
        case OpenLabel::Incomplete: return "incomplete";
        case OpenLabel::NonStandard: return "non_standard";
        case OpenLabel::Unknown: return "unknown";
    }
    throw ContractError("to_string: invalid OpenLabel");
}

// Case-insensitive, accepts '-' for '_'. Returns nullopt for anything else.
inline std::optional<OpenLabel> label_from_string(std::string_view text) {
    std::string s = detail::lower(detail::trim(text));
    for (auto& c : s)
        if (c == '-') c = '_';
    if (s == "correct") return OpenLabel::Correct;
    if (s == "incorrect") return OpenLabel::Incorrect;
    if (s == "incomplete") return OpenLabel::Incomplete;
    if (s == "non_standard" || s == "nonstandard") return OpenLabel::NonStandard;
    if (s == "unknown") return OpenLabel::Unknown;
    return std::nullopt;
}

// Half-open byte span [start, end) into the owning utterance.
struct SlotValue {
    std::string name;
    std::string value;
    std::size_t start = 0;
    std::size_t end = 0;
};

struct SemanticAnnotation {
    std::string intent;
    std::vector<SlotValue> slots;  // sorted by start, non-overlapping

    const SlotValue* find(std::string_view name) const {
        for (const auto& s : slots)
            if (s.name == name) return &s;
        return nullptr;
    }
};

// Synthesis lineage. mutation is "incorrect", "incomplete" or "non_standard";
// the remaining fields depend on the mutation kind.
struct Provenance {
    std::string source_id;
    std::string mutation;
    std::string slot;       // mutated or deleted slot type
    std::string old_value;  // incorrect only
    std::string new_value;  // incorrect only
    std::string kind;       // non_standard only: "substitution" or "reorder"
    std::string detail;     // non_standard only: phrase or "callsign_fronted"
};

struct UtterancePair {
    std::string id;
    std::string instruction;
    std::string readback;
    std::optional<OpenLabel> label;
    std::string split;  // "train", "test" or "calibration"
    std::optional<SemanticAnnotation> annotation_instruction;
    std::optional<SemanticAnnotation> annotation_readback;
    std::optional<Provenance> provenance;
};

using Corpus = std::vector<UtterancePair>;

namespace corpus_detail {

inline void validate_annotation(const SemanticAnnotation& ann, const std::string& text,
                                const std::string& pair_id, const char* which) {
    std::size_t prev_end = 0;
    bool first = true;
    for (const auto& slot : ann.slots) {
        if (slot.end < slot.start || slot.end > text.size())
            throw ValidationError("pair " + pair_id + ": " + which + " slot '" + slot.name +
                                  "' span out of bounds");
        if (text.substr(slot.start, slot.end - slot.start) != slot.value)
            throw ValidationError("pair " + pair_id + ": " + which + " slot '" + slot.name +
                                  "' value does not match its span");
        if (!first && slot.start < prev_end)
            throw ValidationError("pair " + pair_id + ": " + which +
                                  " slots overlap or are unsorted");
        prev_end = slot.end;
        first = false;
    }
}

inline SemanticAnnotation annotation_from_json(const nlohmann::json& j) {
    SemanticAnnotation ann;
    ann.intent = j.at("intent").get<std::string>();
    if (j.contains("slots")) {
        for (const auto& js : j.at("slots")) {
            SlotValue s;
            s.name = js.at("name").get<std::string>();
            s.value = js.at("value").get<std::string>();
            s.start = js.at("start").get<std::size_t>();
            s.end = js.at("end").get<std::size_t>();
            ann.slots.push_back(std::move(s));
        }
    }
    return ann;
}

inline nlohmann::json annotation_to_json(const SemanticAnnotation& ann) {
    nlohmann::json j;
    j["intent"] = ann.intent;
    auto slots = nlohmann::json::array();
    for (const auto& s : ann.slots)
        slots.push_back({{"name", s.name}, {"value", s.value}, {"start", s.start}, {"end", s.end}});
    j["slots"] = std::move(slots);
    return j;
}

}  // namespace corpus_detail

// Parses one corpus from JSONL text. Line numbers are 1-based; blank lines
// are ignored. Duplicate ids, bad spans, unknown train labels and non-Unknown
// calibration labels are validation errors.
inline Corpus read_corpus_text(std::string_view text) {
    Corpus corpus;
    std::set<std::string> seen_ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t eol = text.find('\n', pos);
        const std::string_view line =
            text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
        pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        if (detail::trim(line).empty()) continue;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }

        UtterancePair p;
        try {
            p.id = j.at("id").get<std::string>();
            p.instruction = j.at("instruction").get<std::string>();
            p.readback = j.at("readback").get<std::string>();
            p.split = j.at("split").get<std::string>();
            if (j.contains("label") && !j.at("label").is_null()) {
                const auto text_label = j.at("label").get<std::string>();
                const auto parsed = label_from_string(text_label);
                if (!parsed)
                    throw ValidationError("pair " + p.id + ": unrecognized label '" + text_label + "'");
                p.label = *parsed;
            }
            if (j.contains("annotation_instruction") && !j.at("annotation_instruction").is_null())
                p.annotation_instruction =
                    corpus_detail::annotation_from_json(j.at("annotation_instruction"));
            if (j.contains("annotation_readback") && !j.at("annotation_readback").is_null())
                p.annotation_readback =
                    corpus_detail::annotation_from_json(j.at("annotation_readback"));
            if (j.contains("provenance") && !j.at("provenance").is_null()) {
                const auto& jp = j.at("provenance");
                Provenance prov;
                prov.source_id = jp.value("source_id", "");
                prov.mutation = jp.value("mutation", "");
                prov.slot = jp.value("slot", "");
                prov.old_value = jp.value("old", "");
                prov.new_value = jp.value("new", "");
                prov.kind = jp.value("kind", "");
                prov.detail = jp.value("detail", "");
                p.provenance = std::move(prov);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }

        if (p.id.empty() || p.instruction.empty() || p.readback.empty())
            throw ValidationError("line " + std::to_string(line_no) +
                                  ": id, instruction and readback must be non-empty");
        if (p.split != "train" && p.split != "test" && p.split != "calibration")
            throw ValidationError("pair " + p.id + ": invalid split '" + p.split + "'");
        if (!seen_ids.insert(p.id).second)
            throw ValidationError("duplicate id '" + p.id + "'");
        if (p.split == "train" && p.label && *p.label == OpenLabel::Unknown)
            throw ValidationError("pair " + p.id + ": Unknown is not a training label");
        if (p.split == "calibration" && p.label && *p.label != OpenLabel::Unknown)
            throw ValidationError("pair " + p.id + ": calibration pairs must be Unknown or unlabeled");
        if (p.annotation_instruction)
            corpus_detail::validate_annotation(*p.annotation_instruction, p.instruction, p.id,
                                               "instruction");
        if (p.annotation_readback)
            corpus_detail::validate_annotation(*p.annotation_readback, p.readback, p.id, "readback");

        corpus.push_back(std::move(p));
    }
    return corpus;
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open corpus file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return read_corpus_text(buf.str());
}

inline std::string corpus_to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& p : corpus) {
        nlohmann::json j;
        j["id"] = p.id;
        j["instruction"] = p.instruction;
        j["readback"] = p.readback;
        if (p.label) j["label"] = to_string(*p.label);
        j["split"] = p.split;
        if (p.annotation_instruction)
            j["annotation_instruction"] = corpus_detail::annotation_to_json(*p.annotation_instruction);
        if (p.annotation_readback)
            j["annotation_readback"] = corpus_detail::annotation_to_json(*p.annotation_readback);
        if (p.provenance) {
            nlohmann::json jp;
            jp["source_id"] = p.provenance->source_id;
            jp["mutation"] = p.provenance->mutation;
            if (!p.provenance->slot.empty()) jp["slot"] = p.provenance->slot;
            if (!p.provenance->old_value.empty()) jp["old"] = p.provenance->old_value;
            if (!p.provenance->new_value.empty()) jp["new"] = p.provenance->new_value;
            if (!p.provenance->kind.empty()) jp["kind"] = p.provenance->kind;
            if (!p.provenance->detail.empty()) jp["detail"] = p.provenance->detail;
            j["provenance"] = std::move(jp);
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write corpus file: " + path);
    out << corpus_to_jsonl(corpus);
}

inline Corpus filter_split(const Corpus& corpus, std::string_view split) {
    Corpus out;
    for (const auto& p : corpus)
        if (p.split == split) out.push_back(p);
    return out;
}

// Builds an annotation by locating each value's first occurrence at or after
// the previous slot's end, so repeated values resolve left to right. Throws
// ContractError if a value cannot be found.
inline SemanticAnnotation make_annotation(
    const std::string& text, std::string intent,
    const std::vector<std::pair<std::string, std::string>>& slots) {
    SemanticAnnotation ann;
    ann.intent = std::move(intent);
    std::size_t cursor = 0;
    for (const auto& [name, value] : slots) {
        const std::size_t at = text.find(value, cursor);
        if (at == std::string::npos)
            throw ContractError("make_annotation: value '" + value + "' not found in text");
        ann.slots.push_back({name, value, at, at + value.size()});
        cursor = at + value.size();
    }
    return ann;
}

struct DistributionRow {
    std::size_t count = 0;
    double percent = 0.0;  // of the split total, one decimal place
};

// split -> label name (or "unlabeled") -> count and percentage.
using Distribution = std::map<std::string, std::map<std::string, DistributionRow>>;

inline Distribution class_distribution(const Corpus& corpus) {
    Distribution dist;
    std::map<std::string, std::size_t> totals;
    for (const auto& p : corpus) {
        const std::string key = p.label ? to_string(*p.label) : "unlabeled";
        dist[p.split][key].count += 1;
        totals[p.split] += 1;
    }
    for (auto& [split, rows] : dist)
        for (auto& [label, row] : rows)
            row.percent = detail::round1(100.0 * double(row.count) / double(totals[split]));
    return dist;
}

// Controls synthesize_anomalies. Ratios are fractions of the input Correct
// pairs converted to each class; the remainder stays Correct. Defaults follow
// the usual corpus proportions (about 25/15/7 percent).
struct SynthesisRecipe {
    std::uint64_t seed = 42;
    double incorrect_ratio = 0.253;
    double incomplete_ratio = 0.153;
    double non_standard_ratio = 0.065;
    // Slot types eligible for value mutation (Incorrect).
    std::vector<std::string> safety_critical_slots;
    // Replacement values per slot type; a mutation needs an alternative value.
    std::map<std::string, std::vector<std::string>> value_sets;
    // Slot types whose deletion yields Incomplete; empty means use
    // safety_critical_slots.
    std::vector<std::string> incomplete_slots;
    // Canonical phrase -> non-standard phrasing, applied on word boundaries.
    std::map<std::string, std::string> substitutions;
};

struct SkipRecord {
    std::string id;
    std::string reason;
};

struct SynthesisResult {
    Corpus anomalies;                       // newly created pairs
    std::vector<SkipRecord> skipped;        // considered but not mutable
    std::vector<std::string> consumed_ids;  // sources that were mutated
};

namespace corpus_detail {

// Words with surrounding punctuation stripped; used for multiset and
// subsequence checks over synthesized readbacks.
inline std::vector<std::string> content_tokens(std::string_view text) {
    std::vector<std::string> out;
    for (auto& tok : detail::split_ws(text)) {
        std::size_t b = 0, e = tok.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(tok[b])) &&
               static_cast<unsigned char>(tok[b]) < 0x80)
            ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(tok[e - 1])) &&
               static_cast<unsigned char>(tok[e - 1]) < 0x80)
            --e;
        if (e > b) out.push_back(tok.substr(b, e - b));
    }
    return out;
}

// Shifts slot spans after an in-place edit of length delta at [at, at+removed).
inline void shift_slots(std::vector<SlotValue>& slots, std::size_t at, std::size_t removed,
                        std::size_t inserted) {
    for (auto& s : slots) {
        if (s.start >= at + removed) {
            s.start = s.start - removed + inserted;
            s.end = s.end - removed + inserted;
        }
    }
}

// Finds a word-boundary occurrence of phrase; npos if absent.
inline std::size_t find_phrase(const std::string& text, const std::string& phrase) {
    std::size_t pos = 0;
    while ((pos = text.find(phrase, pos)) != std::string::npos) {
        const bool left_ok =
            pos == 0 || !std::isalnum(static_cast<unsigned char>(text[pos - 1]));
        const std::size_t end = pos + phrase.size();
        const bool right_ok =
            end == text.size() || !std::isalnum(static_cast<unsigned char>(text[end]));
        if (left_ok && right_ok) return pos;
        ++pos;
    }
    return std::string::npos;
}

}  // namespace corpus_detail

// Derives anomalous pairs from Correct pairs. Deterministic under the recipe
// seed. Sources must carry readback annotations; each source is consumed by
// at most one mutation. Pairs that were drawn but cannot support the target
// mutation are reported in `skipped` with a reason.
inline SynthesisResult synthesize_anomalies(const Corpus& correct_pairs,
                                            const SynthesisRecipe& recipe) {
    for (const auto& p : correct_pairs) {
        if (!p.label || *p.label != OpenLabel::Correct)
            throw ContractError("synthesize_anomalies: input pair '" + p.id + "' is not Correct");
        if (!p.annotation_readback)
            throw ContractError("synthesize_anomalies: pair '" + p.id +
                                "' lacks a readback annotation");
    }

    const std::vector<std::string>& incomplete_types =
        recipe.incomplete_slots.empty() ? recipe.safety_critical_slots : recipe.incomplete_slots;
    auto contains = [](const std::vector<std::string>& v, const std::string& x) {
        return std::find(v.begin(), v.end(), x) != v.end();
    };

    detail::Rng rng(recipe.seed);
    std::vector<std::size_t> order(correct_pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    SynthesisResult result;
    std::set<std::size_t> consumed;

    struct Target {
        OpenLabel label;
        std::size_t quota;
    };
    const auto n = double(correct_pairs.size());
    const Target targets[] = {
        {OpenLabel::Incorrect, std::size_t(recipe.incorrect_ratio * n + 0.5)},
        {OpenLabel::Incomplete, std::size_t(recipe.incomplete_ratio * n + 0.5)},
        {OpenLabel::NonStandard, std::size_t(recipe.non_standard_ratio * n + 0.5)},
    };

    for (const auto& target : targets) {
        std::size_t made = 0;
        for (std::size_t idx : order) {
            if (made >= target.quota) break;
            if (consumed.count(idx)) continue;
            const UtterancePair& src = correct_pairs[idx];
            UtterancePair out = src;
            out.label = target.label;
            Provenance prov;
            prov.source_id = src.id;
            prov.mutation = to_string(target.label);

            if (target.label == OpenLabel::Incorrect) {
                // Eligible: a safety-critical readback slot with an alternative value.
                std::vector<const SlotValue*> eligible;
                for (const auto& s : src.annotation_readback->slots) {
                    if (!contains(recipe.safety_critical_slots, s.name)) continue;
                    auto it = recipe.value_sets.find(s.name);
                    if (it == recipe.value_sets.end()) continue;
                    for (const auto& v : it->second)
                        if (v != s.value) {
                            eligible.push_back(&s);
                            break;
                        }
                }
                if (eligible.empty()) {
                    result.skipped.push_back({src.id, "no mutable safety-critical slot"});
                    continue;
                }
                const SlotValue* slot = eligible[rng.below(eligible.size())];
                std::vector<std::string> alternatives;
                for (const auto& v : recipe.value_sets.at(slot->name))
                    if (v != slot->value) alternatives.push_back(v);
                const std::string new_value = alternatives[rng.below(alternatives.size())];

                out.readback = src.readback.substr(0, slot->start) + new_value +
                               src.readback.substr(slot->end);
                auto& slots = out.annotation_readback->slots;
                const std::size_t at = slot->start, removed = slot->end - slot->start;
                for (auto& s : slots) {
                    if (s.start == slot->start && s.name == slot->name) {
                        s.value = new_value;
                        s.end = s.start + new_value.size();
                    }
                }
                corpus_detail::shift_slots(slots, at, removed, new_value.size());
                prov.slot = slot->name;
                prov.old_value = slot->value;
                prov.new_value = new_value;
            } else if (target.label == OpenLabel::Incomplete) {
                std::vector<const SlotValue*> eligible;
                for (const auto& s : src.annotation_readback->slots)
                    if (contains(incomplete_types, s.name)) eligible.push_back(&s);
                if (eligible.empty()) {
                    result.skipped.push_back({src.id, "no deletable required slot"});
                    continue;
                }
                const SlotValue* slot = eligible[rng.below(eligible.size())];
                std::string text = src.readback.substr(0, slot->start) +
                                   src.readback.substr(slot->end);
                auto& slots = out.annotation_readback->slots;
                slots.erase(std::remove_if(slots.begin(), slots.end(),
                                           [&](const SlotValue& s) {
                                               return s.start == slot->start &&
                                                      s.name == slot->name;
                                           }),
                            slots.end());
                corpus_detail::shift_slots(slots, slot->start, slot->end - slot->start, 0);
                // Cosmetic cleanup; token content is unaffected.
                while (true) {
                    const std::size_t dbl = text.find("  ");
                    if (dbl == std::string::npos) break;
                    text.erase(dbl, 1);
                    corpus_detail::shift_slots(slots, dbl, 1, 0);
                }
                const std::size_t odd = text.find(" ,");
                if (odd != std::string::npos) {
                    text.erase(odd, 1);
                    corpus_detail::shift_slots(slots, odd, 1, 0);
                }
                while (!text.empty() && text.front() == ' ') {
                    text.erase(0, 1);
                    corpus_detail::shift_slots(slots, 0, 1, 0);
                }
                while (!text.empty() && text.back() == ' ') text.pop_back();
                out.readback = text;
                prov.slot = slot->name;
                prov.old_value = slot->value;
            } else {
                // NonStandard: phrase substitution when one applies, else move
                // the callsign to the front. Slot values are never altered.
                std::string applicable_phrase;
                for (const auto& [canon, sub] : recipe.substitutions) {
                    if (corpus_detail::find_phrase(src.readback, canon) != std::string::npos) {
                        applicable_phrase = canon;
                        break;
                    }
                }
                const SlotValue* callsign = nullptr;
                for (const auto& s : src.annotation_readback->slots)
                    if (s.name == "callsign") callsign = &s;
                const bool can_reorder = callsign && callsign->start > 0;

                bool use_substitution;
                if (!applicable_phrase.empty() && can_reorder)
                    use_substitution = rng.below(2) == 0;
                else if (!applicable_phrase.empty())
                    use_substitution = true;
                else if (can_reorder)
                    use_substitution = false;
                else {
                    result.skipped.push_back({src.id, "no applicable non-standard rewrite"});
                    continue;
                }

                if (use_substitution) {
                    const std::string& sub = recipe.substitutions.at(applicable_phrase);
                    const std::size_t at =
                        corpus_detail::find_phrase(src.readback, applicable_phrase);
                    // Refuse edits that overlap a slot span.
                    bool overlaps = false;
                    for (const auto& s : src.annotation_readback->slots)
                        if (at < s.end && at + applicable_phrase.size() > s.start) overlaps = true;
                    if (overlaps) {
                        result.skipped.push_back({src.id, "substitution overlaps a slot"});
                        continue;
                    }
                    out.readback = src.readback.substr(0, at) + sub +
                                   src.readback.substr(at + applicable_phrase.size());
                    corpus_detail::shift_slots(out.annotation_readback->slots, at,
                                               applicable_phrase.size(), sub.size());
                    prov.kind = "substitution";
                    prov.detail = applicable_phrase + " -> " + sub;
                } else {
                    // "climb and maintain 8900 meters, CCA1234"
                    //   -> "CCA1234, climb and maintain 8900 meters"
                    std::string rest = src.readback.substr(0, callsign->start) +
                                       src.readback.substr(callsign->end);
                    rest = detail::trim(rest);
                    while (!rest.empty() && (rest.back() == ',' || rest.back() == ' '))
                        rest.pop_back();
                    const std::string prefix = callsign->value + ", ";
                    // Spans are rebuilt from scratch: slots other than the
                    // callsign keep their relative order inside `rest`.
                    std::vector<SlotValue> rebuilt;
                    rebuilt.push_back({"callsign", callsign->value, 0, callsign->value.size()});
                    std::size_t cursor = 0;
                    for (const auto& s : src.annotation_readback->slots) {
                        if (s.start == callsign->start && s.name == "callsign") continue;
                        const std::size_t at = rest.find(s.value, cursor);
                        if (at == std::string::npos)
                            throw ContractError("synthesize_anomalies: reorder lost slot '" +
                                                s.name + "' in pair '" + src.id + "'");
                        rebuilt.push_back({s.name, s.value, prefix.size() + at,
                                           prefix.size() + at + s.value.size()});
                        cursor = at + s.value.size();
                    }
                    out.readback = prefix + rest;
                    out.annotation_readback->slots = std::move(rebuilt);
                    prov.kind = "reorder";
                    prov.detail = "callsign_fronted";
                }
            }

            out.id = src.id + "-" + to_string(target.label);
            out.provenance = std::move(prov);
            corpus_detail::validate_annotation(*out.annotation_readback, out.readback, out.id,
                                               "readback");
            result.anomalies.push_back(std::move(out));
            result.consumed_ids.push_back(src.id);
            consumed.insert(idx);
            ++made;
        }
    }
    return result;
}

}  // namespace scope
