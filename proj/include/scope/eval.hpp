#pragma once

// Evaluation: closed-set classification metrics, open-set summary (known
// macro-F1, unknown F1, their harmonic mean), semantic frame metrics,
// plug-in/LLM synergy counts and correction rates.

#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/correction.hpp"
#include "scope/corpus.hpp"
#include "scope/detail.hpp"

namespace scope {

struct ClassPRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;  // gold count
};

struct ClassificationReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;     // unweighted mean over classes present in golds
    double weighted_f1 = 0.0;  // support-weighted alternative
    std::map<OpenLabel, ClassPRF> per_class;
    std::size_t total = 0;
};

namespace eval_detail {

inline double f1_of(double precision, double recall) {
    const double denom = precision + recall;
    return denom == 0.0 ? 0.0 : 2.0 * precision * recall / denom;
}

struct Tally {
    std::size_t tp = 0, fp = 0, fn = 0;
};

inline std::map<OpenLabel, Tally> tally(const std::vector<OpenLabel>& preds,
                                        const std::vector<OpenLabel>& golds) {
    std::map<OpenLabel, Tally> out;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == golds[i]) {
            ++out[golds[i]].tp;
        } else {
            ++out[preds[i]].fp;
            ++out[golds[i]].fn;
        }
    }
    return out;
}

inline ClassPRF prf_from(const Tally& t) {
    ClassPRF m;
    m.support = t.tp + t.fn;
    const double pd = double(t.tp + t.fp), rd = double(t.tp + t.fn);
    m.precision = pd == 0.0 ? 0.0 : t.tp / pd;
    m.recall = rd == 0.0 ? 0.0 : t.tp / rd;
    m.f1 = f1_of(m.precision, m.recall);
    return m;
}

}  // namespace eval_detail

inline ClassificationReport classification_metrics(const std::vector<OpenLabel>& preds,
                                                   const std::vector<OpenLabel>& golds) {
    if (preds.size() != golds.size())
        throw ContractError("classification_metrics: preds and golds differ in length");
    if (preds.empty()) throw ContractError("classification_metrics: empty input");

    ClassificationReport rep;
    rep.total = preds.size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i];
    rep.accuracy = double(hits) / double(rep.total);

    const auto tallies = eval_detail::tally(preds, golds);
    double macro_sum = 0.0, weighted_sum = 0.0;
    std::size_t gold_classes = 0;
    for (const auto& [label, t] : tallies) {
        const ClassPRF m = eval_detail::prf_from(t);
        rep.per_class[label] = m;
        if (m.support > 0) {
            macro_sum += m.f1;
            weighted_sum += m.f1 * double(m.support);
            ++gold_classes;
        }
    }
    rep.macro_f1 = gold_classes == 0 ? 0.0 : macro_sum / double(gold_classes);
    rep.weighted_f1 = weighted_sum / double(rep.total);
    return rep;
}

inline double harmonic_mean(double a, double b) {
    return a + b == 0.0 ? 0.0 : 2.0 * a * b / (a + b);
}

struct OpenSetMetrics {
    double known_f1 = 0.0;    // macro-F1 over known classes present in golds
    double unknown_f1 = 0.0;  // one-vs-rest F1 of the Unknown class
    double hm = 0.0;
};

inline OpenSetMetrics open_set_metrics(const std::vector<OpenLabel>& preds,
                                       const std::vector<OpenLabel>& golds) {
    if (preds.size() != golds.size())
        throw ContractError("open_set_metrics: preds and golds differ in length");
    if (preds.empty()) throw ContractError("open_set_metrics: empty input");

    const auto tallies = eval_detail::tally(preds, golds);
    OpenSetMetrics m;
    double known_sum = 0.0;
    std::size_t known_classes = 0;
    for (const auto& [label, t] : tallies) {
        const ClassPRF prf = eval_detail::prf_from(t);
        if (label == OpenLabel::Unknown) {
            m.unknown_f1 = prf.f1;
        } else if (prf.support > 0) {
            known_sum += prf.f1;
            ++known_classes;
        }
    }
    m.known_f1 = known_classes == 0 ? 0.0 : known_sum / double(known_classes);
    m.hm = harmonic_mean(m.known_f1, m.unknown_f1);
    return m;
}

// One utterance's predicted or gold frame. Slots are compared as (name,
// value) multisets after whitespace normalization; spans are ignored.
struct SemanticFrame {
    std::string id;
    std::string intent;
    std::vector<std::pair<std::string, std::string>> slots;
};

struct SemanticMetrics {
    double intent_acc = 0.0;
    double slot_f1 = 0.0;  // micro over all (name, value) pairs
    double sfa = 0.0;      // intent exact and slot multiset exact
    std::size_t evaluated = 0;
};

namespace eval_detail {

inline std::string squash_ws(const std::string& s) {
    return detail::join(detail::split_ws(s), " ");
}

inline std::map<std::pair<std::string, std::string>, std::size_t> slot_multiset(
    const std::vector<std::pair<std::string, std::string>>& slots) {
    std::map<std::pair<std::string, std::string>, std::size_t> out;
    for (const auto& [name, value] : slots) ++out[{squash_ws(name), squash_ws(value)}];
    return out;
}

}  // namespace eval_detail

inline SemanticMetrics semantic_metrics(const std::vector<SemanticFrame>& preds,
                                        const std::vector<SemanticFrame>& golds) {
    if (preds.size() != golds.size())
        throw ContractError("semantic_metrics: preds and golds differ in length");
    if (preds.empty()) throw ContractError("semantic_metrics: empty input");

    SemanticMetrics m;
    m.evaluated = preds.size();
    std::size_t intent_hits = 0, frame_hits = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].id != golds[i].id)
            throw ContractError("semantic_metrics: frame id mismatch at '" + preds[i].id +
                                "' vs '" + golds[i].id + "'");
        const auto pred = eval_detail::slot_multiset(preds[i].slots);
        const auto gold = eval_detail::slot_multiset(golds[i].slots);
        std::size_t matched = 0, pred_n = 0, gold_n = 0;
        for (const auto& [key, n] : pred) {
            pred_n += n;
            const auto it = gold.find(key);
            if (it != gold.end()) matched += std::min(n, it->second);
        }
        for (const auto& [key, n] : gold) gold_n += n;
        tp += matched;
        fp += pred_n - matched;
        fn += gold_n - matched;

        const bool intent_ok =
            eval_detail::squash_ws(preds[i].intent) == eval_detail::squash_ws(golds[i].intent);
        intent_hits += intent_ok;
        frame_hits += intent_ok && pred == gold;
    }
    m.intent_acc = double(intent_hits) / double(m.evaluated);
    const double precision = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
    m.slot_f1 = eval_detail::f1_of(precision, recall);
    m.sfa = double(frame_hits) / double(m.evaluated);
    return m;
}

struct SynergyCounts {
    std::size_t both_correct = 0;
    std::size_t both_wrong = 0;
    std::size_t llm_corrected = 0;  // plug-in wrong, final right
    std::size_t llm_degraded = 0;   // plug-in right, final wrong
    std::size_t total() const { return both_correct + both_wrong + llm_corrected + llm_degraded; }
};

struct SynergyReport {
    SynergyCounts overall;
    std::map<OpenLabel, SynergyCounts> per_gold;
};

inline SynergyReport synergy_analysis(const std::vector<OpenLabel>& plugin_preds,
                                      const std::vector<OpenLabel>& final_preds,
                                      const std::vector<OpenLabel>& golds) {
    if (plugin_preds.size() != golds.size() || final_preds.size() != golds.size())
        throw ContractError("synergy_analysis: input lengths differ");
    SynergyReport rep;
    for (std::size_t i = 0; i < golds.size(); ++i) {
        const bool plugin_ok = plugin_preds[i] == golds[i];
        const bool final_ok = final_preds[i] == golds[i];
        auto bump = [&](SynergyCounts& c) {
            if (plugin_ok && final_ok)
                ++c.both_correct;
            else if (!plugin_ok && !final_ok)
                ++c.both_wrong;
            else if (!plugin_ok)
                ++c.llm_corrected;
            else
                ++c.llm_degraded;
        };
        bump(rep.overall);
        bump(rep.per_gold[golds[i]]);
    }
    return rep;
}

struct CorrectionRate {
    std::size_t corrected = 0;
    std::size_t total = 0;
    double rate() const { return total == 0 ? 0.0 : double(corrected) / double(total); }
};

struct CorrectionReport {
    CorrectionRate overall;
    std::map<OpenLabel, CorrectionRate> per_class;
};

inline bool is_readback_anomaly(OpenLabel label) {
    return label == OpenLabel::Incorrect || label == OpenLabel::Incomplete ||
           label == OpenLabel::NonStandard;
}

// Rates over gold readback anomalies only (Unknown communications are not
// readbacks and have nothing to reconstruct). A sample counts as corrected
// when the final label flags some readback anomaly and the reordering was
// actually applied.
inline CorrectionReport correction_rate(const std::vector<MonitorReport>& reports) {
    CorrectionReport rep;
    for (const auto& r : reports) {
        if (!r.gold || !is_readback_anomaly(*r.gold)) continue;
        const bool corrected = is_readback_anomaly(decide_final(r.verdict)) && r.correction &&
                               r.correction->applied;
        ++rep.overall.total;
        ++rep.per_class[*r.gold].total;
        if (corrected) {
            ++rep.overall.corrected;
            ++rep.per_class[*r.gold].corrected;
        }
    }
    return rep;
}

struct MetricsReport {
    ClassificationReport classification;
    OpenSetMetrics open_set;
    SemanticMetrics semantics;
    SynergyReport synergy;
    CorrectionReport correction;
};

inline nlohmann::json metrics_to_json(const MetricsReport& m) {
    nlohmann::json j;
    j["accuracy"] = m.classification.accuracy;
    j["macro_f1"] = m.classification.macro_f1;
    j["weighted_f1"] = m.classification.weighted_f1;
    nlohmann::json per_f1 = nlohmann::json::object();
    nlohmann::json per_recall = nlohmann::json::object();
    for (const auto& [label, prf] : m.classification.per_class) {
        per_f1[to_string(label)] = prf.f1;
        per_recall[to_string(label)] = prf.recall;
    }
    j["per_class_f1"] = std::move(per_f1);
    j["recall_per_class"] = std::move(per_recall);
    j["kF1"] = m.open_set.known_f1;
    j["uF1"] = m.open_set.unknown_f1;
    j["HM"] = m.open_set.hm;
    j["intent_acc"] = m.semantics.intent_acc;
    j["slot_f1"] = m.semantics.slot_f1;
    j["sfa"] = m.semantics.sfa;
    j["frames_evaluated"] = m.semantics.evaluated;
    j["correction_rate_overall"] = m.correction.overall.rate();
    j["correction_counts_overall"] = {{"corrected", m.correction.overall.corrected},
                                      {"total", m.correction.overall.total}};
    nlohmann::json per_rate = nlohmann::json::object();
    for (const auto& [label, rate] : m.correction.per_class)
        per_rate[to_string(label)] = {{"rate", rate.rate()},
                                      {"corrected", rate.corrected},
                                      {"total", rate.total}};
    j["correction_rate_per_class"] = std::move(per_rate);
    j["synergy_counts"] = {{"both_correct", m.synergy.overall.both_correct},
                           {"both_wrong", m.synergy.overall.both_wrong},
                           {"llm_corrected", m.synergy.overall.llm_corrected},
                           {"llm_degraded", m.synergy.overall.llm_degraded}};
    nlohmann::json per_synergy = nlohmann::json::object();
    for (const auto& [label, c] : m.synergy.per_gold)
        per_synergy[to_string(label)] = {{"both_correct", c.both_correct},
                                         {"both_wrong", c.both_wrong},
                                         {"llm_corrected", c.llm_corrected},
                                         {"llm_degraded", c.llm_degraded}};
    j["synergy_per_gold"] = std::move(per_synergy);
    j["samples"] = m.classification.total;
    return j;
}

// Fixed-width table for terminal output. Percentages use one decimal, the
// same rounding as the distribution report.
inline std::string format_metrics(const MetricsReport& m) {
    std::string out;
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f%%", v * 100.0);
        return std::string(buf);
    };
    out += "samples: " + std::to_string(m.classification.total) + "\n";
    out += "accuracy: " + pct(m.classification.accuracy) +
           "  macro_f1: " + pct(m.classification.macro_f1) + "\n";
    out += "kF1: " + pct(m.open_set.known_f1) + "  uF1: " + pct(m.open_set.unknown_f1) +
           "  HM: " + pct(m.open_set.hm) + "\n";
    out += "intent_acc: " + pct(m.semantics.intent_acc) +
           "  slot_f1: " + pct(m.semantics.slot_f1) + "  sfa: " + pct(m.semantics.sfa) +
           " (" + std::to_string(m.semantics.evaluated) + " frames)\n";
    out += "per-class f1:";
    for (const auto& [label, prf] : m.classification.per_class)
        out += "  " + to_string(label) + "=" + pct(prf.f1);
    out += "\n";
    if (m.correction.overall.total > 0) {
        out += "correction rate: " + pct(m.correction.overall.rate()) + " (" +
               std::to_string(m.correction.overall.corrected) + "/" +
               std::to_string(m.correction.overall.total) + ")";
        for (const auto& [label, rate] : m.correction.per_class)
            out += "  " + to_string(label) + "=" + pct(rate.rate());
        out += "\n";
    }
    out += "synergy: both_correct=" + std::to_string(m.synergy.overall.both_correct) +
           " both_wrong=" + std::to_string(m.synergy.overall.both_wrong) +
           " llm_corrected=" + std::to_string(m.synergy.overall.llm_corrected) +
           " llm_degraded=" + std::to_string(m.synergy.overall.llm_degraded) + "\n";
    return out;
}

}  // namespace scope
