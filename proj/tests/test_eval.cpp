#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "scope/eval.hpp"

using namespace scope;
using Catch::Matchers::WithinAbs;

namespace {

constexpr OpenLabel C = OpenLabel::Correct;
constexpr OpenLabel I = OpenLabel::Incorrect;
constexpr OpenLabel M = OpenLabel::Incomplete;
constexpr OpenLabel N = OpenLabel::NonStandard;
constexpr OpenLabel U = OpenLabel::Unknown;

std::vector<OpenLabel> random_labels(detail::Rng& rng, std::size_t n) {
    std::vector<OpenLabel> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(OpenLabel(1 + rng.below(5)));
    return out;
}

MonitorReport report_of(std::string id, std::optional<OpenLabel> gold, OpenLabel final_label,
                        bool applied) {
    LlmVerdict v;
    v.label = final_label;
    v.parse_ok = true;
    std::optional<CorrectionOutcome> fix;
    if (is_readback_anomaly(final_label))
        fix = CorrectionOutcome{applied, applied ? "fixed text" : "original", "CCA1234"};
    return package_report(std::move(id), gold, final_label, v, fix);
}

}  // namespace

TEST_CASE("classification metrics on the hand-built confusion matrix", "[eval]") {
    const std::vector<OpenLabel> golds = {C, C, I, I};
    const std::vector<OpenLabel> preds = {C, I, I, I};
    const ClassificationReport rep = classification_metrics(preds, golds);

    CHECK_THAT(rep.accuracy, WithinAbs(0.75, 1e-12));
    CHECK_THAT(rep.per_class.at(C).precision, WithinAbs(1.0, 1e-12));
    CHECK_THAT(rep.per_class.at(C).recall, WithinAbs(0.5, 1e-12));
    CHECK_THAT(rep.per_class.at(C).f1, WithinAbs(2.0 / 3.0, 1e-12));
    CHECK_THAT(rep.per_class.at(I).f1, WithinAbs(0.8, 1e-12));
    CHECK(rep.per_class.at(C).support == 2);
    CHECK(rep.per_class.at(I).support == 2);
    CHECK_THAT(rep.macro_f1, WithinAbs((2.0 / 3.0 + 0.8) / 2.0, 1e-12));
    CHECK_THAT(rep.weighted_f1, WithinAbs((2.0 * (2.0 / 3.0) + 2.0 * 0.8) / 4.0, 1e-12));

    const ClassificationReport perfect = classification_metrics(golds, golds);
    CHECK_THAT(perfect.accuracy, WithinAbs(1.0, 1e-12));
    CHECK_THAT(perfect.macro_f1, WithinAbs(1.0, 1e-12));

    const ClassificationReport zero = classification_metrics({I, I, C, C}, golds);
    CHECK_THAT(zero.accuracy, WithinAbs(0.0, 1e-12));

    CHECK_THROWS_AS(classification_metrics({C}, {C, I}), ContractError);
    CHECK_THROWS_AS(classification_metrics({}, {}), ContractError);
}

TEST_CASE("classification metrics match a confusion-matrix oracle", "[eval]") {
    detail::Rng rng(2026);
    for (int trial = 0; trial < 50; ++trial) {
        const auto golds = random_labels(rng, 60);
        const auto preds = random_labels(rng, 60);
        const ClassificationReport rep = classification_metrics(preds, golds);

        // Dense 5x5 confusion matrix, gold rows, pred columns.
        std::size_t cm[6][6] = {};
        for (std::size_t i = 0; i < golds.size(); ++i) ++cm[int(golds[i])][int(preds[i])];

        std::size_t trace = 0;
        for (int k = 1; k <= 5; ++k) trace += cm[k][k];
        CHECK_THAT(rep.accuracy, WithinAbs(double(trace) / 60.0, 1e-12));

        double macro = 0.0;
        std::size_t present = 0;
        for (int k = 1; k <= 5; ++k) {
            std::size_t tp = cm[k][k], fp = 0, fn = 0;
            for (int o = 1; o <= 5; ++o) {
                if (o == k) continue;
                fp += cm[o][k];
                fn += cm[k][o];
            }
            const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
            const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
            const double f1 = p + r ? 2 * p * r / (p + r) : 0.0;
            if (tp + fn > 0) {
                macro += f1;
                ++present;
                CHECK_THAT(rep.per_class.at(OpenLabel(k)).f1, WithinAbs(f1, 1e-12));
            }
        }
        CHECK_THAT(rep.macro_f1, WithinAbs(macro / double(present), 1e-12));
    }
}

TEST_CASE("metrics ignore sample order", "[eval]") {
    detail::Rng rng(7);
    const auto golds = random_labels(rng, 40);
    const auto preds = random_labels(rng, 40);
    std::vector<std::size_t> perm(40);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<OpenLabel> golds_p, preds_p;
    for (std::size_t i : perm) {
        golds_p.push_back(golds[i]);
        preds_p.push_back(preds[i]);
    }
    const auto a = classification_metrics(preds, golds);
    const auto b = classification_metrics(preds_p, golds_p);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.macro_f1 == b.macro_f1);
    const auto oa = open_set_metrics(preds, golds);
    const auto ob = open_set_metrics(preds_p, golds_p);
    CHECK(oa.hm == ob.hm);
}

TEST_CASE("open-set metrics and the harmonic mean", "[eval]") {
    CHECK_THAT(harmonic_mean(0.9, 0.9), WithinAbs(0.9, 1e-12));
    CHECK_THAT(harmonic_mean(0.8, 0.4), WithinAbs(2.0 * 0.32 / 1.2, 1e-12));
    CHECK(harmonic_mean(0.0, 0.0) == 0.0);
    CHECK(harmonic_mean(0.7, 0.0) == 0.0);

    // Hand-tallied: Correct tp=1 fp=1 fn=1, Unknown tp=1 fp=0 fn=1.
    const std::vector<OpenLabel> golds = {C, C, U, U};
    const OpenSetMetrics mixed = open_set_metrics({C, I, U, C}, golds);
    CHECK_THAT(mixed.known_f1, WithinAbs(0.5, 1e-12));
    CHECK_THAT(mixed.unknown_f1, WithinAbs(2.0 / 3.0, 1e-12));
    CHECK_THAT(mixed.hm, WithinAbs(4.0 / 7.0, 1e-12));

    // Equal known and unknown F1 collapses HM to that value.
    const OpenSetMetrics eq = open_set_metrics({C, U, U, C}, golds);
    CHECK_THAT(eq.known_f1, WithinAbs(0.5, 1e-12));
    CHECK_THAT(eq.unknown_f1, WithinAbs(0.5, 1e-12));
    CHECK_THAT(eq.hm, WithinAbs(0.5, 1e-12));

    const OpenSetMetrics none = open_set_metrics({I, I, C, C}, golds);
    CHECK(none.unknown_f1 == 0.0);
    CHECK(none.hm == 0.0);

    const OpenSetMetrics perfect = open_set_metrics({C, I, M, N, U}, {C, I, M, N, U});
    CHECK_THAT(perfect.known_f1, WithinAbs(1.0, 1e-12));
    CHECK_THAT(perfect.unknown_f1, WithinAbs(1.0, 1e-12));
    CHECK_THAT(perfect.hm, WithinAbs(1.0, 1e-12));

    // Harmonic never exceeds arithmetic.
    detail::Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const auto g = random_labels(rng, 30);
        const auto p = random_labels(rng, 30);
        const OpenSetMetrics m = open_set_metrics(p, g);
        CHECK(m.hm <= (m.known_f1 + m.unknown_f1) / 2.0 + 1e-12);
    }
}

TEST_CASE("semantic metrics with a hand-counted micro oracle", "[eval]") {
    const std::vector<SemanticFrame> golds = {
        {"p1", "climb", {{"a", "1"}, {"b", "2"}}},
        {"p2", "contact", {{"c", "4"}}},
    };
    const std::vector<SemanticFrame> preds = {
        {"p1", "climb", {{"a", "1"}, {"b", "3"}}},
        {"p2", "contact", {{"c", "4"}, {"d", "5"}}},
    };
    const SemanticMetrics m = semantic_metrics(preds, golds);
    CHECK_THAT(m.intent_acc, WithinAbs(1.0, 1e-12));
    // TP=2, FP=2, FN=1: P=1/2, R=2/3, F1=4/7.
    CHECK_THAT(m.slot_f1, WithinAbs(4.0 / 7.0, 1e-12));
    CHECK_THAT(m.sfa, WithinAbs(0.0, 1e-12));
    CHECK(m.sfa <= m.intent_acc);

    const SemanticMetrics exact = semantic_metrics(golds, golds);
    CHECK(exact.intent_acc == 1.0);
    CHECK(exact.slot_f1 == 1.0);
    CHECK(exact.sfa == 1.0);

    // Whitespace differences do not count as mismatches.
    const std::vector<SemanticFrame> spaced = {
        {"p1", " climb ", {{"a", " 1"}, {"b", "2  "}}},
        {"p2", "contact", {{"c", "4"}}},
    };
    const SemanticMetrics ws = semantic_metrics(spaced, golds);
    CHECK(ws.sfa == 1.0);

    CHECK_THROWS_WITH(
        semantic_metrics({{"p1", "x", {}}}, {{"p9", "x", {}}}),
        Catch::Matchers::ContainsSubstring("p1"));
    CHECK_THROWS_AS(semantic_metrics({}, {}), ContractError);
}

TEST_CASE("sfa never exceeds intent accuracy", "[eval]") {
    detail::Rng rng(5);
    const std::vector<std::string> intents = {"climb", "descend", "turn"};
    const std::vector<std::string> values = {"1", "2"};
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<SemanticFrame> preds, golds;
        for (int i = 0; i < 12; ++i) {
            const std::string id = "s" + std::to_string(i);
            SemanticFrame gold{id, intents[rng.below(intents.size())], {}};
            SemanticFrame pred{id, intents[rng.below(intents.size())], {}};
            for (int s = 0; s < 2; ++s) {
                gold.slots.emplace_back("n" + std::to_string(s), values[rng.below(2)]);
                pred.slots.emplace_back("n" + std::to_string(s), values[rng.below(2)]);
            }
            golds.push_back(std::move(gold));
            preds.push_back(std::move(pred));
        }
        const SemanticMetrics m = semantic_metrics(preds, golds);
        CHECK(m.sfa <= m.intent_acc + 1e-12);
    }
}

TEST_CASE("synergy analysis enumerates the four outcomes", "[eval]") {
    const std::vector<OpenLabel> golds = {C, C, I, I, U, U};
    const std::vector<OpenLabel> plugin = {C, I, I, C, U, C};
    const std::vector<OpenLabel> final_ = {C, C, C, C, U, U};
    // per sample: both_correct, llm_corrected, llm_degraded, both_wrong,
    //             both_correct, llm_corrected
    const SynergyReport rep = synergy_analysis(plugin, final_, golds);
    CHECK(rep.overall.both_correct == 2);
    CHECK(rep.overall.llm_corrected == 2);
    CHECK(rep.overall.llm_degraded == 1);
    CHECK(rep.overall.both_wrong == 1);
    CHECK(rep.overall.total() == golds.size());

    CHECK(rep.per_gold.at(C).both_correct == 1);
    CHECK(rep.per_gold.at(C).llm_corrected == 1);
    CHECK(rep.per_gold.at(I).llm_degraded == 1);
    CHECK(rep.per_gold.at(I).both_wrong == 1);
    CHECK(rep.per_gold.at(U).both_correct == 1);
    CHECK(rep.per_gold.at(U).llm_corrected == 1);
    std::size_t sum = 0;
    for (const auto& [label, c] : rep.per_gold) sum += c.total();
    CHECK(sum == golds.size());

    const SynergyReport all_ok = synergy_analysis(golds, golds, golds);
    CHECK(all_ok.overall.both_correct == golds.size());

    CHECK_THROWS_AS(synergy_analysis({C}, {C, I}, {C, I}), ContractError);
}

TEST_CASE("correction rate counts detected and applied anomalies", "[eval]") {
    std::vector<MonitorReport> reports;
    reports.push_back(report_of("a", M, M, true));        // corrected
    reports.push_back(report_of("b", I, C, false));       // missed: final says correct
    reports.push_back(report_of("c", N, I, true));        // detected as some anomaly
    reports.push_back(report_of("d", C, C, false));       // not anomalous, excluded
    reports.push_back(report_of("e", U, U, false));       // unknown gold, excluded
    reports.push_back(report_of("f", std::nullopt, C, false));  // unlabeled, excluded

    const CorrectionReport rep = correction_rate(reports);
    CHECK(rep.overall.total == 3);
    CHECK(rep.overall.corrected == 2);
    CHECK_THAT(rep.overall.rate(), WithinAbs(2.0 / 3.0, 1e-12));
    CHECK(rep.per_class.at(M).corrected == 1);
    CHECK(rep.per_class.at(M).total == 1);
    CHECK(rep.per_class.at(I).corrected == 0);
    CHECK(rep.per_class.at(N).corrected == 1);
    CHECK_FALSE(rep.per_class.contains(C));
    CHECK_FALSE(rep.per_class.contains(U));

    // Detected but reordering not applied does not count.
    std::vector<MonitorReport> unapplied = {report_of("g", M, M, false)};
    const CorrectionReport rep2 = correction_rate(unapplied);
    CHECK(rep2.overall.total == 1);
    CHECK(rep2.overall.corrected == 0);

    CHECK(correction_rate({}).overall.total == 0);
    CHECK(correction_rate({}).overall.rate() == 0.0);
}

TEST_CASE("metrics report serializes every section", "[eval]") {
    const std::vector<OpenLabel> golds = {C, I, M, N, U, C};
    const std::vector<OpenLabel> plugin = {C, I, M, C, U, C};
    const std::vector<OpenLabel> final_ = {C, I, M, N, U, I};

    MetricsReport report;
    report.classification = classification_metrics(final_, golds);
    report.open_set = open_set_metrics(final_, golds);
    report.semantics = semantic_metrics({{"p1", "climb", {{"a", "1"}}}},
                                        {{"p1", "climb", {{"a", "1"}}}});
    report.synergy = synergy_analysis(plugin, final_, golds);
    std::vector<MonitorReport> reports = {report_of("x", I, I, true)};
    report.correction = correction_rate(reports);

    const nlohmann::json j = metrics_to_json(report);
    CHECK(j.at("accuracy").get<double>() > 0.0);
    CHECK(j.at("per_class_f1").contains("correct"));
    CHECK(j.at("recall_per_class").contains("unknown"));
    CHECK(j.contains("kF1"));
    CHECK(j.contains("uF1"));
    CHECK(j.contains("HM"));
    CHECK(j.at("sfa") == 1.0);
    CHECK(j.at("correction_rate_overall") == 1.0);
    CHECK(j.at("correction_rate_per_class").contains("incorrect"));
    CHECK(j.at("synergy_counts").at("both_correct").get<int>() == 4);
    const std::size_t synergy_total = j.at("synergy_counts").at("both_correct").get<std::size_t>() +
                                      j.at("synergy_counts").at("both_wrong").get<std::size_t>() +
                                      j.at("synergy_counts").at("llm_corrected").get<std::size_t>() +
                                      j.at("synergy_counts").at("llm_degraded").get<std::size_t>();
    CHECK(synergy_total == golds.size());

    const std::string table = format_metrics(report);
    CHECK(table.find("accuracy:") != std::string::npos);
    CHECK(table.find("HM:") != std::string::npos);
    CHECK(table.find("correction rate:") != std::string::npos);
    CHECK(table.find("synergy:") != std::string::npos);
}
