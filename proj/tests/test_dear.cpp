#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "scope/dear.hpp"

using namespace scope;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<float> unit2(double x, double y) {
    const double n = std::sqrt(x * x + y * y);
    return {float(x / n), float(y / n)};
}

}  // namespace

TEST_CASE("tfidf idf follows the smoothed formula", "[dear]") {
    TfidfConfig cfg;
    cfg.field = "instruction";
    cfg.ngram_lo = 1;
    cfg.ngram_hi = 1;
    const TfidfModel m = fit_tfidf({"ab", "a"}, cfg);
    REQUIRE(m.vocabulary.size() == 2);
    REQUIRE(m.vocabulary.count("a") == 1);
    REQUIRE(m.vocabulary.count("b") == 1);
    // df(a)=2 of 2 docs -> ln(3/3)+1 = 1; df(b)=1 -> ln(3/2)+1.
    CHECK_THAT(m.idf[m.vocabulary.at("a")], WithinAbs(1.0, 1e-12));
    CHECK_THAT(m.idf[m.vocabulary.at("b")], WithinAbs(std::log(1.5) + 1.0, 1e-12));
}

TEST_CASE("tfidf vocabulary keeps the most frequent n-grams with lexicographic ties",
          "[dear]") {
    TfidfConfig cfg;
    cfg.field = "instruction";
    cfg.max_features = 3;
    const TfidfModel m = fit_tfidf({"ab", "ab", "bc"}, cfg);
    // Corpus frequencies: b=3, a=2, ab=2, c=1, bc=1. Ties at 2 resolve to
    // "a" and "ab" (lexicographic), so c/bc fall out.
    REQUIRE(m.vocabulary.size() == 3);
    CHECK(m.vocabulary.count("a") == 1);
    CHECK(m.vocabulary.count("ab") == 1);
    CHECK(m.vocabulary.count("b") == 1);
    // Columns are assigned in lexicographic order.
    CHECK(m.vocabulary.at("a") == 0);
    CHECK(m.vocabulary.at("ab") == 1);
    CHECK(m.vocabulary.at("b") == 2);
}

TEST_CASE("vectorize computes normalized tf-idf and zero for OOV text", "[dear]") {
    TfidfConfig cfg;
    cfg.field = "readback";
    cfg.ngram_hi = 1;
    const TfidfModel m = fit_tfidf({"ab", "a"}, cfg);
    const auto v = vectorize(m, "ab");
    const double idf_b = std::log(1.5) + 1.0;
    const double norm = std::sqrt(1.0 + idf_b * idf_b);
    CHECK_THAT(v[m.vocabulary.at("a")], WithinAbs(float(1.0 / norm), 1e-7));
    CHECK_THAT(v[m.vocabulary.at("b")], WithinAbs(float(idf_b / norm), 1e-7));

    const auto zero = vectorize(m, "zz");
    CHECK(zero == std::vector<float>{0.0f, 0.0f});
    CHECK_THAT(cosine_sim(zero, v), WithinAbs(0.0, 1e-12));

    // Repeated grams raise tf linearly before normalization.
    const auto vv = vectorize(m, "aab");
    CHECK(vv[m.vocabulary.at("a")] > vv[m.vocabulary.at("b")]);
}

TEST_CASE("tfidf model serialization round-trips deterministically", "[dear]") {
    TfidfConfig cfg;
    cfg.field = "instruction";
    const TfidfModel a = fit_tfidf({"climb and maintain", "descend and maintain"}, cfg);
    const TfidfModel b = fit_tfidf({"climb and maintain", "descend and maintain"}, cfg);
    CHECK(tfidf_to_json(a).dump() == tfidf_to_json(b).dump());

    const TfidfModel back = tfidf_from_json(tfidf_to_json(a));
    CHECK(back.field == "instruction");
    CHECK(back.vocabulary == a.vocabulary);
    CHECK(tfidf_to_json(back).dump() == tfidf_to_json(a).dump());

    nlohmann::json bad = tfidf_to_json(a);
    bad["format_version"] = 7;
    CHECK_THROWS_AS(tfidf_from_json(bad), ParseError);
}

TEST_CASE("pool keeps the top-m anchors with id tie-breaks", "[dear]") {
    const std::vector<double> sims = {0.5, 0.5, 0.9};
    const std::vector<std::string> ids = {"b", "a", "c"};
    const auto top2 = build_pool(sims, ids, 2);
    REQUIRE(top2.size() == 2);
    CHECK(top2[0] == 2);  // highest sim
    CHECK(top2[1] == 1);  // tie at 0.5 resolves to id "a"
    const auto all = build_pool(sims, ids, 10);
    CHECK(all.size() == 3);
    CHECK(all[2] == 0);
}

TEST_CASE("mmr with alpha one is pure similarity ranking", "[dear]") {
    const std::vector<std::string> ids = {"a", "b", "c", "d"};
    const std::vector<double> sims = {0.2, 0.9, 0.4, 0.9};
    auto st = [&](std::size_t c) { return sims[c]; };
    auto sb = [&](std::size_t, std::size_t) { return 1.0; };  // irrelevant at alpha=1
    const auto sel = mmr_select(ids, st, sb, 1.0, 3);
    REQUIRE(sel.size() == 3);
    CHECK(sel[0] == 1);  // 0.9, tie broken toward id "b"
    CHECK(sel[1] == 3);
    CHECK(sel[2] == 2);
}

TEST_CASE("mmr with alpha zero spreads the selection", "[dear]") {
    const std::vector<std::string> ids = {"a", "b", "c"};
    auto st = [](std::size_t) { return 0.7; };
    // b is near a; c is far from both.
    const double sim[3][3] = {{1.0, 0.9, 0.1}, {0.9, 1.0, 0.2}, {0.1, 0.2, 1.0}};
    auto sb = [&](std::size_t x, std::size_t y) { return sim[x][y]; };
    const auto sel = mmr_select(ids, st, sb, 0.0, 2);
    REQUIRE(sel.size() == 2);
    // Empty-selection scores all equal zero, so the smallest id leads.
    CHECK(sel[0] == 0);
    CHECK(sel[1] == 2);  // the far candidate beats the near one
}

TEST_CASE("mmr greedy trace matches an independent oracle", "[dear]") {
    detail::Rng rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 5 + rng.below(26);
        std::vector<std::string> ids(n);
        std::vector<double> st(n);
        std::vector<std::vector<double>> sb(n, std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            ids[i] = "cand-" + std::to_string(100 + i);
            st[i] = rng.real(0.0, 1.0);
            for (std::size_t j = 0; j <= i; ++j) {
                sb[i][j] = sb[j][i] = i == j ? 1.0 : rng.real(0.0, 1.0);
            }
        }
        const double alpha = 0.3;
        const std::size_t want = 1 + rng.below(8);

        // Oracle: recompute every score from scratch at every step.
        std::vector<std::size_t> expected;
        std::vector<bool> taken(n, false);
        while (expected.size() < std::min(want, n)) {
            std::size_t best = n;
            double best_score = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                if (taken[c]) continue;
                double redundancy = 0.0;
                for (std::size_t s : expected) redundancy = std::max(redundancy, sb[c][s]);
                const double score = alpha * st[c] - (1.0 - alpha) * redundancy;
                if (best == n || score > best_score ||
                    (score == best_score && ids[c] < ids[best])) {
                    best = c;
                    best_score = score;
                }
            }
            taken[best] = true;
            expected.push_back(best);
        }

        const auto got = mmr_select(
            ids, [&](std::size_t c) { return st[c]; },
            [&](std::size_t c, std::size_t s) { return sb[c][s]; }, alpha, want);
        CHECK(got == expected);
    }
}

TEST_CASE("support selection caps per class, backfills and sorts by anchor", "[dear]") {
    std::vector<CandidateEntry> train;
    // Correct candidates at increasing angles from the anchor axis.
    train.push_back({"c1", OpenLabel::Correct, unit2(1.0, 0.0), unit2(1.0, 0.0)});
    train.push_back({"c2", OpenLabel::Correct, unit2(0.9, 0.1), unit2(0.9, 0.1)});
    train.push_back({"c3", OpenLabel::Correct, unit2(0.8, 0.2), unit2(0.8, 0.2)});
    // Incorrect candidates are all far from the anchor.
    train.push_back({"i1", OpenLabel::Incorrect, unit2(0.1, 0.9), unit2(0.1, 0.9)});
    train.push_back({"i2", OpenLabel::Incorrect, unit2(0.0, 1.0), unit2(0.0, 1.0)});
    std::vector<CandidateEntry> calib;
    calib.push_back({"u1", OpenLabel::Unknown, unit2(0.5, 0.5), unit2(0.5, 0.5)});
    calib.push_back({"u2", OpenLabel::Unknown, unit2(0.4, 0.6), unit2(0.4, 0.6)});

    const RetrievalIndex index(train, calib);
    const auto query_i = unit2(1.0, 0.05);
    const auto query_r = unit2(1.0, 0.05);

    SECTION("n_shot zero yields an empty support set") {
        SupportRequest req;
        req.n_shot = 0;
        CHECK(index.select(query_i, query_r, req).empty());
    }

    SECTION("classes outside the pool are backfilled by anchor rank") {
        SupportRequest req;
        req.n_shot = 1;
        req.rho = 2;  // pool of 2: both Correct entries, no Incorrect
        const auto support = index.select(query_i, query_r, req);
        REQUIRE(support.size() == 3);  // 1 Correct + 1 backfilled Incorrect + 1 Unknown
        std::map<OpenLabel, int> per_class;
        for (const auto& s : support) per_class[s.gold] += 1;
        CHECK(per_class[OpenLabel::Correct] == 1);
        CHECK(per_class[OpenLabel::Incorrect] == 1);
        CHECK(per_class[OpenLabel::Unknown] == 1);
        // Backfill follows anchor order: i1 is closer to the query than i2.
        bool saw_i1 = false;
        for (const auto& s : support) saw_i1 |= s.id == "i1";
        CHECK(saw_i1);
    }

    SECTION("support is sorted descending by anchor similarity") {
        SupportRequest req;
        req.n_shot = 2;
        const auto support = index.select(query_i, query_r, req);
        REQUIRE(support.size() >= 4);
        for (std::size_t i = 0; i + 1 < support.size(); ++i) {
            const bool ordered = support[i].anchor_sim > support[i + 1].anchor_sim ||
                                 (support[i].anchor_sim == support[i + 1].anchor_sim &&
                                  support[i].id < support[i + 1].id);
            CHECK(ordered);
        }
        std::map<OpenLabel, int> per_class;
        for (const auto& s : support) per_class[s.gold] += 1;
        for (const auto& [label, count] : per_class) CHECK(count <= 2);
    }

    SECTION("shuffled order is a seeded permutation of the sorted support") {
        SupportRequest sorted_req;
        sorted_req.n_shot = 2;
        SupportRequest shuffled_req = sorted_req;
        shuffled_req.sorted_order = false;
        const auto a = index.select(query_i, query_r, sorted_req);
        const auto b = index.select(query_i, query_r, shuffled_req);
        const auto c = index.select(query_i, query_r, shuffled_req);
        REQUIRE(a.size() == b.size());
        std::set<std::string> ia, ib;
        for (const auto& s : a) ia.insert(s.id);
        for (const auto& s : b) ib.insert(s.id);
        CHECK(ia == ib);
        // Deterministic under the same seed.
        for (std::size_t i = 0; i < b.size(); ++i) CHECK(b[i].id == c[i].id);
    }

    SECTION("unknown support comes from the calibration split") {
        SupportRequest req;
        req.n_shot = 2;
        const auto support = index.select(query_i, query_r, req);
        int unknowns = 0;
        for (const auto& s : support)
            if (s.gold == OpenLabel::Unknown) {
                ++unknowns;
                CHECK((s.id == "u1" || s.id == "u2"));
            }
        CHECK(unknowns == 2);
    }

    SECTION("train candidates labeled Unknown are rejected") {
        std::vector<CandidateEntry> bad = train;
        bad[0].gold = OpenLabel::Unknown;
        CHECK_THROWS_AS(RetrievalIndex(bad, calib), ContractError);
    }
}
