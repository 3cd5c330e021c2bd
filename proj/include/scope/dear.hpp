#pragma once

// Dual-encoder anchored retrieval: separate character TF-IDF models for
// instructions and readbacks, an instruction-anchored candidate pool, and
// per-class maximal-marginal-relevance selection of support examples.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/corpus.hpp"
#include "scope/detail.hpp"
#include "scope/poc.hpp"

namespace scope {

struct TfidfConfig {
    std::string field;  // "instruction" or "readback"
    int ngram_lo = 1;
    int ngram_hi = 2;
    std::size_t max_features = 10000;
};

struct TfidfModel {
    std::string field;
    int ngram_lo = 1;
    int ngram_hi = 2;
    std::map<std::string, std::size_t> vocabulary;  // ngram -> column
    std::vector<double> idf;                        // per column
};

inline constexpr int kTfidfFormatVersion = 1;

namespace dear_detail {

// Character n-grams over UTF-8 code points, spaces included.
inline void count_ngrams(const std::string& text, int lo, int hi,
                         std::map<std::string, std::size_t>& counts) {
    const auto starts = detail::utf8_starts(text);
    const std::size_t points = starts.size() - 1;
    for (int n = lo; n <= hi; ++n) {
        if (std::size_t(n) > points) break;
        for (std::size_t i = 0; i + std::size_t(n) <= points; ++i)
            counts[text.substr(starts[i], starts[i + std::size_t(n)] - starts[i])] += 1;
    }
}

}  // namespace dear_detail

// Vocabulary keeps the max_features n-grams with the highest corpus
// frequency (ties lexicographic); idf = ln((1+n)/(1+df)) + 1. Column order
// is lexicographic over the selected n-grams.
inline TfidfModel fit_tfidf(const std::vector<std::string>& docs, const TfidfConfig& cfg) {
    if (docs.empty()) throw ContractError("fit_tfidf: no documents");
    if (cfg.ngram_lo < 1 || cfg.ngram_hi < cfg.ngram_lo)
        throw ContractError("fit_tfidf: bad ngram range");
    if (cfg.max_features == 0) throw ContractError("fit_tfidf: max_features must be positive");

    std::map<std::string, std::size_t> corpus_freq, doc_freq;
    for (const auto& doc : docs) {
        std::map<std::string, std::size_t> counts;
        dear_detail::count_ngrams(doc, cfg.ngram_lo, cfg.ngram_hi, counts);
        for (const auto& [gram, n] : counts) {
            corpus_freq[gram] += n;
            doc_freq[gram] += 1;
        }
    }
    if (corpus_freq.empty()) throw ContractError("fit_tfidf: documents yield no n-grams");

    std::vector<const std::string*> selected;
    if (corpus_freq.size() <= cfg.max_features) {
        for (const auto& [gram, n] : corpus_freq) selected.push_back(&gram);
    } else {
        std::vector<std::pair<const std::string*, std::size_t>> ranked;
        ranked.reserve(corpus_freq.size());
        for (const auto& [gram, n] : corpus_freq) ranked.emplace_back(&gram, n);
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return *a.first < *b.first;
        });
        ranked.resize(cfg.max_features);
        for (const auto& [gram, n] : ranked) selected.push_back(gram);
        std::sort(selected.begin(), selected.end(),
                  [](const std::string* a, const std::string* b) { return *a < *b; });
    }

    TfidfModel model;
    model.field = cfg.field;
    model.ngram_lo = cfg.ngram_lo;
    model.ngram_hi = cfg.ngram_hi;
    model.idf.resize(selected.size());
    const double n_docs = double(docs.size());
    for (std::size_t col = 0; col < selected.size(); ++col) {
        model.vocabulary[*selected[col]] = col;
        model.idf[col] = std::log((1.0 + n_docs) / (1.0 + double(doc_freq[*selected[col]]))) + 1.0;
    }
    return model;
}

// tf * idf, L2-normalized. Text with no in-vocabulary n-grams maps to the
// zero vector (cosine similarity treats it as orthogonal to everything).
inline std::vector<float> vectorize(const TfidfModel& model, const std::string& text) {
    std::map<std::string, std::size_t> counts;
    dear_detail::count_ngrams(text, model.ngram_lo, model.ngram_hi, counts);
    std::vector<double> weights(model.idf.size(), 0.0);
    for (const auto& [gram, n] : counts) {
        const auto it = model.vocabulary.find(gram);
        if (it != model.vocabulary.end())
            weights[it->second] = double(n) * model.idf[it->second];
    }
    double norm = 0.0;
    for (double w : weights) norm += w * w;
    norm = std::sqrt(norm);
    std::vector<float> out(weights.size(), 0.0f);
    if (norm > 0.0)
        for (std::size_t i = 0; i < weights.size(); ++i) out[i] = float(weights[i] / norm);
    return out;
}

inline nlohmann::json tfidf_to_json(const TfidfModel& model) {
    nlohmann::json j;
    j["format_version"] = kTfidfFormatVersion;
    j["field"] = model.field;
    j["ngram_range"] = {model.ngram_lo, model.ngram_hi};
    j["vocabulary"] = model.vocabulary;
    j["idf"] = model.idf;
    return j;
}

inline TfidfModel tfidf_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kTfidfFormatVersion)
            throw ParseError("tfidf: unsupported format version " + std::to_string(version));
        TfidfModel model;
        model.field = j.at("field").get<std::string>();
        model.ngram_lo = j.at("ngram_range").at(0).get<int>();
        model.ngram_hi = j.at("ngram_range").at(1).get<int>();
        model.vocabulary = j.at("vocabulary").get<std::map<std::string, std::size_t>>();
        model.idf = j.at("idf").get<std::vector<double>>();
        if (model.idf.size() != model.vocabulary.size())
            throw ValidationError("tfidf: vocabulary and idf sizes differ");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("tfidf: ") + e.what());
    }
}

inline void save_tfidf(const TfidfModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write tfidf file: " + path);
    out << tfidf_to_json(model).dump(2) << "\n";
}

inline TfidfModel load_tfidf(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open tfidf file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("tfidf: ") + e.what());
    }
    return tfidf_from_json(j);
}

// Indices of the top-m entries by anchor similarity, ties broken by id
// ascending. m larger than the collection returns everything.
inline std::vector<std::size_t> build_pool(const std::vector<double>& anchor_sims,
                                           const std::vector<std::string>& ids, std::size_t m) {
    if (anchor_sims.size() != ids.size())
        throw ContractError("build_pool: sims and ids must align");
    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (anchor_sims[a] != anchor_sims[b]) return anchor_sims[a] > anchor_sims[b];
        return ids[a] < ids[b];
    });
    if (order.size() > m) order.resize(m);
    return order;
}

// Greedy maximal marginal relevance. Returns positions into `ids` in
// selection order. score(c) = alpha*sim_to_test(c) -
// (1-alpha)*max(sim_between(c, s) for selected s), with the max defined as 0
// while the selection is empty. Ties pick the smallest candidate id.
template <typename SimToTest, typename SimBetween>
std::vector<std::size_t> mmr_select(const std::vector<std::string>& ids, SimToTest&& sim_to_test,
                                    SimBetween&& sim_between, double alpha, std::size_t n) {
    std::vector<std::size_t> selected;
    std::vector<bool> used(ids.size(), false);
    // Running max similarity to the selected set, updated incrementally.
    std::vector<double> max_to_selected(ids.size(), 0.0);
    while (selected.size() < n && selected.size() < ids.size()) {
        std::size_t best = ids.size();
        double best_score = 0.0;
        for (std::size_t c = 0; c < ids.size(); ++c) {
            if (used[c]) continue;
            const double score = alpha * sim_to_test(c) - (1.0 - alpha) * max_to_selected[c];
            if (best == ids.size() || score > best_score ||
                (score == best_score && ids[c] < ids[best])) {
                best = c;
                best_score = score;
            }
        }
        used[best] = true;
        selected.push_back(best);
        for (std::size_t c = 0; c < ids.size(); ++c) {
            if (used[c]) continue;
            max_to_selected[c] = std::max(max_to_selected[c], sim_between(c, best));
        }
    }
    return selected;
}

// One retrievable example: gold label, plus TF-IDF vectors for both fields.
struct CandidateEntry {
    std::string id;
    OpenLabel gold = OpenLabel::Unknown;
    std::vector<float> instr_vec;
    std::vector<float> read_vec;
};

struct SupportItem {
    std::string id;
    OpenLabel gold = OpenLabel::Unknown;
    double anchor_sim = 0.0;
};

struct SupportRequest {
    std::size_t n_shot = 4;
    std::size_t rho = 9;
    double alpha = 0.3;
    bool anchor_pool = true;   // false: per-class buckets span the whole train set
    bool mmr = true;           // false: per-class top-N by anchor similarity
    bool sorted_order = true;  // false: seeded shuffle instead of Sort-descending
    std::uint64_t shuffle_seed = 42;
};

// Known-class candidates come from the train split; Unknown support comes
// from the calibration split and joins by anchor rank only.
class RetrievalIndex {
public:
    RetrievalIndex(std::vector<CandidateEntry> train, std::vector<CandidateEntry> calibration)
        : train_(std::move(train)), calibration_(std::move(calibration)) {
        for (const auto& e : train_)
            if (e.gold == OpenLabel::Unknown)
                throw ContractError("RetrievalIndex: train candidate '" + e.id + "' is Unknown");
    }

    const std::vector<CandidateEntry>& train() const { return train_; }
    const std::vector<CandidateEntry>& calibration() const { return calibration_; }

    std::vector<SupportItem> select(const std::vector<float>& instr_vec,
                                    const std::vector<float>& read_vec,
                                    const SupportRequest& req) const {
        std::vector<SupportItem> support;
        if (req.n_shot == 0) return support;

        std::vector<double> anchor(train_.size());
        std::vector<std::string> ids(train_.size());
        for (std::size_t i = 0; i < train_.size(); ++i) {
            anchor[i] = cosine_sim(instr_vec, train_[i].instr_vec);
            ids[i] = train_[i].id;
        }

        std::vector<std::size_t> pool;
        if (req.anchor_pool) {
            pool = build_pool(anchor, ids, req.rho * req.n_shot);
        } else {
            pool.resize(train_.size());
            for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        }

        auto anchor_rank_sort = [&](std::vector<std::size_t>& v) {
            std::sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) {
                if (anchor[a] != anchor[b]) return anchor[a] > anchor[b];
                return ids[a] < ids[b];
            });
        };

        std::set<std::size_t> chosen;
        for (int k = 1; k <= kKnownClassCount; ++k) {
            std::vector<std::size_t> bucket;
            for (std::size_t idx : pool)
                if (int(train_[idx].gold) == k) bucket.push_back(idx);

            std::vector<std::size_t> picked;
            if (req.mmr) {
                std::vector<std::string> bucket_ids;
                for (std::size_t idx : bucket) bucket_ids.push_back(ids[idx]);
                const auto sel = mmr_select(
                    bucket_ids,
                    [&](std::size_t c) {
                        return cosine_sim(read_vec, train_[bucket[c]].read_vec);
                    },
                    [&](std::size_t c, std::size_t s) {
                        return cosine_sim(train_[bucket[c]].read_vec, train_[bucket[s]].read_vec);
                    },
                    req.alpha, req.n_shot);
                for (std::size_t c : sel) picked.push_back(bucket[c]);
            } else {
                anchor_rank_sort(bucket);
                if (bucket.size() > req.n_shot) bucket.resize(req.n_shot);
                picked = bucket;
            }

            if (picked.size() < req.n_shot) {
                // Backfill from the full class by anchor rank.
                std::vector<std::size_t> rest;
                for (std::size_t i = 0; i < train_.size(); ++i)
                    if (int(train_[i].gold) == k &&
                        std::find(picked.begin(), picked.end(), i) == picked.end())
                        rest.push_back(i);
                anchor_rank_sort(rest);
                for (std::size_t idx : rest) {
                    if (picked.size() >= req.n_shot) break;
                    picked.push_back(idx);
                }
            }
            for (std::size_t idx : picked) chosen.insert(idx);
        }

        for (std::size_t idx : chosen)
            support.push_back({train_[idx].id, train_[idx].gold, anchor[idx]});

        // Unknown support: top-N calibration entries by anchor similarity.
        std::vector<std::size_t> calib_order(calibration_.size());
        for (std::size_t i = 0; i < calib_order.size(); ++i) calib_order[i] = i;
        std::sort(calib_order.begin(), calib_order.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine_sim(instr_vec, calibration_[a].instr_vec);
            const double sb = cosine_sim(instr_vec, calibration_[b].instr_vec);
            if (sa != sb) return sa > sb;
            return calibration_[a].id < calibration_[b].id;
        });
        for (std::size_t i = 0; i < calib_order.size() && i < req.n_shot; ++i) {
            const auto& e = calibration_[calib_order[i]];
            support.push_back({e.id, OpenLabel::Unknown, cosine_sim(instr_vec, e.instr_vec)});
        }

        if (req.sorted_order) {
            std::sort(support.begin(), support.end(), [](const SupportItem& a, const SupportItem& b) {
                if (a.anchor_sim != b.anchor_sim) return a.anchor_sim > b.anchor_sim;
                return a.id < b.id;
            });
        } else {
            detail::Rng rng(req.shuffle_seed);
            rng.shuffle(support);
        }
        return support;
    }

private:
    std::vector<CandidateEntry> train_;
    std::vector<CandidateEntry> calibration_;
};

}  // namespace scope
