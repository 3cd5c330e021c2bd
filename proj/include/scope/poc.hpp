#pragma once

// Plug-in open-set classifier: a per-class sigmoid head over frozen
// embeddings, trained with BCE plus an outlier-exposure term, combined with
// a KNN distance score and a Youden-calibrated threshold for rejecting
// inputs as Unknown.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scope/detail.hpp"
#include "scope/embed.hpp"

namespace scope {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    // Head-only regime wants a much larger step than encoder fine-tuning.
    double learning_rate = 1e-2;
    double lambda = 1.0;           // exposure term weight
    double exposure_target = 0.5;  // t in the exposure loss
    std::uint64_t seed = 42;
};

struct PocHead {
    std::size_t d = 0;
    int K = kKnownClassCount;
    std::vector<double> W;  // K x d, row-major
    std::vector<double> b;  // K
};

inline PocHead init_head(std::size_t d, int K, std::uint64_t seed) {
    PocHead head;
    head.d = d;
    head.K = K;
    head.W.resize(std::size_t(K) * d);
    head.b.resize(std::size_t(K));
    detail::Rng rng(seed);
    for (auto& w : head.W) w = rng.real(-0.02, 0.02);
    for (auto& v : head.b) v = rng.real(-0.02, 0.02);
    return head;
}

namespace poc_detail {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) {
    return std::min(1.0 - kProbEps, std::max(kProbEps, p));
}

}  // namespace poc_detail

// Per-class probabilities p_k = sigmoid(w_k . h + b_k).
inline std::vector<double> head_forward(const PocHead& head, const std::vector<float>& h) {
    if (h.size() != head.d) throw ContractError("head_forward: dimension mismatch");
    std::vector<double> p(head.K);
    for (int k = 0; k < head.K; ++k) {
        double z = head.b[std::size_t(k)];
        const double* row = head.W.data() + std::size_t(k) * head.d;
        for (std::size_t i = 0; i < head.d; ++i) z += row[i] * double(h[i]);
        p[std::size_t(k)] = poc_detail::sigmoid(z);
    }
    return p;
}

// Mean binary cross-entropy over instances and classes. probs and targets
// are I x K, flattened row-major. Probabilities are clamped away from 0/1.
inline double bce_loss(const std::vector<double>& probs, const std::vector<double>& targets) {
    if (probs.size() != targets.size() || probs.empty())
        throw ContractError("bce_loss: size mismatch or empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = poc_detail::clamp_prob(probs[i]);
        total -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
    }
    return total / double(probs.size());
}

// Outlier-exposure loss: BCE against a constant target t for every class.
// For t = 0.5 the minimum ln 2 is attained exactly when every p is 0.5.
inline double oe_loss(const std::vector<double>& probs, double t) {
    if (probs.empty()) throw ContractError("oe_loss: empty input");
    std::vector<double> targets(probs.size(), t);
    return bce_loss(probs, targets);
}

struct LossGradients {
    double loss = 0.0;
    std::vector<double> gW;  // K x d
    std::vector<double> gb;  // K
};

// Total loss L_BCE + lambda * L_OE over one batch, with analytic gradients.
// known_targets is I x K one-hot (flattened). The exposure batch may be
// empty, which drops the exposure term entirely.
inline LossGradients loss_and_gradients(const PocHead& head,
                                        const std::vector<const std::vector<float>*>& known,
                                        const std::vector<double>& known_targets,
                                        const std::vector<const std::vector<float>*>& exposure,
                                        double lambda, double exposure_target) {
    const std::size_t K = std::size_t(head.K);
    if (known.empty()) throw ContractError("loss_and_gradients: empty known batch");
    if (known_targets.size() != known.size() * K)
        throw ContractError("loss_and_gradients: targets size mismatch");

    LossGradients out;
    out.gW.assign(K * head.d, 0.0);
    out.gb.assign(K, 0.0);

    // dL/dz = (p - y) / (I*K) wherever the clamp is inactive; the clamp makes
    // the loss locally flat, so the gradient there is zero.
    auto accumulate = [&](const std::vector<const std::vector<float>*>& batch,
                          const std::vector<double>* targets, double target_const,
                          double weight) {
        const double norm = double(batch.size()) * double(K);
        double loss = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const std::vector<float>& h = *batch[i];
            const std::vector<double> p = head_forward(head, h);
            for (std::size_t k = 0; k < K; ++k) {
                const double y = targets ? (*targets)[i * K + k] : target_const;
                const double pc = poc_detail::clamp_prob(p[k]);
                loss -= (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc)) / norm;
                const bool clamped = p[k] != pc;
                const double gz = clamped ? 0.0 : weight * (p[k] - y) / norm;
                if (gz == 0.0) continue;
                out.gb[k] += gz;
                double* row = out.gW.data() + k * head.d;
                for (std::size_t j = 0; j < head.d; ++j) row[j] += gz * double(h[j]);
            }
        }
        return loss;
    };

    out.loss = accumulate(known, &known_targets, 0.0, 1.0);
    if (lambda != 0.0 && !exposure.empty())
        out.loss += lambda * accumulate(exposure, nullptr, exposure_target, lambda);
    return out;
}

namespace poc_detail {

inline int label_to_class_index(OpenLabel label) {
    const int k = int(label) - 1;
    if (k < 0 || k >= kKnownClassCount)
        throw ContractError("training labels must be known classes");
    return k;
}

inline std::vector<double> one_hot(OpenLabel label, std::size_t K) {
    std::vector<double> y(K, 0.0);
    y[std::size_t(label_to_class_index(label))] = 1.0;
    return y;
}

}  // namespace poc_detail

struct TrainedHead {
    PocHead head;                     // parameters with the lowest total loss
    std::vector<double> epoch_losses; // full-dataset loss after each epoch
    double best_loss = 0.0;
    int best_epoch = -1;
};

// Full-dataset total loss for a fixed head (used for epoch selection).
inline double full_loss(const PocHead& head, const FeatureBank& known_bank,
                        const FeatureBank& exposure_bank, const TrainConfig& cfg) {
    std::vector<const std::vector<float>*> known, exposure;
    std::vector<double> targets;
    for (const auto& e : known_bank.entries) {
        known.push_back(&e.vec);
        const auto y = poc_detail::one_hot(*e.label, std::size_t(head.K));
        targets.insert(targets.end(), y.begin(), y.end());
    }
    for (const auto& e : exposure_bank.entries) exposure.push_back(&e.vec);
    return loss_and_gradients(head, known, targets, exposure, cfg.lambda, cfg.exposure_target)
        .loss;
}

// Mini-batch gradient descent with a seeded shuffle per epoch. Exposure
// batches are drawn from a parallel shuffled cycle over the exposure bank.
// Returns the parameters that achieved the lowest full-dataset loss.
inline TrainedHead train_head(const FeatureBank& known_bank, const FeatureBank& exposure_bank,
                              const TrainConfig& cfg) {
    if (known_bank.entries.empty()) throw ContractError("train_head: empty known bank");
    for (const auto& e : known_bank.entries) {
        if (!e.label) throw ContractError("train_head: unlabeled entry '" + e.id + "'");
        poc_detail::label_to_class_index(*e.label);  // rejects Unknown
    }
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ContractError("train_head: epochs and batch_size must be positive");

    const std::size_t K = kKnownClassCount;
    PocHead head = init_head(known_bank.dim, int(K), cfg.seed);
    detail::Rng rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

    std::vector<std::size_t> known_order(known_bank.entries.size());
    for (std::size_t i = 0; i < known_order.size(); ++i) known_order[i] = i;
    std::vector<std::size_t> exposure_order(exposure_bank.entries.size());
    for (std::size_t i = 0; i < exposure_order.size(); ++i) exposure_order[i] = i;
    std::size_t exposure_cursor = 0;

    auto next_exposure_batch = [&](std::size_t want) {
        std::vector<const std::vector<float>*> batch;
        while (batch.size() < want && !exposure_order.empty()) {
            if (exposure_cursor == exposure_order.size()) {
                rng.shuffle(exposure_order);
                exposure_cursor = 0;
            }
            batch.push_back(&exposure_bank.entries[exposure_order[exposure_cursor]].vec);
            ++exposure_cursor;
        }
        return batch;
    };

    TrainedHead result;
    result.best_loss = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(known_order);
        for (std::size_t at = 0; at < known_order.size(); at += std::size_t(cfg.batch_size)) {
            const std::size_t stop =
                std::min(known_order.size(), at + std::size_t(cfg.batch_size));
            std::vector<const std::vector<float>*> batch;
            std::vector<double> targets;
            for (std::size_t i = at; i < stop; ++i) {
                const auto& e = known_bank.entries[known_order[i]];
                batch.push_back(&e.vec);
                const auto y = poc_detail::one_hot(*e.label, K);
                targets.insert(targets.end(), y.begin(), y.end());
            }
            const auto exposure = next_exposure_batch(batch.size());
            const LossGradients g = loss_and_gradients(head, batch, targets, exposure,
                                                       cfg.lambda, cfg.exposure_target);
            for (std::size_t i = 0; i < head.W.size(); ++i)
                head.W[i] -= cfg.learning_rate * g.gW[i];
            for (std::size_t i = 0; i < head.b.size(); ++i)
                head.b[i] -= cfg.learning_rate * g.gb[i];
        }
        const double loss = full_loss(head, known_bank, exposure_bank, cfg);
        result.epoch_losses.push_back(loss);
        if (loss < result.best_loss) {
            result.best_loss = loss;
            result.best_epoch = epoch;
            result.head = head;
        }
    }
    return result;
}

// Cosine similarity; zero vectors have similarity 0 by definition.
inline double cosine_sim(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw ContractError("cosine_sim: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// kappa-th smallest cosine distance (1 - similarity) from h to the bank.
// kappa is 1-based and must not exceed the bank size.
inline double knn_score(const std::vector<float>& h, const FeatureBank& bank, int kappa) {
    if (kappa < 1 || std::size_t(kappa) > bank.entries.size())
        throw ContractError("knn_score: kappa out of range [1, bank size]");
    std::vector<double> dists;
    dists.reserve(bank.entries.size());
    for (const auto& e : bank.entries) dists.push_back(1.0 - cosine_sim(h, e.vec));
    std::nth_element(dists.begin(), dists.begin() + (kappa - 1), dists.end());
    return dists[std::size_t(kappa - 1)];
}

// Leave-one-out KNN scores for every entry of a bank against the rest.
inline std::vector<double> loo_knn_scores(const FeatureBank& bank, int kappa) {
    if (kappa < 1 || std::size_t(kappa) + 1 > bank.entries.size())
        throw ContractError("loo_knn_scores: kappa out of range [1, bank size - 1]");
    std::vector<double> scores;
    scores.reserve(bank.entries.size());
    for (std::size_t i = 0; i < bank.entries.size(); ++i) {
        std::vector<double> dists;
        dists.reserve(bank.entries.size() - 1);
        for (std::size_t j = 0; j < bank.entries.size(); ++j) {
            if (j == i) continue;
            dists.push_back(1.0 - cosine_sim(bank.entries[i].vec, bank.entries[j].vec));
        }
        std::nth_element(dists.begin(), dists.begin() + (kappa - 1), dists.end());
        scores.push_back(dists[std::size_t(kappa - 1)]);
    }
    return scores;
}

struct CalibrationResult {
    double tau = 0.0;
    double j_stat = 0.0;  // J at tau
};

// Youden's J over a candidate grid of midpoints between consecutive distinct
// scores, plus one candidate below and one above all scores. J(tau) is the
// fraction of unknown scores above tau minus the fraction of known scores
// above tau; ties resolve to the smallest tau.
inline CalibrationResult calibrate_tau(const std::vector<double>& known_scores,
                                       const std::vector<double>& unknown_scores) {
    if (known_scores.empty() || unknown_scores.empty())
        throw ContractError("calibrate_tau: both score sets must be non-empty");

    std::vector<double> all;
    all.reserve(known_scores.size() + unknown_scores.size());
    all.insert(all.end(), known_scores.begin(), known_scores.end());
    all.insert(all.end(), unknown_scores.begin(), unknown_scores.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    auto margin = [](double v) { return 1e-9 + 1e-9 * std::abs(v); };
    std::vector<double> candidates;
    candidates.push_back(all.front() - margin(all.front()));
    for (std::size_t i = 0; i + 1 < all.size(); ++i)
        candidates.push_back(0.5 * (all[i] + all[i + 1]));
    candidates.push_back(all.back() + margin(all.back()));

    auto fraction_above = [](const std::vector<double>& scores, double tau) {
        std::size_t n = 0;
        for (double s : scores)
            if (s > tau) ++n;
        return double(n) / double(scores.size());
    };

    CalibrationResult best;
    best.j_stat = -std::numeric_limits<double>::infinity();
    for (double tau : candidates) {
        const double j = fraction_above(unknown_scores, tau) - fraction_above(known_scores, tau);
        if (j > best.j_stat) {
            best.j_stat = j;
            best.tau = tau;
        }
    }
    return best;
}

struct OpenPrediction {
    OpenLabel label = OpenLabel::Unknown;
    double knn = 0.0;             // the thresholded distance score
    std::vector<double> probs;    // head probabilities, K entries
};

// Unknown when the KNN distance exceeds tau; otherwise the argmax class with
// lowest-index tie-breaking.
inline OpenPrediction predict_open(const PocHead& head, const std::vector<float>& h,
                                   const FeatureBank& bank, int kappa, double tau) {
    OpenPrediction out;
    out.knn = knn_score(h, bank, kappa);
    out.probs = head_forward(head, h);
    if (out.knn > tau) {
        out.label = OpenLabel::Unknown;
        return out;
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < out.probs.size(); ++k)
        if (out.probs[k] > out.probs[best]) best = k;
    out.label = OpenLabel(int(best) + 1);
    return out;
}

// Serialized model: head weights (base64 little-endian f32), KNN settings,
// training configuration and the fingerprint of the bank it was trained on.
struct PocModel {
    PocHead head;
    int kappa = 8;
    std::optional<double> tau;  // absent until calibration
    TrainConfig train_config;
    std::string bank_fingerprint;
    std::string bank_file;  // path of the bank, relative to the model file
};

inline constexpr int kModelFormatVersion = 1;

namespace poc_detail {

inline std::string doubles_to_b64(const std::vector<double>& v) {
    std::string bytes;
    bytes.reserve(v.size() * 4);
    for (double x : v) detail::put_f32(bytes, float(x));
    return detail::base64_encode(reinterpret_cast<const unsigned char*>(bytes.data()),
                                 bytes.size());
}

inline std::vector<double> b64_to_doubles(const std::string& text, std::size_t expect) {
    const auto bytes = detail::base64_decode(text);
    if (bytes.size() != expect * 4)
        throw ParseError("model weights: wrong payload size");
    std::vector<double> out(expect);
    detail::ByteReader r{std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                          bytes.size())};
    for (std::size_t i = 0; i < expect; ++i) out[i] = double(r.f32());
    return out;
}

}  // namespace poc_detail

inline nlohmann::json model_to_json(const PocModel& model) {
    nlohmann::json j;
    j["format_version"] = kModelFormatVersion;
    j["K"] = model.head.K;
    j["d"] = model.head.d;
    j["kappa"] = model.kappa;
    if (model.tau)
        j["tau"] = *model.tau;
    else
        j["tau"] = nullptr;
    j["train_config"] = {{"epochs", model.train_config.epochs},
                         {"batch_size", model.train_config.batch_size},
                         {"learning_rate", model.train_config.learning_rate},
                         {"lambda", model.train_config.lambda},
                         {"exposure_target", model.train_config.exposure_target},
                         {"seed", model.train_config.seed}};
    j["bank_fingerprint"] = model.bank_fingerprint;
    j["bank_file"] = model.bank_file;
    j["W_doc"] = poc_detail::doubles_to_b64(model.head.W);
    j["b_doc"] = poc_detail::doubles_to_b64(model.head.b);
    return j;
}

inline PocModel model_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kModelFormatVersion)
            throw ParseError("model: unsupported format version " + std::to_string(version));
        PocModel m;
        m.head.K = j.at("K").get<int>();
        m.head.d = j.at("d").get<std::size_t>();
        m.kappa = j.at("kappa").get<int>();
        if (!j.at("tau").is_null()) m.tau = j.at("tau").get<double>();
        const auto& tc = j.at("train_config");
        m.train_config.epochs = tc.at("epochs").get<int>();
        m.train_config.batch_size = tc.at("batch_size").get<int>();
        m.train_config.learning_rate = tc.at("learning_rate").get<double>();
        m.train_config.lambda = tc.at("lambda").get<double>();
        m.train_config.exposure_target = tc.at("exposure_target").get<double>();
        m.train_config.seed = tc.at("seed").get<std::uint64_t>();
        m.bank_fingerprint = j.at("bank_fingerprint").get<std::string>();
        m.bank_file = j.at("bank_file").get<std::string>();
        m.head.W = poc_detail::b64_to_doubles(j.at("W_doc").get<std::string>(),
                                              std::size_t(m.head.K) * m.head.d);
        m.head.b = poc_detail::b64_to_doubles(j.at("b_doc").get<std::string>(),
                                              std::size_t(m.head.K));
        if (m.kappa < 1) throw ValidationError("model: kappa must be at least 1");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
}

inline void save_model(const PocModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write model file: " + path);
    out << model_to_json(model).dump(2) << "\n";
}

inline PocModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open model file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
    return model_from_json(j);
}

}  // namespace scope
