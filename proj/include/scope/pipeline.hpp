#pragma once

// Artifact plumbing: corpus synthesis through metric reporting as a chain
// of idempotent commands over files. Every command is byte-reproducible
// under (inputs, seed, stub mode); wall-clock numbers go to a separate
// timings file so verdict and metric artifacts never differ between runs.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <mutex>
#include <thread>

#include "scope/atcot.hpp"
#include "scope/correction.hpp"
#include "scope/corpus.hpp"
#include "scope/dear.hpp"
#include "scope/demo.hpp"
#include "scope/embed.hpp"
#include "scope/eval.hpp"
#include "scope/llm.hpp"
#include "scope/poc.hpp"

namespace scope {

struct PipelinePaths {
    std::string corpus = "out/corpus.jsonl";
    std::string bank = "out/bank.bin";
    std::string model = "out/model.json";
    std::string tfidf_instruction = "out/tfidf_instruction.json";
    std::string tfidf_readback = "out/tfidf_readback.json";
    std::string lexicon = "data/lexicon.json";
    std::string prompt_template = "data/templates/atcot_v1.txt";
    std::string verdicts = "out/verdicts.jsonl";
    std::string timings = "out/timings.json";
    std::string metrics = "out/metrics.json";
    std::string grid = "out/grid.csv";
};

struct PipelineConfig {
    std::uint64_t seed = 42;
    PipelinePaths paths;
    DemoSpec demo;
    EmbedConfig embed;
    TrainConfig train;
    TfidfConfig tfidf;  // field is set per model at fit time
    int kappa = 8;
    SupportRequest support;
    AtcotOptions atcot;
    bool stub = true;
    LlmConfig llm;
    std::size_t grid_workers = 0;  // 0 means hardware concurrency
};

// One seed drives every random draw in the run.
inline void propagate_seed(PipelineConfig& c) {
    c.demo.seed = c.seed;
    c.embed.seed = c.seed;
    c.train.seed = c.seed;
    c.support.shuffle_seed = c.seed;
    c.llm.jitter_seed = c.seed;
}

inline void validate_config(const PipelineConfig& c) {
    if (c.support.n_shot > 4)
        throw ValidationError("config: n_shot must be in [0, 4]");
    if (c.support.alpha < 0.0 || c.support.alpha > 1.0)
        throw ValidationError("config: alpha must be in [0, 1]");
    if (c.support.rho == 0) throw ValidationError("config: rho must be positive");
    if (c.kappa < 1) throw ValidationError("config: kappa must be positive");
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["paths"] = {{"corpus", c.paths.corpus},
                  {"bank", c.paths.bank},
                  {"model", c.paths.model},
                  {"tfidf_instruction", c.paths.tfidf_instruction},
                  {"tfidf_readback", c.paths.tfidf_readback},
                  {"lexicon", c.paths.lexicon},
                  {"prompt_template", c.paths.prompt_template},
                  {"verdicts", c.paths.verdicts},
                  {"timings", c.paths.timings},
                  {"metrics", c.paths.metrics},
                  {"grid", c.paths.grid}};
    j["demo"] = {{"correct_pool", c.demo.correct_pool},
                 {"unknown_variants", c.demo.unknown_variants},
                 {"train_fraction", c.demo.train_fraction},
                 {"unknown_test_fraction", c.demo.unknown_test_fraction},
                 {"unseen_rate", c.demo.unseen_rate}};
    j["embed"] = {{"kind", c.embed.kind},         {"dim", c.embed.dim},
                  {"ngram_lo", c.embed.ngram_lo}, {"ngram_hi", c.embed.ngram_hi},
                  {"base_url", c.embed.base_url}, {"model", c.embed.model},
                  {"api_key_env", c.embed.api_key_env}, {"timeout_ms", c.embed.timeout_ms}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"lambda", c.train.lambda},
                  {"exposure_target", c.train.exposure_target}};
    j["tfidf"] = {{"ngram_lo", c.tfidf.ngram_lo},
                  {"ngram_hi", c.tfidf.ngram_hi},
                  {"max_features", c.tfidf.max_features}};
    j["kappa"] = c.kappa;
    j["retrieval"] = {{"n_shot", c.support.n_shot},   {"rho", c.support.rho},
                      {"alpha", c.support.alpha},     {"anchor_pool", c.support.anchor_pool},
                      {"mmr", c.support.mmr},         {"sorted_order", c.support.sorted_order}};
    j["atcot"] = {{"include_plugin", c.atcot.include_plugin},
                  {"example_semantics", c.atcot.example_semantics},
                  {"test_semantics", c.atcot.test_semantics}};
    j["stub"] = c.stub;
    j["llm"] = {{"base_url", c.llm.base_url},
                {"model", c.llm.model},
                {"temperature", c.llm.temperature},
                {"api_key_env", c.llm.api_key_env},
                {"max_retries", c.llm.max_retries},
                {"timeout_ms", c.llm.timeout_ms},
                {"max_in_flight", c.llm.max_in_flight},
                {"backoff_base_ms", c.llm.backoff_base_ms},
                {"backoff_factor", c.llm.backoff_factor}};
    j["grid_workers"] = c.grid_workers;
    return j;
}

// Partial configs are fine: absent keys keep their defaults.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        c.paths.corpus = p.value("corpus", c.paths.corpus);
        c.paths.bank = p.value("bank", c.paths.bank);
        c.paths.model = p.value("model", c.paths.model);
        c.paths.tfidf_instruction = p.value("tfidf_instruction", c.paths.tfidf_instruction);
        c.paths.tfidf_readback = p.value("tfidf_readback", c.paths.tfidf_readback);
        c.paths.lexicon = p.value("lexicon", c.paths.lexicon);
        c.paths.prompt_template = p.value("prompt_template", c.paths.prompt_template);
        c.paths.verdicts = p.value("verdicts", c.paths.verdicts);
        c.paths.timings = p.value("timings", c.paths.timings);
        c.paths.metrics = p.value("metrics", c.paths.metrics);
        c.paths.grid = p.value("grid", c.paths.grid);
    }
    if (j.contains("demo")) {
        const auto& d = j.at("demo");
        c.demo.correct_pool = d.value("correct_pool", c.demo.correct_pool);
        c.demo.unknown_variants = d.value("unknown_variants", c.demo.unknown_variants);
        c.demo.train_fraction = d.value("train_fraction", c.demo.train_fraction);
        c.demo.unknown_test_fraction =
            d.value("unknown_test_fraction", c.demo.unknown_test_fraction);
        c.demo.unseen_rate = d.value("unseen_rate", c.demo.unseen_rate);
    }
    if (j.contains("embed")) {
        const auto& e = j.at("embed");
        c.embed.kind = e.value("kind", c.embed.kind);
        c.embed.dim = e.value("dim", c.embed.dim);
        c.embed.ngram_lo = e.value("ngram_lo", c.embed.ngram_lo);
        c.embed.ngram_hi = e.value("ngram_hi", c.embed.ngram_hi);
        c.embed.base_url = e.value("base_url", c.embed.base_url);
        c.embed.model = e.value("model", c.embed.model);
        c.embed.api_key_env = e.value("api_key_env", c.embed.api_key_env);
        c.embed.timeout_ms = e.value("timeout_ms", c.embed.timeout_ms);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
        c.train.lambda = t.value("lambda", c.train.lambda);
        c.train.exposure_target = t.value("exposure_target", c.train.exposure_target);
    }
    if (j.contains("tfidf")) {
        const auto& t = j.at("tfidf");
        c.tfidf.ngram_lo = t.value("ngram_lo", c.tfidf.ngram_lo);
        c.tfidf.ngram_hi = t.value("ngram_hi", c.tfidf.ngram_hi);
        c.tfidf.max_features = t.value("max_features", c.tfidf.max_features);
    }
    c.kappa = j.value("kappa", c.kappa);
    if (j.contains("retrieval")) {
        const auto& r = j.at("retrieval");
        c.support.n_shot = r.value("n_shot", c.support.n_shot);
        c.support.rho = r.value("rho", c.support.rho);
        c.support.alpha = r.value("alpha", c.support.alpha);
        c.support.anchor_pool = r.value("anchor_pool", c.support.anchor_pool);
        c.support.mmr = r.value("mmr", c.support.mmr);
        c.support.sorted_order = r.value("sorted_order", c.support.sorted_order);
    }
    if (j.contains("atcot")) {
        const auto& a = j.at("atcot");
        c.atcot.include_plugin = a.value("include_plugin", c.atcot.include_plugin);
        c.atcot.example_semantics = a.value("example_semantics", c.atcot.example_semantics);
        c.atcot.test_semantics = a.value("test_semantics", c.atcot.test_semantics);
    }
    c.stub = j.value("stub", c.stub);
    if (j.contains("llm")) {
        const auto& l = j.at("llm");
        c.llm.base_url = l.value("base_url", c.llm.base_url);
        c.llm.model = l.value("model", c.llm.model);
        c.llm.temperature = l.value("temperature", c.llm.temperature);
        c.llm.api_key_env = l.value("api_key_env", c.llm.api_key_env);
        c.llm.max_retries = l.value("max_retries", c.llm.max_retries);
        c.llm.timeout_ms = l.value("timeout_ms", c.llm.timeout_ms);
        c.llm.max_in_flight = l.value("max_in_flight", c.llm.max_in_flight);
        c.llm.backoff_base_ms = l.value("backoff_base_ms", c.llm.backoff_base_ms);
        c.llm.backoff_factor = l.value("backoff_factor", c.llm.backoff_factor);
    }
    c.grid_workers = j.value("grid_workers", c.grid_workers);
    propagate_seed(c);
    validate_config(c);
    return c;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

namespace pipeline_detail {

inline void ensure_parent(const std::string& path) {
    const auto dir = std::filesystem::path(path).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
}

inline void write_file(const std::string& path, const std::string& content) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out << content;
}

inline std::map<std::string, std::string> split_of(const Corpus& corpus) {
    std::map<std::string, std::string> m;
    for (const auto& p : corpus) m[p.id] = p.split;
    return m;
}

// Split sub-bank in bank order. The fingerprint gains a suffix so it can
// never be mistaken for the full bank on disk.
inline FeatureBank filter_bank(const FeatureBank& bank,
                               const std::map<std::string, std::string>& splits,
                               std::string_view split) {
    FeatureBank out;
    out.dim = bank.dim;
    out.fingerprint = bank.fingerprint + "|split=" + std::string(split);
    for (const auto& e : bank.entries) {
        const auto it = splits.find(e.id);
        if (it != splits.end() && it->second == split) out.entries.push_back(e);
    }
    return out;
}

inline void check_bank_matches(const PocModel& model, const FeatureBank& bank,
                               const char* command) {
    if (model.bank_fingerprint != bank.fingerprint)
        throw ContractError(std::string(command) +
                            ": feature bank does not match the one the model was trained on");
}

inline double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace pipeline_detail

inline Corpus cmd_synth(const PipelineConfig& cfg) {
    const Corpus corpus = make_demo_corpus(cfg.demo);
    pipeline_detail::ensure_parent(cfg.paths.corpus);
    save_corpus(corpus, cfg.paths.corpus);
    return corpus;
}

inline FeatureBank cmd_embed(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus(cfg.paths.corpus);
    const auto provider = make_provider(cfg.embed);
    const FeatureBank bank = build_feature_bank(corpus, *provider);
    pipeline_detail::ensure_parent(cfg.paths.bank);
    save_bank(bank, cfg.paths.bank);
    return bank;
}

inline PocModel cmd_train(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus(cfg.paths.corpus);
    const FeatureBank bank = load_bank(cfg.paths.bank);
    const auto splits = pipeline_detail::split_of(corpus);
    const FeatureBank known = pipeline_detail::filter_bank(bank, splits, "train");
    const FeatureBank exposure = pipeline_detail::filter_bank(bank, splits, "calibration");
    const TrainedHead trained = train_head(known, exposure, cfg.train);

    PocModel model;
    model.head = trained.head;
    model.kappa = cfg.kappa;
    model.train_config = cfg.train;
    model.bank_fingerprint = bank.fingerprint;
    model.bank_file = cfg.paths.bank;
    pipeline_detail::ensure_parent(cfg.paths.model);
    save_model(model, cfg.paths.model);
    return model;
}

inline CalibrationResult cmd_calibrate(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus(cfg.paths.corpus);
    const FeatureBank bank = load_bank(cfg.paths.bank);
    PocModel model = load_model(cfg.paths.model);
    pipeline_detail::check_bank_matches(model, bank, "cmd_calibrate");

    const auto splits = pipeline_detail::split_of(corpus);
    const FeatureBank train_bank = pipeline_detail::filter_bank(bank, splits, "train");
    const FeatureBank cal_bank = pipeline_detail::filter_bank(bank, splits, "calibration");
    if (cal_bank.entries.empty())
        throw ContractError("cmd_calibrate: no calibration-split entries in the bank");

    const std::vector<double> known = loo_knn_scores(train_bank, model.kappa);
    std::vector<double> unknown;
    unknown.reserve(cal_bank.entries.size());
    for (const auto& e : cal_bank.entries)
        unknown.push_back(knn_score(e.vec, train_bank, model.kappa));

    const CalibrationResult res = calibrate_tau(known, unknown);
    model.tau = res.tau;
    save_model(model, cfg.paths.model);
    return res;
}

namespace pipeline_detail {

// Everything cmd_infer and the grid search need in memory at once.
struct InferState {
    Corpus corpus;
    std::vector<const UtterancePair*> test;  // corpus order
    std::map<std::string, UtterancePair> by_id;
    FeatureBank bank;
    FeatureBank train_bank;
    PocModel model;
    TfidfModel tf_instr;
    TfidfModel tf_read;
    std::vector<CandidateEntry> train_cands;
    std::vector<CandidateEntry> cal_cands;
    PromptTemplate tpl;
    Lexicon lexicon;
    StubLlm stub;

    explicit InferState(Lexicon lex) : lexicon(lex), stub(std::move(lex)) {}
};

inline InferState load_infer_state(const PipelineConfig& cfg) {
    InferState st(load_lexicon(cfg.paths.lexicon));
    st.corpus = load_corpus(cfg.paths.corpus);
    st.bank = load_bank(cfg.paths.bank);
    st.model = load_model(cfg.paths.model);
    check_bank_matches(st.model, st.bank, "cmd_infer");
    if (!st.model.tau)
        throw ContractError("cmd_infer: model has no threshold; run calibrate first");
    st.tpl = load_template(cfg.paths.prompt_template);

    const auto splits = split_of(st.corpus);
    st.train_bank = filter_bank(st.bank, splits, "train");
    if (st.train_bank.entries.empty())
        throw ContractError("cmd_infer: no train-split entries in the bank");

    std::vector<std::string> train_instr, train_read;
    for (const auto& p : st.corpus) {
        if (p.split == "test") st.test.push_back(&p);
        if (p.split != "train") continue;
        train_instr.push_back(p.instruction);
        train_read.push_back(p.readback);
    }
    if (st.test.empty()) throw ContractError("cmd_infer: corpus has no test split");

    TfidfConfig tfc = cfg.tfidf;
    tfc.field = "instruction";
    st.tf_instr = fit_tfidf(train_instr, tfc);
    tfc.field = "readback";
    st.tf_read = fit_tfidf(train_read, tfc);

    for (const auto& p : st.corpus) {
        if (p.split != "train" && p.split != "calibration") continue;
        st.by_id.emplace(p.id, p);
        CandidateEntry e;
        e.id = p.id;
        e.instr_vec = vectorize(st.tf_instr, p.instruction);
        e.read_vec = vectorize(st.tf_read, p.readback);
        if (p.split == "train") {
            if (!p.label) throw ContractError("cmd_infer: train pair '" + p.id + "' unlabeled");
            e.gold = *p.label;
            st.train_cands.push_back(std::move(e));
        } else {
            e.gold = OpenLabel::Unknown;
            st.cal_cands.push_back(std::move(e));
        }
    }
    return st;
}

// Plug-in labels for every train and calibration pair, used when those
// pairs appear as prompt examples. Train pairs score against a bank that
// contains them, which pins their distance at zero; that is intended: the
// plug-in line shows what the classifier says about the example.
inline std::map<std::string, OpenLabel> example_plugin_labels(const InferState& st, int kappa,
                                                              double tau) {
    std::map<std::string, OpenLabel> out;
    for (const auto& e : st.bank.entries) {
        if (!st.by_id.count(e.id)) continue;
        out[e.id] = predict_open(st.model.head, e.vec, st.train_bank, kappa, tau).label;
    }
    return out;
}

struct PairOutcome {
    MonitorReport report;
    double llm_ms = 0.0;
    int attempts = 1;
};

// One test pair through plug-in, retrieval, prompting, the model and the
// correction gate. Pure given its inputs; safe to call from many threads.
inline PairOutcome run_pair(const InferState& st, const RetrievalIndex& index,
                            const std::map<std::string, OpenLabel>& plugin_labels,
                            const PipelineConfig& cfg, double tau, const UtterancePair& pair,
                            LlmClient* client) {
    const BankEntry* entry = st.bank.find(pair.id);
    if (!entry) throw ContractError("cmd_infer: pair '" + pair.id + "' missing from the bank");
    const OpenLabel plugin =
        predict_open(st.model.head, entry->vec, st.train_bank, st.model.kappa, tau).label;

    const auto support = index.select(vectorize(st.tf_instr, pair.instruction),
                                      vectorize(st.tf_read, pair.readback), cfg.support);
    const auto enriched = enrich_support(support, st.by_id, plugin_labels);

    AtcotOptions opts = cfg.atcot;
    if (opts.test_semantics && !(pair.annotation_instruction && pair.annotation_readback))
        opts.test_semantics = false;  // nothing gold to reveal
    const PromptBundle bundle = render_prompt(st.tpl, enriched, pair, plugin, opts);

    PairOutcome out;
    const double t0 = now_ms();
    std::string raw;
    if (client) {
        const LlmResult res = client->complete(bundle.system_text, bundle.user_text);
        raw = res.content;
        out.attempts = res.attempts;
    } else {
        raw = st.stub.complete(bundle.system_text, bundle.user_text);
    }
    out.llm_ms = now_ms() - t0;

    const LlmVerdict verdict = parse_verdict(raw, bundle.fallback_label);
    std::optional<CorrectionOutcome> correction;
    if (is_readback_anomaly(decide_final(verdict)))
        correction = reorder_correct(pair.instruction, pair.annotation_instruction, st.lexicon);
    out.report = package_report(pair.id, pair.label, plugin, verdict, correction);
    return out;
}

}  // namespace pipeline_detail

inline std::vector<MonitorReport> cmd_infer(const PipelineConfig& cfg) {
    using namespace pipeline_detail;
    const double t_start = now_ms();
    const InferState st = load_infer_state(cfg);
    const double tau = *st.model.tau;
    const auto plugin_labels = example_plugin_labels(st, st.model.kappa, tau);
    const RetrievalIndex index(st.train_cands, st.cal_cands);

    std::optional<LlmClient> client;
    if (!cfg.stub) client.emplace(cfg.llm);

    std::vector<PairOutcome> outcomes(st.test.size());
    if (client) {
        // The client's own gate caps concurrency; the pool just feeds it.
        const std::size_t workers =
            std::min<std::size_t>(std::max(1, cfg.llm.max_in_flight), st.test.size());
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::mutex error_mu;
        std::exception_ptr error;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < st.test.size();
                     i = next.fetch_add(1)) {
                    try {
                        outcomes[i] =
                            run_pair(st, index, plugin_labels, cfg, tau, *st.test[i], &*client);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(error_mu);
                        if (!error) error = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    } else {
        for (std::size_t i = 0; i < st.test.size(); ++i)
            outcomes[i] = run_pair(st, index, plugin_labels, cfg, tau, *st.test[i], nullptr);
    }

    std::string jsonl;
    std::vector<MonitorReport> reports;
    reports.reserve(outcomes.size());
    nlohmann::json per_pair = nlohmann::json::array();
    double llm_total = 0.0;
    for (const auto& o : outcomes) {
        jsonl += report_to_json(o.report).dump();
        jsonl += '\n';
        per_pair.push_back(
            {{"id", o.report.id}, {"llm_ms", o.llm_ms}, {"attempts", o.attempts}});
        llm_total += o.llm_ms;
        reports.push_back(o.report);
    }
    write_file(cfg.paths.verdicts, jsonl);

    save_tfidf(st.tf_instr, cfg.paths.tfidf_instruction);
    save_tfidf(st.tf_read, cfg.paths.tfidf_readback);

    nlohmann::json timings;
    timings["command"] = "infer";
    timings["pairs"] = outcomes.size();
    timings["total_ms"] = now_ms() - t_start;
    timings["llm_ms"] = llm_total;
    timings["per_pair"] = std::move(per_pair);
    write_file(cfg.paths.timings, timings.dump(2) + "\n");
    return reports;
}

inline std::vector<MonitorReport> load_verdicts(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("verdicts: cannot open '" + path + "'");
    std::vector<MonitorReport> reports;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        try {
            reports.push_back(report_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("verdicts '" + path + "' line " + std::to_string(lineno) + ": " +
                             e.what());
        }
    }
    if (reports.empty()) throw ParseError("verdicts '" + path + "': no records");
    return reports;
}

inline MetricsReport cmd_evaluate(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus(cfg.paths.corpus);
    const std::vector<MonitorReport> reports = load_verdicts(cfg.paths.verdicts);

    std::map<std::string, const UtterancePair*> by_id;
    for (const auto& p : corpus) by_id[p.id] = &p;

    std::vector<OpenLabel> preds, golds, plugin;
    std::vector<SemanticFrame> pred_frames, gold_frames;
    for (const auto& r : reports) {
        const auto it = by_id.find(r.id);
        if (it == by_id.end())
            throw ContractError("cmd_evaluate: verdict '" + r.id + "' not in the corpus");
        if (!r.gold) continue;
        preds.push_back(decide_final(r.verdict));
        golds.push_back(*r.gold);
        plugin.push_back(r.plugin_label);

        const UtterancePair& pair = *it->second;
        if (!pair.annotation_instruction || !pair.annotation_readback) continue;
        const auto frame_slots = [](const SemanticAnnotation& ann) {
            std::vector<std::pair<std::string, std::string>> slots;
            for (const auto& s : ann.slots) slots.emplace_back(s.name, s.value);
            return slots;
        };
        gold_frames.push_back({r.id + "#1", pair.annotation_instruction->intent,
                               frame_slots(*pair.annotation_instruction)});
        pred_frames.push_back(
            {r.id + "#1", r.verdict.intent_instruction, r.verdict.slots_instruction});
        gold_frames.push_back({r.id + "#2", pair.annotation_readback->intent,
                               frame_slots(*pair.annotation_readback)});
        pred_frames.push_back(
            {r.id + "#2", r.verdict.intent_readback, r.verdict.slots_readback});
    }
    if (preds.empty()) throw ContractError("cmd_evaluate: no verdicts carry gold labels");

    MetricsReport m;
    m.classification = classification_metrics(preds, golds);
    m.open_set = open_set_metrics(preds, golds);
    m.semantics = semantic_metrics(pred_frames, gold_frames);
    m.synergy = synergy_analysis(plugin, preds, golds);
    m.correction = correction_rate(reports);

    pipeline_detail::write_file(cfg.paths.metrics, metrics_to_json(m).dump(2) + "\n");
    return m;
}

struct GridRow {
    int kappa = 0;
    std::size_t rho = 0;
    double alpha = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};

inline std::string grid_to_csv(const std::vector<GridRow>& rows) {
    std::string out = "kappa,rho,alpha,accuracy,macro_f1\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%zu,%.2f,%.4f,%.4f\n", r.kappa, r.rho, r.alpha,
                      r.accuracy, r.macro_f1);
        out += buf;
    }
    return out;
}

// Stub-pipeline sweep over (kappa, rho, alpha). Tau is recalibrated per
// kappa; one TF-IDF fit and one feature bank serve every point. Rows come
// back sorted by accuracy, ties by macro-F1, then by parameters.
inline std::vector<GridRow> cmd_grid_search(const PipelineConfig& cfg,
                                            const std::vector<int>& kappas,
                                            const std::vector<std::size_t>& rhos,
                                            const std::vector<double>& alphas) {
    using namespace pipeline_detail;
    if (kappas.empty() || rhos.empty() || alphas.empty())
        throw ContractError("cmd_grid_search: empty grid");

    const InferState st = load_infer_state(cfg);
    const RetrievalIndex index(st.train_cands, st.cal_cands);

    // Per-kappa threshold and per-kappa plug-in labels, shared by points.
    const FeatureBank cal_bank = [&] {
        const auto splits = split_of(st.corpus);
        return filter_bank(st.bank, splits, "calibration");
    }();
    std::map<int, double> tau_of;
    std::map<int, std::map<std::string, OpenLabel>> plugin_of;
    std::map<int, std::map<std::string, OpenLabel>> test_plugin_of;
    for (int kappa : kappas) {
        const std::vector<double> known = loo_knn_scores(st.train_bank, kappa);
        std::vector<double> unknown;
        for (const auto& e : cal_bank.entries)
            unknown.push_back(knn_score(e.vec, st.train_bank, kappa));
        const double tau = calibrate_tau(known, unknown).tau;
        tau_of[kappa] = tau;
        plugin_of[kappa] = example_plugin_labels(st, kappa, tau);
        auto& test_labels = test_plugin_of[kappa];
        for (const auto* p : st.test) {
            const BankEntry* e = st.bank.find(p->id);
            if (!e) throw ContractError("cmd_grid_search: pair '" + p->id + "' not in bank");
            test_labels[p->id] = predict_open(st.model.head, e->vec, st.train_bank, kappa, tau).label;
        }
    }

    // Test-pair field vectors are parameter-independent.
    std::vector<std::vector<float>> test_instr(st.test.size()), test_read(st.test.size());
    std::vector<OpenLabel> test_gold(st.test.size());
    for (std::size_t i = 0; i < st.test.size(); ++i) {
        test_instr[i] = vectorize(st.tf_instr, st.test[i]->instruction);
        test_read[i] = vectorize(st.tf_read, st.test[i]->readback);
        if (!st.test[i]->label)
            throw ContractError("cmd_grid_search: test pair '" + st.test[i]->id + "' unlabeled");
        test_gold[i] = *st.test[i]->label;
    }

    struct Point {
        int kappa;
        std::size_t rho;
        double alpha;
    };
    std::vector<Point> points;
    for (int k : kappas)
        for (std::size_t r : rhos)
            for (double a : alphas) points.push_back({k, r, a});

    std::vector<GridRow> rows(points.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mu;
    std::exception_ptr error;

    const auto eval_point = [&](const Point& pt) {
        SupportRequest req = cfg.support;
        req.rho = pt.rho;
        req.alpha = pt.alpha;
        const auto& plugin_labels = plugin_of.at(pt.kappa);
        const auto& test_labels = test_plugin_of.at(pt.kappa);

        std::vector<OpenLabel> preds(st.test.size());
        for (std::size_t i = 0; i < st.test.size(); ++i) {
            const UtterancePair& pair = *st.test[i];
            const auto support = index.select(test_instr[i], test_read[i], req);
            const auto enriched = enrich_support(support, st.by_id, plugin_labels);
            AtcotOptions opts = cfg.atcot;
            if (opts.test_semantics &&
                !(pair.annotation_instruction && pair.annotation_readback))
                opts.test_semantics = false;
            const PromptBundle bundle =
                render_prompt(st.tpl, enriched, pair, test_labels.at(pair.id), opts);
            const std::string raw = st.stub.complete(bundle.system_text, bundle.user_text);
            preds[i] = decide_final(parse_verdict(raw, bundle.fallback_label));
        }
        const ClassificationReport rep = classification_metrics(preds, test_gold);
        GridRow row;
        row.kappa = pt.kappa;
        row.rho = pt.rho;
        row.alpha = pt.alpha;
        row.accuracy = rep.accuracy;
        row.macro_f1 = rep.macro_f1;
        return row;
    };

    std::size_t workers = cfg.grid_workers;
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, points.size());

    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < points.size(); i = next.fetch_add(1)) {
                try {
                    rows[i] = eval_point(points[i]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    std::sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
        if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
        if (a.macro_f1 != b.macro_f1) return a.macro_f1 > b.macro_f1;
        if (a.kappa != b.kappa) return a.kappa < b.kappa;
        if (a.rho != b.rho) return a.rho < b.rho;
        return a.alpha < b.alpha;
    });
    pipeline_detail::write_file(cfg.paths.grid, grid_to_csv(rows));
    return rows;
}

}  // namespace scope
