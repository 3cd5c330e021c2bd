// Command-line front end. Each subcommand maps to one pipeline stage;
// targeted flags override the loaded config, and every run is reproducible
// from (inputs, seed, stub mode).

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scope/pipeline.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t n_shot = 0;
    double alpha = 0.0;
    std::size_t rho = 0;
    int kappa = 0;
    bool stub = false;
    bool no_plugin = false;
    bool no_anchor_pool = false;
    bool no_mmr = false;
    bool shuffle_order = false;
    bool no_example_semantics = false;
    bool with_test_semantics = false;

    CLI::Option* seed_opt = nullptr;
    CLI::Option* n_shot_opt = nullptr;
    CLI::Option* alpha_opt = nullptr;
    CLI::Option* rho_opt = nullptr;
    CLI::Option* kappa_opt = nullptr;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config_path, "JSON config file (defaults used when absent)");
    o.seed_opt = cmd->add_option("--seed", o.seed, "master random seed");
    o.n_shot_opt = cmd->add_option("--n-shot", o.n_shot, "examples per class in the prompt")
                       ->check(CLI::Range(0, 4));
    o.alpha_opt = cmd->add_option("--alpha", o.alpha, "relevance/diversity trade-off")
                      ->check(CLI::Range(0.0, 1.0));
    o.rho_opt = cmd->add_option("--rho", o.rho, "anchor pool size multiplier");
    o.kappa_opt = cmd->add_option("--kappa", o.kappa, "nearest-neighbor rank for the distance score")
                      ->check(CLI::PositiveNumber);
    cmd->add_flag("--stub", o.stub, "use the deterministic offline model");
    cmd->add_flag("--no-plugin", o.no_plugin, "omit classifier labels from prompts");
    cmd->add_flag("--no-anchor-pool", o.no_anchor_pool, "rank candidates over the whole train set");
    cmd->add_flag("--no-mmr", o.no_mmr, "pick per-class examples by similarity alone");
    cmd->add_flag("--shuffle-order", o.shuffle_order, "seeded shuffle instead of sorted support");
    cmd->add_flag("--no-example-semantics", o.no_example_semantics,
                  "omit semantics lines from examples");
    cmd->add_flag("--with-test-semantics", o.with_test_semantics,
                  "reveal gold test semantics in the prompt");
}

scope::PipelineConfig build_config(const Overrides& o) {
    scope::PipelineConfig cfg;
    if (!o.config_path.empty()) cfg = scope::load_config(o.config_path);
    if (o.seed_opt->count()) cfg.seed = o.seed;
    if (o.n_shot_opt->count()) cfg.support.n_shot = o.n_shot;
    if (o.alpha_opt->count()) cfg.support.alpha = o.alpha;
    if (o.rho_opt->count()) cfg.support.rho = o.rho;
    if (o.kappa_opt->count()) cfg.kappa = o.kappa;
    if (o.stub) cfg.stub = true;
    if (o.no_plugin) cfg.atcot.include_plugin = false;
    if (o.no_anchor_pool) cfg.support.anchor_pool = false;
    if (o.no_mmr) cfg.support.mmr = false;
    if (o.shuffle_order) cfg.support.sorted_order = false;
    if (o.no_example_semantics) cfg.atcot.example_semantics = false;
    if (o.with_test_semantics) cfg.atcot.test_semantics = true;
    scope::propagate_seed(cfg);
    scope::validate_config(cfg);
    return cfg;
}

void print_distribution(const scope::Corpus& corpus) {
    for (const auto& [split, rows] : scope::class_distribution(corpus)) {
        std::printf("  %-12s", split.c_str());
        for (const auto& [label, row] : rows)
            std::printf(" %s=%zu (%.1f%%)", label.c_str(), row.count, row.percent);
        std::printf("\n");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"open-set readback monitoring pipeline"};
    app.require_subcommand(1);
    Overrides o;

    auto* synth = app.add_subcommand("synth", "generate the bundled demo corpus");
    auto* embed = app.add_subcommand("embed", "embed the corpus into a feature bank");
    auto* train = app.add_subcommand("train", "fit the open-set classifier head");
    auto* calibrate = app.add_subcommand("calibrate", "set the unknown-detection threshold");
    auto* infer = app.add_subcommand("infer", "run the monitoring pipeline on the test split");
    auto* evaluate = app.add_subcommand("evaluate", "score verdicts against gold labels");
    auto* grid = app.add_subcommand("grid-search", "sweep kappa, rho and alpha");
    for (auto* cmd : {synth, embed, train, calibrate, infer, evaluate, grid})
        add_common(cmd, o);

    CLI11_PARSE(app, argc, argv);

    try {
        const scope::PipelineConfig cfg = build_config(o);

        if (synth->parsed()) {
            const scope::Corpus corpus = scope::cmd_synth(cfg);
            std::printf("wrote %zu pairs to %s\n", corpus.size(), cfg.paths.corpus.c_str());
            print_distribution(corpus);
        } else if (embed->parsed()) {
            const scope::FeatureBank bank = scope::cmd_embed(cfg);
            std::printf("embedded %zu pairs (dim %zu) to %s\n", bank.entries.size(), bank.dim,
                        cfg.paths.bank.c_str());
        } else if (train->parsed()) {
            const scope::PocModel model = scope::cmd_train(cfg);
            std::printf("trained head (d=%zu, K=%d, kappa=%d) to %s\n", model.head.d,
                        model.head.K, model.kappa, cfg.paths.model.c_str());
        } else if (calibrate->parsed()) {
            const scope::CalibrationResult res = scope::cmd_calibrate(cfg);
            std::printf("calibrated tau=%.6f (J=%.4f) in %s\n", res.tau, res.j_stat,
                        cfg.paths.model.c_str());
        } else if (infer->parsed()) {
            const auto reports = scope::cmd_infer(cfg);
            std::printf("wrote %zu verdicts to %s\n", reports.size(),
                        cfg.paths.verdicts.c_str());
        } else if (evaluate->parsed()) {
            const scope::MetricsReport m = scope::cmd_evaluate(cfg);
            std::fputs(scope::format_metrics(m).c_str(), stdout);
            std::printf("wrote metrics to %s\n", cfg.paths.metrics.c_str());
        } else if (grid->parsed()) {
            std::vector<int> kappas;
            for (int k = 1; k <= 10; ++k) kappas.push_back(k);
            std::vector<std::size_t> rhos;
            for (std::size_t r = 3; r <= 10; ++r) rhos.push_back(r);
            std::vector<double> alphas;
            for (int a = 0; a <= 10; ++a) alphas.push_back(double(a) / 10.0);
            if (o.kappa_opt->count()) kappas = {o.kappa};
            if (o.rho_opt->count()) rhos = {o.rho};
            if (o.alpha_opt->count()) alphas = {o.alpha};

            const auto rows = scope::cmd_grid_search(cfg, kappas, rhos, alphas);
            std::printf("%zu grid points written to %s; top configurations:\n", rows.size(),
                        cfg.paths.grid.c_str());
            std::printf("  %-6s %-4s %-6s %-9s %s\n", "kappa", "rho", "alpha", "accuracy",
                        "macro_f1");
            for (std::size_t i = 0; i < rows.size() && i < 10; ++i)
                std::printf("  %-6d %-4zu %-6.2f %-9.4f %.4f\n", rows[i].kappa, rows[i].rho,
                            rows[i].alpha, rows[i].accuracy, rows[i].macro_f1);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "scope: %s\n", e.what());
        return 1;
    }
    return 0;
}
