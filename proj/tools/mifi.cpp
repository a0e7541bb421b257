// mifi: generate / train / evaluate / stratify / ablate.

#include <CLI11.hpp>
#include <exception>
#include <iostream>
#include <optional>

#include "mifi/cli.hpp"

using namespace mifi::cli;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> ablation;
    std::optional<std::size_t> folds;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "INI run configuration")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "override the seed (cohort seed for generate, training seed otherwise)");
    cmd->add_option("--ablation", o.ablation, "full | no_cmifm | no_mffsm | no_both | no_align");
    cmd->add_option("--folds", o.folds, "number of cross-validation folds");
    cmd->add_option("--out", o.out, "output directory (cohort for generate, reports otherwise)");
}

RunConfig resolve(const Overrides& o, bool generating) {
    RunConfig cfg = RunConfig::load(o.config);
    if (o.seed) {
        if (generating) {
            cfg.cohort.seed = *o.seed;
        } else {
            cfg.train.seed = *o.seed;
            cfg.model.seed = *o.seed;
        }
    }
    if (o.ablation) cfg.ablation = parse_ablation(*o.ablation);
    if (o.folds) cfg.train.folds = *o.folds;
    if (o.out) (generating ? cfg.cohort_dir : cfg.report_dir) = *o.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal survival model: synthetic cohorts, cross-validated training and risk stratification"};
    app.require_subcommand(1);
    Overrides o;
    bool resume = false;

    auto* generate = app.add_subcommand("generate", "write a synthetic cohort");
    auto* train = app.add_subcommand("train", "train one model per fold");
    auto* evaluate = app.add_subcommand("evaluate", "test-fold C-index per fold");
    auto* stratify = app.add_subcommand("stratify", "three-group X-tile cutoffs and KM curves");
    auto* ablate = app.add_subcommand("ablate", "train and evaluate every ablation variant");
    for (auto* cmd : {generate, train, evaluate, stratify, ablate}) add_common(cmd, o);
    train->add_flag("--resume", resume, "continue each fold from its last saved epoch");

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) {
            cmd_generate(resolve(o, true), std::cout);
        } else if (train->parsed()) {
            cmd_train(resolve(o, false), std::cout, resume);
        } else if (evaluate->parsed()) {
            cmd_evaluate(resolve(o, false), std::cout);
        } else if (stratify->parsed()) {
            cmd_stratify(resolve(o, false), std::cout);
        } else if (ablate->parsed()) {
            cmd_ablate(resolve(o, false), std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
