#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mifi/data.hpp"
#include "mifi/losses.hpp"
#include "mifi/model.hpp"
#include "mifi/survival_stats.hpp"

namespace mifi::cli {

enum class Ablation { full, no_cmifm, no_mffsm, no_both, no_align };

inline constexpr std::array<Ablation, 5> kAllAblations{Ablation::full, Ablation::no_cmifm, Ablation::no_mffsm,
                                                       Ablation::no_both, Ablation::no_align};

std::string ablation_name(Ablation a);
Ablation parse_ablation(const std::string& name);
model::ModelVariant variant_for(Ablation a);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::size_t folds = 5;
    losses::LossWeights weights;
};

struct StratifyConfig {
    double min_group_frac = 0.1;
    // Pool z-scored test-fold risks across folds; otherwise fold 0 only.
    bool pooled = true;
};

struct RunConfig {
    std::filesystem::path cohort_dir = "cohort";
    std::filesystem::path checkpoint_dir = "checkpoints";
    std::filesystem::path report_dir = "reports";
    data::SyntheticConfig cohort;
    model::ModelConfig model;  // input_shape and tabular_dim follow [cohort]
    TrainConfig train;
    StratifyConfig stratify;
    Ablation ablation = Ablation::full;

    void validate() const;

    /// INI sections [paths] [cohort] [model] [train] [stratify]; unknown keys are errors.
    static RunConfig load(const std::filesystem::path& path);
    static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
};

struct EpochLosses {
    std::size_t epoch = 0;  // 1-based
    double rec = 0.0, align = 0.0, surv = 0.0, total = 0.0;
};

struct FoldResult {
    std::size_t fold = 0;
    std::vector<std::size_t> test;
    std::vector<double> risks;  // aligned with test
    double c_index = 0.0;
    std::optional<stats::RiskStratification> strat;
};

struct EvalReport {
    std::vector<FoldResult> folds;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation over folds
};

struct GenerateSummary {
    std::size_t n = 0;
    double censoring_rate = 0.0;
};

GenerateSummary cmd_generate(const RunConfig& cfg, std::ostream& log);

/// Trains every fold; with `resume` each fold continues from its last saved epoch.
std::vector<std::vector<EpochLosses>> cmd_train(const RunConfig& cfg, std::ostream& log, bool resume = false);
EvalReport cmd_evaluate(const RunConfig& cfg, std::ostream& log);
stats::RiskStratification cmd_stratify(const RunConfig& cfg, std::ostream& log);

struct AblationRow {
    Ablation variant;
    EvalReport report;
    std::uint64_t fold_hash = 0;
};
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& log);

// Lower-level pieces shared with the commands.

/// Standardises tabular features with statistics from `train` only.
struct TabularScaler {
    std::vector<double> mean, scale;
    static TabularScaler fit(const data::Cohort& cohort, const std::vector<std::size_t>& train);
    Tensor apply(const std::vector<double>& x) const;
};

/// Cohort on disk checked against the [cohort]/[model] settings.
data::Cohort load_checked_cohort(const RunConfig& cfg);

std::vector<EpochLosses> train_fold(const RunConfig& cfg, const data::Cohort& cohort, const data::Fold& fold,
                                    std::size_t fold_index, std::ostream& log, bool resume = false);

std::vector<double> predict_risks(const model::ModelParams& params, const RunConfig& cfg, const data::Cohort& cohort,
                                  const TabularScaler& scaler, const std::vector<std::size_t>& idx);

/// FNV-1a over the fold test indices.
std::uint64_t fold_hash(const std::vector<data::Fold>& folds);

/// Step-function KM plot for the three groups with the log-rank p in the legend.
std::string render_km_svg(const std::array<stats::SurvivalCurve, 3>& curves, double p_value);

}  // namespace mifi::cli
