#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnfair/accounting.hpp"
#include "bnfair/data.hpp"
#include "bnfair/finetune.hpp"
#include "bnfair/metrics.hpp"
#include "bnfair/pretrain.hpp"

namespace bnfair {

/// Raised on malformed configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExternalDataPaths {
    std::string train_features, train_attributes;
    std::string test_features, test_attributes;
};

/// Fully describes one experiment; re-running the same config reproduces the
/// artifact tree byte-for-byte. JSON schema is documented in docs/config.md;
/// unknown keys are rejected.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset = DatasetSpec::desk_default();
    bool use_external_data = false;
    ExternalDataPaths external;
    BackboneSpec backbone = BackboneSpec::desk_default();
    PretrainConfig pretrain_cfg;
    FinetuneHyperparams finetune_defaults;
    std::vector<TuningPolicy> policies{TuningPolicy::Frozen,        TuningPolicy::BNStats,
                                       TuningPolicy::BNStatsAffine, TuningPolicy::BNStatsSkip,
                                       TuningPolicy::FullFT,
                                       TuningPolicy::SupervisedScratch};
    bool search_enabled = false;
    SearchSpace search;

    static ExperimentConfig defaults();
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_json_file(const std::string& path);
    std::string to_json_text() const;
};

struct PolicyOutcome {
    TuningPolicy policy = TuningPolicy::Frozen;
    FinetuneHyperparams hparams;       // best trial's when searched
    TrainRunCounters counters;
    std::vector<double> epoch_losses;
    std::vector<double> thresholds;
    FairnessReport report;
    AccountingResult accounting;
    std::vector<double> worst_cells;   // valid (t,c) F1-worst values
    std::size_t search_best_index = 0; // meaningful when searched
    std::vector<SearchTrial> search_trials;
};

struct RelativeImprovement {
    std::string metric;       // "median_f1_worst" | "mean_f1_gap"
    double baseline = 0.0;    // a
    double value = 0.0;       // b
    double over_baseline = 0.0;  // (b-a)/a
    double over_value = 0.0;     // (b-a)/b
    bool baseline_zero = false;
    bool value_zero = false;
};

std::vector<RelativeImprovement> relative_improvement(const FairnessReport& a,
                                                      const FairnessReport& b);

struct RegimeComparison {
    ExperimentConfig config;
    std::vector<std::string> attribute_names;
    std::vector<double> pretrain_epoch_losses;
    std::vector<PolicyOutcome> outcomes;
    // per non-frozen policy vs the Frozen baseline, when Frozen is present
    std::vector<std::pair<std::string, std::vector<RelativeImprovement>>> improvements;
    bool has_qualitative = false;
    double frozen_worst = 0.0, bnstats_worst = 0.0, fullft_worst = 0.0;
    bool qualitative_ok = false;
};

/// Runs the full pipeline (data, one shared pretraining, per-policy
/// fine-tune/search, per-regime threshold calibration, test-split fairness
/// evaluation) and writes the artifact tree under out_dir. Timing goes to
/// stdout only, keeping artifacts deterministic.
RegimeComparison run_experiment(const ExperimentConfig& config, const std::string& out_dir);

// ---- rendering ----

/// Summary table: attributes ordered by rho ascending, a rho row, then Gap
/// and Worst blocks with one row per procedure; cells rounded half-even to
/// two decimals.
std::string render_table_csv(const RegimeComparison& comparison);

/// Per-cell F1-worst values, one row per (policy, task, attribute).
std::string render_distribution_csv(const RegimeComparison& comparison);

/// Five-number summaries per policy (linear-interpolation quartiles).
std::string render_distribution_summary_csv(const RegimeComparison& comparison);

/// Box plot of the per-cell F1-worst distribution per policy.
std::string render_distribution_svg(const RegimeComparison& comparison);

std::string comparison_json(const RegimeComparison& comparison);

/// Round-half-even to two decimals ("0.125" -> "0.12").
std::string format_round_half_even_2dp(double v);

struct Quartiles {
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};
/// Linear-interpolation quantiles (h = (n-1)p).
Quartiles quartiles_of(std::vector<double> values);

// ---- pipeline stages shared by the CLI ----

DatasetPair prepare_dataset(const ExperimentConfig& config);
void write_dataset_files(const DatasetPair& data, const std::string& data_dir);

}  // namespace bnfair
