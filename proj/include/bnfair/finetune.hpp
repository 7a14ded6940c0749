#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "bnfair/checkpoint.hpp"
#include "bnfair/data.hpp"
#include "bnfair/layers.hpp"
#include "bnfair/optimizer.hpp"
#include "bnfair/policy.hpp"

namespace bnfair {

/// Disjoint split of every parameter and buffer path of a model.
struct ParameterPartition {
    std::set<std::string> trainable;             // parameter paths
    std::set<std::string> stats_updating_layers; // BN layer paths
    std::set<std::string> stats_updating;        // those layers' buffer paths
    std::set<std::string> frozen;                // all remaining paths
};

/// Applies the regime's partition rules. Every policy trains the head.
/// Errors if the policy needs projection skips and the backbone has none.
ParameterPartition partition_parameters(Model& model, TuningPolicy policy);

struct FinetuneHyperparams {
    OptimizerArm arm = OptimizerArm::SgdMomentum;
    double lr = 0.1;
    ScheduleKind schedule = ScheduleKind::WarmupCosine;
    double weight_decay = 0.0;
    std::size_t epochs = 10;
    double warmup_frac = 0.05;
    std::size_t batch = 256;
    double momentum = 0.9;
};

struct TrainRunCounters {
    std::uint64_t steps = 0;
    std::uint64_t backward_flops = 0;
    std::uint64_t backward_rule_executions = 0;
    std::uint64_t backbone_grad_materializations = 0;
    std::uint64_t buffer_update_events = 0;
    std::uint64_t trainable_parameter_count = 0;  // scalar elements
    std::uint64_t parameter_updates_total = 0;    // elements x steps
    double wall_seconds = 0.0;  // informational; never written to artifacts
};

struct TrainRun {
    TuningPolicy policy = TuningPolicy::Frozen;
    FinetuneHyperparams hparams;
    std::uint64_t seed = 0;
    TrainRunCounters counters;
    std::vector<double> epoch_losses;
    ParameterPartition partition;
    Checkpoint checkpoint;  // final model, BN left in FrozenStats
};

/// Supervised fine-tuning of (pretrained backbone + fresh head) under the
/// given regime. SupervisedScratch reinitializes the backbone instead of
/// loading the checkpoint. Frozen runs its BN layers in FrozenStats even
/// during training; stats-updating regimes use UpdateStats while training.
/// Frozen tensors are byte-compared before/after; a change is a bug and
/// throws.
TrainRun finetune(const Checkpoint& pretrained_backbone, const Dataset& train,
                  TuningPolicy policy, const FinetuneHyperparams& hp, std::uint64_t seed);

struct SearchSpace {
    std::vector<OptimizerArm> arms = {OptimizerArm::SgdMomentum, OptimizerArm::Adaptive};
    double lr_lo = 1e-4, lr_hi = 1.0;  // log-uniform
    std::vector<ScheduleKind> schedules = {ScheduleKind::Constant, ScheduleKind::WarmupCosine,
                                           ScheduleKind::OneCycle};
    std::vector<double> weight_decays = {0.0, 1e-5, 1e-4};
    std::size_t epochs_lo = 5, epochs_hi = 30;
    double warmup_lo = 0.0, warmup_hi = 0.1;
    std::size_t trials = 20;
    FinetuneHyperparams defaults;  // injected (clamped into the space) as trial 0

    FinetuneHyperparams sample(RngStream& rng) const;
    FinetuneHyperparams default_point() const;
    void validate() const;
};

struct SearchTrial {
    FinetuneHyperparams hparams;
    std::uint64_t seed = 0;
    bool diverged = false;
    double val_median_f1_worst = 0.0;
};

struct SearchResult {
    std::vector<SearchTrial> trials;
    std::size_t best_index = 0;
    TrainRun best_run;
};

/// Twenty deterministic trials; the metric is the median F1-worst on a
/// held-out 10% of the train split (thresholds calibrated on the other 90%).
/// Ties break toward the lower trial index; a run that diverges is recorded
/// and skipped.
SearchResult random_search(const SearchSpace& space, TuningPolicy policy, const Dataset& train,
                           const Checkpoint& pretrained_backbone, std::uint64_t seed);

/// Validation metric used by the search, exposed for reuse: fine-tunes on
/// rows [0, n_fit) and scores median F1-worst on rows [n_fit, n).
double validation_median_f1_worst(Model& model, const Dataset& data,
                                  const std::vector<std::uint32_t>& order, std::size_t n_fit);

/// Buffer recalibration: EMA forward passes over the features in UpdateStats
/// mode (labels are not an input). Batches are taken in order, partial tail
/// dropped.
void recalibrate_buffers(Model& model, const std::vector<double>& features, std::size_t n_rows,
                         std::size_t batch, std::size_t passes);

struct RecalibrationReport {
    double acc_in_distribution = 0.0;  // reference accuracy on the source test split
    double acc_frozen_shifted = 0.0;   // frozen buffers, shifted test split
    double acc_bnstats_shifted = 0.0;  // buffers recalibrated on the shifted train split
    double frozen_ratio = 0.0;         // acc_frozen_shifted / acc_in_distribution
    double bnstats_ratio = 0.0;
    double shift_scale = 2.0;
    double shift_offset = 1.0;
};

/// Covariate-shift recovery scenario: train a small supervised model on
/// distribution A, apply x -> scale*x + offset, then compare a fully frozen
/// model against one whose BN buffers are recalibrated on the shifted train
/// features. Accuracy is the fraction of correct 0.5-threshold predictions.
RecalibrationReport recalibration_scenario(std::uint64_t seed, double shift_scale = 2.0,
                                           double shift_offset = 1.0);

}  // namespace bnfair
