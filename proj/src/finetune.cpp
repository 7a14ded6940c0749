#include "bnfair/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "bnfair/metrics.hpp"
#include "bnfair/rng.hpp"

namespace bnfair {

ParameterPartition partition_parameters(Model& model, TuningPolicy policy) {
    if (policy == TuningPolicy::BNStatsSkip && !model.has_projection_blocks()) {
        throw std::invalid_argument(
            "bn-stats-skip requires a backbone with at least one projection block");
    }

    ParameterPartition part;
    part.trainable.insert("head.weight");
    part.trainable.insert("head.bias");

    const bool stats_all = policy != TuningPolicy::Frozen;
    if (stats_all) {
        for (const auto& bn : model.batchnorm_layers()) {
            part.stats_updating_layers.insert(bn.layer_path);
            part.stats_updating.insert(bn.layer_path + ".running_mean");
            part.stats_updating.insert(bn.layer_path + ".running_var");
        }
    }

    switch (policy) {
        case TuningPolicy::Frozen:
        case TuningPolicy::BNStats:
            break;
        case TuningPolicy::BNStatsAffine:
            for (const auto& bn : model.batchnorm_layers()) {
                part.trainable.insert(bn.layer_path + ".gamma");
                part.trainable.insert(bn.layer_path + ".beta");
            }
            break;
        case TuningPolicy::BNStatsSkip:
            for (const auto& path : model.skip_parameter_paths()) {
                part.trainable.insert(path);
            }
            break;
        case TuningPolicy::FullFT:
        case TuningPolicy::SupervisedScratch:
            for (const auto& p : model.named_parameters()) {
                part.trainable.insert(p.path);
            }
            break;
    }

    for (const auto& p : model.named_parameters()) {
        if (!part.trainable.count(p.path)) {
            part.frozen.insert(p.path);
        }
    }
    for (const auto& b : model.named_buffers()) {
        if (!part.stats_updating.count(b.path)) {
            part.frozen.insert(b.path);
        }
    }
    return part;
}

namespace {

Tensor labels_tensor(const Dataset& ds, const std::vector<std::uint32_t>& order,
                     std::size_t begin, std::size_t count) {
    std::vector<double> values(count * ds.k);
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t row = order[begin + s];
        for (std::size_t t = 0; t < ds.k; ++t) {
            values[s * ds.k + t] = static_cast<double>(ds.labels[row * ds.k + t]);
        }
    }
    return Tensor::from_values({count, ds.k}, std::move(values));
}

Tensor features_tensor(const Dataset& ds, const std::vector<std::uint32_t>& order,
                       std::size_t begin, std::size_t count) {
    std::vector<double> values(count * ds.d);
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t row = order[begin + s];
        std::copy(ds.features.begin() + row * ds.d, ds.features.begin() + (row + 1) * ds.d,
                  values.begin() + s * ds.d);
    }
    return Tensor::from_values({count, ds.d}, std::move(values));
}

}  // namespace

TrainRun finetune(const Checkpoint& pretrained_backbone, const Dataset& train,
                  TuningPolicy policy, const FinetuneHyperparams& hp, std::uint64_t seed) {
    if (train.n == 0 || train.k == 0) {
        throw std::invalid_argument("finetune: empty dataset");
    }
    if (train.d != pretrained_backbone.backbone_spec.input_dim) {
        throw std::invalid_argument("finetune: feature dim does not match backbone input dim");
    }
    if (hp.batch < 2 || train.n < hp.batch) {
        throw std::invalid_argument("finetune: need at least one full batch of >= 2 samples");
    }

    TrainRun run;
    run.policy = policy;
    run.hparams = hp;
    run.seed = seed;

    Model model(pretrained_backbone.backbone_spec, train.k, derive_seed(seed, 1));
    if (policy != TuningPolicy::SupervisedScratch) {
        load_backbone_into_model(pretrained_backbone, model);
    }

    run.partition = partition_parameters(model, policy);

    std::vector<Tensor> trainable_tensors;
    std::vector<Tensor> backbone_params;
    for (auto& p : model.named_parameters()) {
        const bool trainable = run.partition.trainable.count(p.path) != 0;
        p.tensor.set_requires_grad(trainable);
        if (trainable) {
            trainable_tensors.push_back(p.tensor);
            run.counters.trainable_parameter_count += p.tensor.size();
        }
        if (p.path.rfind("backbone.", 0) == 0) {
            backbone_params.push_back(p.tensor);
        }
    }
    for (auto& bn : model.batchnorm_layers()) {
        const bool updating = run.partition.stats_updating_layers.count(bn.layer_path) != 0;
        bn.bn->state.stats_mode = updating ? StatsMode::UpdateStats : StatsMode::FrozenStats;
        bn.bn->state.affine_trainable =
            run.partition.trainable.count(bn.layer_path + ".gamma") != 0;
        bn.bn->state.buffer_updates = 0;
    }

    // snapshot everything in the frozen set for the post-run integrity check
    std::map<std::string, std::vector<double>> frozen_before;
    for (auto& p : model.named_parameters()) {
        if (run.partition.frozen.count(p.path)) {
            frozen_before[p.path] = p.tensor.values();
        }
    }
    for (auto& b : model.named_buffers()) {
        if (run.partition.frozen.count(b.path)) {
            frozen_before[b.path] = *b.data;
        }
    }

    OptimizerConfig opt_cfg;
    opt_cfg.arm = hp.arm;
    opt_cfg.momentum = hp.momentum;
    opt_cfg.weight_decay = hp.weight_decay;
    Optimizer optimizer(trainable_tensors, opt_cfg);

    const std::size_t batches_per_epoch = train.n / hp.batch;
    const std::size_t total_steps = std::max<std::size_t>(1, hp.epochs * batches_per_epoch);
    LrSchedule schedule{hp.lr,
                        static_cast<std::size_t>(std::llround(hp.warmup_frac *
                                                              static_cast<double>(total_steps))),
                        total_steps, hp.schedule};

    RngStream shuffle_rng = RngStream(seed).substream(2);
    std::vector<std::uint32_t> order(train.n);
    std::iota(order.begin(), order.end(), 0);

    const auto t_start = std::chrono::steady_clock::now();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            Tape tape;
            double loss_value = 0.0;
            try {
                TapeScope scope(tape);
                Tensor x = features_tensor(train, order, b * hp.batch, hp.batch);
                Tensor y = labels_tensor(train, order, b * hp.batch, hp.batch);
                Tensor embeddings = model.embed(x);
                HeadForward forward = head_forward_bce(embeddings, model.head(), y);
                loss_value = forward.loss.item();
                tape.backward(forward.loss);
            } catch (const TensorError& e) {
                throw std::runtime_error("finetune diverged: policy " +
                                         std::string(policy_name(policy)) + ", epoch " +
                                         std::to_string(epoch) + ", batch " + std::to_string(b) +
                                         " (seed " + std::to_string(seed) + "): " + e.what());
            }
            run.counters.backward_flops += tape.backward_flops();
            run.counters.backward_rule_executions += tape.backward_rule_executions();
            for (const auto& p : backbone_params) {
                if (p.has_grad()) {
                    ++run.counters.backbone_grad_materializations;
                }
            }
            optimizer.step(schedule.at(step));
            optimizer.zero_grad();
            loss_sum += loss_value;
            ++step;
        }
        run.epoch_losses.push_back(loss_sum / static_cast<double>(batches_per_epoch));
    }
    run.counters.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    run.counters.steps = step;
    run.counters.parameter_updates_total = run.counters.trainable_parameter_count * step;
    for (auto& bn : model.batchnorm_layers()) {
        run.counters.buffer_update_events += bn.bn->state.buffer_updates;
    }

    // freeze integrity: a violation is a bug in the partition plumbing
    for (auto& p : model.named_parameters()) {
        auto it = frozen_before.find(p.path);
        if (it != frozen_before.end() && p.tensor.values() != it->second) {
            throw std::logic_error("partition violation: frozen parameter changed: " + p.path);
        }
    }
    for (auto& b : model.named_buffers()) {
        auto it = frozen_before.find(b.path);
        if (it != frozen_before.end() && *b.data != it->second) {
            throw std::logic_error("partition violation: frozen buffer changed: " + b.path);
        }
    }

    model.set_stats_mode_all(StatsMode::FrozenStats);
    run.checkpoint = checkpoint_from_model(model);
    return run;
}

void SearchSpace::validate() const {
    if (arms.empty() || schedules.empty() || weight_decays.empty()) {
        throw std::invalid_argument("search space: empty axis");
    }
    if (!(lr_lo > 0.0) || lr_lo > lr_hi) {
        throw std::invalid_argument("search space: bad lr range");
    }
    if (epochs_lo == 0 || epochs_lo > epochs_hi) {
        throw std::invalid_argument("search space: bad epochs range");
    }
    if (warmup_lo < 0.0 || warmup_lo > warmup_hi || warmup_hi > 1.0) {
        throw std::invalid_argument("search space: bad warmup range");
    }
    if (trials == 0) {
        throw std::invalid_argument("search space: need at least one trial");
    }
}

FinetuneHyperparams SearchSpace::sample(RngStream& rng) const {
    FinetuneHyperparams hp = defaults;  // batch size and momentum are not searched
    hp.arm = arms[rng.uniform_int(arms.size())];
    hp.lr = lr_lo == lr_hi ? lr_lo
                           : std::exp(rng.uniform(std::log(lr_lo), std::log(lr_hi)));
    hp.schedule = schedules[rng.uniform_int(schedules.size())];
    hp.weight_decay = weight_decays[rng.uniform_int(weight_decays.size())];
    hp.epochs = epochs_lo + rng.uniform_int(epochs_hi - epochs_lo + 1);
    hp.warmup_frac = rng.uniform(warmup_lo, warmup_hi);
    return hp;
}

FinetuneHyperparams SearchSpace::default_point() const {
    FinetuneHyperparams hp = defaults;
    if (std::find(arms.begin(), arms.end(), hp.arm) == arms.end()) {
        hp.arm = arms.front();
    }
    hp.lr = std::clamp(hp.lr, lr_lo, lr_hi);
    if (std::find(schedules.begin(), schedules.end(), hp.schedule) == schedules.end()) {
        hp.schedule = schedules.front();
    }
    if (std::find(weight_decays.begin(), weight_decays.end(), hp.weight_decay) ==
        weight_decays.end()) {
        hp.weight_decay = weight_decays.front();
    }
    hp.epochs = std::clamp(hp.epochs, epochs_lo, epochs_hi);
    hp.warmup_frac = std::clamp(hp.warmup_frac, warmup_lo, warmup_hi);
    return hp;
}

namespace {

Dataset subset_rows(const Dataset& ds, const std::vector<std::uint32_t>& order,
                    std::size_t begin, std::size_t end) {
    Dataset out;
    out.n = end - begin;
    out.d = ds.d;
    out.k = ds.k;
    out.names = ds.names;
    out.split = ds.split;
    out.features.resize(out.n * ds.d);
    out.labels.resize(out.n * ds.k);
    for (std::size_t i = begin; i < end; ++i) {
        const std::size_t row = order[i];
        std::copy(ds.features.begin() + row * ds.d, ds.features.begin() + (row + 1) * ds.d,
                  out.features.begin() + (i - begin) * ds.d);
        std::copy(ds.labels.begin() + row * ds.k, ds.labels.begin() + (row + 1) * ds.k,
                  out.labels.begin() + (i - begin) * ds.k);
    }
    return out;
}

PredictionLog log_for(Model& model, const Dataset& ds) {
    PredictionLog log;
    log.k = ds.k;
    log.samples = ds.n;
    log.names = ds.names;
    log.scores = model.scores(ds.features, ds.n);
    log.labels = ds.labels;
    return log;
}

}  // namespace

double validation_median_f1_worst(Model& model, const Dataset& data,
                                  const std::vector<std::uint32_t>& order, std::size_t n_fit) {
    model.set_stats_mode_all(StatsMode::FrozenStats);
    const Dataset fit = subset_rows(data, order, 0, n_fit);
    const Dataset val = subset_rows(data, order, n_fit, order.size());
    const std::vector<double> thresholds = calibrate_thresholds(log_for(model, fit));
    const PredictionLog val_log = log_for(model, val);
    const FairnessReport report = aggregate_report(pairwise_metrics(val_log, thresholds), val_log);
    return report.median_worst;
}

SearchResult random_search(const SearchSpace& space, TuningPolicy policy, const Dataset& train,
                           const Checkpoint& pretrained_backbone, std::uint64_t seed) {
    space.validate();
    if (train.n < 20) {
        throw std::invalid_argument("random_search: dataset too small to split");
    }

    RngStream root(seed);
    RngStream split_rng = root.substream(1);
    RngStream sample_rng = root.substream(2);

    std::vector<std::uint32_t> order(train.n);
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(order);
    const std::size_t n_val = std::max<std::size_t>(1, train.n / 10);
    const std::size_t n_fit = train.n - n_val;
    const Dataset fit = subset_rows(train, order, 0, n_fit);
    const Dataset val = subset_rows(train, order, n_fit, train.n);

    SearchResult result;
    double best_metric = -std::numeric_limits<double>::infinity();
    bool any_success = false;
    for (std::size_t i = 0; i < space.trials; ++i) {
        SearchTrial trial;
        trial.hparams = i == 0 ? space.default_point() : space.sample(sample_rng);
        trial.seed = derive_seed(seed, 1000 + i);
        TrainRun run;
        try {
            run = finetune(pretrained_backbone, fit, policy, trial.hparams, trial.seed);
            Model model = model_from_checkpoint(run.checkpoint);
            const std::vector<double> thresholds =
                calibrate_thresholds(log_for(model, fit));
            const PredictionLog val_log = log_for(model, val);
            const FairnessReport report =
                aggregate_report(pairwise_metrics(val_log, thresholds), val_log);
            trial.val_median_f1_worst = report.median_worst;
        } catch (const std::exception&) {
            trial.diverged = true;
        }
        if (!trial.diverged && trial.val_median_f1_worst > best_metric) {
            best_metric = trial.val_median_f1_worst;
            result.best_index = i;
            result.best_run = std::move(run);
            any_success = true;
        }
        result.trials.push_back(std::move(trial));
    }
    if (!any_success) {
        throw std::runtime_error("random_search: every trial diverged");
    }
    return result;
}

void recalibrate_buffers(Model& model, const std::vector<double>& features, std::size_t n_rows,
                         std::size_t batch, std::size_t passes) {
    if (n_rows == 0 || features.size() % n_rows != 0) {
        throw std::invalid_argument("recalibrate_buffers: bad feature matrix");
    }
    const std::size_t d = features.size() / n_rows;
    if (batch < 2 || n_rows < batch) {
        throw std::invalid_argument("recalibrate_buffers: need a full batch of >= 2 rows");
    }
    model.set_stats_mode_all(StatsMode::UpdateStats);
    const std::size_t batches = n_rows / batch;
    for (std::size_t pass = 0; pass < passes; ++pass) {
        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<double> chunk(features.begin() + b * batch * d,
                                      features.begin() + (b + 1) * batch * d);
            Tensor x = Tensor::from_values({batch, d}, std::move(chunk));
            model.embed(x);  // forward only; EMA updates the buffers
        }
    }
    model.set_stats_mode_all(StatsMode::FrozenStats);
}

namespace {

double accuracy_at_half(Model& model, const std::vector<double>& features,
                        const std::vector<std::uint8_t>& labels, std::size_t n) {
    const std::vector<double> scores = model.scores(features, n);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= 0.5;
        if (predicted == (labels[i] != 0)) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

std::vector<double> affine_shift(const std::vector<double>& features, double scale,
                                 double offset) {
    std::vector<double> out(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) {
        out[i] = scale * features[i] + offset;
    }
    return out;
}

}  // namespace

namespace {

// Scale-sensitive binary task: gaussian features, label = 1 iff the squared
// norm exceeds the chi-square median (Wilson-Hilferty). A sign-based linear
// decision is nearly invariant under a global affine input shift, so this
// norm-threshold labeling is what makes stale normalization statistics
// genuinely costly.
Dataset radial_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
    RngStream rng(seed);
    Dataset ds;
    ds.n = n;
    ds.d = d;
    ds.k = 1;
    ds.names = {"outer_shell"};
    ds.split = "scenario";
    ds.features.resize(n * d);
    ds.labels.resize(n);
    const double frac = 1.0 - 2.0 / (9.0 * static_cast<double>(d));
    const double chi2_median = static_cast<double>(d) * frac * frac * frac;
    for (std::size_t i = 0; i < n; ++i) {
        double r2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(static_cast<float>(rng.gaussian()));
            ds.features[i * d + j] = v;
            r2 += v * v;
        }
        ds.labels[i] = r2 > chi2_median ? 1 : 0;
    }
    return ds;
}

}  // namespace

RecalibrationReport recalibration_scenario(std::uint64_t seed, double shift_scale,
                                           double shift_offset) {
    constexpr std::size_t kDim = 12;
    const Dataset train = radial_dataset(4096, kDim, derive_seed(seed, 11));
    const Dataset test = radial_dataset(2048, kDim, derive_seed(seed, 21));

    const BackboneSpec bspec = BackboneSpec::small(kDim, 48, 2);
    RngStream init_rng(derive_seed(seed, 12));
    Backbone fresh(bspec, init_rng);
    const Checkpoint init = backbone_checkpoint(fresh);

    FinetuneHyperparams hp;
    hp.lr = 0.05;
    hp.epochs = 8;
    hp.batch = 128;
    const TrainRun run =
        finetune(init, train, TuningPolicy::SupervisedScratch, hp, derive_seed(seed, 13));

    constexpr std::size_t kRecalBatch = 256;
    constexpr std::size_t kRecalPasses = 25;

    Model source = model_from_checkpoint(run.checkpoint);
    recalibrate_buffers(source, train.features, train.n, kRecalBatch, kRecalPasses);

    RecalibrationReport report;
    report.shift_scale = shift_scale;
    report.shift_offset = shift_offset;
    report.acc_in_distribution =
        accuracy_at_half(source, test.features, test.labels, test.n);

    const std::vector<double> shifted_train =
        affine_shift(train.features, shift_scale, shift_offset);
    const std::vector<double> shifted_test =
        affine_shift(test.features, shift_scale, shift_offset);

    report.acc_frozen_shifted =
        accuracy_at_half(source, shifted_test, test.labels, test.n);

    Model recalibrated = model_from_checkpoint(checkpoint_from_model(source));
    recalibrate_buffers(recalibrated, shifted_train, train.n, kRecalBatch, kRecalPasses);
    report.acc_bnstats_shifted =
        accuracy_at_half(recalibrated, shifted_test, test.labels, test.n);

    report.frozen_ratio = report.acc_frozen_shifted / report.acc_in_distribution;
    report.bnstats_ratio = report.acc_bnstats_shifted / report.acc_in_distribution;
    return report;
}

}  // namespace bnfair
