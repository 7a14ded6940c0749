// Command-line driver: synth | pretrain | finetune | evaluate | report |
// count-params | search | run. Exit codes: 0 success, 2 config error,
// 3 stage failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bnfair/experiment.hpp"

namespace fs = std::filesystem;
using bnfair::ConfigError;
using bnfair::ExperimentConfig;
using OrderedJson = nlohmann::ordered_json;

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string policy;
};

ExperimentConfig load_config(const CliOptions& opts) {
    OrderedJson j = OrderedJson::object();
    if (!opts.config_path.empty()) {
        std::ifstream f(opts.config_path);
        if (!f) {
            throw ConfigError("config: cannot open " + opts.config_path);
        }
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        try {
            j = OrderedJson::parse(text);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: invalid JSON: ") + e.what());
        }
    }
    if (opts.seed_set) {
        j["seed"] = opts.seed;
    }
    return ExperimentConfig::from_json_text(j.dump());
}

bnfair::DatasetPair stage_dataset(const ExperimentConfig& config, const std::string& out_dir) {
    if (config.use_external_data) {
        return bnfair::prepare_dataset(config);
    }
    const std::string data_dir = out_dir + "/data";
    if (fs::exists(data_dir + "/train.feat")) {
        bnfair::DatasetPair pair;
        pair.train = bnfair::load_external(data_dir + "/train.feat", data_dir + "/train.attr");
        pair.train.split = "train";
        pair.test = bnfair::load_external(data_dir + "/test.feat", data_dir + "/test.attr");
        pair.test.split = "test";
        return pair;
    }
    bnfair::DatasetPair pair = bnfair::prepare_dataset(config);
    bnfair::write_dataset_files(pair, data_dir);
    return pair;
}

bnfair::Checkpoint stage_pretrained(const ExperimentConfig& config,
                                    const bnfair::DatasetPair& data,
                                    const std::string& out_dir, bool allow_fresh) {
    const std::string path = out_dir + "/pretrain/backbone.ckpt";
    if (fs::exists(path)) {
        return bnfair::load_checkpoint(path);
    }
    if (!allow_fresh) {
        throw std::runtime_error("no pretraining checkpoint at " + path +
                                 "; run the pretrain stage first");
    }
    bnfair::RngStream init_rng(bnfair::derive_seed(config.seed, 3));
    bnfair::Backbone fresh(config.backbone, init_rng);
    (void)data;
    return bnfair::backbone_checkpoint(fresh);
}

bnfair::TuningPolicy required_policy(const CliOptions& opts) {
    if (opts.policy.empty()) {
        throw ConfigError("--policy is required for this subcommand");
    }
    try {
        return bnfair::parse_policy(opts.policy);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    f << content;
}

OrderedJson hparams_to_json(const bnfair::FinetuneHyperparams& hp) {
    return {{"optimizer", bnfair::optimizer_arm_name(hp.arm)},
            {"lr", hp.lr},
            {"schedule", bnfair::schedule_kind_name(hp.schedule)},
            {"weight_decay", hp.weight_decay},
            {"epochs", hp.epochs},
            {"warmup_frac", hp.warmup_frac},
            {"batch", hp.batch},
            {"momentum", hp.momentum}};
}

bnfair::FinetuneHyperparams hparams_from_json(const OrderedJson& j) {
    bnfair::FinetuneHyperparams hp;
    hp.arm = bnfair::parse_optimizer_arm(j.at("optimizer").get<std::string>());
    hp.lr = j.at("lr").get<double>();
    hp.schedule = bnfair::parse_schedule_kind(j.at("schedule").get<std::string>());
    hp.weight_decay = j.at("weight_decay").get<double>();
    hp.epochs = j.at("epochs").get<std::size_t>();
    hp.warmup_frac = j.at("warmup_frac").get<double>();
    hp.batch = j.at("batch").get<std::size_t>();
    hp.momentum = j.at("momentum").get<double>();
    return hp;
}

void write_run_artifacts(const bnfair::TrainRun& run, const std::string& out_dir) {
    fs::create_directories(out_dir + "/runs");
    fs::create_directories(out_dir + "/checkpoints");
    const std::string name = bnfair::policy_name(run.policy);
    bnfair::save_checkpoint(run.checkpoint, out_dir + "/checkpoints/" + name + ".ckpt");
    OrderedJson j;
    j["policy"] = name;
    j["seed"] = run.seed;
    j["hyperparameters"] = hparams_to_json(run.hparams);
    j["counters"] = {{"steps", run.counters.steps},
                     {"backward_flops", run.counters.backward_flops},
                     {"backward_rule_executions", run.counters.backward_rule_executions},
                     {"backbone_grad_materializations",
                      run.counters.backbone_grad_materializations},
                     {"buffer_update_events", run.counters.buffer_update_events},
                     {"trainable_parameter_count", run.counters.trainable_parameter_count},
                     {"parameter_updates_total", run.counters.parameter_updates_total}};
    j["epoch_losses"] = run.epoch_losses;
    write_file(out_dir + "/runs/" + name + ".json", j.dump(2) + "\n");
}

struct EvalResult {
    bnfair::PredictionLog train_log, test_log;
    std::vector<double> thresholds;
    bnfair::FairnessReport report;
};

EvalResult evaluate_policy(const std::string& checkpoint_path,
                           const bnfair::DatasetPair& data) {
    bnfair::Checkpoint ckpt = bnfair::load_checkpoint(checkpoint_path);
    bnfair::Model model = bnfair::model_from_checkpoint(ckpt);
    model.set_stats_mode_all(bnfair::StatsMode::FrozenStats);
    EvalResult out;
    out.train_log.k = data.train.k;
    out.train_log.samples = data.train.n;
    out.train_log.names = data.train.names;
    out.train_log.scores = model.scores(data.train.features, data.train.n);
    out.train_log.labels = data.train.labels;
    out.thresholds = bnfair::calibrate_thresholds(out.train_log);
    out.test_log.k = data.test.k;
    out.test_log.samples = data.test.n;
    out.test_log.names = data.test.names;
    out.test_log.scores = model.scores(data.test.features, data.test.n);
    out.test_log.labels = data.test.labels;
    out.report = bnfair::aggregate_report(
        bnfair::pairwise_metrics(out.test_log, out.thresholds), out.test_log);
    return out;
}

int cmd_synth(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    if (config.use_external_data) {
        throw ConfigError("synth: config selects external data; nothing to generate");
    }
    const bnfair::DatasetPair pair = bnfair::prepare_dataset(config);
    bnfair::write_dataset_files(pair, opts.out_dir + "/data");
    std::printf("wrote %s/data (train %zu x %zu, test %zu, k=%zu)\n", opts.out_dir.c_str(),
                pair.train.n, pair.train.d, pair.test.n, pair.train.k);
    return 0;
}

int cmd_pretrain(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::DatasetPair data = stage_dataset(config, opts.out_dir);
    bnfair::PretrainResult result =
        bnfair::pretrain(data.train.features, data.train.n, config.backbone,
                         config.pretrain_cfg, bnfair::derive_seed(config.seed, 2));
    fs::create_directories(opts.out_dir + "/pretrain");
    bnfair::save_checkpoint(result.checkpoint, opts.out_dir + "/pretrain/backbone.ckpt");
    OrderedJson j;
    j["epochs"] = result.epoch_losses.size();
    j["mean_loss_per_epoch"] = result.epoch_losses;
    write_file(opts.out_dir + "/pretrain/log.json", j.dump(2) + "\n");
    std::printf("pretrained %zu epochs; loss %.4f -> %.4f\n", result.epoch_losses.size(),
                result.epoch_losses.empty() ? 0.0 : result.epoch_losses.front(),
                result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back());
    return 0;
}

int cmd_finetune(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::TuningPolicy policy = required_policy(opts);
    const bnfair::DatasetPair data = stage_dataset(config, opts.out_dir);
    const bnfair::Checkpoint pre = stage_pretrained(
        config, data, opts.out_dir, policy == bnfair::TuningPolicy::SupervisedScratch);
    const std::uint64_t seed =
        bnfair::derive_seed(config.seed, 100 + static_cast<std::uint64_t>(policy));
    const bnfair::TrainRun run =
        bnfair::finetune(pre, data.train, policy, config.finetune_defaults, seed);
    write_run_artifacts(run, opts.out_dir);
    std::printf("finetuned %s: %zu steps, backward flops %llu\n", opts.policy.c_str(),
                static_cast<std::size_t>(run.counters.steps),
                static_cast<unsigned long long>(run.counters.backward_flops));
    return 0;
}

int cmd_evaluate(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::TuningPolicy policy = required_policy(opts);
    const bnfair::DatasetPair data = stage_dataset(config, opts.out_dir);
    const std::string name = bnfair::policy_name(policy);
    const EvalResult eval =
        evaluate_policy(opts.out_dir + "/checkpoints/" + name + ".ckpt", data);
    fs::create_directories(opts.out_dir + "/predlogs");
    fs::create_directories(opts.out_dir + "/reports");
    bnfair::save_prediction_log(eval.train_log,
                                opts.out_dir + "/predlogs/" + name + "_train.plog");
    bnfair::save_prediction_log(eval.test_log,
                                opts.out_dir + "/predlogs/" + name + "_test.plog");
    OrderedJson j;
    j["k"] = eval.report.k;
    j["names"] = eval.report.names;
    j["rho"] = eval.report.rho_c;
    j["per_attribute_gap"] = eval.report.per_c_gap;
    j["per_attribute_worst"] = eval.report.per_c_worst;
    j["median_gap"] = eval.report.median_gap;
    j["median_worst"] = eval.report.median_worst;
    j["mean_gap_all_cells"] = eval.report.mean_gap_all_cells;
    j["valid_cells"] = eval.report.valid_cells;
    j["invalid_cells"] = eval.report.invalid_cells;
    write_file(opts.out_dir + "/reports/" + name + ".json", j.dump(2) + "\n");
    std::printf("%s: median F1-worst %.4f, median F1-gap %.4f (%llu valid cells)\n",
                name.c_str(), eval.report.median_worst, eval.report.median_gap,
                static_cast<unsigned long long>(eval.report.valid_cells));
    return 0;
}

int cmd_report(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::DatasetPair data = stage_dataset(config, opts.out_dir);
    bnfair::RegimeComparison comparison;
    comparison.config = config;
    comparison.attribute_names = data.test.names;
    const bnfair::ArchCatalog catalog = bnfair::desk_catalog(config.backbone, data.train.k);
    for (bnfair::TuningPolicy policy : config.policies) {
        const std::string name = bnfair::policy_name(policy);
        bnfair::PolicyOutcome outcome;
        outcome.policy = policy;
        const EvalResult eval =
            evaluate_policy(opts.out_dir + "/checkpoints/" + name + ".ckpt", data);
        outcome.thresholds = eval.thresholds;
        outcome.report = eval.report;
        for (std::size_t t = 0; t < outcome.report.k; ++t) {
            for (std::size_t c = 0; c < outcome.report.k; ++c) {
                if (t != c && outcome.report.pairs.at(t, c).valid) {
                    outcome.worst_cells.push_back(outcome.report.pairs.at(t, c).worst);
                }
            }
        }
        outcome.accounting = bnfair::updated_fraction(catalog, policy);
        const std::string run_path = opts.out_dir + "/runs/" + name + ".json";
        if (fs::exists(run_path)) {
            std::ifstream f(run_path);
            OrderedJson j = OrderedJson::parse(f);
            outcome.hparams = hparams_from_json(j.at("hyperparameters"));
            const OrderedJson& jc = j.at("counters");
            outcome.counters.steps = jc.at("steps").get<std::uint64_t>();
            outcome.counters.backward_flops = jc.at("backward_flops").get<std::uint64_t>();
            outcome.counters.backward_rule_executions =
                jc.at("backward_rule_executions").get<std::uint64_t>();
            outcome.counters.backbone_grad_materializations =
                jc.at("backbone_grad_materializations").get<std::uint64_t>();
            outcome.counters.buffer_update_events =
                jc.at("buffer_update_events").get<std::uint64_t>();
            outcome.counters.trainable_parameter_count =
                jc.at("trainable_parameter_count").get<std::uint64_t>();
            outcome.counters.parameter_updates_total =
                jc.at("parameter_updates_total").get<std::uint64_t>();
            outcome.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
        }
        comparison.outcomes.push_back(std::move(outcome));
    }
    const bnfair::PolicyOutcome* frozen = nullptr;
    for (const auto& outcome : comparison.outcomes) {
        if (outcome.policy == bnfair::TuningPolicy::Frozen) {
            frozen = &outcome;
        }
    }
    if (frozen != nullptr) {
        for (const auto& outcome : comparison.outcomes) {
            if (outcome.policy != bnfair::TuningPolicy::Frozen) {
                comparison.improvements.emplace_back(
                    bnfair::policy_name(outcome.policy),
                    bnfair::relative_improvement(frozen->report, outcome.report));
            }
        }
    }
    write_file(opts.out_dir + "/table.csv", bnfair::render_table_csv(comparison));
    write_file(opts.out_dir + "/distribution.csv",
               bnfair::render_distribution_csv(comparison));
    write_file(opts.out_dir + "/distribution_summary.csv",
               bnfair::render_distribution_summary_csv(comparison));
    write_file(opts.out_dir + "/distribution.svg",
               bnfair::render_distribution_svg(comparison));
    write_file(opts.out_dir + "/comparison.json", bnfair::comparison_json(comparison));
    std::printf("wrote %s/table.csv and distribution artifacts\n", opts.out_dir.c_str());
    return 0;
}

int cmd_count_params(const CliOptions& opts) {
    std::vector<bnfair::TuningPolicy> policies(bnfair::kAllPolicies.begin(),
                                               bnfair::kAllPolicies.end());
    if (!opts.policy.empty()) {
        policies = {required_policy(opts)};
    }
    const bnfair::ArchCatalog resnet = bnfair::resnet50_catalog(40);
    const bnfair::CatalogTotals totals = bnfair::count_parameters(resnet);
    std::printf("ResNet50 + 40-way head: %llu parameters, %llu buffers\n",
                static_cast<unsigned long long>(totals.parameters),
                static_cast<unsigned long long>(totals.buffers));
    std::printf("%-18s %14s %10s %16s\n", "policy", "trainable", "fraction", "buffers-updated");
    for (bnfair::TuningPolicy policy : policies) {
        const bnfair::AccountingResult acc = bnfair::updated_fraction(resnet, policy);
        std::printf("%-18s %14llu %9.4f%% %16llu\n", bnfair::policy_name(policy),
                    static_cast<unsigned long long>(acc.trainable_parameters),
                    100.0 * acc.trainable_fraction,
                    static_cast<unsigned long long>(acc.updated_buffers));
    }
    if (!opts.config_path.empty()) {
        const ExperimentConfig config = load_config(opts);
        const bnfair::ArchCatalog desk =
            bnfair::desk_catalog(config.backbone, config.use_external_data
                                                      ? 1
                                                      : config.dataset.k);
        const bnfair::CatalogTotals desk_totals = bnfair::count_parameters(desk);
        std::printf("\nConfigured desk backbone: %llu parameters, %llu buffers\n",
                    static_cast<unsigned long long>(desk_totals.parameters),
                    static_cast<unsigned long long>(desk_totals.buffers));
        for (bnfair::TuningPolicy policy : policies) {
            const bnfair::AccountingResult acc = bnfair::updated_fraction(desk, policy);
            std::printf("%-18s %14llu %9.4f%% %16llu\n", bnfair::policy_name(policy),
                        static_cast<unsigned long long>(acc.trainable_parameters),
                        100.0 * acc.trainable_fraction,
                        static_cast<unsigned long long>(acc.updated_buffers));
        }
    }
    return 0;
}

int cmd_search(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::TuningPolicy policy = required_policy(opts);
    const bnfair::DatasetPair data = stage_dataset(config, opts.out_dir);
    const bnfair::Checkpoint pre = stage_pretrained(
        config, data, opts.out_dir, policy == bnfair::TuningPolicy::SupervisedScratch);
    bnfair::SearchSpace space = config.search;
    space.defaults = config.finetune_defaults;
    const std::uint64_t seed =
        bnfair::derive_seed(config.seed, 100 + static_cast<std::uint64_t>(policy));
    bnfair::SearchResult sr =
        bnfair::random_search(space, policy, data.train, pre, seed);
    write_run_artifacts(sr.best_run, opts.out_dir);
    fs::create_directories(opts.out_dir + "/search");
    OrderedJson j;
    j["policy"] = bnfair::policy_name(policy);
    j["best_index"] = sr.best_index;
    j["trials"] = OrderedJson::array();
    for (const auto& trial : sr.trials) {
        OrderedJson jt;
        jt["hyperparameters"] = hparams_to_json(trial.hparams);
        jt["seed"] = trial.seed;
        jt["diverged"] = trial.diverged;
        if (!trial.diverged) {
            jt["val_median_f1_worst"] = trial.val_median_f1_worst;
        }
        j["trials"].push_back(jt);
    }
    write_file(opts.out_dir + "/search/" + bnfair::policy_name(policy) + ".json",
               j.dump(2) + "\n");
    std::printf("search done: best trial %zu (val median F1-worst %.4f)\n", sr.best_index,
                sr.trials[sr.best_index].val_median_f1_worst);
    return 0;
}

int cmd_run(const CliOptions& opts) {
    const ExperimentConfig config = load_config(opts);
    const bnfair::RegimeComparison comparison = bnfair::run_experiment(config, opts.out_dir);
    std::printf("experiment complete: %zu regimes, artifacts under %s\n",
                comparison.outcomes.size(), opts.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Selective fine-tuning regimes over a BatchNorm backbone with subgroup "
                 "fairness evaluation"};
    app.require_subcommand(1);

    CliOptions opts;
    auto add_common = [&](CLI::App* cmd, bool with_policy) {
        cmd->add_option("--config", opts.config_path, "JSON config file (see docs/config.md)");
        cmd->add_option("--out", opts.out_dir, "Output directory (default: out)");
        cmd->add_option("--seed", opts.seed, "Override the config seed")
            ->each([&](const std::string&) { opts.seed_set = true; });
        if (with_policy) {
            cmd->add_option("--policy", opts.policy,
                            "Tuning policy: frozen | bn-stats | bn-stats-affine | "
                            "bn-stats-skip | full-ft | supervised");
        }
    };

    std::string chosen;
    struct Cmd {
        const char* name;
        const char* help;
        bool with_policy;
        int (*fn)(const CliOptions&);
    };
    const Cmd commands[] = {
        {"synth", "Generate the synthetic dataset files", false, cmd_synth},
        {"pretrain", "Self-supervised pretraining of the backbone", false, cmd_pretrain},
        {"finetune", "Fine-tune one policy from the pretraining checkpoint", true,
         cmd_finetune},
        {"evaluate", "Calibrate thresholds and compute fairness metrics", true, cmd_evaluate},
        {"report", "Render table/distribution artifacts from stored checkpoints", false,
         cmd_report},
        {"count-params", "Per-policy parameter accounting (ResNet50 catalog)", true,
         cmd_count_params},
        {"search", "Twenty-trial random hyperparameter search for one policy", true,
         cmd_search},
        {"run", "Full pipeline: data, pretrain, all policies, evaluate, report", false,
         cmd_run},
    };
    for (const Cmd& cmd : commands) {
        CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
        add_common(sub, cmd.with_policy);
        sub->callback([&chosen, name = cmd.name]() { chosen = name; });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (const Cmd& cmd : commands) {
            if (chosen == cmd.name) {
                return cmd.fn(opts);
            }
        }
        std::fprintf(stderr, "no subcommand selected\n");
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stage failure: %s\n", e.what());
        return 3;
    }
}
