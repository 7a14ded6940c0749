#include "bnfair/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace bnfair {

namespace fs = std::filesystem;
using OrderedJson = nlohmann::ordered_json;

namespace {

void check_keys(const OrderedJson& j, const std::set<std::string>& allowed,
                const std::string& context) {
    if (!j.is_object()) {
        throw ConfigError("config: " + context + " must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("config: unknown key '" + it.key() + "' in " + context);
        }
    }
}

template <typename T>
void read_into(const OrderedJson& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const std::exception& e) {
            throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
        }
    }
}

template <typename Fn>
auto parse_enum(Fn&& parse, const std::string& value) {
    try {
        return parse(value);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

std::string format_double_shortest(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) {
        throw std::runtime_error("failed writing: " + path);
    }
}

double stage_seconds(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---- config ----

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig config;
    config.dataset.seed = derive_seed(config.seed, 8);
    return config;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    OrderedJson j;
    try {
        j = OrderedJson::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, {"seed", "dataset", "backbone", "pretrain", "finetune", "policies", "search"},
               "top level");

    ExperimentConfig config;
    read_into(j, "seed", config.seed);
    config.dataset = DatasetSpec::desk_default();
    config.dataset.seed = derive_seed(config.seed, 8);

    if (j.contains("dataset")) {
        const OrderedJson& jd = j.at("dataset");
        std::string kind = "synthetic";
        if (jd.contains("kind")) {
            kind = jd.at("kind").get<std::string>();
        }
        if (kind == "synthetic") {
            check_keys(jd,
                       {"kind", "n_train", "n_test", "k", "feature_dim", "latent_dim",
                        "marginals", "coupling", "noise", "seed"},
                       "dataset");
            read_into(jd, "n_train", config.dataset.n_train);
            read_into(jd, "n_test", config.dataset.n_test);
            if (jd.contains("k")) {
                config.dataset.k = jd.at("k").get<std::size_t>();
                if (!jd.contains("marginals")) {
                    throw ConfigError("config: dataset.k given without dataset.marginals");
                }
            }
            read_into(jd, "feature_dim", config.dataset.feature_dim);
            read_into(jd, "latent_dim", config.dataset.latent_dim);
            if (jd.contains("marginals")) {
                config.dataset.marginals = jd.at("marginals").get<std::vector<double>>();
                config.dataset.k = config.dataset.marginals.size();
            }
            read_into(jd, "coupling", config.dataset.coupling);
            read_into(jd, "noise", config.dataset.noise);
            read_into(jd, "seed", config.dataset.seed);
        } else if (kind == "external") {
            check_keys(jd,
                       {"kind", "train_features", "train_attributes", "test_features",
                        "test_attributes"},
                       "dataset");
            config.use_external_data = true;
            for (const char* key : {"train_features", "train_attributes", "test_features",
                                    "test_attributes"}) {
                if (!jd.contains(key)) {
                    throw ConfigError("config: external dataset needs '" + std::string(key) +
                                      "'");
                }
            }
            config.external.train_features = jd.at("train_features").get<std::string>();
            config.external.train_attributes = jd.at("train_attributes").get<std::string>();
            config.external.test_features = jd.at("test_features").get<std::string>();
            config.external.test_attributes = jd.at("test_attributes").get<std::string>();
        } else {
            throw ConfigError("config: dataset.kind must be 'synthetic' or 'external'");
        }
    }

    if (j.contains("backbone")) {
        const OrderedJson& jb = j.at("backbone");
        check_keys(jb, {"input_dim", "width", "embedding_dim", "blocks"}, "backbone");
        read_into(jb, "input_dim", config.backbone.input_dim);
        read_into(jb, "width", config.backbone.width);
        read_into(jb, "embedding_dim", config.backbone.embedding_dim);
        if (jb.contains("blocks")) {
            config.backbone.blocks.clear();
            for (const auto& jblock : jb.at("blocks")) {
                check_keys(jblock, {"width", "skip"}, "backbone.blocks[]");
                ResidualBlockSpec b;
                b.width = jblock.at("width").get<std::size_t>();
                const std::string skip = jblock.at("skip").get<std::string>();
                if (skip == "projection") {
                    b.skip_kind = SkipKind::Projection;
                } else if (skip == "identity") {
                    b.skip_kind = SkipKind::Identity;
                } else {
                    throw ConfigError("config: block skip must be 'projection' or 'identity'");
                }
                config.backbone.blocks.push_back(b);
            }
        }
        try {
            config.backbone.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    if (j.contains("pretrain")) {
        const OrderedJson& jp = j.at("pretrain");
        check_keys(jp,
                   {"epochs", "batch", "tau", "proj_dim", "lr", "momentum", "schedule",
                    "warmup_frac", "augment"},
                   "pretrain");
        read_into(jp, "epochs", config.pretrain_cfg.epochs);
        read_into(jp, "batch", config.pretrain_cfg.batch);
        read_into(jp, "tau", config.pretrain_cfg.tau);
        read_into(jp, "proj_dim", config.pretrain_cfg.proj_dim);
        read_into(jp, "lr", config.pretrain_cfg.lr);
        read_into(jp, "momentum", config.pretrain_cfg.momentum);
        if (jp.contains("schedule")) {
            config.pretrain_cfg.schedule =
                parse_enum(parse_schedule_kind, jp.at("schedule").get<std::string>());
        }
        read_into(jp, "warmup_frac", config.pretrain_cfg.warmup_frac);
        if (jp.contains("augment")) {
            const OrderedJson& ja = jp.at("augment");
            check_keys(ja, {"sigma", "mask_prob", "scale_lo", "scale_hi"}, "pretrain.augment");
            read_into(ja, "sigma", config.pretrain_cfg.augment_cfg.sigma);
            read_into(ja, "mask_prob", config.pretrain_cfg.augment_cfg.mask_prob);
            read_into(ja, "scale_lo", config.pretrain_cfg.augment_cfg.scale_lo);
            read_into(ja, "scale_hi", config.pretrain_cfg.augment_cfg.scale_hi);
        }
    }

    if (j.contains("finetune")) {
        const OrderedJson& jf = j.at("finetune");
        check_keys(jf,
                   {"optimizer", "lr", "schedule", "weight_decay", "epochs", "warmup_frac",
                    "batch", "momentum"},
                   "finetune");
        if (jf.contains("optimizer")) {
            config.finetune_defaults.arm =
                parse_enum(parse_optimizer_arm, jf.at("optimizer").get<std::string>());
        }
        read_into(jf, "lr", config.finetune_defaults.lr);
        if (jf.contains("schedule")) {
            config.finetune_defaults.schedule =
                parse_enum(parse_schedule_kind, jf.at("schedule").get<std::string>());
        }
        read_into(jf, "weight_decay", config.finetune_defaults.weight_decay);
        read_into(jf, "epochs", config.finetune_defaults.epochs);
        read_into(jf, "warmup_frac", config.finetune_defaults.warmup_frac);
        read_into(jf, "batch", config.finetune_defaults.batch);
        read_into(jf, "momentum", config.finetune_defaults.momentum);
    }

    if (j.contains("policies")) {
        config.policies.clear();
        for (const auto& jp : j.at("policies")) {
            try {
                config.policies.push_back(parse_policy(jp.get<std::string>()));
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config: ") + e.what());
            }
        }
        if (config.policies.empty()) {
            throw ConfigError("config: policies list is empty");
        }
        std::set<TuningPolicy> seen;
        for (TuningPolicy p : config.policies) {
            if (!seen.insert(p).second) {
                throw ConfigError(std::string("config: duplicate policy ") + policy_name(p));
            }
        }
    }

    if (j.contains("search")) {
        const OrderedJson& js = j.at("search");
        check_keys(js,
                   {"enabled", "trials", "optimizers", "lr_lo", "lr_hi", "schedules",
                    "weight_decays", "epochs_lo", "epochs_hi", "warmup_lo", "warmup_hi"},
                   "search");
        read_into(js, "enabled", config.search_enabled);
        read_into(js, "trials", config.search.trials);
        if (js.contains("optimizers")) {
            config.search.arms.clear();
            for (const auto& ja : js.at("optimizers")) {
                config.search.arms.push_back(parse_enum(parse_optimizer_arm, ja.get<std::string>()));
            }
        }
        read_into(js, "lr_lo", config.search.lr_lo);
        read_into(js, "lr_hi", config.search.lr_hi);
        if (js.contains("schedules")) {
            config.search.schedules.clear();
            for (const auto& jsk : js.at("schedules")) {
                config.search.schedules.push_back(parse_enum(parse_schedule_kind, jsk.get<std::string>()));
            }
        }
        if (js.contains("weight_decays")) {
            config.search.weight_decays = js.at("weight_decays").get<std::vector<double>>();
        }
        read_into(js, "epochs_lo", config.search.epochs_lo);
        read_into(js, "epochs_hi", config.search.epochs_hi);
        read_into(js, "warmup_lo", config.search.warmup_lo);
        read_into(js, "warmup_hi", config.search.warmup_hi);
        try {
            config.search.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    if (!config.use_external_data) {
        try {
            config.dataset.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    return config;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("config: cannot open " + path);
    }
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string ExperimentConfig::to_json_text() const {
    OrderedJson j;
    j["seed"] = seed;
    if (use_external_data) {
        j["dataset"] = {{"kind", "external"},
                        {"train_features", external.train_features},
                        {"train_attributes", external.train_attributes},
                        {"test_features", external.test_features},
                        {"test_attributes", external.test_attributes}};
    } else {
        OrderedJson jd;
        jd["kind"] = "synthetic";
        jd["n_train"] = dataset.n_train;
        jd["n_test"] = dataset.n_test;
        jd["k"] = dataset.k;
        jd["feature_dim"] = dataset.feature_dim;
        jd["latent_dim"] = dataset.latent_dim;
        jd["marginals"] = dataset.marginals;
        jd["coupling"] = dataset.coupling;
        jd["noise"] = dataset.noise;
        jd["seed"] = dataset.seed;
        j["dataset"] = jd;
    }
    OrderedJson jb;
    jb["input_dim"] = backbone.input_dim;
    jb["width"] = backbone.width;
    jb["embedding_dim"] = backbone.embedding_dim;
    jb["blocks"] = OrderedJson::array();
    for (const auto& b : backbone.blocks) {
        jb["blocks"].push_back(
            {{"width", b.width},
             {"skip", b.skip_kind == SkipKind::Projection ? "projection" : "identity"}});
    }
    j["backbone"] = jb;
    j["pretrain"] = {{"epochs", pretrain_cfg.epochs},
                     {"batch", pretrain_cfg.batch},
                     {"tau", pretrain_cfg.tau},
                     {"proj_dim", pretrain_cfg.proj_dim},
                     {"lr", pretrain_cfg.lr},
                     {"momentum", pretrain_cfg.momentum},
                     {"schedule", schedule_kind_name(pretrain_cfg.schedule)},
                     {"warmup_frac", pretrain_cfg.warmup_frac},
                     {"augment",
                      {{"sigma", pretrain_cfg.augment_cfg.sigma},
                       {"mask_prob", pretrain_cfg.augment_cfg.mask_prob},
                       {"scale_lo", pretrain_cfg.augment_cfg.scale_lo},
                       {"scale_hi", pretrain_cfg.augment_cfg.scale_hi}}}};
    j["finetune"] = {{"optimizer", optimizer_arm_name(finetune_defaults.arm)},
                     {"lr", finetune_defaults.lr},
                     {"schedule", schedule_kind_name(finetune_defaults.schedule)},
                     {"weight_decay", finetune_defaults.weight_decay},
                     {"epochs", finetune_defaults.epochs},
                     {"warmup_frac", finetune_defaults.warmup_frac},
                     {"batch", finetune_defaults.batch},
                     {"momentum", finetune_defaults.momentum}};
    j["policies"] = OrderedJson::array();
    for (TuningPolicy p : policies) {
        j["policies"].push_back(policy_name(p));
    }
    OrderedJson js;
    js["enabled"] = search_enabled;
    js["trials"] = search.trials;
    js["optimizers"] = OrderedJson::array();
    for (OptimizerArm arm : search.arms) {
        js["optimizers"].push_back(optimizer_arm_name(arm));
    }
    js["lr_lo"] = search.lr_lo;
    js["lr_hi"] = search.lr_hi;
    js["schedules"] = OrderedJson::array();
    for (ScheduleKind kind : search.schedules) {
        js["schedules"].push_back(schedule_kind_name(kind));
    }
    js["weight_decays"] = search.weight_decays;
    js["epochs_lo"] = search.epochs_lo;
    js["epochs_hi"] = search.epochs_hi;
    js["warmup_lo"] = search.warmup_lo;
    js["warmup_hi"] = search.warmup_hi;
    j["search"] = js;
    return j.dump(2) + "\n";
}

// ---- helpers shared with the CLI ----

DatasetPair prepare_dataset(const ExperimentConfig& config) {
    if (config.use_external_data) {
        DatasetPair pair;
        pair.train = load_external(config.external.train_features,
                                   config.external.train_attributes);
        pair.train.split = "train";
        pair.test = load_external(config.external.test_features,
                                  config.external.test_attributes);
        pair.test.split = "test";
        if (pair.train.k != pair.test.k || pair.train.names != pair.test.names) {
            throw std::runtime_error("external data: train/test attribute sets differ");
        }
        if (pair.train.d != pair.test.d) {
            throw std::runtime_error("external data: train/test feature dims differ");
        }
        return pair;
    }
    return generate_dataset(config.dataset);
}

void write_dataset_files(const DatasetPair& data, const std::string& data_dir) {
    fs::create_directories(data_dir);
    save_features(data.train, data_dir + "/train.feat");
    save_attributes(data.train, data_dir + "/train.attr");
    save_features(data.test, data_dir + "/test.feat");
    save_attributes(data.test, data_dir + "/test.attr");
}

// ---- metrics glue ----

std::vector<RelativeImprovement> relative_improvement(const FairnessReport& a,
                                                      const FairnessReport& b) {
    if (a.names != b.names) {
        throw std::invalid_argument("relative_improvement: attribute sets differ");
    }
    auto make = [](const std::string& metric, double av, double bv) {
        RelativeImprovement out;
        out.metric = metric;
        out.baseline = av;
        out.value = bv;
        out.baseline_zero = av == 0.0;
        out.value_zero = bv == 0.0;
        out.over_baseline = out.baseline_zero ? 0.0 : (bv - av) / av;
        out.over_value = out.value_zero ? 0.0 : (bv - av) / bv;
        return out;
    };
    return {make("median_f1_worst", a.median_worst, b.median_worst),
            make("mean_f1_gap", a.mean_gap_all_cells, b.mean_gap_all_cells)};
}

Quartiles quartiles_of(std::vector<double> values) {
    if (values.empty()) {
        throw std::invalid_argument("quartiles_of: empty input");
    }
    std::sort(values.begin(), values.end());
    auto quantile = [&](double p) {
        const double h = p * static_cast<double>(values.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = static_cast<std::size_t>(std::ceil(h));
        return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
    };
    Quartiles q;
    q.min = values.front();
    q.q1 = quantile(0.25);
    q.median = quantile(0.5);
    q.q3 = quantile(0.75);
    q.max = values.back();
    return q;
}

std::string format_round_half_even_2dp(double v) {
    // nearbyint under FE_TONEAREST resolves ties to even
    const double scaled = std::nearbyint(v * 100.0);
    long long n = static_cast<long long>(scaled);
    char buf[32];
    const char* sign = n < 0 ? "-" : "";
    if (n < 0) {
        n = -n;
    }
    std::snprintf(buf, sizeof(buf), "%s%lld.%02lld", sign, n / 100, n % 100);
    return buf;
}

// ---- report JSON pieces ----

namespace {

OrderedJson hparams_json(const FinetuneHyperparams& hp) {
    return {{"optimizer", optimizer_arm_name(hp.arm)},
            {"lr", hp.lr},
            {"schedule", schedule_kind_name(hp.schedule)},
            {"weight_decay", hp.weight_decay},
            {"epochs", hp.epochs},
            {"warmup_frac", hp.warmup_frac},
            {"batch", hp.batch},
            {"momentum", hp.momentum}};
}

OrderedJson counters_json(const TrainRunCounters& counters) {
    // wall-clock is intentionally omitted: artifacts must be byte-stable
    return {{"steps", counters.steps},
            {"backward_flops", counters.backward_flops},
            {"backward_rule_executions", counters.backward_rule_executions},
            {"backbone_grad_materializations", counters.backbone_grad_materializations},
            {"buffer_update_events", counters.buffer_update_events},
            {"trainable_parameter_count", counters.trainable_parameter_count},
            {"parameter_updates_total", counters.parameter_updates_total}};
}

OrderedJson report_json(const FairnessReport& report) {
    OrderedJson j;
    j["k"] = report.k;
    j["names"] = report.names;
    j["rho"] = report.rho_c;
    j["per_attribute_gap"] = report.per_c_gap;
    j["per_attribute_worst"] = report.per_c_worst;
    j["per_attribute_valid_cells"] = report.per_c_valid;
    j["median_gap"] = report.median_gap;
    j["median_worst"] = report.median_worst;
    j["mean_gap_all_cells"] = report.mean_gap_all_cells;
    j["mean_worst_all_cells"] = report.mean_worst_all_cells;
    j["valid_cells"] = report.valid_cells;
    j["invalid_cells"] = report.invalid_cells;
    j["empty_columns"] = report.empty_columns;
    OrderedJson cells = OrderedJson::array();
    for (std::size_t t = 0; t < report.k; ++t) {
        for (std::size_t c = 0; c < report.k; ++c) {
            if (t == c) {
                continue;
            }
            const PairCell& cell = report.pairs.at(t, c);
            OrderedJson jc;
            jc["task"] = report.names[t];
            jc["attribute"] = report.names[c];
            jc["valid"] = cell.valid;
            if (cell.valid) {
                jc["f1_in"] = cell.f1_c;
                jc["f1_out"] = cell.f1_not_c;
                jc["gap"] = cell.gap;
                jc["worst"] = cell.worst;
            }
            cells.push_back(jc);
        }
    }
    j["cells"] = cells;
    return j;
}

OrderedJson accounting_json(const AccountingResult& acc) {
    OrderedJson j;
    j["trainable_parameters"] = acc.trainable_parameters;
    j["updated_buffers"] = acc.updated_buffers;
    j["total_parameters"] = acc.total_parameters;
    j["total_buffers"] = acc.total_buffers;
    j["trainable_fraction"] = acc.trainable_fraction;
    return j;
}

OrderedJson trial_json(const SearchTrial& trial) {
    OrderedJson j;
    j["hyperparameters"] = hparams_json(trial.hparams);
    j["seed"] = trial.seed;
    j["diverged"] = trial.diverged;
    if (!trial.diverged) {
        j["val_median_f1_worst"] = trial.val_median_f1_worst;
    }
    return j;
}

}  // namespace

std::string comparison_json(const RegimeComparison& comparison) {
    OrderedJson j;
    j["config"] = OrderedJson::parse(comparison.config.to_json_text());
    j["attributes"] = comparison.attribute_names;
    j["pretrain_epoch_losses"] = comparison.pretrain_epoch_losses;
    j["cells_per_policy"] =
        comparison.attribute_names.size() * (comparison.attribute_names.size() - 1);
    OrderedJson policies = OrderedJson::array();
    for (const auto& outcome : comparison.outcomes) {
        OrderedJson jp;
        jp["policy"] = policy_name(outcome.policy);
        jp["label"] = policy_label(outcome.policy);
        jp["hyperparameters"] = hparams_json(outcome.hparams);
        jp["counters"] = counters_json(outcome.counters);
        jp["epoch_losses"] = outcome.epoch_losses;
        jp["thresholds"] = outcome.thresholds;
        jp["accounting"] = accounting_json(outcome.accounting);
        jp["fairness"] = report_json(outcome.report);
        if (!outcome.search_trials.empty()) {
            jp["search_best_index"] = outcome.search_best_index;
        }
        policies.push_back(jp);
    }
    j["policies"] = policies;
    OrderedJson improvements = OrderedJson::array();
    for (const auto& [name, rows] : comparison.improvements) {
        OrderedJson ji;
        ji["policy"] = name;
        ji["vs"] = "frozen";
        OrderedJson metrics = OrderedJson::array();
        for (const auto& row : rows) {
            OrderedJson jm;
            jm["metric"] = row.metric;
            jm["baseline"] = row.baseline;
            jm["value"] = row.value;
            jm["relative_over_baseline"] = row.over_baseline;
            jm["relative_over_value"] = row.over_value;
            jm["baseline_zero"] = row.baseline_zero;
            jm["value_zero"] = row.value_zero;
            metrics.push_back(jm);
        }
        ji["metrics"] = metrics;
        improvements.push_back(ji);
    }
    j["improvements_vs_frozen"] = improvements;
    if (comparison.has_qualitative) {
        j["qualitative_ordering"] = {{"frozen_median_worst", comparison.frozen_worst},
                                     {"bn_stats_median_worst", comparison.bnstats_worst},
                                     {"full_ft_median_worst", comparison.fullft_worst},
                                     {"satisfied", comparison.qualitative_ok}};
    }
    return j.dump(2) + "\n";
}

// ---- renders ----

namespace {

std::vector<std::size_t> rho_ascending_order(const RegimeComparison& comparison) {
    const auto& rho_values = comparison.outcomes.front().report.rho_c;
    std::vector<std::size_t> order(rho_values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rho_values[a] < rho_values[b]; });
    return order;
}

}  // namespace

std::string render_table_csv(const RegimeComparison& comparison) {
    if (comparison.outcomes.empty()) {
        throw std::invalid_argument("render_table_csv: no outcomes");
    }
    const auto order = rho_ascending_order(comparison);
    const auto& first = comparison.outcomes.front().report;
    std::string out = "metric,procedure";
    for (std::size_t idx : order) {
        out += "," + comparison.attribute_names[idx];
    }
    out += ",all\n";

    out += "rho,";
    for (std::size_t idx : order) {
        out += "," + format_round_half_even_2dp(first.rho_c[idx]);
    }
    out += ",\n";

    for (const char* metric : {"gap", "worst"}) {
        const bool is_gap = std::string(metric) == "gap";
        for (const auto& outcome : comparison.outcomes) {
            out += std::string(metric) + "," + policy_label(outcome.policy);
            const auto& per_c = is_gap ? outcome.report.per_c_gap : outcome.report.per_c_worst;
            for (std::size_t idx : order) {
                out += "," + format_round_half_even_2dp(per_c[idx]);
            }
            out += "," + format_round_half_even_2dp(is_gap ? outcome.report.median_gap
                                                           : outcome.report.median_worst);
            out += "\n";
        }
    }
    return out;
}

std::string render_distribution_csv(const RegimeComparison& comparison) {
    std::string out = "policy,task,attribute,f1_worst\n";
    for (const auto& outcome : comparison.outcomes) {
        const auto& report = outcome.report;
        for (std::size_t t = 0; t < report.k; ++t) {
            for (std::size_t c = 0; c < report.k; ++c) {
                if (t == c || !report.pairs.at(t, c).valid) {
                    continue;
                }
                out += std::string(policy_name(outcome.policy)) + "," + report.names[t] + "," +
                       report.names[c] + "," +
                       format_double_shortest(report.pairs.at(t, c).worst) + "\n";
            }
        }
    }
    return out;
}

std::string render_distribution_summary_csv(const RegimeComparison& comparison) {
    std::string out = "policy,count,min,q1,median,q3,max\n";
    for (const auto& outcome : comparison.outcomes) {
        const Quartiles q = quartiles_of(outcome.worst_cells);
        out += std::string(policy_name(outcome.policy)) + "," +
               std::to_string(outcome.worst_cells.size()) + "," + format_double_shortest(q.min) +
               "," + format_double_shortest(q.q1) + "," + format_double_shortest(q.median) + "," +
               format_double_shortest(q.q3) + "," + format_double_shortest(q.max) + "\n";
    }
    return out;
}

std::string render_distribution_svg(const RegimeComparison& comparison) {
    const int row_height = 56;
    const int top = 52;
    const int left = 180;
    const int plot_width = 420;
    const int height = top + row_height * static_cast<int>(comparison.outcomes.size()) + 36;
    const int width = left + plot_width + 40;

    auto x_of = [&](double v) { return left + v * plot_width; };
    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " +
           std::to_string(width) + " " + std::to_string(height) + "\">\n";
    svg += "<style>text{font-family:monospace;font-size:12px;}</style>\n";
    svg += "<text x=\"" + std::to_string(left) +
           "\" y=\"20\">F1-worst distribution over (t,c) cells</text>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double v = tick / 4.0;
        svg += "<line x1=\"" + format_double_shortest(x_of(v)) + "\" y1=\"" +
               std::to_string(top - 16) + "\" x2=\"" + format_double_shortest(x_of(v)) +
               "\" y2=\"" + std::to_string(height - 28) +
               "\" stroke=\"#ccc\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + format_double_shortest(x_of(v) - 8) + "\" y=\"" +
               std::to_string(height - 12) + "\">" + format_round_half_even_2dp(v) +
               "</text>\n";
    }
    int row = 0;
    for (const auto& outcome : comparison.outcomes) {
        const Quartiles q = quartiles_of(outcome.worst_cells);
        const int cy = top + row * row_height + row_height / 2;
        svg += "<text x=\"8\" y=\"" + std::to_string(cy + 4) + "\">" +
               policy_label(outcome.policy) + "</text>\n";
        svg += "<line x1=\"" + format_double_shortest(x_of(q.min)) + "\" y1=\"" +
               std::to_string(cy) + "\" x2=\"" + format_double_shortest(x_of(q.max)) +
               "\" y2=\"" + std::to_string(cy) + "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
        svg += "<rect x=\"" + format_double_shortest(x_of(q.q1)) + "\" y=\"" +
               std::to_string(cy - 12) + "\" width=\"" +
               format_double_shortest(std::max(1.0, x_of(q.q3) - x_of(q.q1))) +
               "\" height=\"24\" fill=\"#9ecae1\" stroke=\"#3182bd\"/>\n";
        svg += "<line x1=\"" + format_double_shortest(x_of(q.median)) + "\" y1=\"" +
               std::to_string(cy - 12) + "\" x2=\"" + format_double_shortest(x_of(q.median)) +
               "\" y2=\"" + std::to_string(cy + 12) +
               "\" stroke=\"#08519c\" stroke-width=\"2\"/>\n";
        ++row;
    }
    svg += "</svg>\n";
    return svg;
}

// ---- pipeline ----

RegimeComparison run_experiment(const ExperimentConfig& config, const std::string& out_dir) {
    if (config.policies.empty()) {
        throw ConfigError("config: policies list is empty");
    }
    fs::create_directories(out_dir);
    for (const char* sub : {"data", "pretrain", "runs", "checkpoints", "reports", "predlogs"}) {
        fs::create_directories(out_dir + "/" + sub);
    }

    RegimeComparison comparison;
    comparison.config = config;

    auto t0 = std::chrono::steady_clock::now();
    DatasetPair data = prepare_dataset(config);
    if (!config.use_external_data) {
        write_dataset_files(data, out_dir + "/data");
    }
    comparison.attribute_names = data.test.names;
    std::printf("[stage] dataset          %7.2fs  (train %zu x %zu, test %zu, k=%zu)\n",
                stage_seconds(t0), data.train.n, data.train.d, data.test.n, data.train.k);
    std::fflush(stdout);

    bool need_pretrain = false;
    for (TuningPolicy p : config.policies) {
        if (p != TuningPolicy::SupervisedScratch) {
            need_pretrain = true;
        }
    }

    Checkpoint pretrained;
    if (need_pretrain) {
        t0 = std::chrono::steady_clock::now();
        PretrainResult result = pretrain(data.train.features, data.train.n, config.backbone,
                                         config.pretrain_cfg, derive_seed(config.seed, 2));
        pretrained = std::move(result.checkpoint);
        comparison.pretrain_epoch_losses = result.epoch_losses;
        save_checkpoint(pretrained, out_dir + "/pretrain/backbone.ckpt");
        OrderedJson jlog;
        jlog["epochs"] = result.epoch_losses.size();
        jlog["mean_loss_per_epoch"] = result.epoch_losses;
        write_text_file(out_dir + "/pretrain/log.json", jlog.dump(2) + "\n");
        std::printf("[stage] pretrain         %7.2fs  (%zu epochs)\n", stage_seconds(t0),
                    result.epoch_losses.size());
        std::fflush(stdout);
    } else {
        RngStream init_rng(derive_seed(config.seed, 3));
        Backbone fresh(config.backbone, init_rng);
        pretrained = backbone_checkpoint(fresh);
    }

    const ArchCatalog catalog = desk_catalog(config.backbone, data.train.k);

    for (TuningPolicy policy : config.policies) {
        t0 = std::chrono::steady_clock::now();
        const std::uint64_t policy_seed =
            derive_seed(config.seed, 100 + static_cast<std::uint64_t>(policy));
        PolicyOutcome outcome;
        outcome.policy = policy;

        TrainRun run;
        if (config.search_enabled) {
            SearchSpace space = config.search;
            space.defaults = config.finetune_defaults;
            SearchResult sr = random_search(space, policy, data.train, pretrained, policy_seed);
            run = std::move(sr.best_run);
            outcome.search_trials = std::move(sr.trials);
            outcome.search_best_index = sr.best_index;
            fs::create_directories(out_dir + "/search");
            OrderedJson jtrials;
            jtrials["policy"] = policy_name(policy);
            jtrials["best_index"] = sr.best_index;
            jtrials["trials"] = OrderedJson::array();
            for (const auto& trial : outcome.search_trials) {
                jtrials["trials"].push_back(trial_json(trial));
            }
            write_text_file(out_dir + "/search/" + policy_name(policy) + ".json",
                            jtrials.dump(2) + "\n");
        } else {
            run = finetune(pretrained, data.train, policy, config.finetune_defaults,
                           policy_seed);
        }
        outcome.hparams = run.hparams;
        outcome.counters = run.counters;
        outcome.epoch_losses = run.epoch_losses;

        save_checkpoint(run.checkpoint,
                        out_dir + "/checkpoints/" + policy_name(policy) + ".ckpt");
        {
            OrderedJson jrun;
            jrun["policy"] = policy_name(policy);
            jrun["seed"] = run.seed;
            jrun["hyperparameters"] = hparams_json(run.hparams);
            jrun["counters"] = counters_json(run.counters);
            jrun["epoch_losses"] = run.epoch_losses;
            OrderedJson jpart;
            jpart["trainable"] =
                std::vector<std::string>(run.partition.trainable.begin(),
                                         run.partition.trainable.end());
            jpart["stats_updating"] =
                std::vector<std::string>(run.partition.stats_updating.begin(),
                                         run.partition.stats_updating.end());
            jpart["frozen"] = std::vector<std::string>(run.partition.frozen.begin(),
                                                       run.partition.frozen.end());
            jrun["partition"] = jpart;
            write_text_file(out_dir + "/runs/" + policy_name(policy) + ".json",
                            jrun.dump(2) + "\n");
        }

        Model model = model_from_checkpoint(run.checkpoint);
        PredictionLog train_log;
        train_log.k = data.train.k;
        train_log.samples = data.train.n;
        train_log.names = data.train.names;
        train_log.scores = model.scores(data.train.features, data.train.n);
        train_log.labels = data.train.labels;
        outcome.thresholds = calibrate_thresholds(train_log);

        PredictionLog test_log;
        test_log.k = data.test.k;
        test_log.samples = data.test.n;
        test_log.names = data.test.names;
        test_log.scores = model.scores(data.test.features, data.test.n);
        test_log.labels = data.test.labels;

        save_prediction_log(train_log,
                            out_dir + "/predlogs/" + policy_name(policy) + "_train.plog");
        save_prediction_log(test_log,
                            out_dir + "/predlogs/" + policy_name(policy) + "_test.plog");

        outcome.report = aggregate_report(pairwise_metrics(test_log, outcome.thresholds),
                                          test_log);
        for (std::size_t t = 0; t < outcome.report.k; ++t) {
            for (std::size_t c = 0; c < outcome.report.k; ++c) {
                if (t != c && outcome.report.pairs.at(t, c).valid) {
                    outcome.worst_cells.push_back(outcome.report.pairs.at(t, c).worst);
                }
            }
        }
        outcome.accounting = updated_fraction(catalog, policy);

        write_text_file(out_dir + "/reports/" + policy_name(policy) + ".json",
                        report_json(outcome.report).dump(2) + "\n");

        std::printf("[stage] %-16s %7.2fs  (median worst %.4f, median gap %.4f)\n",
                    policy_name(policy), stage_seconds(t0), outcome.report.median_worst,
                    outcome.report.median_gap);
        std::fflush(stdout);
        comparison.outcomes.push_back(std::move(outcome));
    }

    const PolicyOutcome* frozen = nullptr;
    const PolicyOutcome* bnstats = nullptr;
    const PolicyOutcome* fullft = nullptr;
    for (const auto& outcome : comparison.outcomes) {
        if (outcome.policy == TuningPolicy::Frozen) frozen = &outcome;
        if (outcome.policy == TuningPolicy::BNStats) bnstats = &outcome;
        if (outcome.policy == TuningPolicy::FullFT) fullft = &outcome;
    }
    if (frozen != nullptr) {
        for (const auto& outcome : comparison.outcomes) {
            if (outcome.policy == TuningPolicy::Frozen) {
                continue;
            }
            comparison.improvements.emplace_back(
                policy_name(outcome.policy),
                relative_improvement(frozen->report, outcome.report));
        }
    }
    if (frozen && bnstats && fullft) {
        comparison.has_qualitative = true;
        comparison.frozen_worst = frozen->report.median_worst;
        comparison.bnstats_worst = bnstats->report.median_worst;
        comparison.fullft_worst = fullft->report.median_worst;
        comparison.qualitative_ok = comparison.frozen_worst <= comparison.bnstats_worst &&
                                    comparison.bnstats_worst <= comparison.fullft_worst;
        if (!comparison.qualitative_ok) {
            std::printf(
                "[warn] qualitative ordering violated: median F1-worst frozen=%.4f "
                "bn-stats=%.4f full-ft=%.4f (expected frozen <= bn-stats <= full-ft)\n",
                comparison.frozen_worst, comparison.bnstats_worst, comparison.fullft_worst);
            std::fflush(stdout);
        }
    }

    write_text_file(out_dir + "/table.csv", render_table_csv(comparison));
    write_text_file(out_dir + "/distribution.csv", render_distribution_csv(comparison));
    write_text_file(out_dir + "/distribution_summary.csv",
                    render_distribution_summary_csv(comparison));
    write_text_file(out_dir + "/distribution.svg", render_distribution_svg(comparison));
    write_text_file(out_dir + "/comparison.json", comparison_json(comparison));
    return comparison;
}

}  // namespace bnfair
