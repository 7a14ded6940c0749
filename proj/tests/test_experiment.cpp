#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "bnfair/experiment.hpp"

using namespace bnfair;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "seed": 17,
  "dataset": {
    "kind": "synthetic",
    "n_train": 1200,
    "n_test": 400,
    "feature_dim": 24,
    "latent_dim": 8,
    "marginals": [0.1, 0.3, 0.5]
  },
  "backbone": {
    "input_dim": 24,
    "width": 32,
    "embedding_dim": 32,
    "blocks": [
      {"width": 32, "skip": "projection"},
      {"width": 32, "skip": "identity"}
    ]
  },
  "pretrain": {"epochs": 2, "batch": 128},
  "finetune": {"epochs": 2, "batch": 128},
  "policies": ["frozen", "bn-stats"]
})";

std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& root) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        std::ifstream f(entry.path(), std::ios::binary);
        out[fs::relative(entry.path(), root).string()] = {
            std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    }
    return out;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cells.push_back(cell);
    }
    return cells;
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides, strictness") {
    const ExperimentConfig defaults = ExperimentConfig::defaults();
    CHECK(defaults.policies.size() == 6);
    CHECK(defaults.dataset.k == 11);

    const ExperimentConfig parsed = ExperimentConfig::from_json_text(kSmallConfig);
    CHECK(parsed.seed == 17);
    CHECK(parsed.dataset.k == 3);
    CHECK(parsed.policies.size() == 2);

    // round-trip through the serialized form
    const ExperimentConfig again = ExperimentConfig::from_json_text(parsed.to_json_text());
    CHECK(again.to_json_text() == parsed.to_json_text());

    CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"sedd": 1})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"dataset": {"kind": "other"}})"),
                    ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_json_text(R"({"policies": ["frozen", "frozen"]})"),
        ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"policies": []})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"finetune": {"schedule": "x"}})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text("not json"), ConfigError);
    // dataset seed defaults derive from the experiment seed
    const ExperimentConfig a = ExperimentConfig::from_json_text(R"({"seed": 1})");
    const ExperimentConfig b = ExperimentConfig::from_json_text(R"({"seed": 2})");
    CHECK(a.dataset.seed != b.dataset.seed);
}

TEST_CASE("two-decimal rounding is half-even") {
    CHECK(format_round_half_even_2dp(0.125) == "0.12");   // tie to even (12)
    CHECK(format_round_half_even_2dp(0.375) == "0.38");   // tie to even (38)
    CHECK(format_round_half_even_2dp(0.0) == "0.00");
    CHECK(format_round_half_even_2dp(1.0) == "1.00");
    CHECK(format_round_half_even_2dp(0.999) == "1.00");
    CHECK(format_round_half_even_2dp(0.004) == "0.00");
    CHECK(format_round_half_even_2dp(-0.125) == "-0.12");
}

TEST_CASE("relative improvement emits both denominator conventions") {
    FairnessReport a, b;
    a.names = b.names = {"x", "y"};
    a.median_worst = 0.43;
    b.median_worst = 0.69;
    a.mean_gap_all_cells = 0.2;
    b.mean_gap_all_cells = 0.1;
    const auto rows = relative_improvement(a, b);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].metric == "median_f1_worst");
    CHECK(rows[0].over_baseline == doctest::Approx(0.604651).epsilon(1e-5));
    CHECK(rows[0].over_value == doctest::Approx(0.376812).epsilon(1e-5));
    CHECK(rows[1].over_baseline == doctest::Approx(-0.5));

    // identical reports: zero both ways
    const auto same = relative_improvement(a, a);
    CHECK(same[0].over_baseline == 0.0);
    CHECK(same[0].over_value == 0.0);

    // swapping arguments relates the two conventions algebraically
    const auto swapped = relative_improvement(b, a);
    CHECK(swapped[0].over_baseline == doctest::Approx(-rows[0].over_value).epsilon(1e-12));
    CHECK(swapped[0].over_value == doctest::Approx(-rows[0].over_baseline).epsilon(1e-12));

    // zero denominators are flagged
    FairnessReport z = a;
    z.median_worst = 0.0;
    z.mean_gap_all_cells = 0.0;
    const auto flagged = relative_improvement(z, b);
    CHECK(flagged[0].baseline_zero);

    FairnessReport other = a;
    other.names = {"x"};
    CHECK_THROWS_AS(relative_improvement(a, other), std::invalid_argument);
}

TEST_CASE("quartiles match a sort-based recomputation") {
    RngStream rng(5);
    for (int round = 0; round < 30; ++round) {
        const std::size_t n = 1 + rng.uniform_int(40);
        std::vector<double> values(n);
        for (double& v : values) v = rng.uniform();
        const Quartiles q = quartiles_of(values);

        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        auto expect = [&](double p) {
            const double h = p * static_cast<double>(n - 1);
            const std::size_t lo = static_cast<std::size_t>(h);
            const std::size_t hi = lo + 1 < n ? lo + 1 : lo;
            return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
        };
        CHECK(q.min == sorted.front());
        CHECK(q.max == sorted.back());
        CHECK(q.q1 == doctest::Approx(expect(0.25)).epsilon(1e-12));
        CHECK(q.median == doctest::Approx(expect(0.5)).epsilon(1e-12));
        CHECK(q.q3 == doctest::Approx(expect(0.75)).epsilon(1e-12));
    }
    // single value: the box collapses to a point
    const Quartiles point = quartiles_of({0.37});
    CHECK(point.min == 0.37);
    CHECK(point.q1 == 0.37);
    CHECK(point.median == 0.37);
    CHECK(point.q3 == 0.37);
    CHECK(point.max == 0.37);
}

TEST_CASE("small experiment: artifacts, determinism, CSV/JSON consistency") {
    const ExperimentConfig config = ExperimentConfig::from_json_text(kSmallConfig);
    const fs::path dir_a = fresh_dir("bnfair_exp_a");
    const fs::path dir_b = fresh_dir("bnfair_exp_b");

    const RegimeComparison comparison = run_experiment(config, dir_a.string());
    REQUIRE(comparison.outcomes.size() == 2);

    // expected artifact files exist
    for (const char* rel :
         {"table.csv", "distribution.csv", "distribution_summary.csv", "distribution.svg",
          "comparison.json", "data/train.feat", "data/train.attr", "pretrain/backbone.ckpt",
          "pretrain/log.json", "runs/frozen.json", "checkpoints/frozen.ckpt",
          "reports/bn-stats.json", "predlogs/frozen_test.plog"}) {
        CHECK(fs::exists(dir_a / rel));
    }

    // deleting the output directory and re-running reproduces it byte-for-byte
    run_experiment(config, dir_b.string());
    const auto tree_a = tree_bytes(dir_a);
    const auto tree_b = tree_bytes(dir_b);
    REQUIRE(tree_a.size() == tree_b.size());
    for (const auto& [rel, bytes] : tree_a) {
        CHECK(tree_b.at(rel) == bytes);
    }

    // K(K-1) cell count reported
    {
        std::ifstream f(dir_a / "comparison.json");
        const auto j = nlohmann::ordered_json::parse(f);
        CHECK(j.at("cells_per_policy").get<std::size_t>() == 3 * 2);
    }

    // every CSV display cell equals the JSON full-precision value rounded
    {
        std::ifstream f(dir_a / "comparison.json");
        const auto j = nlohmann::ordered_json::parse(f);
        std::ifstream csv(dir_a / "table.csv");
        std::string line;
        std::getline(csv, line);
        const std::vector<std::string> header = split_line(line);
        const std::size_t k = comparison.attribute_names.size();
        std::map<std::string, std::size_t> attr_of;
        for (std::size_t i = 0; i < comparison.attribute_names.size(); ++i) {
            attr_of[comparison.attribute_names[i]] = i;
        }
        while (std::getline(csv, line)) {
            const std::vector<std::string> cells = split_line(line);
            if (cells[0] == "rho") {
                const auto& rho_json = j.at("policies")[0].at("fairness").at("rho");
                for (std::size_t col = 2; col < 2 + k; ++col) {
                    const double full = rho_json[attr_of.at(header[col])].get<double>();
                    CHECK(format_round_half_even_2dp(full) == cells[col]);
                }
                continue;
            }
            const bool is_gap = cells[0] == "gap";
            const nlohmann::ordered_json* policy_json = nullptr;
            for (const auto& jp : j.at("policies")) {
                if (jp.at("label").get<std::string>() == cells[1]) {
                    policy_json = &jp;
                }
            }
            REQUIRE(policy_json != nullptr);
            const auto& per_attr = policy_json->at("fairness")
                                       .at(is_gap ? "per_attribute_gap" : "per_attribute_worst");
            for (std::size_t col = 2; col < 2 + k; ++col) {
                const double full = per_attr[attr_of.at(header[col])].get<double>();
                CHECK(format_round_half_even_2dp(full) == cells[col]);
            }
            const double all = policy_json->at("fairness")
                                   .at(is_gap ? "median_gap" : "median_worst")
                                   .get<double>();
            CHECK(format_round_half_even_2dp(all) == cells.back());
        }
    }

    // table columns are ordered by ascending rho
    {
        const auto& report = comparison.outcomes.front().report;
        std::ifstream csv(dir_a / "table.csv");
        std::string line;
        std::getline(csv, line);
        std::getline(csv, line);  // rho row
        const std::vector<std::string> cells = split_line(line);
        double prev = -1.0;
        for (std::size_t col = 2; col < 2 + report.k; ++col) {
            const double v = std::stod(cells[col]);
            CHECK(v >= prev);
            prev = v;
        }
    }

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("single-policy experiment works without pretraining reuse issues") {
    ExperimentConfig config = ExperimentConfig::from_json_text(kSmallConfig);
    config.policies = {TuningPolicy::Frozen};
    const fs::path dir = fresh_dir("bnfair_exp_single");
    const RegimeComparison comparison = run_experiment(config, dir.string());
    CHECK(comparison.outcomes.size() == 1);
    CHECK_FALSE(comparison.has_qualitative);
    CHECK(comparison.improvements.empty());
    std::ifstream csv(dir / "table.csv");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
    }
    CHECK(rows == 1 + 1 + 2);  // header, rho, gap+worst for one policy
    fs::remove_all(dir);
}

TEST_CASE("identical reports render identical distribution summaries") {
    RegimeComparison comparison;
    PolicyOutcome a;
    a.policy = TuningPolicy::Frozen;
    a.worst_cells = {0.2, 0.4, 0.6, 0.8};
    PolicyOutcome b = a;
    b.policy = TuningPolicy::BNStats;
    comparison.outcomes = {a, b};
    const std::string csv = render_distribution_summary_csv(comparison);
    std::stringstream ss(csv);
    std::string header, row_a, row_b;
    std::getline(ss, header);
    std::getline(ss, row_a);
    std::getline(ss, row_b);
    CHECK(row_a.substr(row_a.find(',')) == row_b.substr(row_b.find(',')));
}

#ifdef BNFAIR_CLI_PATH
TEST_CASE("command-line interface: exit codes and stage wiring") {
    const std::string cli = BNFAIR_CLI_PATH;
    const fs::path dir = fresh_dir("bnfair_cli_test");
    const fs::path config_path = dir / "config.json";
    fs::create_directories(dir);
    {
        std::ofstream f(config_path);
        f << kSmallConfig;
    }
    auto run = [&](const std::string& args) {
        const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WEXITSTATUS(status);
    };
    CHECK(run("count-params") == 0);
    CHECK(run("synth --config " + config_path.string() + " --out " + (dir / "out").string()) ==
          0);
    CHECK(fs::exists(dir / "out/data/train.feat"));
    CHECK(run("pretrain --config " + config_path.string() + " --out " +
              (dir / "out").string()) == 0);
    CHECK(run("finetune --policy frozen --config " + config_path.string() + " --out " +
              (dir / "out").string()) == 0);
    CHECK(run("evaluate --policy frozen --config " + config_path.string() + " --out " +
              (dir / "out").string()) == 0);
    CHECK(fs::exists(dir / "out/reports/frozen.json"));

    // config errors exit with 2
    {
        std::ofstream f(dir / "bad.json");
        f << R"({"unknown_key": true})";
    }
    CHECK(run("run --config " + (dir / "bad.json").string()) == 2);
    // stage failures exit with 3 (missing checkpoint)
    CHECK(run("evaluate --policy full-ft --config " + config_path.string() + " --out " +
              (dir / "out").string()) == 3);
    fs::remove_all(dir);
}
#endif
