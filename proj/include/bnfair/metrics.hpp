#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bnfair {

/// F1 from confusion counts: 2tp / (2tp + fp + fn).
/// Convention: tp=0 with fp+fn>0 gives 0; tp=fp=fn=0 is undefined (flagged).
struct F1Result {
    double value = 0.0;
    bool defined = false;
};
F1Result f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);

/// Per-sample scores and binary labels for K prediction tasks.
struct PredictionLog {
    std::size_t k = 0;
    std::size_t samples = 0;
    std::vector<std::string> names;   // size k
    std::vector<double> scores;       // samples x k, row-major, in (0,1)
    std::vector<std::uint8_t> labels; // samples x k, 0/1

    void validate() const;

    double score(std::size_t i, std::size_t t) const { return scores[i * k + t]; }
    std::uint8_t label(std::size_t i, std::size_t t) const { return labels[i * k + t]; }
};

void save_prediction_log(const PredictionLog& log, const std::string& path);
PredictionLog load_prediction_log(const std::string& path);

/// Per-task F1-optimal thresholds on the given (train) log, no subgroup
/// conditioning. Candidates are the unique score values of the task plus a
/// sentinel above 1; prediction rule is score >= theta; ties on F1 resolve
/// to the smallest threshold.
std::vector<double> calibrate_thresholds(const PredictionLog& train);

/// One (t, c) cell: task-t F1 inside and outside subgroup c.
struct PairCell {
    double f1_c = 0.0;      // F1(t | c)
    double f1_not_c = 0.0;  // F1(t | not c)
    double gap = 0.0;       // |f1_c - f1_not_c|
    double worst = 0.0;     // min(f1_c, f1_not_c)
    bool valid = false;     // both sides defined
};

/// All ordered (t, c) pairs with t != c; diagonal cells are never computed.
struct PairMetrics {
    std::size_t k = 0;
    std::vector<PairCell> cells;  // k*k, index t*k + c; diagonal untouched

    const PairCell& at(std::size_t t, std::size_t c) const { return cells[t * k + c]; }
};

PairMetrics pairwise_metrics(const PredictionLog& test, const std::vector<double>& thresholds);

/// Under-representation statistic min(n_pos, n_neg) / (n_pos + n_neg).
double rho(std::uint64_t n_pos, std::uint64_t n_neg);

struct FairnessReport {
    std::size_t k = 0;
    std::vector<std::string> names;
    std::vector<double> per_c_gap;            // mean over valid t != c
    std::vector<double> per_c_worst;
    std::vector<std::uint64_t> per_c_valid;   // valid cell count per c
    std::vector<double> rho_c;                // on the evaluated split
    double median_gap = 0.0;                  // "all" column
    double median_worst = 0.0;
    double mean_gap_all_cells = 0.0;          // mean over every valid cell
    double mean_worst_all_cells = 0.0;
    std::uint64_t valid_cells = 0;
    std::uint64_t invalid_cells = 0;
    std::uint64_t empty_columns = 0;          // c with zero valid cells
    PairMetrics pairs;
};

FairnessReport aggregate_report(const PairMetrics& pairs, const PredictionLog& eval_log);

/// Median with the even-count convention (mean of the two middle values).
double median_of(std::vector<double> values);

}  // namespace bnfair
