#include "bnfair/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace bnfair {

F1Result f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    if (tp == 0 && fp == 0 && fn == 0) {
        return {0.0, false};
    }
    if (tp == 0) {
        return {0.0, true};
    }
    const double v = 2.0 * static_cast<double>(tp) /
                     static_cast<double>(2 * tp + fp + fn);
    return {v, true};
}

void PredictionLog::validate() const {
    if (k == 0) {
        throw std::invalid_argument("prediction log: k must be positive");
    }
    if (names.size() != k) {
        throw std::invalid_argument("prediction log: name count != k");
    }
    if (scores.size() != samples * k || labels.size() != samples * k) {
        throw std::invalid_argument("prediction log: matrix sizes disagree");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) {
            throw std::invalid_argument("prediction log: non-finite score");
        }
    }
    for (std::uint8_t label : labels) {
        if (label != 0 && label != 1) {
            throw std::invalid_argument("prediction log: labels must be 0/1");
        }
    }
}

std::vector<double> calibrate_thresholds(const PredictionLog& train) {
    train.validate();
    std::vector<double> thresholds(train.k);
    for (std::size_t t = 0; t < train.k; ++t) {
        std::uint64_t positives = 0;
        for (std::size_t i = 0; i < train.samples; ++i) {
            positives += train.label(i, t);
        }
        if (positives == 0) {
            throw std::invalid_argument("calibrate_thresholds: task '" + train.names[t] +
                                        "' has no positive labels");
        }
        std::vector<double> candidates;
        candidates.reserve(train.samples + 1);
        for (std::size_t i = 0; i < train.samples; ++i) {
            candidates.push_back(train.score(i, t));
        }
        std::sort(candidates.begin(), candidates.end());
        candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
        candidates.push_back(1.0 + std::numeric_limits<double>::epsilon());

        double best_f1 = -1.0;
        double best_theta = candidates.front();
        for (double theta : candidates) {
            std::uint64_t tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < train.samples; ++i) {
                const bool predicted = train.score(i, t) >= theta;
                const bool actual = train.label(i, t) != 0;
                if (predicted && actual) {
                    ++tp;
                } else if (predicted && !actual) {
                    ++fp;
                } else if (!predicted && actual) {
                    ++fn;
                }
            }
            const F1Result f1 = f1_from_counts(tp, fp, fn);
            const double value = f1.defined ? f1.value : 0.0;
            if (value > best_f1) {  // strict: ties keep the smaller theta
                best_f1 = value;
                best_theta = theta;
            }
        }
        thresholds[t] = best_theta;
    }
    return thresholds;
}

PairMetrics pairwise_metrics(const PredictionLog& test, const std::vector<double>& thresholds) {
    test.validate();
    if (test.k < 2) {
        throw std::invalid_argument("pairwise_metrics: need at least two attributes");
    }
    if (thresholds.size() != test.k) {
        throw std::invalid_argument("pairwise_metrics: threshold count != k");
    }
    PairMetrics out;
    out.k = test.k;
    out.cells.assign(test.k * test.k, PairCell{});
    for (std::size_t t = 0; t < test.k; ++t) {
        for (std::size_t c = 0; c < test.k; ++c) {
            if (t == c) {
                continue;
            }
            std::uint64_t tp_in = 0, fp_in = 0, fn_in = 0;
            std::uint64_t tp_out = 0, fp_out = 0, fn_out = 0;
            for (std::size_t i = 0; i < test.samples; ++i) {
                const bool predicted = test.score(i, t) >= thresholds[t];
                const bool actual = test.label(i, t) != 0;
                const bool in_subgroup = test.label(i, c) != 0;
                std::uint64_t& tp = in_subgroup ? tp_in : tp_out;
                std::uint64_t& fp = in_subgroup ? fp_in : fp_out;
                std::uint64_t& fn = in_subgroup ? fn_in : fn_out;
                if (predicted && actual) {
                    ++tp;
                } else if (predicted && !actual) {
                    ++fp;
                } else if (!predicted && actual) {
                    ++fn;
                }
            }
            const F1Result inside = f1_from_counts(tp_in, fp_in, fn_in);
            const F1Result outside = f1_from_counts(tp_out, fp_out, fn_out);
            PairCell cell;
            cell.valid = inside.defined && outside.defined;
            if (cell.valid) {
                cell.f1_c = inside.value;
                cell.f1_not_c = outside.value;
                cell.gap = std::abs(inside.value - outside.value);
                cell.worst = std::min(inside.value, outside.value);
            }
            out.cells[t * test.k + c] = cell;
        }
    }
    return out;
}

double rho(std::uint64_t n_pos, std::uint64_t n_neg) {
    if (n_pos + n_neg == 0) {
        throw std::invalid_argument("rho: empty population");
    }
    return static_cast<double>(std::min(n_pos, n_neg)) /
           static_cast<double>(n_pos + n_neg);
}

double median_of(std::vector<double> values) {
    if (values.empty()) {
        throw std::invalid_argument("median_of: empty input");
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

FairnessReport aggregate_report(const PairMetrics& pairs, const PredictionLog& eval_log) {
    eval_log.validate();
    if (pairs.k != eval_log.k) {
        throw std::invalid_argument("aggregate_report: attribute count mismatch");
    }
    FairnessReport report;
    report.k = pairs.k;
    report.names = eval_log.names;
    report.pairs = pairs;
    report.per_c_gap.assign(pairs.k, 0.0);
    report.per_c_worst.assign(pairs.k, 0.0);
    report.per_c_valid.assign(pairs.k, 0);
    report.rho_c.assign(pairs.k, 0.0);

    double gap_total = 0.0, worst_total = 0.0;
    for (std::size_t c = 0; c < pairs.k; ++c) {
        double gap_sum = 0.0, worst_sum = 0.0;
        std::uint64_t valid = 0;
        for (std::size_t t = 0; t < pairs.k; ++t) {
            if (t == c) {
                continue;
            }
            const PairCell& cell = pairs.at(t, c);
            if (cell.valid) {
                gap_sum += cell.gap;
                worst_sum += cell.worst;
                ++valid;
            } else {
                ++report.invalid_cells;
            }
        }
        report.per_c_valid[c] = valid;
        if (valid > 0) {
            report.per_c_gap[c] = gap_sum / static_cast<double>(valid);
            report.per_c_worst[c] = worst_sum / static_cast<double>(valid);
        } else {
            ++report.empty_columns;
        }
        report.valid_cells += valid;
        gap_total += gap_sum;
        worst_total += worst_sum;

        std::uint64_t n_pos = 0;
        for (std::size_t i = 0; i < eval_log.samples; ++i) {
            n_pos += eval_log.label(i, c);
        }
        report.rho_c[c] = rho(n_pos, eval_log.samples - n_pos);
    }

    std::vector<double> gaps, worsts;
    for (std::size_t c = 0; c < pairs.k; ++c) {
        if (report.per_c_valid[c] > 0) {
            gaps.push_back(report.per_c_gap[c]);
            worsts.push_back(report.per_c_worst[c]);
        }
    }
    if (gaps.empty()) {
        throw std::invalid_argument("aggregate_report: no attribute has a valid cell");
    }
    report.median_gap = median_of(gaps);
    report.median_worst = median_of(worsts);
    if (report.valid_cells > 0) {
        report.mean_gap_all_cells = gap_total / static_cast<double>(report.valid_cells);
        report.mean_worst_all_cells = worst_total / static_cast<double>(report.valid_cells);
    }
    return report;
}

// ---- prediction log files ----
// Layout: LE u32 header length, JSON header {k, names, samples}, then
// samples*k LE f64 scores and samples*k u8 labels.

void save_prediction_log(const PredictionLog& log, const std::string& path) {
    log.validate();
    nlohmann::ordered_json j;
    j["format"] = "bnfair-predlog";
    j["version"] = 1;
    j["samples"] = log.samples;
    j["k"] = log.k;
    j["names"] = log.names;
    const std::string header = j.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open prediction log for writing: " + path);
    }
    const std::uint32_t len = static_cast<std::uint32_t>(header.size());
    std::uint8_t len_le[4] = {static_cast<std::uint8_t>(len & 0xFF),
                              static_cast<std::uint8_t>((len >> 8) & 0xFF),
                              static_cast<std::uint8_t>((len >> 16) & 0xFF),
                              static_cast<std::uint8_t>((len >> 24) & 0xFF)};
    f.write(reinterpret_cast<const char*>(len_le), 4);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (double s : log.scores) {
        std::uint64_t bits;
        std::memcpy(&bits, &s, sizeof(bits));
        std::uint8_t b[8];
        for (int i = 0; i < 8; ++i) {
            b[i] = static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF);
        }
        f.write(reinterpret_cast<const char*>(b), 8);
    }
    f.write(reinterpret_cast<const char*>(log.labels.data()),
            static_cast<std::streamsize>(log.labels.size()));
    if (!f) {
        throw std::runtime_error("failed writing prediction log: " + path);
    }
}

PredictionLog load_prediction_log(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open prediction log: " + path);
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 4) {
        throw std::runtime_error("prediction log truncated: " + path);
    }
    const std::uint32_t len = static_cast<std::uint32_t>(bytes[0]) |
                              (static_cast<std::uint32_t>(bytes[1]) << 8) |
                              (static_cast<std::uint32_t>(bytes[2]) << 16) |
                              (static_cast<std::uint32_t>(bytes[3]) << 24);
    if (bytes.size() < 4 + static_cast<std::size_t>(len)) {
        throw std::runtime_error("prediction log header truncated: " + path);
    }
    auto j = nlohmann::ordered_json::parse(std::string(bytes.begin() + 4, bytes.begin() + 4 + len));
    if (j.at("format").get<std::string>() != "bnfair-predlog") {
        throw std::runtime_error("not a prediction log: " + path);
    }
    PredictionLog log;
    log.samples = j.at("samples").get<std::size_t>();
    log.k = j.at("k").get<std::size_t>();
    log.names = j.at("names").get<std::vector<std::string>>();

    const std::size_t cells = log.samples * log.k;
    const std::size_t need = 4 + len + cells * 8 + cells;
    if (bytes.size() != need) {
        throw std::runtime_error("prediction log payload size mismatch: " + path);
    }
    log.scores.resize(cells);
    const std::uint8_t* p = bytes.data() + 4 + len;
    for (std::size_t i = 0; i < cells; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
        }
        std::memcpy(&log.scores[i], &bits, sizeof(double));
    }
    log.labels.assign(p + cells * 8, p + cells * 8 + cells);
    log.validate();
    return log;
}

}  // namespace bnfair
