// Python bindings for the main operations: dataset generation, contrastive
// pretraining, policy fine-tuning, fairness metrics, parameter accounting,
// and the full experiment pipeline.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>

#include "bnfair/accounting.hpp"
#include "bnfair/checkpoint.hpp"
#include "bnfair/data.hpp"
#include "bnfair/experiment.hpp"
#include "bnfair/finetune.hpp"
#include "bnfair/metrics.hpp"
#include "bnfair/pretrain.hpp"
#include "bnfair/rng.hpp"

namespace py = pybind11;
using namespace bnfair;

namespace {

std::vector<double> matrix_values(const py::array_t<double, py::array::c_style |
                                                               py::array::forcecast>& a) {
    if (a.ndim() != 2) {
        throw std::invalid_argument("expected a 2-d array");
    }
    const double* p = a.data();
    return std::vector<double>(p, p + a.size());
}

PredictionLog log_from_arrays(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& scores,
    const py::array_t<double, py::array::c_style | py::array::forcecast>& labels,
    std::optional<std::vector<std::string>> names) {
    if (scores.ndim() != 2 || labels.ndim() != 2 || scores.shape(0) != labels.shape(0) ||
        scores.shape(1) != labels.shape(1)) {
        throw std::invalid_argument("scores and labels must be equal-shape 2-d arrays");
    }
    PredictionLog log;
    log.samples = static_cast<std::size_t>(scores.shape(0));
    log.k = static_cast<std::size_t>(scores.shape(1));
    log.scores = matrix_values(scores);
    log.labels.resize(log.samples * log.k);
    const double* lv = labels.data();
    for (std::size_t i = 0; i < log.labels.size(); ++i) {
        if (lv[i] != 0.0 && lv[i] != 1.0) {
            throw std::invalid_argument("labels must be 0/1");
        }
        log.labels[i] = lv[i] != 0.0 ? 1 : 0;
    }
    if (names) {
        log.names = *names;
    } else {
        for (std::size_t t = 0; t < log.k; ++t) {
            log.names.push_back("attr" + std::to_string(t));
        }
    }
    log.validate();
    return log;
}

py::array_t<double> to_array(const std::vector<double>& values, std::size_t rows,
                             std::size_t cols) {
    py::array_t<double> out({rows, cols});
    std::memcpy(out.mutable_data(), values.data(), values.size() * sizeof(double));
    return out;
}

py::array_t<std::uint8_t> to_array_u8(const std::vector<std::uint8_t>& values,
                                      std::size_t rows, std::size_t cols) {
    py::array_t<std::uint8_t> out({rows, cols});
    std::memcpy(out.mutable_data(), values.data(), values.size());
    return out;
}

py::dict report_dict(const FairnessReport& report) {
    py::dict d;
    d["names"] = report.names;
    d["rho"] = report.rho_c;
    d["per_attribute_gap"] = report.per_c_gap;
    d["per_attribute_worst"] = report.per_c_worst;
    d["per_attribute_valid_cells"] = report.per_c_valid;
    d["median_gap"] = report.median_gap;
    d["median_worst"] = report.median_worst;
    d["mean_gap_all_cells"] = report.mean_gap_all_cells;
    d["mean_worst_all_cells"] = report.mean_worst_all_cells;
    d["valid_cells"] = report.valid_cells;
    d["invalid_cells"] = report.invalid_cells;
    return d;
}

DatasetSpec spec_from_kwargs(std::size_t n_train, std::size_t n_test,
                             std::vector<double> marginals, std::size_t feature_dim,
                             std::size_t latent_dim, double coupling, double noise,
                             std::uint64_t seed) {
    DatasetSpec spec;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.marginals = std::move(marginals);
    spec.k = spec.marginals.size();
    spec.feature_dim = feature_dim;
    spec.latent_dim = latent_dim;
    spec.coupling = coupling;
    spec.noise = noise;
    spec.seed = seed;
    spec.validate();
    return spec;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Selective fine-tuning regimes over a BatchNorm backbone with subgroup "
              "fairness evaluation";

    py::class_<RngStream>(m, "RngStream")
        .def(py::init<std::uint64_t>(), py::arg("seed"))
        .def("next_u64", &RngStream::next_u64)
        .def("uniform", py::overload_cast<>(&RngStream::uniform))
        .def("gaussian", py::overload_cast<>(&RngStream::gaussian))
        .def("substream", &RngStream::substream, py::arg("index"));

    m.def("splitmix64", [](std::uint64_t seed) { return splitmix64_next(seed); },
          py::arg("seed"), "First splitmix64 output for the given state");

    m.def("quantile_inverse", &quantile_inverse, py::arg("p"),
          "Standard normal inverse CDF");

    m.def(
        "f1_from_counts",
        [](std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) -> py::object {
            const F1Result r = f1_from_counts(tp, fp, fn);
            if (!r.defined) {
                return py::none();
            }
            return py::float_(r.value);
        },
        py::arg("tp"), py::arg("fp"), py::arg("fn"),
        "2tp/(2tp+fp+fn); None when undefined (tp=fp=fn=0)");

    m.def("rho", &rho, py::arg("n_pos"), py::arg("n_neg"),
          "Under-representation statistic min/(pos+neg)");

    m.def(
        "nt_xent",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z,
           double tau) {
            if (z.ndim() != 2) {
                throw std::invalid_argument("embeddings must be 2-d");
            }
            Tensor t = Tensor::from_values(
                {static_cast<std::size_t>(z.shape(0)), static_cast<std::size_t>(z.shape(1))},
                matrix_values(z));
            return nt_xent_loss(t, tau).item();
        },
        py::arg("embeddings"), py::arg("tau") = 0.5,
        "NT-Xent loss over [2N, d] paired embeddings");

    m.def(
        "calibrate_thresholds",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& scores,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& labels) {
            return calibrate_thresholds(log_from_arrays(scores, labels, std::nullopt));
        },
        py::arg("scores"), py::arg("labels"),
        "Per-task F1-optimal thresholds (train split, no subgroup conditioning)");

    m.def(
        "fairness_report",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& scores,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& labels,
           const std::vector<double>& thresholds,
           std::optional<std::vector<std::string>> names) {
            const PredictionLog log = log_from_arrays(scores, labels, std::move(names));
            return report_dict(aggregate_report(pairwise_metrics(log, thresholds), log));
        },
        py::arg("scores"), py::arg("labels"), py::arg("thresholds"),
        py::arg("names") = py::none(),
        "Pairwise F1-gap / F1-worst metrics aggregated per attribute");

    m.def(
        "resnet50_accounting",
        [](std::size_t head_out) {
            const ArchCatalog catalog = resnet50_catalog(head_out);
            const CatalogTotals totals = count_parameters(catalog);
            py::dict out;
            out["total_parameters"] = totals.parameters;
            out["total_buffers"] = totals.buffers;
            py::dict per_policy;
            for (TuningPolicy policy : kAllPolicies) {
                const AccountingResult acc = updated_fraction(catalog, policy);
                py::dict row;
                row["trainable_parameters"] = acc.trainable_parameters;
                row["trainable_fraction"] = acc.trainable_fraction;
                row["updated_buffers"] = acc.updated_buffers;
                per_policy[policy_name(policy)] = row;
            }
            out["policies"] = per_policy;
            return out;
        },
        py::arg("head_out") = 40,
        "Per-policy parameter accounting over the ResNet50 shape catalog");

    m.def(
        "generate_dataset",
        [](std::size_t n_train, std::size_t n_test, std::vector<double> marginals,
           std::size_t feature_dim, std::size_t latent_dim, double coupling, double noise,
           std::uint64_t seed) {
            const DatasetSpec spec =
                spec_from_kwargs(n_train, n_test, std::move(marginals), feature_dim,
                                 latent_dim, coupling, noise, seed);
            const DatasetPair pair = generate_dataset(spec);
            py::dict out;
            out["train_features"] = to_array(pair.train.features, pair.train.n, pair.train.d);
            out["train_labels"] = to_array_u8(pair.train.labels, pair.train.n, pair.train.k);
            out["test_features"] = to_array(pair.test.features, pair.test.n, pair.test.d);
            out["test_labels"] = to_array_u8(pair.test.labels, pair.test.n, pair.test.k);
            out["names"] = pair.train.names;
            return out;
        },
        py::arg("n_train") = 2000, py::arg("n_test") = 500,
        py::arg("marginals") = std::vector<double>{0.1, 0.3, 0.5},
        py::arg("feature_dim") = 32, py::arg("latent_dim") = 8, py::arg("coupling") = 2.0,
        py::arg("noise") = 0.5, py::arg("seed") = 0,
        "Latent-factor dataset with controlled attribute marginals");

    m.def(
        "recalibration_scenario",
        [](std::uint64_t seed, double scale, double offset) {
            const RecalibrationReport r = recalibration_scenario(seed, scale, offset);
            py::dict out;
            out["acc_in_distribution"] = r.acc_in_distribution;
            out["acc_frozen_shifted"] = r.acc_frozen_shifted;
            out["acc_bnstats_shifted"] = r.acc_bnstats_shifted;
            out["frozen_ratio"] = r.frozen_ratio;
            out["bnstats_ratio"] = r.bnstats_ratio;
            return out;
        },
        py::arg("seed") = 0, py::arg("scale") = 2.0, py::arg("offset") = 1.0,
        "Covariate-shift recovery: frozen vs recalibrated BN buffers");

    m.def(
        "run_experiment",
        [](const std::string& config_json, const std::string& out_dir) {
            const ExperimentConfig config = ExperimentConfig::from_json_text(config_json);
            const RegimeComparison comparison = run_experiment(config, out_dir);
            py::dict out;
            out["attributes"] = comparison.attribute_names;
            py::dict policies;
            for (const auto& outcome : comparison.outcomes) {
                py::dict row;
                row["median_worst"] = outcome.report.median_worst;
                row["median_gap"] = outcome.report.median_gap;
                row["mean_gap_all_cells"] = outcome.report.mean_gap_all_cells;
                row["trainable_fraction"] = outcome.accounting.trainable_fraction;
                row["backward_flops"] = outcome.counters.backward_flops;
                row["backbone_grad_materializations"] =
                    outcome.counters.backbone_grad_materializations;
                policies[policy_name(outcome.policy)] = row;
            }
            out["policies"] = policies;
            return out;
        },
        py::arg("config_json"), py::arg("out_dir"),
        "Full pipeline: data, pretraining, all configured policies, reports");

    m.attr("__version__") = "0.1.0";
}
