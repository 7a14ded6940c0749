#include "bnfair/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bnfair/rng.hpp"

namespace bnfair {

namespace {

double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / 1.4142135623730951);
}

double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / 2.5066282746310002;
}

}  // namespace

double quantile_inverse(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw std::invalid_argument("quantile_inverse: p must be in (0,1)");
    }
    // Acklam's rational approximation
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // one Newton step against the erfc-based CDF
    const double err = normal_cdf(x) - p;
    x -= err / normal_pdf(x);
    return x;
}

DatasetSpec DatasetSpec::desk_default() {
    DatasetSpec spec;
    spec.marginals = {0.02, 0.05, 0.06, 0.07, 0.12, 0.17, 0.21, 0.24, 0.32, 0.42, 0.47};
    return spec;
}

void DatasetSpec::validate() const {
    if (n_train == 0 || n_test == 0 || k == 0 || feature_dim == 0 || latent_dim == 0) {
        throw std::invalid_argument("dataset spec: sizes must be positive");
    }
    if (marginals.size() != k) {
        throw std::invalid_argument("dataset spec: need one marginal per attribute");
    }
    for (double p : marginals) {
        if (!(p > 0.0 && p < 1.0)) {
            throw std::invalid_argument("dataset spec: marginals must be in (0,1)");
        }
    }
    if (noise < 0.0) {
        throw std::invalid_argument("dataset spec: noise must be non-negative");
    }
}

namespace {

struct GeneratorModel {
    std::vector<double> w;        // k x L label directions
    std::vector<double> w_norm;   // k
    std::vector<double> b;        // k thresholds
    std::vector<double> mix;      // d x L feature mixing matrix
    std::vector<double> u;        // k x d unit coupling directions
};

GeneratorModel build_model(const DatasetSpec& spec, RngStream rng) {
    GeneratorModel m;
    const std::size_t L = spec.latent_dim, D = spec.feature_dim, K = spec.k;
    m.w.resize(K * L);
    for (double& v : m.w) {
        v = rng.gaussian();
    }
    m.w_norm.resize(K);
    m.b.resize(K);
    for (std::size_t t = 0; t < K; ++t) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            acc += m.w[t * L + l] * m.w[t * L + l];
        }
        m.w_norm[t] = std::sqrt(acc);
        m.b[t] = quantile_inverse(1.0 - spec.marginals[t]) * m.w_norm[t];
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(L));
    m.mix.resize(D * L);
    for (double& v : m.mix) {
        v = rng.gaussian() * scale;
    }
    m.u.resize(K * D);
    for (std::size_t t = 0; t < K; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
            const double g = rng.gaussian();
            m.u[t * D + j] = g;
            acc += g * g;
        }
        const double norm = std::sqrt(acc);
        for (std::size_t j = 0; j < D; ++j) {
            m.u[t * D + j] /= norm;
        }
    }
    return m;
}

Dataset draw_split(const DatasetSpec& spec, const GeneratorModel& m, RngStream rng,
                   std::size_t n, const std::vector<std::string>& names, const char* split) {
    const std::size_t L = spec.latent_dim, D = spec.feature_dim, K = spec.k;
    Dataset ds;
    ds.n = n;
    ds.d = D;
    ds.k = K;
    ds.names = names;
    ds.split = split;
    ds.features.resize(n * D);
    ds.labels.resize(n * K);
    std::vector<double> z(L), x(D);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < L; ++l) {
            z[l] = rng.gaussian();
        }
        for (std::size_t t = 0; t < K; ++t) {
            double acc = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                acc += m.w[t * L + l] * z[l];
            }
            ds.labels[i * K + t] = acc > m.b[t] ? 1 : 0;
        }
        for (std::size_t j = 0; j < D; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                acc += m.mix[j * L + l] * z[l];
            }
            x[j] = acc;
        }
        for (std::size_t t = 0; t < K; ++t) {
            if (ds.labels[i * K + t]) {
                for (std::size_t j = 0; j < D; ++j) {
                    x[j] += spec.coupling * m.u[t * D + j];
                }
            }
        }
        for (std::size_t j = 0; j < D; ++j) {
            const double v = x[j] + spec.noise * rng.gaussian();
            // quantize so the f32 on-disk format round-trips bit-exactly
            ds.features[i * D + j] = static_cast<double>(static_cast<float>(v));
        }
    }
    return ds;
}

}  // namespace

DatasetPair generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    RngStream root(spec.seed);
    const GeneratorModel model = build_model(spec, root.substream(1));
    std::vector<std::string> names(spec.k);
    for (std::size_t t = 0; t < spec.k; ++t) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "attr%02zu", t + 1);
        names[t] = buf;
    }
    DatasetPair pair;
    pair.train = draw_split(spec, model, root.substream(2), spec.n_train, names, "train");
    pair.test = draw_split(spec, model, root.substream(3), spec.n_test, names, "test");
    return pair;
}

// ---- file formats ----

namespace {

constexpr char kFeatureMagic[12] = {'B', 'N', 'F', 'A', 'I', 'R',
                                    '.', 'F', 'E', 'A', 'T', '\0'};
constexpr std::uint32_t kFeatureVersion = 1;

}  // namespace

void save_features(const Dataset& dataset, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open feature file for writing: " + path);
    }
    f.write(kFeatureMagic, 12);
    std::uint8_t ver[4] = {kFeatureVersion & 0xFF, 0, 0, 0};
    f.write(reinterpret_cast<const char*>(ver), 4);
    f << "{\"rows\":" << dataset.n << ",\"cols\":" << dataset.d << "}\n";
    for (double v : dataset.features) {
        const float fv = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &fv, sizeof(bits));
        std::uint8_t b[4] = {static_cast<std::uint8_t>(bits & 0xFF),
                             static_cast<std::uint8_t>((bits >> 8) & 0xFF),
                             static_cast<std::uint8_t>((bits >> 16) & 0xFF),
                             static_cast<std::uint8_t>((bits >> 24) & 0xFF)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!f) {
        throw std::runtime_error("failed writing feature file: " + path);
    }
}

void save_attributes(const Dataset& dataset, const std::string& path) {
    std::ofstream f(path);
    if (!f) {
        throw std::runtime_error("cannot open attribute file for writing: " + path);
    }
    for (std::size_t t = 0; t < dataset.k; ++t) {
        f << (t ? "," : "") << dataset.names[t];
    }
    f << "\n";
    for (std::size_t i = 0; i < dataset.n; ++i) {
        for (std::size_t t = 0; t < dataset.k; ++t) {
            f << (t ? "," : "") << static_cast<int>(dataset.label(i, t));
        }
        f << "\n";
    }
    if (!f) {
        throw std::runtime_error("failed writing attribute file: " + path);
    }
}

namespace {

struct FeatureMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;
};

FeatureMatrix load_feature_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open feature file: " + path);
    }
    char magic[12];
    std::uint8_t ver[4];
    if (!f.read(magic, 12) || !f.read(reinterpret_cast<char*>(ver), 4)) {
        throw std::runtime_error("feature file truncated: " + path);
    }
    if (std::memcmp(magic, kFeatureMagic, 12) != 0) {
        throw std::runtime_error("bad feature file magic: " + path);
    }
    if (ver[0] != kFeatureVersion || ver[1] || ver[2] || ver[3]) {
        throw std::runtime_error("unsupported feature file version: " + path);
    }
    std::string sidecar;
    if (!std::getline(f, sidecar)) {
        throw std::runtime_error("feature file missing sidecar line: " + path);
    }
    FeatureMatrix m;
    {
        // sidecar is {"rows":N,"cols":D}
        std::size_t rpos = sidecar.find("\"rows\":");
        std::size_t cpos = sidecar.find("\"cols\":");
        if (rpos == std::string::npos || cpos == std::string::npos) {
            throw std::runtime_error("malformed feature sidecar: " + path);
        }
        m.rows = std::stoull(sidecar.substr(rpos + 7));
        m.cols = std::stoull(sidecar.substr(cpos + 7));
    }
    if (m.rows == 0 || m.cols == 0) {
        throw std::runtime_error("feature file declares an empty matrix: " + path);
    }
    m.values.resize(m.rows * m.cols);
    std::vector<std::uint8_t> raw(m.values.size() * 4);
    if (!f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw std::runtime_error("feature payload truncated: " + path);
    }
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                             (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                             (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                             (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
        float fv;
        std::memcpy(&fv, &bits, sizeof(fv));
        if (!std::isfinite(fv)) {
            throw std::runtime_error("non-finite feature value in " + path);
        }
        m.values[i] = static_cast<double>(fv);
    }
    return m;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        out.push_back(trim(cell));
    }
    if (!line.empty() && line.back() == ',') {
        out.push_back("");
    }
    return out;
}

}  // namespace

Dataset load_external(const std::string& features_path, const std::string& attributes_path) {
    const FeatureMatrix features = load_feature_file(features_path);

    std::ifstream f(attributes_path);
    if (!f) {
        throw std::runtime_error("cannot open attribute file: " + attributes_path);
    }
    std::string line;
    if (!std::getline(f, line)) {
        throw std::runtime_error("attribute file has no header: " + attributes_path);
    }
    const std::vector<std::string> names = split_csv_line(line);
    if (names.empty()) {
        throw std::runtime_error("attribute header is empty: " + attributes_path);
    }
    for (const auto& n : names) {
        if (n.empty()) {
            throw std::runtime_error("attribute header has an empty name: " + attributes_path);
        }
    }

    Dataset ds;
    ds.d = features.cols;
    ds.k = names.size();
    ds.names = names;
    ds.features = features.values;
    ds.split = "external";

    std::size_t row = 0;
    while (std::getline(f, line)) {
        if (line.empty() && f.peek() == EOF) {
            break;  // trailing newline
        }
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != ds.k) {
            throw std::runtime_error("attribute row " + std::to_string(row + 1) + " has " +
                                     std::to_string(cells.size()) + " columns, expected " +
                                     std::to_string(ds.k));
        }
        for (std::size_t t = 0; t < ds.k; ++t) {
            if (cells[t] == "0") {
                ds.labels.push_back(0);
            } else if (cells[t] == "1") {
                ds.labels.push_back(1);
            } else {
                throw std::runtime_error("attribute value '" + cells[t] + "' at row " +
                                         std::to_string(row + 1) + ", column " +
                                         std::to_string(t + 1) + " is not binary");
            }
        }
        ++row;
    }
    ds.n = row;
    if (ds.n != features.rows) {
        throw std::runtime_error("feature file declares " + std::to_string(features.rows) +
                                 " rows but attribute file has " + std::to_string(ds.n));
    }
    return ds;
}

}  // namespace bnfair
