#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bnfair {

/// Standard normal inverse CDF, |error| <= 1e-9 (rational approximation
/// plus one Newton refinement).
double quantile_inverse(double p);

/// Latent-factor dataset generator with controlled per-attribute marginals:
/// z ~ N(0, I_L); attribute k true iff w_k . z > b_k, where b_k places the
/// marginal at p_k; features x = A z + sum_k coupling * y_k * u_k + noise.
struct DatasetSpec {
    std::size_t n_train = 20000;
    std::size_t n_test = 4000;
    std::size_t k = 11;
    std::size_t feature_dim = 64;
    std::size_t latent_dim = 16;
    std::vector<double> marginals;  // size k, each in (0,1)
    double coupling = 2.0;
    double noise = 0.5;
    std::uint64_t seed = 0;

    /// Desk defaults: 11 attributes whose marginals follow the benchmark
    /// under-representation profile (.02 ... .47).
    static DatasetSpec desk_default();

    void validate() const;
};

struct Dataset {
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t k = 0;
    std::vector<double> features;       // n x d row-major (f32-exact values)
    std::vector<std::uint8_t> labels;   // n x k
    std::vector<std::string> names;
    std::string split;

    double feature(std::size_t i, std::size_t j) const { return features[i * d + j]; }
    std::uint8_t label(std::size_t i, std::size_t t) const { return labels[i * k + t]; }
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

/// Pure function of the spec; train and test use disjoint RNG substreams.
/// Feature values are quantized to f32 so the on-disk format round-trips
/// bit-exactly.
DatasetPair generate_dataset(const DatasetSpec& spec);

/// Feature file: 16-byte magic+version header, one JSON line {"rows","cols"},
/// then little-endian f32 row-major payload.
void save_features(const Dataset& dataset, const std::string& path);

/// Attribute file: CSV with a header row of names and a 0/1 body.
void save_attributes(const Dataset& dataset, const std::string& path);

/// Loads and validates an external feature/attribute file pair.
Dataset load_external(const std::string& features_path, const std::string& attributes_path);

}  // namespace bnfair
