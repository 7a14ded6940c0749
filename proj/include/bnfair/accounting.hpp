#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnfair/layers.hpp"
#include "bnfair/policy.hpp"

namespace bnfair {

/// Architecture described as a flat list of layers with closed-form
/// parameter counts:
///   conv2d:    k*k*in*out      (no bias, ResNet convention)
///   linear:    in*out + out
///   batchnorm: 2*features affine parameters + 2*features buffers
enum class LayerKind { Conv2d, Linear, BatchNorm };

struct LayerDescriptor {
    LayerKind kind = LayerKind::Linear;
    std::size_t in = 0;        // in channels/features (unused for batchnorm)
    std::size_t out = 0;       // out channels; batchnorm stores features here
    std::size_t kernel = 1;    // conv kernel edge
    std::string path;
    bool on_skip_branch = false;
    bool is_head = false;
};

struct ArchCatalog {
    std::vector<LayerDescriptor> layers;
};

std::uint64_t parameter_count(const LayerDescriptor& layer);
std::uint64_t buffer_count(const LayerDescriptor& layer);

struct CatalogTotals {
    std::uint64_t parameters = 0;
    std::uint64_t buffers = 0;
};
CatalogTotals count_parameters(const ArchCatalog& catalog);

/// Full ResNet50 layer list (stem, 3-4-6-3 bottleneck stages with downsample
/// branches flagged as skip) plus a linear head 2048 -> head_out. The
/// original classification head is not included.
ArchCatalog resnet50_catalog(std::size_t head_out);

/// Catalog equivalent of a desk Model (backbone spec + linear head), with
/// projection branches flagged as skip.
ArchCatalog desk_catalog(const BackboneSpec& spec, std::size_t head_out);

struct AccountingResult {
    std::uint64_t trainable_parameters = 0;
    std::uint64_t updated_buffers = 0;
    std::uint64_t total_parameters = 0;
    std::uint64_t total_buffers = 0;
    double trainable_fraction = 0.0;
    struct PathCount {
        std::string path;
        std::uint64_t parameters;
        std::uint64_t buffers;
    };
    std::vector<PathCount> trainable_breakdown;
};

/// Applies the tuning-policy partition rules at the catalog level. The
/// fraction denominator is all parameters of backbone + head, buffers
/// excluded (reported separately).
AccountingResult updated_fraction(const ArchCatalog& catalog, TuningPolicy policy);

}  // namespace bnfair
