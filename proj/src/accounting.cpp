#include "bnfair/accounting.hpp"

#include <stdexcept>

namespace bnfair {

std::uint64_t parameter_count(const LayerDescriptor& layer) {
    switch (layer.kind) {
        case LayerKind::Conv2d:
            return static_cast<std::uint64_t>(layer.kernel) * layer.kernel * layer.in * layer.out;
        case LayerKind::Linear:
            return static_cast<std::uint64_t>(layer.in) * layer.out + layer.out;
        case LayerKind::BatchNorm:
            return 2ull * layer.out;
    }
    throw std::invalid_argument("unknown layer kind");
}

std::uint64_t buffer_count(const LayerDescriptor& layer) {
    return layer.kind == LayerKind::BatchNorm ? 2ull * layer.out : 0ull;
}

CatalogTotals count_parameters(const ArchCatalog& catalog) {
    CatalogTotals totals;
    for (const auto& layer : catalog.layers) {
        totals.parameters += parameter_count(layer);
        totals.buffers += buffer_count(layer);
    }
    return totals;
}

ArchCatalog resnet50_catalog(std::size_t head_out) {
    if (head_out == 0) {
        throw std::invalid_argument("resnet50_catalog: head_out must be positive");
    }
    ArchCatalog cat;
    auto conv = [&](const std::string& path, std::size_t in, std::size_t out, std::size_t kernel,
                    bool skip) {
        cat.layers.push_back({LayerKind::Conv2d, in, out, kernel, path, skip, false});
    };
    auto bn = [&](const std::string& path, std::size_t features, bool skip) {
        cat.layers.push_back({LayerKind::BatchNorm, 0, features, 1, path, skip, false});
    };

    conv("stem.conv", 3, 64, 7, false);
    bn("stem.bn", 64, false);

    struct Stage {
        std::size_t blocks, mid, out;
    };
    const Stage stages[4] = {{3, 64, 256}, {4, 128, 512}, {6, 256, 1024}, {3, 512, 2048}};
    std::size_t in = 64;
    for (std::size_t s = 0; s < 4; ++s) {
        const Stage& stage = stages[s];
        for (std::size_t b = 0; b < stage.blocks; ++b) {
            const std::string prefix =
                "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
            conv(prefix + ".conv1", in, stage.mid, 1, false);
            bn(prefix + ".bn1", stage.mid, false);
            conv(prefix + ".conv2", stage.mid, stage.mid, 3, false);
            bn(prefix + ".bn2", stage.mid, false);
            conv(prefix + ".conv3", stage.mid, stage.out, 1, false);
            bn(prefix + ".bn3", stage.out, false);
            if (b == 0) {
                conv(prefix + ".downsample.conv", in, stage.out, 1, true);
                bn(prefix + ".downsample.bn", stage.out, true);
            }
            in = stage.out;
        }
    }

    cat.layers.push_back({LayerKind::Linear, 2048, head_out, 1, "head", false, true});
    return cat;
}

ArchCatalog desk_catalog(const BackboneSpec& spec, std::size_t head_out) {
    spec.validate();
    ArchCatalog cat;
    std::size_t in = spec.input_dim;
    std::size_t i = 1;
    for (const auto& block : spec.blocks) {
        const std::string prefix = "backbone.block" + std::to_string(i);
        cat.layers.push_back({LayerKind::Linear, in, block.width, 1, prefix + ".linear1", false,
                              false});
        cat.layers.push_back({LayerKind::BatchNorm, 0, block.width, 1, prefix + ".bn1", false,
                              false});
        cat.layers.push_back({LayerKind::Linear, block.width, block.width, 1,
                              prefix + ".linear2", false, false});
        cat.layers.push_back({LayerKind::BatchNorm, 0, block.width, 1, prefix + ".bn2", false,
                              false});
        if (block.skip_kind == SkipKind::Projection) {
            cat.layers.push_back({LayerKind::Linear, in, block.width, 1,
                                  prefix + ".skip.linear", true, false});
            cat.layers.push_back({LayerKind::BatchNorm, 0, block.width, 1, prefix + ".skip.bn",
                                  true, false});
        }
        in = block.width;
        ++i;
    }
    cat.layers.push_back({LayerKind::Linear, spec.embedding_dim, head_out, 1, "head", false,
                          true});
    return cat;
}

AccountingResult updated_fraction(const ArchCatalog& catalog, TuningPolicy policy) {
    AccountingResult result;
    const CatalogTotals totals = count_parameters(catalog);
    result.total_parameters = totals.parameters;
    result.total_buffers = totals.buffers;

    for (const auto& layer : catalog.layers) {
        bool trainable = false;
        bool stats_updating = false;
        const bool is_bn = layer.kind == LayerKind::BatchNorm;
        switch (policy) {
            case TuningPolicy::Frozen:
                trainable = layer.is_head;
                break;
            case TuningPolicy::BNStats:
                trainable = layer.is_head;
                stats_updating = is_bn;
                break;
            case TuningPolicy::BNStatsAffine:
                trainable = layer.is_head || is_bn;
                stats_updating = is_bn;
                break;
            case TuningPolicy::BNStatsSkip:
                trainable = layer.is_head || layer.on_skip_branch;
                stats_updating = is_bn;
                break;
            case TuningPolicy::FullFT:
            case TuningPolicy::SupervisedScratch:
                trainable = true;
                stats_updating = is_bn;
                break;
        }
        if (trainable) {
            const std::uint64_t params = parameter_count(layer);
            result.trainable_parameters += params;
            result.trainable_breakdown.push_back({layer.path, params, 0});
        }
        if (stats_updating) {
            result.updated_buffers += buffer_count(layer);
        }
    }
    result.trainable_fraction = totals.parameters == 0
                                    ? 0.0
                                    : static_cast<double>(result.trainable_parameters) /
                                          static_cast<double>(totals.parameters);
    return result;
}

}  // namespace bnfair
