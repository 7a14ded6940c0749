#pragma once

#include <cstdint>
#include <vector>

#include "bnfair/checkpoint.hpp"
#include "bnfair/layers.hpp"
#include "bnfair/optimizer.hpp"
#include "bnfair/rng.hpp"

namespace bnfair {

/// Stochastic view of a feature vector:
///   y = (x (*) bernoulli-mask(1-p)) * uniform(lo,hi) + gaussian(0, sigma^2)
/// sigma=0, p=0, lo=hi=1 is the identity augmentation. Draw order per call:
/// one mask uniform per element, one scale uniform, one gaussian per element.
struct AugmentConfig {
    double sigma = 0.1;
    double mask_prob = 0.1;
    double scale_lo = 0.9;
    double scale_hi = 1.1;

    void validate() const;
};

std::vector<double> augment(const double* x, std::size_t d, const AugmentConfig& cfg,
                            RngStream& rng);

/// 2-layer projection map with BN and ReLU between layers; used only during
/// pretraining and discarded before fine-tuning.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(std::size_t embedding_dim, std::size_t proj_dim, RngStream& rng);

    Tensor forward(const Tensor& x);

    Linear linear1, linear2;
    BatchNorm bn;
};

/// NT-Xent over 2N paired embeddings (rows 2i, 2i+1 are views of sample i):
/// cosine similarities at temperature tau, mean over all 2N anchors.
Tensor nt_xent_loss(const Tensor& z, double tau);

/// Tape-free reference evaluation returning the per-anchor losses.
std::vector<double> nt_xent_anchor_losses(const std::vector<double>& z, std::size_t rows,
                                          std::size_t cols, double tau);

struct PretrainConfig {
    std::size_t epochs = 10;
    std::size_t batch = 256;
    double tau = 0.5;
    std::size_t proj_dim = 64;
    double lr = 0.05;
    double momentum = 0.9;
    ScheduleKind schedule = ScheduleKind::WarmupCosine;
    double warmup_frac = 0.05;
    AugmentConfig augment_cfg;
};

struct PretrainResult {
    Checkpoint checkpoint;             // backbone only; projection head discarded
    std::vector<double> epoch_losses;  // mean NT-Xent per epoch
};

/// SimCLR-style self-supervised pretraining on raw feature vectors. Labels
/// are never passed in; BN layers run in UpdateStats mode throughout.
PretrainResult pretrain(const std::vector<double>& features, std::size_t n_rows,
                        const BackboneSpec& spec, const PretrainConfig& cfg,
                        std::uint64_t seed);

}  // namespace bnfair
