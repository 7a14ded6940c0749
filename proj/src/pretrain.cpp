#include "bnfair/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace bnfair {

void AugmentConfig::validate() const {
    if (sigma < 0.0) {
        throw std::invalid_argument("augment: sigma must be non-negative");
    }
    if (mask_prob < 0.0 || mask_prob > 1.0) {
        throw std::invalid_argument("augment: mask probability must be in [0,1]");
    }
    if (!(scale_lo > 0.0 && scale_lo <= 1.0 && scale_hi >= 1.0)) {
        throw std::invalid_argument("augment: scale range must satisfy 0 < lo <= 1 <= hi");
    }
}

std::vector<double> augment(const double* x, std::size_t d, const AugmentConfig& cfg,
                            RngStream& rng) {
    cfg.validate();
    std::vector<double> y(d);
    // fixed draw order keeps streams aligned for any config
    for (std::size_t j = 0; j < d; ++j) {
        const bool keep = rng.uniform() >= cfg.mask_prob;
        y[j] = keep ? x[j] : 0.0;
    }
    const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    for (std::size_t j = 0; j < d; ++j) {
        y[j] = y[j] * scale + cfg.sigma * rng.gaussian();
    }
    return y;
}

ProjectionHead::ProjectionHead(std::size_t embedding_dim, std::size_t proj_dim, RngStream& rng)
    : linear1(embedding_dim, embedding_dim, rng),
      linear2(embedding_dim, proj_dim, rng),
      bn(embedding_dim) {}

Tensor ProjectionHead::forward(const Tensor& x) {
    return linear2.forward(relu(bn.forward(linear1.forward(x))));
}

Tensor nt_xent_loss(const Tensor& z, double tau) {
    if (z.shape().size() != 2 || z.dim(0) < 2 || z.dim(0) % 2 != 0) {
        throw TensorError("nt_xent_loss: embeddings must be [2N, d] with N >= 1");
    }
    Tensor normalized = row_normalize(z);
    Tensor sim = matmul_nt(normalized, normalized);
    return nt_xent_from_sim(sim, tau);
}

std::vector<double> nt_xent_anchor_losses(const std::vector<double>& z, std::size_t rows,
                                          std::size_t cols, double tau) {
    if (rows < 2 || rows % 2 != 0 || z.size() != rows * cols) {
        throw std::invalid_argument("nt_xent_anchor_losses: bad embedding matrix");
    }
    std::vector<double> unit(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            norm += z[i * cols + j] * z[i * cols + j];
        }
        norm = std::sqrt(norm);
        if (norm <= 0.0) {
            throw std::invalid_argument("nt_xent_anchor_losses: zero-norm embedding");
        }
        for (std::size_t j = 0; j < cols; ++j) {
            unit[i * cols + j] = z[i * cols + j] / norm;
        }
    }
    std::vector<double> losses(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t pos = i ^ 1;
        double pos_sim = 0.0;
        double denom = 0.0;
        for (std::size_t k = 0; k < rows; ++k) {
            if (k == i) {
                continue;
            }
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                s += unit[i * cols + j] * unit[k * cols + j];
            }
            denom += std::exp(s / tau);
            if (k == pos) {
                pos_sim = s;
            }
        }
        losses[i] = -std::log(std::exp(pos_sim / tau) / denom);
    }
    return losses;
}

PretrainResult pretrain(const std::vector<double>& features, std::size_t n_rows,
                        const BackboneSpec& spec, const PretrainConfig& cfg,
                        std::uint64_t seed) {
    spec.validate();
    cfg.augment_cfg.validate();
    if (n_rows == 0 || features.size() % n_rows != 0) {
        throw std::invalid_argument("pretrain: bad feature matrix");
    }
    const std::size_t d = features.size() / n_rows;
    if (d != spec.input_dim) {
        throw std::invalid_argument("pretrain: feature dim does not match backbone input dim");
    }
    if (cfg.batch < 2 || n_rows < cfg.batch) {
        throw std::invalid_argument("pretrain: need at least one full batch of >= 2 samples");
    }

    RngStream root(seed);
    RngStream init_rng = root.substream(1);
    RngStream shuffle_rng = root.substream(2);
    RngStream augment_rng = root.substream(3);

    Backbone backbone(spec, init_rng);
    ProjectionHead projector(spec.embedding_dim, cfg.proj_dim, init_rng);

    std::vector<Tensor> params;
    for (auto& p : backbone.named_parameters()) {
        p.tensor.set_requires_grad(true);
        params.push_back(p.tensor);
    }
    for (Tensor* t : {&projector.linear1.weight, &projector.linear1.bias,
                      &projector.bn.state.gamma, &projector.bn.state.beta,
                      &projector.linear2.weight, &projector.linear2.bias}) {
        t->set_requires_grad(true);
        params.push_back(*t);
    }
    for (auto& bn : backbone.batchnorm_layers()) {
        bn.bn->state.stats_mode = StatsMode::UpdateStats;
    }
    projector.bn.state.stats_mode = StatsMode::UpdateStats;

    OptimizerConfig opt_cfg;
    opt_cfg.arm = OptimizerArm::SgdMomentum;
    opt_cfg.momentum = cfg.momentum;
    Optimizer optimizer(params, opt_cfg);

    const std::size_t batches_per_epoch = n_rows / cfg.batch;
    const std::size_t total_steps = std::max<std::size_t>(1, cfg.epochs * batches_per_epoch);
    LrSchedule schedule{cfg.lr,
                        static_cast<std::size_t>(std::llround(cfg.warmup_frac *
                                                              static_cast<double>(total_steps))),
                        total_steps, cfg.schedule};

    PretrainResult result;
    std::vector<std::uint32_t> order(n_rows);
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            std::vector<double> views(2 * cfg.batch * d);
            for (std::size_t s = 0; s < cfg.batch; ++s) {
                const double* x = features.data() + order[b * cfg.batch + s] * d;
                const std::vector<double> v0 = augment(x, d, cfg.augment_cfg, augment_rng);
                const std::vector<double> v1 = augment(x, d, cfg.augment_cfg, augment_rng);
                std::copy(v0.begin(), v0.end(), views.begin() + (2 * s) * d);
                std::copy(v1.begin(), v1.end(), views.begin() + (2 * s + 1) * d);
            }
            Tape tape;
            double loss_value = 0.0;
            try {
                TapeScope scope(tape);
                Tensor input = Tensor::from_values({2 * cfg.batch, d}, std::move(views));
                Tensor embeddings = backbone.forward(input);
                Tensor projected = projector.forward(embeddings);
                Tensor loss = nt_xent_loss(projected, cfg.tau);
                loss_value = loss.item();
                tape.backward(loss);
            } catch (const TensorError& e) {
                throw std::runtime_error("pretrain diverged at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(b) + " (seed " +
                                         std::to_string(seed) + "): " + e.what());
            }
            optimizer.step(schedule.at(step));
            optimizer.zero_grad();
            loss_sum += loss_value;
            ++step;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(batches_per_epoch));
    }

    result.checkpoint = backbone_checkpoint(backbone);
    return result;
}

}  // namespace bnfair
