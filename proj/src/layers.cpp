#include "bnfair/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "bnfair/policy.hpp"

namespace bnfair {

const char* policy_name(TuningPolicy policy) {
    switch (policy) {
        case TuningPolicy::Frozen: return "frozen";
        case TuningPolicy::BNStats: return "bn-stats";
        case TuningPolicy::BNStatsAffine: return "bn-stats-affine";
        case TuningPolicy::BNStatsSkip: return "bn-stats-skip";
        case TuningPolicy::FullFT: return "full-ft";
        case TuningPolicy::SupervisedScratch: return "supervised";
    }
    return "?";
}

const char* policy_label(TuningPolicy policy) {
    switch (policy) {
        case TuningPolicy::Frozen: return "Frozen";
        case TuningPolicy::BNStats: return "BN Stats";
        case TuningPolicy::BNStatsAffine: return "BN Stats+Affine";
        case TuningPolicy::BNStatsSkip: return "BN Stats+Skip";
        case TuningPolicy::FullFT: return "Full FT";
        case TuningPolicy::SupervisedScratch: return "Supervised";
    }
    return "?";
}

TuningPolicy parse_policy(const std::string& name) {
    for (TuningPolicy p : kAllPolicies) {
        if (name == policy_name(p)) {
            return p;
        }
    }
    throw std::invalid_argument("unknown tuning policy: " + name);
}

Linear::Linear(std::size_t in, std::size_t out, RngStream& rng) : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (double& v : w) {
        v = rng.uniform(-bound, bound);
    }
    weight = Tensor::from_values({in, out}, std::move(w));
    bias = Tensor::zeros({out});
}

Tensor Linear::forward(const Tensor& x) const {
    return add_bias(matmul(x, weight), bias);
}

BatchNorm::BatchNorm(std::size_t num_features) {
    state.num_features = num_features;
    state.gamma = Tensor::full({num_features}, 1.0);
    state.beta = Tensor::zeros({num_features});
    state.running_mean.assign(num_features, 0.0);
    state.running_var.assign(num_features, 1.0);
}

Tensor BatchNorm::forward(const Tensor& x) {
    return batchnorm(x, state.gamma, state.beta, state.running_mean, state.running_var,
                     state.momentum, state.eps, state.stats_mode, &state.buffer_updates);
}

ResidualBlock::ResidualBlock(std::size_t in, std::size_t out, SkipKind skip_kind, RngStream& rng)
    : in_width(in), out_width(out) {
    linear1 = Linear(in, out, rng);
    bn1 = BatchNorm(out);
    linear2 = Linear(out, out, rng);
    bn2 = BatchNorm(out);
    if (skip_kind == SkipKind::Projection) {
        projection.emplace();
        projection->linear = Linear(in, out, rng);
        projection->bn = BatchNorm(out);
    } else if (in != out) {
        throw std::invalid_argument("residual block: identity skip requires equal widths");
    }
}

Tensor ResidualBlock::forward(const Tensor& x) {
    if (x.shape().size() != 2 || x.dim(1) != in_width) {
        throw TensorError("residual block: input width mismatch");
    }
    Tensor main = bn2.forward(linear2.forward(relu(bn1.forward(linear1.forward(x)))));
    Tensor skip = projection ? projection->bn.forward(projection->linear.forward(x)) : x;
    return relu(add(main, skip));
}

BackboneSpec BackboneSpec::desk_default() {
    BackboneSpec spec;
    spec.input_dim = 64;
    spec.width = 128;
    spec.embedding_dim = 128;
    spec.blocks = {
        {128, SkipKind::Projection},
        {128, SkipKind::Identity},
        {128, SkipKind::Projection},
        {128, SkipKind::Identity},
    };
    return spec;
}

BackboneSpec BackboneSpec::small(std::size_t input_dim, std::size_t width, std::size_t n_blocks) {
    BackboneSpec spec;
    spec.input_dim = input_dim;
    spec.width = width;
    spec.embedding_dim = width;
    spec.blocks.clear();
    for (std::size_t i = 0; i < n_blocks; ++i) {
        // first block carries the dimension change, so it projects
        spec.blocks.push_back({width, i == 0 ? SkipKind::Projection : SkipKind::Identity});
    }
    return spec;
}

void BackboneSpec::validate() const {
    if (blocks.empty()) {
        throw std::invalid_argument("backbone spec: at least one block required");
    }
    bool any_projection = false;
    std::size_t in = input_dim;
    for (const auto& b : blocks) {
        if (b.width == 0) {
            throw std::invalid_argument("backbone spec: zero block width");
        }
        if (b.skip_kind == SkipKind::Projection) {
            any_projection = true;
        } else if (b.width != in) {
            throw std::invalid_argument(
                "backbone spec: identity skip across a width change");
        }
        in = b.width;
    }
    if (!any_projection) {
        throw std::invalid_argument("backbone spec: at least one projection block required");
    }
    if (embedding_dim != blocks.back().width) {
        throw std::invalid_argument("backbone spec: embedding_dim must equal last block width");
    }
}

Backbone::Backbone(const BackboneSpec& spec, RngStream& rng) : spec_(spec) {
    spec_.validate();
    std::size_t in = spec_.input_dim;
    for (const auto& b : spec_.blocks) {
        blocks_.emplace_back(in, b.width, b.skip_kind, rng);
        in = b.width;
    }
}

Tensor Backbone::forward(const Tensor& x) {
    Tensor h = x;
    for (auto& block : blocks_) {
        h = block.forward(h);
    }
    return h;
}

Model::Model(const BackboneSpec& backbone_spec, std::size_t head_outputs,
             std::uint64_t init_seed) {
    RngStream rng(init_seed);
    backbone_ = Backbone(backbone_spec, rng);
    head_spec_ = {backbone_spec.embedding_dim, head_outputs};
    head_ = Linear(backbone_spec.embedding_dim, head_outputs, rng);
}

Tensor Model::logits(const Tensor& x) {
    return head_.forward(backbone_.forward(x));
}

std::vector<double> Model::scores(const std::vector<double>& features, std::size_t n_rows) {
    if (n_rows == 0 || features.size() % n_rows != 0) {
        throw TensorError("scores: bad feature matrix");
    }
    const std::size_t d = features.size() / n_rows;
    Tensor x = Tensor::from_values({n_rows, d}, features);
    Tensor s = sigmoid(logits(x));  // no TapeScope active here: nothing records
    return s.values();
}

namespace {

void collect_block(const std::string& prefix, ResidualBlock& block,
                   std::vector<NamedParam>* params, std::vector<NamedBuffer>* buffers,
                   std::vector<NamedBatchNorm>* bns, std::vector<std::string>* skip_params) {
    auto add_linear = [&](const std::string& path, Linear& linear, bool on_skip) {
        if (params) {
            params->push_back({path + ".weight", linear.weight});
            params->push_back({path + ".bias", linear.bias});
        }
        if (skip_params && on_skip) {
            skip_params->push_back(path + ".weight");
            skip_params->push_back(path + ".bias");
        }
    };
    auto add_bn = [&](const std::string& path, BatchNorm& bn, bool on_skip) {
        if (params) {
            params->push_back({path + ".gamma", bn.state.gamma});
            params->push_back({path + ".beta", bn.state.beta});
        }
        if (buffers) {
            buffers->push_back({path + ".running_mean", path, &bn.state.running_mean});
            buffers->push_back({path + ".running_var", path, &bn.state.running_var});
        }
        if (bns) {
            bns->push_back({path, &bn, on_skip});
        }
        if (skip_params && on_skip) {
            skip_params->push_back(path + ".gamma");
            skip_params->push_back(path + ".beta");
        }
    };
    add_linear(prefix + ".linear1", block.linear1, false);
    add_bn(prefix + ".bn1", block.bn1, false);
    add_linear(prefix + ".linear2", block.linear2, false);
    add_bn(prefix + ".bn2", block.bn2, false);
    if (block.projection) {
        add_linear(prefix + ".skip.linear", block.projection->linear, true);
        add_bn(prefix + ".skip.bn", block.projection->bn, true);
    }
}

}  // namespace

std::vector<NamedParam> Backbone::named_parameters() {
    std::vector<NamedParam> out;
    std::size_t i = 1;
    for (auto& block : blocks_) {
        collect_block("backbone.block" + std::to_string(i), block, &out, nullptr, nullptr,
                      nullptr);
        ++i;
    }
    return out;
}

std::vector<NamedBuffer> Backbone::named_buffers() {
    std::vector<NamedBuffer> out;
    std::size_t i = 1;
    for (auto& block : blocks_) {
        collect_block("backbone.block" + std::to_string(i), block, nullptr, &out, nullptr,
                      nullptr);
        ++i;
    }
    return out;
}

std::vector<NamedBatchNorm> Backbone::batchnorm_layers() {
    std::vector<NamedBatchNorm> out;
    std::size_t i = 1;
    for (auto& block : blocks_) {
        collect_block("backbone.block" + std::to_string(i), block, nullptr, nullptr, &out,
                      nullptr);
        ++i;
    }
    return out;
}

std::vector<std::string> Backbone::skip_parameter_paths() {
    std::vector<std::string> out;
    std::size_t i = 1;
    for (auto& block : blocks_) {
        collect_block("backbone.block" + std::to_string(i), block, nullptr, nullptr, nullptr,
                      &out);
        ++i;
    }
    return out;
}

std::vector<NamedParam> Model::named_parameters() {
    std::vector<NamedParam> out = backbone_.named_parameters();
    out.push_back({"head.weight", head_.weight});
    out.push_back({"head.bias", head_.bias});
    return out;
}

std::vector<NamedBuffer> Model::named_buffers() { return backbone_.named_buffers(); }

std::vector<NamedBatchNorm> Model::batchnorm_layers() { return backbone_.batchnorm_layers(); }

std::vector<std::string> Model::skip_parameter_paths() {
    return backbone_.skip_parameter_paths();
}

void Model::set_stats_mode_all(StatsMode mode) {
    for (auto& named : batchnorm_layers()) {
        named.bn->state.stats_mode = mode;
    }
}

bool Model::has_projection_blocks() const {
    for (const auto& block : backbone_.blocks()) {
        if (block.has_projection()) {
            return true;
        }
    }
    return false;
}

HeadForward head_forward_bce(const Tensor& embeddings, const Linear& head, const Tensor& labels) {
    Tensor logits = head.forward(embeddings);
    Tensor loss = bce_with_logits(logits, labels);
    // scores detached from the tape
    std::vector<double> scores(logits.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double l = logits.values()[i];
        scores[i] = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
    }
    return {std::move(scores), std::move(loss)};
}

}  // namespace bnfair
