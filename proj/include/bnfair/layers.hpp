#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bnfair/rng.hpp"
#include "bnfair/tensor.hpp"

namespace bnfair {

/// Fully-connected layer, weight [in, out] + bias [out].
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, RngStream& rng);

    Tensor forward(const Tensor& x) const;

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

    Tensor weight;
    Tensor bias;

private:
    std::size_t in_ = 0, out_ = 0;
};

/// Per-layer BatchNorm state: affine parameters, running buffers, mode flags.
struct BatchNormState {
    std::size_t num_features = 0;
    Tensor gamma;  // init 1
    Tensor beta;   // init 0
    std::vector<double> running_mean;  // init 0
    std::vector<double> running_var;   // init 1
    double momentum = 0.1;
    double eps = 1e-5;
    StatsMode stats_mode = StatsMode::UpdateStats;
    bool affine_trainable = true;
    std::uint64_t buffer_updates = 0;  // UpdateStats forward passes seen
};

class BatchNorm {
public:
    BatchNorm() = default;
    explicit BatchNorm(std::size_t num_features);

    Tensor forward(const Tensor& x);

    BatchNormState state;
};

enum class SkipKind { Identity, Projection };

struct ResidualBlockSpec {
    std::size_t width = 128;
    SkipKind skip_kind = SkipKind::Identity;
};

/// Main path Linear->BN->ReLU->Linear->BN; output ReLU(main + skip).
/// A Projection skip carries its own Linear + BN (the analogue of a ResNet
/// downsample branch); an Identity skip requires in == out.
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(std::size_t in, std::size_t out, SkipKind skip_kind, RngStream& rng);

    Tensor forward(const Tensor& x);

    bool has_projection() const { return projection.has_value(); }

    Linear linear1, linear2;
    BatchNorm bn1, bn2;
    struct Projection {
        Linear linear;
        BatchNorm bn;
    };
    std::optional<Projection> projection;

    std::size_t in_width = 0, out_width = 0;
};

struct NamedParam {
    std::string path;
    Tensor tensor;
};
struct NamedBuffer {
    std::string path;        // e.g. backbone.block1.bn1.running_mean
    std::string layer_path;  // e.g. backbone.block1.bn1
    std::vector<double>* data;
};
struct NamedBatchNorm {
    std::string layer_path;
    BatchNorm* bn;
    bool on_skip_branch;
};

/// Residual multilayer perceptron backbone.
struct BackboneSpec {
    std::size_t input_dim = 64;
    std::size_t width = 128;
    std::size_t embedding_dim = 128;
    std::vector<ResidualBlockSpec> blocks;

    /// Default desk backbone: 4 blocks, projection skips on blocks 1 and 3
    /// (1-indexed; block 1 carries the 64->128 dimension change).
    static BackboneSpec desk_default();

    /// Scaled-down variant used by fast tests and the shift scenario.
    static BackboneSpec small(std::size_t input_dim, std::size_t width, std::size_t n_blocks);

    void validate() const;
};

class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneSpec& spec, RngStream& rng);

    Tensor forward(const Tensor& x);

    const BackboneSpec& spec() const { return spec_; }
    std::vector<ResidualBlock>& blocks() { return blocks_; }
    const std::vector<ResidualBlock>& blocks() const { return blocks_; }

    // Paths are rooted at "backbone.block<i>" (1-indexed).
    std::vector<NamedParam> named_parameters();
    std::vector<NamedBuffer> named_buffers();
    std::vector<NamedBatchNorm> batchnorm_layers();
    std::vector<std::string> skip_parameter_paths();

private:
    BackboneSpec spec_;
    std::vector<ResidualBlock> blocks_;
};

struct HeadSpec {
    std::size_t embedding_dim = 128;
    std::size_t outputs = 11;
};

/// Backbone plus linear multi-label head. Owns every parameter and buffer
/// under a unique hierarchical path:
///   backbone.block<i>.{linear1,linear2}.{weight,bias}
///   backbone.block<i>.{bn1,bn2}.{gamma,beta,running_mean,running_var}
///   backbone.block<i>.skip.{linear.*,bn.*}
///   head.{weight,bias}
class Model {
public:
    Model() = default;
    Model(const BackboneSpec& backbone_spec, std::size_t head_outputs, std::uint64_t init_seed);

    Tensor embed(const Tensor& x) { return backbone_.forward(x); }
    Tensor logits(const Tensor& x);

    /// Scores in (0,1), computed without recording on any tape.
    std::vector<double> scores(const std::vector<double>& features, std::size_t n_rows);

    std::vector<NamedParam> named_parameters();
    std::vector<NamedBuffer> named_buffers();
    std::vector<NamedBatchNorm> batchnorm_layers();

    /// Parameter paths belonging to the projection-skip branches (linears and
    /// BN affine), in declaration order.
    std::vector<std::string> skip_parameter_paths();

    void set_stats_mode_all(StatsMode mode);
    bool has_projection_blocks() const;

    const BackboneSpec& backbone_spec() const { return backbone_.spec(); }
    std::size_t head_outputs() const { return head_spec_.outputs; }
    Backbone& backbone() { return backbone_; }
    Linear& head() { return head_; }

private:
    Backbone backbone_;
    Linear head_;
    HeadSpec head_spec_;
};

/// Multi-label head forward: scores (detached) plus the mean BCE loss.
struct HeadForward {
    std::vector<double> scores;
    Tensor loss;
};
HeadForward head_forward_bce(const Tensor& embeddings, const Linear& head, const Tensor& labels);

}  // namespace bnfair
