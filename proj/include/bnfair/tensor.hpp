#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnfair {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shared storage behind a Tensor handle. Gradient buffers are allocated
/// lazily and only ever for nodes with requires_grad set; everything else
/// stays grad-free by construction.
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::unique_ptr<std::vector<double>> grad;
};

/// Dense row-major 64-bit float tensor with value semantics over shared
/// storage. Rank 1 and 2 cover everything the models need; scalars are
/// shape {1}.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t dim(std::size_t i) const;

    std::vector<double>& values();
    const std::vector<double>& values() const;
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();
    void drop_grad();

    /// Deep copy of values (grad not copied).
    Tensor clone() const;

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

/// Reverse-mode tape. Ops record themselves while a TapeScope is active and
/// any input requires grad; backward() then walks the recorded list once in
/// reverse, propagating only where an output gradient actually exists.
///
/// Counters:
///   backward_rule_executions - recorded nodes visited with a live gradient
///   backward_flops           - scalar mul/add operations spent in backward
///   grad_allocations         - gradient buffers materialized during backward
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& loss);
    void reset();

    std::size_t op_count() const { return ops_.size(); }
    bool backward_run() const { return backward_done_; }
    std::uint64_t backward_rule_executions() const { return rule_executions_; }
    std::uint64_t backward_flops() const { return flops_; }
    std::uint64_t grad_allocations() const { return grad_allocations_; }

    // -- recording interface (used by op implementations) --
    using BackwardFn = std::function<void(Tape&)>;
    void record(std::shared_ptr<TensorNode> output, BackwardFn backward);

    /// grad[target] += values (allocating if needed). Rejects targets that do
    /// not require grad: backward rules must filter inputs first.
    void accumulate(const std::shared_ptr<TensorNode>& target, const double* values,
                    std::size_t n, double scale = 1.0);
    void add_flops(std::uint64_t n) { flops_ += n; }

private:
    struct RecordedOp {
        std::shared_ptr<TensorNode> output;
        BackwardFn backward;
    };

    std::vector<RecordedOp> ops_;
    bool backward_done_ = false;
    std::uint64_t rule_executions_ = 0;
    std::uint64_t flops_ = 0;
    std::uint64_t grad_allocations_ = 0;
};

/// RAII activation of a tape for the current thread. Ops record onto
/// TapeScope::active() when it is non-null.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    static Tape* active();

private:
    Tape* previous_;
};

// ---- differentiable ops ----
// Every op validates operand shapes and rejects non-finite outputs.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a [p,q] times b[r,q] transposed -> [p,r].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
/// x [p,n] plus bias [n] broadcast over the leading batch dim.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean binary cross-entropy over all cells, computed stably from logits.
/// labels must be 0/1 and must not require grad.
Tensor bce_with_logits(const Tensor& logits, const Tensor& labels);

/// Rows scaled to unit L2 norm. Rejects zero-norm rows.
Tensor row_normalize(const Tensor& x);

/// NT-Xent loss from a [2N,2N] cosine-similarity matrix where rows 2i and
/// 2i+1 are paired views. Mean over all 2N anchors; self-similarities are
/// excluded from the denominator.
Tensor nt_xent_from_sim(const Tensor& sim, double tau);

enum class StatsMode { UpdateStats, FrozenStats };

/// BatchNorm over features (columns) of x [batch, n].
/// UpdateStats: normalize with batch mean / biased batch variance, then
/// EMA-update the buffers (mean with batch mean, variance with the unbiased
/// batch variance). FrozenStats: normalize with the buffers, no mutation.
/// Buffer updates are gradient-free; gradients flow to x and, when they
/// require grad, to gamma/beta.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::vector<double>& running_mean, std::vector<double>& running_var,
                 double momentum, double eps, StatsMode mode,
                 std::uint64_t* buffer_update_counter = nullptr);

}  // namespace bnfair
