#include "bnfair/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace bnfair {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw TensorError("tensor dimensions must be positive");
        }
        n *= d;
    }
    return n;
}

void check_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw TensorError(std::string("non-finite value produced by ") + op);
        }
    }
}

std::shared_ptr<TensorNode> make_node(std::vector<std::size_t> shape, std::vector<double> data) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return node;
}

bool recording(const std::initializer_list<const Tensor*>& inputs) {
    if (TapeScope::active() == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

Tensor finish_op(std::shared_ptr<TensorNode> out, const char* op,
                 const std::initializer_list<const Tensor*>& inputs, Tape::BackwardFn backward) {
    check_finite(out->data, op);
    if (recording(inputs)) {
        out->requires_grad = true;
        TapeScope::active()->record(out, std::move(backward));
    }
    return Tensor(out);
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) {
        throw TensorError(std::string(op) + ": expected a rank-2 tensor");
    }
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> values,
                           bool requires_grad) {
    if (shape_product(shape) != values.size()) {
        throw TensorError("from_values: shape does not match value count");
    }
    check_finite(values, "from_values");
    auto node = make_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) {
    return from_values({1}, {value});
}

const std::vector<std::size_t>& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size() const { return node_->data.size(); }

std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }

std::vector<double>& Tensor::values() { return node_->data; }

const std::vector<double>& Tensor::values() const { return node_->data; }

double Tensor::item() const {
    if (size() != 1) {
        throw TensorError("item: tensor is not scalar");
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) {
        node_->grad.reset();
    }
    return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) {
        throw TensorError("grad: no gradient buffer allocated");
    }
    return *node_->grad;
}

void Tensor::zero_grad() {
    if (has_grad()) {
        std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
    }
}

void Tensor::drop_grad() {
    if (node_) {
        node_->grad.reset();
    }
}

Tensor Tensor::clone() const {
    auto node = make_node(node_->shape, node_->data);
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
}

// ---- Tape ----

void Tape::record(std::shared_ptr<TensorNode> output, BackwardFn backward) {
    ops_.push_back({std::move(output), std::move(backward)});
}

void Tape::accumulate(const std::shared_ptr<TensorNode>& target, const double* values,
                      std::size_t n, double scale) {
    if (!target->requires_grad) {
        throw TensorError("internal: gradient routed to a tensor without requires_grad");
    }
    if (target->data.size() != n) {
        throw TensorError("internal: gradient size mismatch");
    }
    if (!target->grad) {
        target->grad = std::make_unique<std::vector<double>>(n, 0.0);
        ++grad_allocations_;
    }
    double* g = target->grad->data();
    if (scale == 1.0) {
        for (std::size_t i = 0; i < n; ++i) {
            g[i] += values[i];
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            g[i] += scale * values[i];
        }
    }
    flops_ += n;
}

void Tape::backward(const Tensor& loss) {
    if (backward_done_) {
        throw TensorError("backward called twice without tape reset");
    }
    if (!loss.defined() || loss.size() != 1) {
        throw TensorError("backward: loss must be a scalar tensor");
    }
    const auto& loss_node = loss.node();
    bool on_tape = false;
    for (const auto& op : ops_) {
        if (op.output == loss_node) {
            on_tape = true;
            break;
        }
    }
    if (!on_tape) {
        throw TensorError("backward: loss is not on this tape");
    }
    if (!loss_node->grad) {
        loss_node->grad = std::make_unique<std::vector<double>>(1, 0.0);
        ++grad_allocations_;
    }
    (*loss_node->grad)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        if (!it->output->grad) {
            continue;  // not an ancestor of the loss
        }
        ++rule_executions_;
        it->backward(*this);
    }
    backward_done_ = true;
}

void Tape::reset() {
    ops_.clear();
    backward_done_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* TapeScope::active() { return g_active_tape; }

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
    if (b.dim(0) != q) {
        throw TensorError("matmul: inner dimensions do not match");
    }
    std::vector<double> out(p * r, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < p; ++i) {
        double* orow = out.data() + i * r;
        const double* arow = av + i * q;
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = arow[k];
            const double* brow = bv + k * r;
            for (std::size_t j = 0; j < r; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    auto an = a.node(), bn = b.node();
    auto on = make_node({p, r}, std::move(out));
    return finish_op(on, "matmul", {&a, &b}, [an, bn, on, p, q, r](Tape& tape) {
        const double* dc = on->grad->data();
        if (an->requires_grad) {
            // dA = dC * B^T
            std::vector<double> da(p * q, 0.0);
            const double* bv = bn->data.data();
            for (std::size_t i = 0; i < p; ++i) {
                const double* dcrow = dc + i * r;
                double* darow = da.data() + i * q;
                for (std::size_t k = 0; k < q; ++k) {
                    const double* brow = bv + k * r;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < r; ++j) {
                        acc += dcrow[j] * brow[j];
                    }
                    darow[k] = acc;
                }
            }
            tape.add_flops(2ull * p * q * r);
            tape.accumulate(an, da.data(), da.size());
        }
        if (bn->requires_grad) {
            // dB = A^T * dC
            std::vector<double> db(q * r, 0.0);
            const double* av = an->data.data();
            for (std::size_t i = 0; i < p; ++i) {
                const double* arow = av + i * q;
                const double* dcrow = dc + i * r;
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = arow[k];
                    double* dbrow = db.data() + k * r;
                    for (std::size_t j = 0; j < r; ++j) {
                        dbrow[j] += aik * dcrow[j];
                    }
                }
            }
            tape.add_flops(2ull * p * q * r);
            tape.accumulate(bn, db.data(), db.size());
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(0);
    if (b.dim(1) != q) {
        throw TensorError("matmul_nt: inner dimensions do not match");
    }
    std::vector<double> out(p * r, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < p; ++i) {
        const double* arow = av + i * q;
        double* orow = out.data() + i * r;
        for (std::size_t j = 0; j < r; ++j) {
            const double* brow = bv + j * q;
            double acc = 0.0;
            for (std::size_t k = 0; k < q; ++k) {
                acc += arow[k] * brow[k];
            }
            orow[j] = acc;
        }
    }
    auto an = a.node(), bn = b.node();
    auto on = make_node({p, r}, std::move(out));
    return finish_op(on, "matmul_nt", {&a, &b}, [an, bn, on, p, q, r](Tape& tape) {
        const double* dc = on->grad->data();
        if (an->requires_grad) {
            // dA = dC * B
            std::vector<double> da(p * q, 0.0);
            const double* bv = bn->data.data();
            for (std::size_t i = 0; i < p; ++i) {
                const double* dcrow = dc + i * r;
                double* darow = da.data() + i * q;
                for (std::size_t j = 0; j < r; ++j) {
                    const double d = dcrow[j];
                    const double* brow = bv + j * q;
                    for (std::size_t k = 0; k < q; ++k) {
                        darow[k] += d * brow[k];
                    }
                }
            }
            tape.add_flops(2ull * p * q * r);
            tape.accumulate(an, da.data(), da.size());
        }
        if (bn->requires_grad) {
            // dB = dC^T * A
            std::vector<double> db(r * q, 0.0);
            const double* av = an->data.data();
            for (std::size_t i = 0; i < p; ++i) {
                const double* dcrow = dc + i * r;
                const double* arow = av + i * q;
                for (std::size_t j = 0; j < r; ++j) {
                    const double d = dcrow[j];
                    double* dbrow = db.data() + j * q;
                    for (std::size_t k = 0; k < q; ++k) {
                        dbrow[k] += d * arow[k];
                    }
                }
            }
            tape.add_flops(2ull * p * q * r);
            tape.accumulate(bn, db.data(), db.size());
        }
    });
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* opname, bool subtract) {
    if (a.shape() != b.shape()) {
        throw TensorError(std::string(opname) + ": shape mismatch");
    }
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    if (subtract) {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
    }
    auto an = a.node(), bn = b.node();
    auto on = make_node(a.shape(), std::move(out));
    const double bsign = subtract ? -1.0 : 1.0;
    return finish_op(on, opname, {&a, &b}, [an, bn, on, n, bsign](Tape& tape) {
        const double* dc = on->grad->data();
        if (an->requires_grad) {
            tape.accumulate(an, dc, n);
        }
        if (bn->requires_grad) {
            tape.accumulate(bn, dc, n, bsign);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, "add", false); }

Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, "sub", true); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw TensorError("mul: shape mismatch");
    }
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    auto on = make_node(a.shape(), std::move(out));
    return finish_op(on, "mul", {&a, &b}, [an, bn, on, n](Tape& tape) {
        const double* dc = on->grad->data();
        std::vector<double> scratch(n);
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) scratch[i] = dc[i] * bn->data[i];
            tape.add_flops(n);
            tape.accumulate(an, scratch.data(), n);
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) scratch[i] = dc[i] * an->data[i];
            tape.add_flops(n);
            tape.accumulate(bn, scratch.data(), n);
        }
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* av = a.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * s;
    auto an = a.node();
    auto on = make_node(a.shape(), std::move(out));
    return finish_op(on, "mul_scalar", {&a}, [an, on, n, s](Tape& tape) {
        if (an->requires_grad) {
            tape.accumulate(an, on->grad->data(), n, s);
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_bias");
    if (bias.shape().size() != 1 || bias.dim(0) != x.dim(1)) {
        throw TensorError("add_bias: bias must be rank-1 matching the feature dim");
    }
    const std::size_t p = x.dim(0), n = x.dim(1);
    std::vector<double> out(p * n);
    const double* xv = x.values().data();
    const double* bv = bias.values().data();
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = xv[i * n + j] + bv[j];
        }
    }
    auto xn = x.node(), bn = bias.node();
    auto on = make_node({p, n}, std::move(out));
    return finish_op(on, "add_bias", {&x, &bias}, [xn, bn, on, p, n](Tape& tape) {
        const double* dc = on->grad->data();
        if (xn->requires_grad) {
            tape.accumulate(xn, dc, p * n);
        }
        if (bn->requires_grad) {
            std::vector<double> db(n, 0.0);
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    db[j] += dc[i * n + j];
                }
            }
            tape.add_flops(p * n);
            tape.accumulate(bn, db.data(), n);
        }
    });
}

Tensor relu(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    auto xn = x.node();
    auto on = make_node(x.shape(), std::move(out));
    return finish_op(on, "relu", {&x}, [xn, on, n](Tape& tape) {
        if (xn->requires_grad) {
            const double* dc = on->grad->data();
            std::vector<double> dx(n);
            for (std::size_t i = 0; i < n; ++i) {
                dx[i] = xn->data[i] > 0.0 ? dc[i] : 0.0;
            }
            tape.add_flops(n);
            tape.accumulate(xn, dx.data(), n);
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = xv[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto xn = x.node();
    auto on = make_node(x.shape(), std::move(out));
    return finish_op(on, "sigmoid", {&x}, [xn, on, n](Tape& tape) {
        if (xn->requires_grad) {
            const double* dc = on->grad->data();
            std::vector<double> dx(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double y = on->data[i];
                dx[i] = dc[i] * y * (1.0 - y);
            }
            tape.add_flops(3ull * n);
            tape.accumulate(xn, dx.data(), n);
        }
    });
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean, const char* opname) {
    const std::size_t n = x.size();
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    if (take_mean) acc /= static_cast<double>(n);
    auto xn = x.node();
    auto on = make_node({1}, {acc});
    const double w = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
    return finish_op(on, opname, {&x}, [xn, on, n, w](Tape& tape) {
        if (xn->requires_grad) {
            const double d = (*on->grad)[0] * w;
            std::vector<double> dx(n, d);
            tape.add_flops(n);
            tape.accumulate(xn, dx.data(), n);
        }
    });
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false, "sum"); }

Tensor mean(const Tensor& x) { return reduce_all(x, true, "mean"); }

Tensor bce_with_logits(const Tensor& logits, const Tensor& labels) {
    if (logits.shape() != labels.shape()) {
        throw TensorError("bce_with_logits: shape mismatch");
    }
    if (labels.requires_grad()) {
        throw TensorError("bce_with_logits: labels must not require grad");
    }
    const std::size_t n = logits.size();
    const double* lv = logits.values().data();
    const double* yv = labels.values().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (yv[i] != 0.0 && yv[i] != 1.0) {
            throw TensorError("bce_with_logits: labels must be 0 or 1");
        }
        const double l = lv[i];
        // softplus(l) - y*l, stable form
        const double sp = std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l)));
        acc += sp - yv[i] * l;
    }
    acc /= static_cast<double>(n);
    auto ln = logits.node(), yn = labels.node();
    auto on = make_node({1}, {acc});
    return finish_op(on, "bce_with_logits", {&logits}, [ln, yn, on, n](Tape& tape) {
        if (ln->requires_grad) {
            const double d = (*on->grad)[0] / static_cast<double>(n);
            std::vector<double> dl(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double l = ln->data[i];
                const double s =
                    l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
                dl[i] = d * (s - yn->data[i]);
            }
            tape.add_flops(4ull * n);
            tape.accumulate(ln, dl.data(), n);
        }
    });
}

Tensor row_normalize(const Tensor& x) {
    require_matrix(x, "row_normalize");
    const std::size_t p = x.dim(0), q = x.dim(1);
    std::vector<double> out(p * q);
    std::vector<double> norms(p);
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < p; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < q; ++k) {
            acc += xv[i * q + k] * xv[i * q + k];
        }
        const double norm = std::sqrt(acc);
        if (norm < 1e-300) {
            throw TensorError("row_normalize: zero-norm row");
        }
        norms[i] = norm;
        for (std::size_t k = 0; k < q; ++k) {
            out[i * q + k] = xv[i * q + k] / norm;
        }
    }
    auto xn = x.node();
    auto on = make_node({p, q}, std::move(out));
    return finish_op(on, "row_normalize", {&x},
                     [xn, on, p, q, norms = std::move(norms)](Tape& tape) {
                         if (!xn->requires_grad) {
                             return;
                         }
                         const double* dy = on->grad->data();
                         const double* y = on->data.data();
                         std::vector<double> dx(p * q);
                         for (std::size_t i = 0; i < p; ++i) {
                             double dot = 0.0;
                             for (std::size_t k = 0; k < q; ++k) {
                                 dot += dy[i * q + k] * y[i * q + k];
                             }
                             for (std::size_t k = 0; k < q; ++k) {
                                 dx[i * q + k] = (dy[i * q + k] - y[i * q + k] * dot) / norms[i];
                             }
                         }
                         tape.add_flops(5ull * p * q);
                         tape.accumulate(xn, dx.data(), dx.size());
                     });
}

Tensor nt_xent_from_sim(const Tensor& sim, double tau) {
    require_matrix(sim, "nt_xent_from_sim");
    const std::size_t m = sim.dim(0);
    if (sim.dim(1) != m || m < 2 || m % 2 != 0) {
        throw TensorError("nt_xent_from_sim: similarity matrix must be [2N,2N]");
    }
    if (!(tau > 0.0)) {
        throw TensorError("nt_xent_from_sim: tau must be positive");
    }
    const double* sv = sim.values().data();
    // probs(i,k) = softmax over k != i of sim(i,k)/tau, diagonal forced to 0
    std::vector<double> probs(m * m, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pos = i ^ 1;
        double max_v = -1e300;
        for (std::size_t k = 0; k < m; ++k) {
            if (k != i) {
                max_v = std::max(max_v, sv[i * m + k] / tau);
            }
        }
        double denom = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            if (k == i) {
                continue;
            }
            const double e = std::exp(sv[i * m + k] / tau - max_v);
            probs[i * m + k] = e;
            denom += e;
        }
        for (std::size_t k = 0; k < m; ++k) {
            probs[i * m + k] /= denom;
        }
        loss += -(sv[i * m + pos] / tau - max_v) + std::log(denom);
    }
    loss /= static_cast<double>(m);
    auto sn = sim.node();
    auto on = make_node({1}, {loss});
    return finish_op(on, "nt_xent_from_sim", {&sim},
                     [sn, on, m, tau, probs = std::move(probs)](Tape& tape) {
                         if (!sn->requires_grad) {
                             return;
                         }
                         const double d = (*on->grad)[0] / (static_cast<double>(m) * tau);
                         std::vector<double> ds(m * m, 0.0);
                         for (std::size_t i = 0; i < m; ++i) {
                             const std::size_t pos = i ^ 1;
                             for (std::size_t k = 0; k < m; ++k) {
                                 if (k == i) {
                                     continue;
                                 }
                                 ds[i * m + k] =
                                     d * (probs[i * m + k] - (k == pos ? 1.0 : 0.0));
                             }
                         }
                         tape.add_flops(2ull * m * m);
                         tape.accumulate(sn, ds.data(), ds.size());
                     });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::vector<double>& running_mean, std::vector<double>& running_var,
                 double momentum, double eps, StatsMode mode,
                 std::uint64_t* buffer_update_counter) {
    require_matrix(x, "batchnorm");
    const std::size_t b = x.dim(0), n = x.dim(1);
    if (gamma.size() != n || beta.size() != n || running_mean.size() != n ||
        running_var.size() != n) {
        throw TensorError("batchnorm: feature dimension mismatch");
    }
    const double* xv = x.values().data();

    std::vector<double> mean_used(n), istd(n);
    const bool update = mode == StatsMode::UpdateStats;
    if (update) {
        if (b < 2) {
            throw TensorError("batchnorm: batch size must be >= 2 in UpdateStats mode");
        }
        for (std::size_t j = 0; j < n; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
                mu += xv[i * n + j];
            }
            mu /= static_cast<double>(b);
            double var = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
                const double c = xv[i * n + j] - mu;
                var += c * c;
            }
            const double biased = var / static_cast<double>(b);
            const double unbiased = var / static_cast<double>(b - 1);
            mean_used[j] = mu;
            istd[j] = 1.0 / std::sqrt(biased + eps);
            running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu;
            running_var[j] = (1.0 - momentum) * running_var[j] + momentum * unbiased;
        }
        if (buffer_update_counter != nullptr) {
            ++*buffer_update_counter;
        }
    } else {
        for (std::size_t j = 0; j < n; ++j) {
            if (running_var[j] < 0.0) {
                throw TensorError("batchnorm: negative running variance (corrupt state)");
            }
            mean_used[j] = running_mean[j];
            istd[j] = 1.0 / std::sqrt(running_var[j] + eps);
        }
    }

    // xhat kept for backward; y = gamma * xhat + beta
    auto xhat = std::make_shared<std::vector<double>>(b * n);
    std::vector<double> out(b * n);
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xv[i * n + j] - mean_used[j]) * istd[j];
            (*xhat)[i * n + j] = h;
            out[i * n + j] = gv[j] * h + bv[j];
        }
    }

    auto xn = x.node(), gn = gamma.node(), bn2 = beta.node();
    auto on = make_node({b, n}, std::move(out));
    return finish_op(
        on, "batchnorm", {&x, &gamma, &beta},
        [xn, gn, bn2, on, b, n, update, xhat, istd = std::move(istd)](Tape& tape) {
            const double* dy = on->grad->data();
            const double* h = xhat->data();
            if (gn->requires_grad) {
                std::vector<double> dg(n, 0.0);
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        dg[j] += dy[i * n + j] * h[i * n + j];
                    }
                }
                tape.add_flops(2ull * b * n);
                tape.accumulate(gn, dg.data(), n);
            }
            if (bn2->requires_grad) {
                std::vector<double> db(n, 0.0);
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        db[j] += dy[i * n + j];
                    }
                }
                tape.add_flops(b * n);
                tape.accumulate(bn2, db.data(), n);
            }
            if (xn->requires_grad) {
                std::vector<double> dx(b * n);
                const double* gv = gn->data.data();
                if (update) {
                    // gradient through the batch statistics
                    for (std::size_t j = 0; j < n; ++j) {
                        double sum_dxhat = 0.0, sum_dxhat_h = 0.0;
                        for (std::size_t i = 0; i < b; ++i) {
                            const double dxh = dy[i * n + j] * gv[j];
                            sum_dxhat += dxh;
                            sum_dxhat_h += dxh * h[i * n + j];
                        }
                        const double inv_b = 1.0 / static_cast<double>(b);
                        for (std::size_t i = 0; i < b; ++i) {
                            const double dxh = dy[i * n + j] * gv[j];
                            dx[i * n + j] =
                                istd[j] * (dxh - inv_b * sum_dxhat -
                                           h[i * n + j] * inv_b * sum_dxhat_h);
                        }
                    }
                    tape.add_flops(8ull * b * n);
                } else {
                    for (std::size_t i = 0; i < b; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            dx[i * n + j] = dy[i * n + j] * gv[j] * istd[j];
                        }
                    }
                    tape.add_flops(2ull * b * n);
                }
                tape.accumulate(xn, dx.data(), dx.size());
            }
        });
}

}  // namespace bnfair
