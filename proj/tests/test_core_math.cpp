#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "bnfair/optimizer.hpp"
#include "bnfair/rng.hpp"
#include "bnfair/tensor.hpp"
#include "finite_diff.hpp"

using namespace bnfair;

namespace {

// Independent splitmix64 transcription, kept separate from the library.
std::uint64_t reference_splitmix64_first(std::uint64_t seed) {
    seed += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = seed;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Tensor random_tensor(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    for (double& v : values) v = scale * rng.gaussian();
    return Tensor::from_values(std::move(shape), std::move(values));
}

}  // namespace

TEST_CASE("splitmix64 matches the reference value for seed 0") {
    std::uint64_t state = 0;
    CHECK(splitmix64_next(state) == 16294208416658607535ULL);
    CHECK(splitmix64_next(state) == reference_splitmix64_first(0x9E3779B97F4A7C15ULL));
    for (std::uint64_t seed : {1ULL, 42ULL, 0xDEADBEEFULL}) {
        std::uint64_t s = seed;
        CHECK(splitmix64_next(s) == reference_splitmix64_first(seed));
    }
}

TEST_CASE("equal seeds give equal streams") {
    RngStream a(123), b(123);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    RngStream c(123), d(124);
    bool all_equal = true;
    for (int i = 0; i < 16; ++i) {
        all_equal = all_equal && (c.next_u64() == d.next_u64());
    }
    CHECK_FALSE(all_equal);
}

TEST_CASE("substreams are disjoint and reproducible") {
    RngStream root(7);
    RngStream s0 = root.substream(0);
    RngStream s1 = root.substream(1);
    CHECK(s0.next_u64() != s1.next_u64());
    RngStream again = RngStream(7).substream(1);
    RngStream s1b = root.substream(1);
    CHECK(again.next_u64() == s1b.next_u64());
}

TEST_CASE("gaussian sample moments at 1e5 draws") {
    RngStream rng(2024);
    const int n = 100000;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rng.gaussian();
        sum += g;
        sum_sq += g * g;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    CHECK(std::abs(mean) <= 0.02);
    CHECK(std::abs(var - 1.0) <= 0.05);
}

TEST_CASE("uniform_int stays in range and shuffle is deterministic") {
    RngStream rng(5);
    for (int i = 0; i < 200; ++i) {
        CHECK(rng.uniform_int(7) < 7);
    }
    std::vector<std::uint32_t> v1(50), v2(50);
    for (std::uint32_t i = 0; i < 50; ++i) v1[i] = v2[i] = i;
    RngStream r1(9), r2(9);
    r1.shuffle(v1);
    r2.shuffle(v2);
    CHECK(v1 == v2);
}

TEST_CASE("matmul identity and elementwise basics") {
    RngStream rng(1);
    Tensor eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = random_tensor({3, 5}, rng);
    Tensor out = matmul(eye, a);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(out.values()[i] == doctest::Approx(a.values()[i]).epsilon(1e-15));
    }

    Tensor r = relu(Tensor::from_values({3}, {-1.0, 0.0, 2.0}));
    CHECK(r.values() == std::vector<double>{0.0, 0.0, 2.0});

    CHECK(mean(Tensor::from_values({2}, {1.0, 3.0})).item() == doctest::Approx(2.0));
}

TEST_CASE("shape mismatches and non-finite outputs are errors") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(matmul(a, b), TensorError);
    CHECK_THROWS_AS(add(a, b), TensorError);
    CHECK_THROWS_AS(Tensor::from_values({1}, {std::nan("")}), TensorError);

    Tensor big = Tensor::from_values({1}, {1e308});
    CHECK_THROWS_AS(mul_scalar(big, 1e10), TensorError);
}

TEST_CASE("backward on linear and quadratic reductions") {
    Tensor x = Tensor::from_values({4}, {1, 2, 3, 4}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(x));
    }
    CHECK(x.grad() == std::vector<double>{1, 1, 1, 1});

    Tensor y = Tensor::from_values({2}, {1, 2}, true);
    Tape tape2;
    {
        TapeScope scope(tape2);
        tape2.backward(sum(mul(y, y)));
    }
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward misuse is rejected") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = sum(x);
    }
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), TensorError);

    Tape tape2;
    Tensor vec;
    {
        TapeScope scope(tape2);
        vec = mul(x, x);
    }
    CHECK_THROWS_AS(tape2.backward(vec), TensorError);  // not scalar

    Tape tape3;
    Tensor detached = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape3.backward(detached), TensorError);  // not on tape
}

TEST_CASE("gradients are never materialized for tensors without requires_grad") {
    RngStream rng(3);
    Tensor a = random_tensor({4, 3}, rng);
    a.set_requires_grad(true);
    Tensor b = random_tensor({3, 2}, rng);  // frozen
    Tensor frozen_add = random_tensor({4, 2}, rng);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor h = matmul(a, b);
        Tensor out = add(h, frozen_add);
        tape.backward(mean(out));
    }
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());
    CHECK_FALSE(frozen_add.has_grad());
}

TEST_CASE("tape reset reproduces identical gradients") {
    RngStream rng(11);
    Tensor w = random_tensor({3, 3}, rng);
    w.set_requires_grad(true);
    Tensor x = random_tensor({2, 3}, rng);
    auto run = [&]() {
        w.drop_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(mean(relu(matmul(x, w))));
        return w.grad();
    };
    const std::vector<double> g1 = run();
    const std::vector<double> g2 = run();
    CHECK(g1 == g2);
}

TEST_CASE("fixed seed makes op sequences bit-identical") {
    auto build = [](std::uint64_t seed) {
        RngStream rng(seed);
        Tensor a = random_tensor({5, 4}, rng);
        Tensor b = random_tensor({4, 6}, rng);
        return matmul(relu(a), sigmoid(b)).values();
    };
    CHECK(build(77) == build(77));
}

TEST_CASE("finite differences validate every op composite (100 random trials)") {
    RngStream rng(2025);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t p = 2 + rng.uniform_int(7);  // <= 8
        const std::size_t q = 2 + rng.uniform_int(7);
        const std::size_t r = 2 + rng.uniform_int(7);
        Tensor x, w, bias, gate, other;
        // keep pre-activations away from the relu kink so central
        // differences stay quadratic
        for (;;) {
            x = random_tensor({p, q}, rng);
            w = random_tensor({q, r}, rng, 0.7);
            bias = random_tensor({r}, rng, 0.5);
            gate = random_tensor({p, r}, rng);
            other = random_tensor({p, r}, rng);
            const Tensor h = add_bias(matmul(x, w), bias);
            double min_abs = 1e9;
            for (double v : h.values()) {
                min_abs = std::min(min_abs, std::abs(v));
            }
            if (min_abs > 1e-3) {
                break;
            }
        }

        auto loss_fn = [&]() {
            Tensor h = add_bias(matmul(x, w), bias);
            Tensor activated = add(relu(h), mul_scalar(sigmoid(h), 0.5));
            Tensor mixed = sub(mul(activated, gate), mul_scalar(other, 0.25));
            Tensor s = matmul_nt(mixed, other);
            return add(mean(s), mul_scalar(sum(row_normalize(mixed)), 0.01));
        };
        for (Tensor* t : {&x, &w, &bias, &gate}) {
            worst = std::max(worst, testutil::gradient_check(*t, loss_fn));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("sgd momentum update follows the stated recurrence") {
    // plain step
    {
        Tensor theta = Tensor::from_values({1}, {1.0}, true);
        Optimizer opt({theta}, {OptimizerArm::SgdMomentum, 0.0, 0.0, 0.99, 1e-8});
        theta.node()->grad = std::make_unique<std::vector<double>>(1, 2.0);
        opt.step(0.1);
        CHECK(theta.values()[0] == doctest::Approx(0.8));
        CHECK(opt.step_count() == 1);
    }
    // momentum unrolled two steps
    {
        Tensor theta = Tensor::from_values({1}, {0.0}, true);
        Optimizer opt({theta}, {OptimizerArm::SgdMomentum, 0.9, 0.0, 0.99, 1e-8});
        theta.node()->grad = std::make_unique<std::vector<double>>(1, 1.0);
        opt.step(1.0);
        CHECK(theta.values()[0] == doctest::Approx(-1.0));
        opt.step(1.0);
        CHECK(theta.values()[0] == doctest::Approx(-2.9));
        CHECK(opt.slot_buffers()[0][0] == doctest::Approx(1.9));
    }
    // zero lr leaves parameters unchanged
    {
        Tensor theta = Tensor::from_values({2}, {3.0, -1.0}, true);
        Optimizer opt({theta}, {OptimizerArm::SgdMomentum, 0.9, 1e-4, 0.99, 1e-8});
        theta.node()->grad = std::make_unique<std::vector<double>>(2, 5.0);
        opt.step(0.0);
        CHECK(theta.values() == std::vector<double>{3.0, -1.0});
    }
}

TEST_CASE("adaptive arm scales by the second moment and is momentum-free") {
    Tensor theta = Tensor::from_values({1}, {1.0}, true);
    OptimizerConfig cfg;
    cfg.arm = OptimizerArm::Adaptive;
    cfg.rho = 0.5;
    Optimizer opt({theta}, cfg);
    theta.node()->grad = std::make_unique<std::vector<double>>(1, 4.0);
    opt.step(0.1);
    // s = 0.5*16 = 8; step = 0.1*4/(sqrt(8)+1e-8)
    CHECK(theta.values()[0] == doctest::Approx(1.0 - 0.4 / (std::sqrt(8.0) + 1e-8)));
}

TEST_CASE("optimizer rejects mismatched gradient shapes") {
    Tensor theta = Tensor::from_values({2}, {1.0, 2.0}, true);
    Optimizer opt({theta}, OptimizerConfig{});
    theta.node()->grad = std::make_unique<std::vector<double>>(3, 1.0);
    CHECK_THROWS_AS(opt.step(0.1), TensorError);
}

TEST_CASE("learning-rate schedule shapes") {
    LrSchedule warmup{1.0, 10, 30, ScheduleKind::WarmupCosine};
    CHECK(warmup.at(4) == doctest::Approx(0.5));       // linear ramp
    CHECK(warmup.at(9) == doctest::Approx(1.0));       // ramp end
    CHECK(warmup.at(10) == doctest::Approx(1.0));      // cosine start
    CHECK(warmup.at(20) == doctest::Approx(0.5).epsilon(1e-12));  // cosine midpoint
    CHECK_THROWS_AS(warmup.at(30), std::out_of_range);

    LrSchedule constant{0.3, 0, 100, ScheduleKind::Constant};
    CHECK(constant.at(0) == doctest::Approx(0.3));
    CHECK(constant.at(99) == doctest::Approx(0.3));

    for (ScheduleKind kind :
         {ScheduleKind::Constant, ScheduleKind::WarmupCosine, ScheduleKind::OneCycle}) {
        LrSchedule s{0.5, 7, 83, kind};
        for (std::size_t step = 0; step < 83; ++step) {
            CHECK(s.at(step) > 0.0);
        }
        CHECK(s.at(0) <= 0.5);  // warmup starts at or below base
    }
}
