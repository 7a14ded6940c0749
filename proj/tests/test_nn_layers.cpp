#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "bnfair/checkpoint.hpp"
#include "bnfair/layers.hpp"
#include "bnfair/rng.hpp"
#include "finite_diff.hpp"

using namespace bnfair;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    for (double& v : values) v = scale * rng.gaussian();
    return Tensor::from_values(std::move(shape), std::move(values));
}

void zero_all_weights(ResidualBlock& block) {
    auto zero = [](Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
    zero(block.linear1.weight);
    zero(block.linear1.bias);
    zero(block.linear2.weight);
    zero(block.linear2.bias);
    if (block.projection) {
        zero(block.projection->linear.weight);
        zero(block.projection->linear.bias);
    }
}

void set_frozen(ResidualBlock& block) {
    block.bn1.state.stats_mode = StatsMode::FrozenStats;
    block.bn2.state.stats_mode = StatsMode::FrozenStats;
    if (block.projection) {
        block.projection->bn.state.stats_mode = StatsMode::FrozenStats;
    }
}

}  // namespace

TEST_CASE("frozen batchnorm with unit buffers is near-identity") {
    BatchNorm bn(3);
    bn.state.stats_mode = StatsMode::FrozenStats;
    RngStream rng(1);
    Tensor x = random_tensor({5, 3}, rng);
    Tensor y = bn.forward(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-5));
    }
    CHECK(bn.state.buffer_updates == 0);
}

TEST_CASE("update-mode batchnorm normalizes with batch stats and EMA-updates buffers") {
    BatchNorm bn(1);
    Tensor x = Tensor::from_values({2, 1}, {1.0, 3.0});
    Tensor y = bn.forward(x);
    CHECK(y.values()[0] == doctest::Approx(-0.999995).epsilon(1e-6));
    CHECK(y.values()[1] == doctest::Approx(0.999995).epsilon(1e-6));
    // momentum 0.1: mean 0 -> 0.2, var 1 -> 0.9*1 + 0.1*2 (unbiased) = 1.1
    CHECK(bn.state.running_mean[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(bn.state.running_var[0] == doctest::Approx(1.1).epsilon(1e-12));
    CHECK(bn.state.buffer_updates == 1);
}

TEST_CASE("batchnorm rejects batch of one in update mode and corrupt variance") {
    BatchNorm bn(2);
    Tensor single = Tensor::from_values({1, 2}, {1.0, 2.0});
    CHECK_THROWS_AS(bn.forward(single), TensorError);

    BatchNorm frozen(2);
    frozen.state.stats_mode = StatsMode::FrozenStats;
    frozen.state.running_var[1] = -0.5;
    Tensor x = Tensor::from_values({2, 2}, {1.0, 2.0, 3.0, 4.0});
    CHECK_THROWS_AS(frozen.forward(x), TensorError);
}

TEST_CASE("batchnorm gradients match finite differences in both modes") {
    RngStream rng(7);
    for (StatsMode mode : {StatsMode::FrozenStats, StatsMode::UpdateStats}) {
        BatchNorm bn(3);
        bn.state.stats_mode = mode;
        bn.state.running_mean = {0.2, -0.1, 0.4};
        bn.state.running_var = {1.5, 0.7, 2.0};
        Tensor x = random_tensor({4, 3}, rng);
        Tensor target = random_tensor({4, 3}, rng);
        auto loss_fn = [&]() { return mean(mul(bn.forward(x), target)); };
        CHECK(testutil::gradient_check(x, loss_fn) <= 1e-6);
        CHECK(testutil::gradient_check(bn.state.gamma, loss_fn) <= 1e-6);
        CHECK(testutil::gradient_check(bn.state.beta, loss_fn) <= 1e-6);
    }
}

TEST_CASE("zero gamma kills the gradient to the input") {
    BatchNorm bn(2);
    std::fill(bn.state.gamma.values().begin(), bn.state.gamma.values().end(), 0.0);
    RngStream rng(3);
    Tensor x = random_tensor({4, 2}, rng);
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(mean(bn.forward(x)));
    }
    for (double g : x.grad()) {
        CHECK(g == 0.0);
    }
}

TEST_CASE("update-mode output is standardized: batch mean ~ beta, variance ~ gamma^2") {
    BatchNorm bn(4);
    bn.state.gamma.values() = {1.0, 2.0, 0.5, 1.5};
    bn.state.beta.values() = {0.0, 1.0, -0.5, 0.25};
    RngStream rng(11);
    const std::size_t batch = 64;
    Tensor x = random_tensor({batch, 4}, rng, 3.0);
    Tensor y = bn.forward(x);
    for (std::size_t j = 0; j < 4; ++j) {
        double mean_j = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            mean_j += y.values()[i * 4 + j];
        }
        mean_j /= batch;
        double var_j = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            const double c = y.values()[i * 4 + j] - mean_j;
            var_j += c * c;
        }
        var_j /= batch;
        CHECK(std::abs(mean_j - bn.state.beta.values()[j]) <= 1e-10);
        const double g2 = bn.state.gamma.values()[j] * bn.state.gamma.values()[j];
        CHECK(std::abs(var_j - g2) / g2 <= 1e-4);  // eps-limited
    }
}

TEST_CASE("frozen forward never touches the buffers") {
    BatchNorm bn(3);
    bn.state.stats_mode = StatsMode::FrozenStats;
    bn.state.running_mean = {0.3, -0.2, 0.9};
    bn.state.running_var = {1.2, 0.5, 2.5};
    const auto mean_before = bn.state.running_mean;
    const auto var_before = bn.state.running_var;
    RngStream rng(5);
    for (int i = 0; i < 10; ++i) {
        Tensor x = random_tensor({8, 3}, rng);
        bn.forward(x);
    }
    CHECK(bn.state.running_mean == mean_before);
    CHECK(bn.state.running_var == var_before);
    CHECK(bn.state.buffer_updates == 0);
}

TEST_CASE("EMA converges to the feeding distribution") {
    BatchNorm bn(1);
    RngStream rng(17);
    for (int step = 0; step < 500; ++step) {
        std::vector<double> batch(256);
        for (double& v : batch) v = rng.gaussian();
        bn.forward(Tensor::from_values({256, 1}, std::move(batch)));
    }
    CHECK(std::abs(bn.state.running_mean[0]) <= 0.05);
    CHECK(std::abs(bn.state.running_var[0] - 1.0) <= 0.1);
}

TEST_CASE("repeated identical batches converge geometrically at rate 1-m") {
    BatchNorm bn(1);
    RngStream rng(23);
    std::vector<double> batch(32);
    for (double& v : batch) v = 2.0 + 0.5 * rng.gaussian();
    double mu = 0.0;
    for (double v : batch) mu += v;
    mu /= batch.size();

    double prev_err = std::abs(bn.state.running_mean[0] - mu);
    for (int step = 0; step < 6; ++step) {
        bn.forward(Tensor::from_values({32, 1}, batch));
        const double err = std::abs(bn.state.running_mean[0] - mu);
        CHECK(err == doctest::Approx(prev_err * (1.0 - bn.state.momentum)).epsilon(1e-10));
        prev_err = err;
    }
}

TEST_CASE("residual block reduces to relu(x) when the main path is zero") {
    RngStream rng(31);
    ResidualBlock block(4, 4, SkipKind::Identity, rng);
    zero_all_weights(block);
    set_frozen(block);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = block.forward(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(y.values()[i] == doctest::Approx(std::max(0.0, x.values()[i])).epsilon(1e-12));
    }
}

TEST_CASE("residual block with zero projection outputs zero") {
    RngStream rng(37);
    ResidualBlock block(4, 6, SkipKind::Projection, rng);
    zero_all_weights(block);
    set_frozen(block);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = block.forward(x);
    for (double v : y.values()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("residual block rejects width mismatch and identity across widths") {
    RngStream rng(41);
    CHECK_THROWS_AS(ResidualBlock(4, 6, SkipKind::Identity, rng), std::invalid_argument);
    ResidualBlock block(4, 4, SkipKind::Identity, rng);
    Tensor bad = random_tensor({3, 5}, rng);
    CHECK_THROWS_AS(block.forward(bad), TensorError);
}

TEST_CASE("gradient check through a full residual block") {
    RngStream rng(43);
    for (StatsMode mode : {StatsMode::FrozenStats, StatsMode::UpdateStats}) {
        ResidualBlock block(3, 5, SkipKind::Projection, rng);
        block.bn1.state.stats_mode = mode;
        block.bn2.state.stats_mode = mode;
        block.projection->bn.state.stats_mode = mode;
        Tensor x = random_tensor({4, 3}, rng);
        Tensor target = random_tensor({4, 5}, rng);
        auto loss_fn = [&]() { return mean(mul(block.forward(x), target)); };
        CHECK(testutil::gradient_check(x, loss_fn) <= 1e-6);
        CHECK(testutil::gradient_check(block.linear1.weight, loss_fn) <= 1e-6);
        CHECK(testutil::gradient_check(block.bn1.state.gamma, loss_fn) <= 1e-6);
        CHECK(testutil::gradient_check(block.projection->linear.weight, loss_fn) <= 1e-6);
    }
}

TEST_CASE("multi-label head: symmetric case, saturation limit, gradients") {
    RngStream rng(47);
    Linear head(4, 3, rng);
    std::fill(head.weight.values().begin(), head.weight.values().end(), 0.0);
    Tensor emb = random_tensor({2, 4}, rng);
    Tensor labels = Tensor::from_values({2, 3}, {1, 0, 1, 0, 1, 0});
    HeadForward out = head_forward_bce(emb, head, labels);
    for (double s : out.scores) {
        CHECK(s == doctest::Approx(0.5));
    }
    CHECK(out.loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // saturated positive logit: per-cell loss tends to zero
    Tensor logit = Tensor::from_values({1, 1}, {30.0});
    Tensor one = Tensor::from_values({1, 1}, {1.0});
    CHECK(bce_with_logits(logit, one).item() <= 1e-12);

    Tensor bad_labels = Tensor::from_values({2, 3}, {1, 0, 2, 0, 1, 0});
    CHECK_THROWS_AS(head_forward_bce(emb, head, bad_labels), TensorError);

    Linear head2(4, 3, rng);
    Tensor emb2 = random_tensor({3, 4}, rng);
    Tensor labels2 = Tensor::from_values({3, 3}, {1, 0, 1, 0, 1, 0, 1, 1, 0});
    auto loss_fn = [&]() { return head_forward_bce(emb2, head2, labels2).loss; };
    CHECK(testutil::gradient_check(head2.weight, loss_fn) <= 1e-6);
    CHECK(testutil::gradient_check(head2.bias, loss_fn) <= 1e-6);
    CHECK(testutil::gradient_check(emb2, loss_fn) <= 1e-6);
}

TEST_CASE("parameter and buffer paths are unique and stable") {
    Model a(BackboneSpec::desk_default(), 11, 99);
    Model b(BackboneSpec::desk_default(), 11, 1234);
    std::set<std::string> seen;
    std::vector<std::string> paths_a, paths_b;
    for (const auto& p : a.named_parameters()) {
        CHECK(seen.insert(p.path).second);
        paths_a.push_back(p.path);
    }
    for (const auto& buf : a.named_buffers()) {
        CHECK(seen.insert(buf.path).second);
        paths_a.push_back(buf.path);
    }
    for (const auto& p : b.named_parameters()) paths_b.push_back(p.path);
    for (const auto& buf : b.named_buffers()) paths_b.push_back(buf.path);
    CHECK(paths_a == paths_b);
}

TEST_CASE("backbone spec validation") {
    BackboneSpec no_projection;
    no_projection.input_dim = 8;
    no_projection.width = 8;
    no_projection.embedding_dim = 8;
    no_projection.blocks = {{8, SkipKind::Identity}, {8, SkipKind::Identity}};
    CHECK_THROWS_AS(no_projection.validate(), std::invalid_argument);

    BackboneSpec bad_embedding = BackboneSpec::desk_default();
    bad_embedding.embedding_dim = 64;
    CHECK_THROWS_AS(bad_embedding.validate(), std::invalid_argument);

    CHECK_NOTHROW(BackboneSpec::desk_default().validate());
}

TEST_CASE("checkpoint round-trips bit-exactly and restores behavior") {
    namespace fs = std::filesystem;
    Model model(BackboneSpec::small(8, 16, 2), 3, 555);
    RngStream rng(3);
    // move the model away from init so the payload is non-trivial
    Tensor x = random_tensor({16, 8}, rng);
    model.embed(x);  // updates BN buffers
    model.set_stats_mode_all(StatsMode::FrozenStats);

    Checkpoint ckpt = checkpoint_from_model(model);
    const fs::path path = fs::temp_directory_path() / "bnfair_ckpt_test.bin";
    save_checkpoint(ckpt, path.string());
    Checkpoint loaded = load_checkpoint(path.string());
    CHECK(checkpoint_equal(ckpt, loaded));

    save_checkpoint(loaded, path.string());
    Checkpoint loaded2 = load_checkpoint(path.string());
    CHECK(checkpoint_equal(loaded, loaded2));

    Model restored = model_from_checkpoint(loaded);
    std::vector<double> features(4 * 8);
    for (double& v : features) v = rng.gaussian();
    CHECK(model.scores(features, 4) == restored.scores(features, 4));
    fs::remove(path);
}
