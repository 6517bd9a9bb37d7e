#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dayolo/grl.hpp"

using namespace dayolo;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = float(rng.normal());
    return t;
}

// smooth downstream head used by the reversal checks
Var test_head(const Var& x) { return sum_all(sigmoid(scale(x, 0.7f))); }

}  // namespace

TEST_CASE("grl forward is bitwise identity") {
    Rng rng(101);
    Tensor x0 = random_tensor({4, 5}, rng);
    Var y = grl_apply(make_leaf(x0, true), 0.37f);
    REQUIRE(y->value.shape == x0.shape);
    CHECK(std::memcmp(y->value.data.data(), x0.data.data(), x0.data.size() * 4) == 0);
}

TEST_CASE("grl backward flips and scales the gradient") {
    SUBCASE("hand case: upstream 2, lambda 1 -> -2") {
        Var x = make_leaf(Tensor::scalar(1.5f), true);
        Var y = scale(grl_apply(x, 1.0f), 2.0f);  // dy/d(grl out) = 2
        backward(y);
        CHECK(x->grad.data[0] == doctest::Approx(-2.0f));
    }
    SUBCASE("lambda 0 kills the gradient") {
        Rng rng(5);
        Tensor x0 = random_tensor({7}, rng);
        Var x = make_leaf(x0, true);
        backward(test_head(grl_apply(x, 0.0f)));
        for (float g : x->grad.data) CHECK(g == 0.0f);
    }
    SUBCASE("negative lambda rejected") {
        Var x = make_leaf(Tensor::scalar(1.0f), true);
        CHECK_THROWS_AS(grl_apply(x, -0.1f), ValidationError);
    }
}

TEST_CASE("analytic gradient equals -lambda times the no-grl gradient") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        float lambda = float(rng.uniform(0.0, 2.0));
        Tensor x0 = random_tensor({int(1 + rng.next_u64() % 4), int(1 + rng.next_u64() % 4)}, rng);

        Var with = make_leaf(x0, true);
        backward(test_head(grl_apply(with, lambda)));

        Var without = make_leaf(x0, true);
        backward(test_head(without));

        for (int64_t i = 0; i < x0.numel(); ++i) {
            float got = with->grad.data[size_t(i)];
            float want = -lambda * without->grad.data[size_t(i)];
            CHECK(std::fabs(got - want) <= 1e-6f * std::max(1.0f, std::fabs(want)));
        }
    }
}

TEST_CASE("finite differences on the forward pass see the identity Jacobian") {
    // the reversal is a training-time gradient rule, not a forward property
    Rng rng(8);
    Tensor x0 = random_tensor({5}, rng);
    auto fd = finite_difference(
        [](const Tensor& probe) {
            NoGradGuard value_only;
            return grl_apply(make_leaf(probe, false), 1.0f)->value.data[2];
        },
        x0, 1e-3f);
    for (int64_t i = 0; i < x0.numel(); ++i)
        CHECK(fd[size_t(i)] == doctest::Approx(i == 2 ? 1.0 : 0.0).epsilon(1e-3));
}

TEST_CASE("grl schedule") {
    SUBCASE("constant") {
        GrlConfig cfg;
        cfg.lambda_grl = 0.8f;
        CHECK(cfg.lambda_at(0) == 0.8f);
        CHECK(cfg.lambda_at(100000) == 0.8f);
    }
    SUBCASE("ramp is in [0, lambda] and nondecreasing") {
        GrlConfig cfg;
        cfg.lambda_grl = 1.5f;
        cfg.schedule = GrlConfig::Schedule::kRamp;
        cfg.ramp_gamma = 10.0f;
        cfg.ramp_total_steps = 1000;
        float prev = -1.0f;
        for (int s = 0; s <= 1200; s += 50) {
            float l = cfg.lambda_at(s);
            CHECK(l >= 0.0f);
            CHECK(l <= cfg.lambda_grl);
            CHECK(l >= prev);
            prev = l;
        }
        CHECK(cfg.lambda_at(0) == doctest::Approx(0.0f));
    }
    SUBCASE("validation") {
        GrlConfig bad;
        bad.lambda_grl = -1.0f;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
}
