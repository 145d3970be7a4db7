#include <doctest.h>

#include <cmath>
#include <functional>

#include "organseg/ops.hpp"
#include "organseg/rng.hpp"

using namespace organseg;

namespace {

Tensor randn_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    Tensor t = Tensor::zeros(shape, requires_grad);
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

// Central finite differences against the analytic gradient.
void gradcheck(const std::function<Tensor(const Tensor&)>& fn, Tensor x, double h = 1e-6,
               double tol = 1e-6) {
    x.zero_grad();
    Tensor loss = fn(x);
    REQUIRE(loss.numel() == 1);
    backward(loss);
    const std::vector<double> analytic = x.grad_values();
    REQUIRE(analytic.size() == x.values().size());

    double max_err = 0.0;
    for (std::size_t i = 0; i < x.values().size(); ++i) {
        const double orig = x.values()[i];
        x.values()[i] = orig + h;
        const double lp = fn(x).item();
        x.values()[i] = orig - h;
        const double lm = fn(x).item();
        x.values()[i] = orig;
        const double num = (lp - lm) / (2.0 * h);
        const double scale = std::max({1.0, std::abs(num), std::abs(analytic[i])});
        max_err = std::max(max_err, std::abs(num - analytic[i]) / scale);
    }
    CHECK(max_err < tol);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("backward accumulates through shared nodes") {
    Tensor x = Tensor::from_values({2}, {3.0, -1.0}, true);
    const Tensor y = add(x, x);  // dy/dx = 2
    backward(sum_all(y));
    CHECK(x.grad_values()[0] == doctest::Approx(2.0));
    CHECK(x.grad_values()[1] == doctest::Approx(2.0));
}

TEST_CASE("detach blocks gradients") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    const Tensor y = mul(detach(x), x);
    backward(sum_all(y));
    CHECK(x.grad_values()[0] == doctest::Approx(1.0));  // only the non-detached factor
    CHECK(x.grad_values()[1] == doctest::Approx(2.0));
}

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    gradcheck([](const Tensor& x) { return sum_all(mul(x, x)); }, randn_tensor({3, 2, 2, 2}, rng));
    gradcheck([](const Tensor& x) { return mean_all(exp_of(x)); }, randn_tensor({2, 2, 2, 2}, rng));
    gradcheck([](const Tensor& x) { return sum_all(sigmoid(x)); }, randn_tensor({10}, rng));
    gradcheck([](const Tensor& x) { return sum_all(relu(x)); }, randn_tensor({10}, rng), 1e-6,
              1e-5);
    {
        Rng r2(2);
        Tensor pos = randn_tensor({8}, r2);
        for (auto& v : pos.values()) v = std::abs(v) + 0.5;
        gradcheck([](const Tensor& x) { return sum_all(log_of(x)); }, pos);
        gradcheck([](const Tensor& x) { return sum_all(pow_scalar(x, 2.5)); }, pos);
    }
    {
        Rng r3(3);
        Tensor a = randn_tensor({6}, r3);
        Tensor b = randn_tensor({6}, r3);
        for (auto& v : b.values()) v = std::abs(v) + 1.0;
        gradcheck([&](const Tensor& x) { return sum_all(divide(x, b)); }, a);
        gradcheck([&](const Tensor& x) { return sum_all(divide(a, x)); }, b);
    }
}

TEST_CASE("reduction and channel op gradients") {
    Rng rng(4);
    gradcheck([](const Tensor& x) { return sum_all(sum_spatial(x)); },
              randn_tensor({3, 2, 2, 2}, rng));
    Tensor gates = randn_tensor({3}, rng);
    gradcheck([&](const Tensor& x) { return sum_all(scale_channels(x, gates)); },
              randn_tensor({3, 2, 2, 2}, rng));
    Tensor feat = randn_tensor({3, 2, 2, 2}, rng);
    gradcheck([&](const Tensor& g) { return sum_all(scale_channels(feat, g)); },
              randn_tensor({3}, rng));
}

TEST_CASE("softmax channels sums to one and passes gradcheck") {
    Rng rng(5);
    Tensor x = randn_tensor({4, 2, 2, 2}, rng);
    const Tensor p = softmax_channels(x);
    const std::int64_t S = 8;
    for (std::int64_t i = 0; i < S; ++i) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < 4; ++c) sum += p.values()[static_cast<std::size_t>(c * S + i)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    Tensor w = randn_tensor({4, 2, 2, 2}, rng, false);
    gradcheck([&](const Tensor& t) { return sum_all(mul(softmax_channels(t), w)); }, x);
}

TEST_CASE("concat and crop gradients") {
    Rng rng(6);
    Tensor a = randn_tensor({2, 2, 3, 3}, rng);
    Tensor b = randn_tensor({1, 2, 3, 3}, rng);
    gradcheck([&](const Tensor& x) { return sum_all(concat_channels({x, b})); }, a);
    gradcheck([&](const Tensor& x) { return sum_all(concat_channels({a, x})); }, b);
    gradcheck([](const Tensor& x) { return sum_all(crop3d(x, {0, 1, 1}, {2, 2, 2})); },
              randn_tensor({2, 2, 3, 3}, rng));
}

TEST_CASE("linear gradcheck") {
    Rng rng(7);
    Tensor x = randn_tensor({5}, rng);
    Tensor w = randn_tensor({3, 5}, rng);
    Tensor b = randn_tensor({3}, rng);
    gradcheck([&](const Tensor& t) { return sum_all(sigmoid(linear(t, w, b))); }, x);
    gradcheck([&](const Tensor& t) { return sum_all(sigmoid(linear(x, t, b))); }, w);
    gradcheck([&](const Tensor& t) { return sum_all(sigmoid(linear(x, w, t))); }, b);
}

TEST_CASE("conv3d gradcheck against finite differences") {
    Rng rng(8);
    kernels::ConvSpec spec;
    spec.kernel = {3, 3, 3};
    spec.dilation = {1, 2, 2};
    spec.pad = {1, 2, 2};
    Tensor x = randn_tensor({2, 3, 4, 4}, rng);
    Tensor w = randn_tensor({2, 2, 3, 3, 3}, rng, true, 0.5);
    Tensor b = randn_tensor({2}, rng);
    gradcheck([&](const Tensor& t) { return sum_all(mul(conv3d(t, w, b, spec),
                                                        conv3d(t, w, b, spec))); },
              x, 1e-6, 1e-5);
    gradcheck([&](const Tensor& t) { return sum_all(mul(conv3d(x, t, b, spec),
                                                        conv3d(x, t, b, spec))); },
              w, 1e-6, 1e-5);
    gradcheck([&](const Tensor& t) { return sum_all(conv3d(x, w, t, spec)); }, b);

    kernels::ConvSpec strided;
    strided.kernel = {5, 5, 5};
    strided.stride = {2, 2, 2};
    strided.pad = {2, 2, 2};
    Tensor xs = randn_tensor({1, 4, 4, 4}, rng);
    Tensor ws = randn_tensor({2, 1, 5, 5, 5}, rng, true, 0.3);
    gradcheck([&](const Tensor& t) { return sum_all(mul(conv3d(t, ws, {}, strided),
                                                        conv3d(t, ws, {}, strided))); },
              xs, 1e-6, 1e-5);
    gradcheck([&](const Tensor& t) { return sum_all(mul(conv3d(xs, t, {}, strided),
                                                        conv3d(xs, t, {}, strided))); },
              ws, 1e-6, 1e-5);
}

TEST_CASE("pool and upsample gradcheck") {
    Rng rng(9);
    gradcheck([](const Tensor& x) { return sum_all(mul(maxpool3d(x, {1, 2, 2}),
                                                       maxpool3d(x, {1, 2, 2}))); },
              randn_tensor({2, 2, 4, 4}, rng), 1e-6, 1e-5);
    gradcheck([](const Tensor& x) { return sum_all(mul(upsample3d(x, {2, 2, 2}),
                                                       upsample3d(x, {2, 2, 2}))); },
              randn_tensor({2, 2, 2, 2}, rng));
}

TEST_CASE("instance norm gradcheck") {
    Rng rng(10);
    Tensor x = randn_tensor({3, 2, 2, 2}, rng);
    Tensor gamma = randn_tensor({3}, rng);
    Tensor beta = randn_tensor({3}, rng);
    Tensor w = randn_tensor({3, 2, 2, 2}, rng, false);
    gradcheck([&](const Tensor& t) { return sum_all(mul(instance_norm(t, gamma, beta), w)); }, x,
              1e-6, 1e-5);
    gradcheck([&](const Tensor& t) { return sum_all(mul(instance_norm(x, t, beta), w)); }, gamma);
    gradcheck([&](const Tensor& t) { return sum_all(mul(instance_norm(x, gamma, t), w)); }, beta);
}

TEST_CASE("ops reject shape mismatches") {
    Tensor a = Tensor::zeros({2, 2, 2, 2});
    Tensor b = Tensor::zeros({2, 2, 2, 3});
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(crop3d(a, {0, 0, 1}, {2, 2, 2}), std::invalid_argument);
    CHECK_THROWS_AS(scale_channels(a, Tensor::zeros({3})), std::invalid_argument);
}

}  // TEST_SUITE
