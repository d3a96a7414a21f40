#include <catch2/catch_amalgamated.hpp>

#include "ounet/nn/ops.hpp"
#include "support/gradcheck.hpp"

using namespace ounet;
using namespace ounet::nn;
using testsupport::check_op_grads;
using testsupport::random_tensor;

namespace {
RngStream seeded(std::uint64_t s = 99) { return RngStream(s); }
}  // namespace

TEST_CASE("conv3d known value, kernel 1") {
    // 1x1x1 conv acts as a per-voxel channel mix.
    auto x = make_var(Tensor<double>::from_values({1, 2, 1, 1, 2}, {1, 2, 3, 4}));
    auto w = make_var(Tensor<double>::from_values({1, 2, 1, 1, 1}, {10, 100}));
    auto b = make_var(Tensor<double>::from_values({1}, {0.5}));
    auto y = conv3d(x, w, b, 1, 0);
    REQUIRE(y->value.shape() == Shape{1, 1, 1, 1, 2});
    REQUIRE(y->value[0] == Catch::Approx(10 * 1 + 100 * 3 + 0.5));
    REQUIRE(y->value[1] == Catch::Approx(10 * 2 + 100 * 4 + 0.5));
}

TEST_CASE("conv3d matches direct stencil, kernel 3 stride 1") {
    auto rng = seeded();
    auto x = make_var(random_tensor({1, 1, 3, 3, 3}, rng));
    auto w = make_var(random_tensor({1, 1, 3, 3, 3}, rng));
    auto y = conv3d<double>(x, w, nullptr, 1, 1);
    REQUIRE(y->value.shape() == x->value.shape());
    // Center voxel sees the full kernel: plain dot product.
    double expect = 0.0;
    for (std::int64_t i = 0; i < 27; ++i) expect += x->value[i] * w->value[i];
    REQUIRE(y->value.at(0, 0, 1, 1, 1) == Catch::Approx(expect));
    // A corner voxel only sees the in-bounds taps.
    double corner = 0.0;
    for (int kz = 1; kz < 3; ++kz)
        for (int ky = 1; ky < 3; ++ky)
            for (int kx = 1; kx < 3; ++kx)
                corner += w->value.at(0, 0, kz, ky, kx) * x->value.at(0, 0, kz - 1, ky - 1, kx - 1);
    REQUIRE(y->value.at(0, 0, 0, 0, 0) == Catch::Approx(corner));
}

TEST_CASE("conv3d output dims") {
    auto rng = seeded();
    auto x = make_var(random_tensor({2, 3, 8, 6, 4}, rng));
    auto w = make_var(random_tensor({5, 3, 3, 3, 3}, rng));
    REQUIRE(conv3d<double>(x, w, nullptr, 1, 1)->value.shape() == Shape{2, 5, 8, 6, 4});
    REQUIRE(conv3d<double>(x, w, nullptr, 2, 1)->value.shape() == Shape{2, 5, 4, 3, 2});
}

TEST_CASE("conv3d gradcheck") {
    auto rng = seeded(7);
    SECTION("kernel 3, stride 1, with bias") {
        auto x = make_var(random_tensor({2, 2, 3, 3, 3}, rng), true);
        auto w = make_var(random_tensor({3, 2, 3, 3, 3}, rng), true);
        auto b = make_var(random_tensor({3}, rng), true);
        check_op_grads({x, w, b}, [&] { return conv3d(x, w, b, 1, 1); });
    }
    SECTION("kernel 3, stride 2") {
        auto x = make_var(random_tensor({1, 2, 4, 4, 4}, rng), true);
        auto w = make_var(random_tensor({2, 2, 3, 3, 3}, rng), true);
        auto b = make_var(random_tensor({2}, rng), true);
        check_op_grads({x, w, b}, [&] { return conv3d(x, w, b, 2, 1); });
    }
    SECTION("kernel 1, stride 2") {
        auto x = make_var(random_tensor({1, 3, 4, 4, 4}, rng), true);
        auto w = make_var(random_tensor({2, 3, 1, 1, 1}, rng), true);
        auto b = make_var(random_tensor({2}, rng), true);
        check_op_grads({x, w, b}, [&] { return conv3d(x, w, b, 2, 0); });
    }
    SECTION("odd spatial dims, stride 2") {
        auto x = make_var(random_tensor({1, 1, 5, 5, 5}, rng), true);
        auto w = make_var(random_tensor({1, 1, 3, 3, 3}, rng), true);
        check_op_grads({x, w}, [&] { return conv3d<double>(x, w, nullptr, 2, 1); });
    }
}

TEST_CASE("conv_transpose3d_2x doubles dims and backprops") {
    auto rng = seeded(11);
    auto x = make_var(random_tensor({1, 2, 2, 3, 2}, rng), true);
    auto w = make_var(random_tensor({2, 3, 2, 2, 2}, rng), true);
    auto b = make_var(random_tensor({3}, rng), true);
    auto y = conv_transpose3d_2x(x, w, b);
    REQUIRE(y->value.shape() == Shape{1, 3, 4, 6, 4});
    // Each output voxel is a single-tap combination over input channels.
    double expect = b->value[0];
    for (int ic = 0; ic < 2; ++ic)
        expect += w->value.at(ic, 0, 1, 0, 1) * x->value.at(0, ic, 1, 2, 0);
    REQUIRE(y->value.at(0, 0, 3, 4, 1) == Catch::Approx(expect));

    check_op_grads({x, w, b}, [&] { return conv_transpose3d_2x(x, w, b); });
}

TEST_CASE("instance_norm normalizes per sample and channel") {
    auto rng = seeded(13);
    auto x = make_var(random_tensor({2, 3, 4, 4, 4}, rng, -3.0, 5.0));
    auto gamma = make_var(Tensor<double>({3}, 1.0));
    auto beta = make_var(Tensor<double>::zeros({3}));
    auto y = instance_norm(x, gamma, beta);
    const std::int64_t S = 64;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            double mean = 0.0, var = 0.0;
            const double* slab = y->value.data() + (n * 3 + c) * S;
            for (int i = 0; i < S; ++i) mean += slab[i];
            mean /= S;
            for (int i = 0; i < S; ++i) var += (slab[i] - mean) * (slab[i] - mean);
            var /= S;
            REQUIRE(mean == Catch::Approx(0.0).margin(1e-10));
            REQUIRE(var == Catch::Approx(1.0).margin(1e-4));
        }
}

TEST_CASE("instance_norm single-voxel slab is finite") {
    auto x = make_var(Tensor<double>::from_values({1, 2, 1, 1, 1}, {3.0, -1.0}), true);
    auto gamma = make_var(Tensor<double>({2}, 2.0), true);
    auto beta = make_var(Tensor<double>::from_values({2}, {0.25, -0.5}), true);
    auto y = instance_norm(x, gamma, beta);
    REQUIRE(y->value[0] == Catch::Approx(0.25));
    REQUIRE(y->value[1] == Catch::Approx(-0.5));
    backward(y, Tensor<double>({1, 2, 1, 1, 1}, 1.0));
    REQUIRE(std::isfinite(x->grad[0]));
}

TEST_CASE("instance_norm gradcheck") {
    auto rng = seeded(17);
    auto x = make_var(random_tensor({2, 2, 2, 3, 2}, rng), true);
    auto gamma = make_var(random_tensor({2}, rng, 0.5, 1.5), true);
    auto beta = make_var(random_tensor({2}, rng), true);
    check_op_grads({x, gamma, beta}, [&] { return instance_norm(x, gamma, beta); }, 5e-6);
}

TEST_CASE("activations and elementwise gradchecks") {
    auto rng = seeded(19);
    SECTION("leaky_relu") {
        auto x = make_var(random_tensor({1, 2, 2, 2, 2}, rng, -2.0, 2.0), true);
        check_op_grads({x}, [&] { return leaky_relu(x, 0.01); });
        auto y = leaky_relu(x, 0.01);
        for (std::int64_t i = 0; i < x->value.numel(); ++i)
            REQUIRE(y->value[i] == (x->value[i] > 0 ? x->value[i] : 0.01 * x->value[i]));
    }
    SECTION("sigmoid") {
        auto x = make_var(random_tensor({1, 1, 2, 2, 3}, rng, -4.0, 4.0), true);
        check_op_grads({x}, [&] { return sigmoid(x); });
    }
    SECTION("add") {
        auto a = make_var(random_tensor({1, 2, 2, 2, 2}, rng), true);
        auto b = make_var(random_tensor({1, 2, 2, 2, 2}, rng), true);
        check_op_grads({a, b}, [&] { return add(a, b); });
    }
    SECTION("mul_gate") {
        auto x = make_var(random_tensor({2, 3, 2, 2, 2}, rng), true);
        auto alpha = make_var(random_tensor({2, 1, 2, 2, 2}, rng, 0.1, 0.9), true);
        check_op_grads({x, alpha}, [&] { return mul_gate(x, alpha); });
    }
    SECTION("concat_channels") {
        auto a = make_var(random_tensor({1, 2, 2, 2, 2}, rng), true);
        auto b = make_var(random_tensor({1, 3, 2, 2, 2}, rng), true);
        auto y = concat_channels(a, b);
        REQUIRE(y->value.shape() == Shape{1, 5, 2, 2, 2});
        check_op_grads({a, b}, [&] { return concat_channels(a, b); });
    }
}

TEST_CASE("upsample_trilinear2x") {
    SECTION("constant input stays constant") {
        auto x = make_var(Tensor<double>({1, 1, 2, 2, 2}, 3.5));
        auto y = upsample_trilinear2x(x);
        REQUIRE(y->value.shape() == Shape{1, 1, 4, 4, 4});
        for (std::int64_t i = 0; i < y->value.numel(); ++i)
            REQUIRE(y->value[i] == Catch::Approx(3.5));
    }
    SECTION("linear ramp interpolates midpoints") {
        auto x = make_var(Tensor<double>::from_values({1, 1, 1, 1, 4}, {0, 1, 2, 3}));
        auto y = upsample_trilinear2x(x);
        // Interior out voxels sit at src = -0.25, 0.25, 0.75, ... clamped ends.
        REQUIRE(y->value[0] == Catch::Approx(0.0));
        REQUIRE(y->value[1] == Catch::Approx(0.25));
        REQUIRE(y->value[2] == Catch::Approx(0.75));
        REQUIRE(y->value[6] == Catch::Approx(2.75));
        REQUIRE(y->value[7] == Catch::Approx(3.0));
    }
    SECTION("gradcheck") {
        auto rng = seeded(23);
        auto x = make_var(random_tensor({1, 2, 2, 3, 2}, rng), true);
        check_op_grads({x}, [&] { return upsample_trilinear2x(x); });
    }
}

TEST_CASE("backward accumulates through shared nodes") {
    auto x = make_var(Tensor<double>::from_values({1, 1, 1, 1, 2}, {1.0, 2.0}), true);
    auto y = add(x, x);  // dy/dx = 2
    backward(y, Tensor<double>({1, 1, 1, 1, 2}, 1.0));
    REQUIRE(x->grad[0] == Catch::Approx(2.0));
    REQUIRE(x->grad[1] == Catch::Approx(2.0));
}

TEST_CASE("no-grad mode records no graph") {
    auto x = make_var(Tensor<double>({1, 1, 2, 2, 2}, 1.0), true);
    NoGradGuard ng;
    auto y = add(x, x);
    REQUIRE_FALSE(y->requires_grad);
    REQUIRE(y->parents.empty());
}

TEST_CASE("dropblock-style mask multiply") {
    auto rng = seeded(29);
    auto x = make_var(random_tensor({1, 2, 3, 3, 3}, rng), true);
    Tensor<double> mask({1, 1, 3, 3, 3}, 1.25);
    mask.at(0, 0, 1, 1, 1) = 0.0;
    auto y = mul_mask(x, mask);
    REQUIRE(y->value.at(0, 0, 1, 1, 1) == 0.0);
    REQUIRE(y->value.at(0, 1, 1, 1, 1) == 0.0);
    REQUIRE(y->value.at(0, 0, 0, 0, 0) == Catch::Approx(1.25 * x->value.at(0, 0, 0, 0, 0)));
    backward(y, Tensor<double>({1, 2, 3, 3, 3}, 1.0));
    REQUIRE(x->grad.at(0, 0, 1, 1, 1) == 0.0);
    REQUIRE(x->grad.at(0, 0, 0, 0, 0) == Catch::Approx(1.25));
}
