#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "ounet/nn/losses.hpp"
#include "support/gradcheck.hpp"

using namespace ounet;
using namespace ounet::nn;

namespace {

Tensor<std::uint8_t> labels_from(std::initializer_list<int> vals, Shape shape) {
    Tensor<std::uint8_t> t(shape);
    std::int64_t i = 0;
    for (int v : vals) t[i++] = static_cast<std::uint8_t>(v);
    REQUIRE(i == t.numel());
    return t;
}

Tensor<double> random_logits(Shape s, std::uint64_t seed, double lo = -2, double hi = 2) {
    RngStream rng(seed);
    Tensor<double> t(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor<double> random_binary(Shape s, std::uint64_t seed, double p = 0.4) {
    RngStream rng(seed);
    Tensor<double> t(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(p) ? 1.0 : 0.0;
    return t;
}

}  // namespace

TEST_CASE("labels_to_regions channel mapping") {
    auto y = labels_from({0, 1, 2, 4}, {1, 1, 2, 2});
    auto r = labels_to_regions<double>(y);
    REQUIRE(r.shape() == Shape{1, 3, 1, 2, 2});
    // class 0 -> (0,0,0)
    REQUIRE(r.at(0, kET, 0, 0, 0) == 0.0);
    REQUIRE(r.at(0, kTC, 0, 0, 0) == 0.0);
    REQUIRE(r.at(0, kWT, 0, 0, 0) == 0.0);
    // class 1 (NCR) -> (0,1,1)
    REQUIRE(r.at(0, kET, 0, 0, 1) == 0.0);
    REQUIRE(r.at(0, kTC, 0, 0, 1) == 1.0);
    REQUIRE(r.at(0, kWT, 0, 0, 1) == 1.0);
    // class 2 (ED) -> (0,0,1)
    REQUIRE(r.at(0, kET, 0, 1, 0) == 0.0);
    REQUIRE(r.at(0, kTC, 0, 1, 0) == 0.0);
    REQUIRE(r.at(0, kWT, 0, 1, 0) == 1.0);
    // class 4 (ET) -> (1,1,1)
    REQUIRE(r.at(0, kET, 0, 1, 1) == 1.0);
    REQUIRE(r.at(0, kTC, 0, 1, 1) == 1.0);
    REQUIRE(r.at(0, kWT, 0, 1, 1) == 1.0);
}

TEST_CASE("labels_to_regions rejects invalid classes and preserves nesting") {
    auto bad = labels_from({0, 3}, {1, 1, 1, 2});
    CHECK_THROWS_AS(labels_to_regions<double>(bad), Error);

    RngStream rng(5);
    Tensor<std::uint8_t> y({2, 3, 3, 3});
    const std::uint8_t classes[4] = {0, 1, 2, 4};
    for (std::int64_t i = 0; i < y.numel(); ++i)
        y[i] = classes[rng.uniform_int(4)];
    auto r = labels_to_regions<float>(y);
    const std::int64_t S = 27;
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t i = 0; i < S; ++i) {
            float et = r.data()[(b * 3 + kET) * S + i];
            float tc = r.data()[(b * 3 + kTC) * S + i];
            float wt = r.data()[(b * 3 + kWT) * S + i];
            REQUIRE(et <= tc);
            REQUIRE(tc <= wt);
        }
}

TEST_CASE("dice loss basics") {
    SECTION("perfect binary prediction is ~0") {
        auto t = random_binary({1, 3, 2, 2, 2}, 7);
        double v = dice_loss_batched(t, t, 1e-5);
        REQUIRE(v >= 0.0);
        REQUIRE(v < 1e-5);
    }
    SECTION("complement prediction on a half-filled mask is ~1") {
        Tensor<double> t({1, 3, 2, 2, 2});
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = (i % 2 == 0) ? 1.0 : 0.0;
        Tensor<double> p(t.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = 1.0 - t[i];
        REQUIRE(dice_loss_batched(p, t, 1e-5) == Catch::Approx(1.0).margin(1e-4));
    }
    SECTION("range stays within [0, 1+eps]") {
        for (std::uint64_t s = 0; s < 20; ++s) {
            auto p = random_logits({2, 3, 2, 2, 2}, 100 + s, 0.0, 1.0);
            auto t = random_binary({2, 3, 2, 2, 2}, 200 + s);
            double v = dice_loss_batched(p, t, 1e-5);
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("batched dice differs from per-sample mean (hand arithmetic)") {
    const double s = 1e-5;
    // Sample A: empty target, p = 0.5 on all 8 voxels.
    // Sample B: 4 target voxels predicted perfectly.
    Tensor<double> p({2, 3, 2, 2, 2}), t({2, 3, 2, 2, 2});
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < 8; ++i) {
            p.data()[(0 * 3 + c) * 8 + i] = 0.5;
            t.data()[(0 * 3 + c) * 8 + i] = 0.0;
            p.data()[(1 * 3 + c) * 8 + i] = i < 4 ? 1.0 : 0.0;
            t.data()[(1 * 3 + c) * 8 + i] = i < 4 ? 1.0 : 0.0;
        }
    // Batched pooling: I = 4, sum p = 8, sum t = 4 (per channel).
    const double batched = 1.0 - (2.0 * 4 + s) / (8.0 + 4 + s);
    REQUIRE(dice_loss_batched(p, t, s) == Catch::Approx(batched).epsilon(1e-12));

    // Per-sample: A -> 1 - s/(4+s), B -> 0; mean differs from batched.
    const double per_sample_mean =
        0.5 * ((1.0 - s / (4.0 + s)) + (1.0 - (2.0 * 4 + s) / (8.0 + s)));
    REQUIRE(std::abs(batched - per_sample_mean) > 0.1);
}

TEST_CASE("bce and focal scalar values") {
    SECTION("focal with gamma=0 equals bce") {
        auto z = random_logits({1, 3, 2, 2, 2}, 11);
        auto t = random_binary({1, 3, 2, 2, 2}, 13);
        REQUIRE(focal_loss(z, t, 0.0) == Catch::Approx(bce_loss(z, t)).margin(1e-6));
    }
    SECTION("focal term at p_t=0.9, y=1, gamma=2") {
        Tensor<double> z({1, 3, 1, 1, 1}, std::log(9.0));  // sigmoid = 0.9
        Tensor<double> t({1, 3, 1, 1, 1}, 1.0);
        const double expect = 0.01 * (-std::log(0.9));
        REQUIRE(focal_loss(z, t, 2.0) == Catch::Approx(expect).margin(1e-9));
        REQUIRE(expect == Catch::Approx(0.001054).margin(2e-6));
    }
    SECTION("losses decrease monotonically to 0 with confidence") {
        Tensor<double> t({1, 3, 1, 1, 1}, 1.0);
        double prev_b = 1e9, prev_f = 1e9;
        for (double z = 0.0; z <= 30.0; z += 3.0) {
            Tensor<double> logits({1, 3, 1, 1, 1}, z);
            double b = bce_loss(logits, t), f = focal_loss(logits, t, 2.0);
            REQUIRE(b >= 0.0);
            REQUIRE(f >= 0.0);
            REQUIRE(b < prev_b);
            REQUIRE(f <= prev_f);
            prev_b = b;
            prev_f = f;
        }
        REQUIRE(prev_b < 1e-10);
        REQUIRE(prev_f < 1e-10);
    }
}

TEST_CASE("region_loss composition and channel asymmetry") {
    LossConfig cfg;
    auto z = random_logits({2, 3, 2, 2, 2}, 17);
    auto y = labels_from({0, 1, 2, 4, 4, 2, 1, 0, 0, 0, 1, 1, 2, 2, 4, 4}, {2, 2, 2, 2});
    auto t = labels_to_regions<double>(y);

    auto result = region_loss(z, t, cfg);

    SECTION("perfect prediction is ~0") {
        Tensor<double> sharp(z.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) sharp[i] = t[i] > 0.5 ? 40.0 : -40.0;
        auto r = region_loss(sharp, t, cfg);
        REQUIRE(r.value < 1e-5);
    }

    SECTION("recomposition: dice mean plus per-channel bce sums") {
        Tensor<double> p = sigmoid_tensor(z);
        double expect = dice_loss_batched(p, t, cfg.dice_smooth);
        const std::int64_t S = 8;
        for (int c = 0; c < 3; ++c) {
            double sum = 0.0;
            for (std::int64_t b = 0; b < 2; ++b)
                for (std::int64_t i = 0; i < S; ++i) {
                    const double zz = z.data()[(b * 3 + c) * S + i];
                    const double yy = t.data()[(b * 3 + c) * S + i];
                    sum += std::max(zz, 0.0) + std::log1p(std::exp(-std::abs(zz))) - zz * yy;
                }
            expect += sum / double(2 * S);
        }
        REQUIRE(result.value == Catch::Approx(expect).epsilon(1e-12));
    }

    SECTION("swapping ET and WT channels changes the value") {
        Tensor<double> swapped = t;
        const std::int64_t S = 8;
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t i = 0; i < S; ++i)
                std::swap(swapped.data()[(b * 3 + kET) * S + i],
                          swapped.data()[(b * 3 + kWT) * S + i]);
        auto r2 = region_loss(z, swapped, cfg);
        REQUIRE(std::abs(r2.value - result.value) > 1e-6);
    }
}

TEST_CASE("deep supervision weighting and shapes") {
    LossConfig cfg;
    RngStream rng(23);
    Tensor<std::uint8_t> y({1, 8, 8, 8});
    const std::uint8_t classes[4] = {0, 1, 2, 4};
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = classes[rng.uniform_int(4)];

    std::vector<Tensor<double>> heads;
    heads.push_back(random_logits({1, 3, 8, 8, 8}, 31));
    heads.push_back(random_logits({1, 3, 4, 4, 4}, 37));
    heads.push_back(random_logits({1, 3, 2, 2, 2}, 41));

    auto total = deep_supervision_loss(heads, y, cfg);
    REQUIRE(total.grads.size() == 3);
    REQUIRE(total.grads[1].shape() == Shape{1, 3, 4, 4, 4});

    // Eq-style weighted sum of independently computed parts.
    double expect = region_loss(heads[0], labels_to_regions<double>(y), cfg).value;
    expect += 0.5 * region_loss(heads[1], labels_to_regions<double>(downsample_labels_nn(y, 2)), cfg)
                        .value;
    expect += 0.25 *
              region_loss(heads[2], labels_to_regions<double>(downsample_labels_nn(y, 4)), cfg).value;
    REQUIRE(total.value == Catch::Approx(expect).epsilon(1e-12));

    SECTION("single head reduces to region_loss") {
        std::vector<Tensor<double>> one = {heads[0]};
        auto single = deep_supervision_loss(one, y, cfg);
        REQUIRE(single.value ==
                Catch::Approx(region_loss(heads[0], labels_to_regions<double>(y), cfg).value));
    }
    SECTION("equal component losses sum to 1.75x") {
        // all zero labels, strongly negative logits: every head's loss ~ L0
        Tensor<std::uint8_t> zeros({1, 8, 8, 8});
        std::vector<Tensor<double>> h2 = {Tensor<double>({1, 3, 8, 8, 8}, -3.0),
                                          Tensor<double>({1, 3, 4, 4, 4}, -3.0),
                                          Tensor<double>({1, 3, 2, 2, 2}, -3.0)};
        const double l0 =
            region_loss(h2[0], labels_to_regions<double>(zeros), cfg).value;
        auto r = deep_supervision_loss(h2, zeros, cfg);
        // The smooth term makes the empty-target dice depend weakly on
        // voxel count, so the components agree to ~1e-5, not exactly.
        REQUIRE(r.value == Catch::Approx(1.75 * l0).epsilon(1e-4));
    }
    SECTION("mismatched head shape throws") {
        std::vector<Tensor<double>> bad = {heads[0], random_logits({1, 3, 3, 3, 3}, 43)};
        CHECK_THROWS_AS(deep_supervision_loss(bad, y, cfg), Error);
    }
}

TEST_CASE("nearest-neighbour label downsampling") {
    auto y = labels_from({0, 1, 2, 4, 4, 0, 1, 2, 2, 4, 0, 1, 1, 2, 4, 0}, {1, 4, 2, 2});
    auto d = downsample_labels_nn(y, 2);
    REQUIRE(d.shape() == Shape{1, 2, 1, 1});
    REQUIRE(d.at(0, 0, 0, 0) == y.at(0, 0, 0, 0));
    REQUIRE(d.at(0, 1, 0, 0) == y.at(0, 2, 0, 0));

    RngStream rng(47);
    Tensor<std::uint8_t> big({1, 8, 8, 8});
    const std::uint8_t classes[4] = {0, 1, 2, 4};
    for (std::int64_t i = 0; i < big.numel(); ++i) big[i] = classes[rng.uniform_int(4)];
    for (int f : {2, 4}) {
        auto small = downsample_labels_nn(big, f);
        for (std::int64_t i = 0; i < small.numel(); ++i) {
            const int v = small[i];
            REQUIRE((v == 0 || v == 1 || v == 2 || v == 4));
        }
    }
}

TEST_CASE("loss gradients match finite differences on 4^3 toys") {
    RngStream rng(51);
    Tensor<std::uint8_t> y({1, 4, 4, 4});
    const std::uint8_t classes[4] = {0, 1, 2, 4};
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = classes[rng.uniform_int(4)];
    auto t = labels_to_regions<double>(y);

    auto check = [&](const LossConfig& cfg) {
        auto z = random_logits({1, 3, 4, 4, 4}, 61);
        auto res = region_loss(z, t, cfg);
        const double h = 1e-6;
        for (std::int64_t i = 0; i < z.numel(); i += 7) {
            const double orig = z[i];
            z[i] = orig + h;
            const double lp = region_loss(z, t, cfg).value;
            z[i] = orig - h;
            const double lm = region_loss(z, t, cfg).value;
            z[i] = orig;
            const double fd = (lp - lm) / (2 * h);
            REQUIRE(testsupport::rel_error(res.grad[i], fd) < 1e-4);
        }
    };

    LossConfig bce_cfg;
    check(bce_cfg);
    LossConfig focal_cfg;
    focal_cfg.base = BaseLoss::focal;
    focal_cfg.focal_gamma = 2.0;
    check(focal_cfg);

    SECTION("deep supervision composite") {
        std::vector<Tensor<double>> heads = {random_logits({1, 3, 4, 4, 4}, 71),
                                             random_logits({1, 3, 2, 2, 2}, 73),
                                             random_logits({1, 3, 1, 1, 1}, 79)};
        LossConfig cfg;
        auto res = deep_supervision_loss(heads, y, cfg);
        const double h = 1e-6;
        for (std::size_t hd = 0; hd < heads.size(); ++hd) {
            for (std::int64_t i = 0; i < heads[hd].numel(); i += 5) {
                const double orig = heads[hd][i];
                heads[hd][i] = orig + h;
                const double lp = deep_supervision_loss(heads, y, cfg).value;
                heads[hd][i] = orig - h;
                const double lm = deep_supervision_loss(heads, y, cfg).value;
                heads[hd][i] = orig;
                const double fd = (lp - lm) / (2 * h);
                REQUIRE(testsupport::rel_error(res.grads[hd][i], fd) < 1e-4);
            }
        }
    }
}

TEST_CASE("loss config json round trip") {
    LossConfig cfg;
    cfg.base = BaseLoss::focal;
    cfg.focal_gamma = 2.0;
    nlohmann::json j = cfg;
    auto back = j.get<LossConfig>();
    REQUIRE(back.base == BaseLoss::focal);
    REQUIRE(back.deep_supervision_weights[2] == Catch::Approx(0.25));
    nlohmann::json bad = {{"base", "hinge"}};
    CHECK_THROWS_AS(bad.get<LossConfig>(), Error);
}
