#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <set>

#include "ounet/core/rng.hpp"
#include "ounet/infer/sliding_window.hpp"

using namespace ounet;
using namespace ounet::infer;

namespace {

SlidingWindowConfig cfg_with_window(std::int64_t w) {
    SlidingWindowConfig cfg;
    cfg.window = {w, w, w};
    return cfg;
}

PredictFn constant_model(float logit) {
    return [logit](const Tensor<float>& patch) {
        return Tensor<float>({3, patch.dim(1), patch.dim(2), patch.dim(3)}, logit);
    };
}

// Logits depend on the patch content, so different windows differ.
PredictFn content_model() {
    return [](const Tensor<float>& patch) {
        const std::int64_t S = patch.numel() / patch.dim(0);
        double mean0 = 0.0;
        for (std::int64_t i = 0; i < S; ++i) mean0 += patch.data()[i];
        mean0 /= static_cast<double>(S);
        Tensor<float> out({3, patch.dim(1), patch.dim(2), patch.dim(3)});
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < S; ++i)
                out.data()[c * S + i] =
                    static_cast<float>(mean0 + 0.3 * c - 0.1 * patch.data()[i]);
        return out;
    };
}

}  // namespace

TEST_CASE("axis_origins enumeration") {
    REQUIRE(axis_origins(128, 128, 64) == std::vector<std::int64_t>{0});
    REQUIRE(axis_origins(192, 128, 64) == std::vector<std::int64_t>{0, 64});
    REQUIRE(axis_origins(160, 128, 64) == std::vector<std::int64_t>{0, 32});

    SECTION("random dims: sorted, unique, full coverage, abutting edge") {
        RngStream rng(7);
        for (int trial = 0; trial < 50; ++trial) {
            const std::int64_t w = rng.uniform_int(4, 40);
            const std::int64_t dim = w + rng.uniform_int(0, 80);
            const std::int64_t stride = std::max<std::int64_t>(1, w / 2);
            auto origins = axis_origins(dim, w, stride);
            REQUIRE(std::is_sorted(origins.begin(), origins.end()));
            REQUIRE(std::set<std::int64_t>(origins.begin(), origins.end()).size() == origins.size());
            REQUIRE(origins.back() + w <= dim);
            std::vector<bool> covered(static_cast<std::size_t>(dim), false);
            for (auto o : origins)
                for (std::int64_t i = o; i < o + w; ++i) covered[static_cast<std::size_t>(i)] = true;
            for (bool c : covered) REQUIRE(c);
            REQUIRE(origins.back() + w == dim);  // last window abuts the edge
        }
    }
}

TEST_CASE("window_grid composes per-axis origins") {
    auto cfg = cfg_with_window(8);
    auto grid = window_grid({8, 12, 16}, cfg);
    // axis origins: {0}, {0,4,8}... stride 4: dim12 -> {0,4}, dim16 -> {0,4,8}
    REQUIRE(grid.size() == 1 * 2 * 3);
    REQUIRE(grid.front() == std::array<std::int64_t, 3>{0, 0, 0});
}

TEST_CASE("gaussian importance map") {
    auto map = gaussian_importance_map({9, 9, 9}, 0.125);
    SECTION("center voxel has the maximal weight 1") {
        REQUIRE(map.at(4, 4, 4) == Catch::Approx(1.0));
        for (std::int64_t i = 0; i < map.numel(); ++i) {
            REQUIRE(map[i] <= 1.0f);
            REQUIRE(map[i] > 0.0f);
        }
    }
    SECTION("corner weight below center weight") {
        REQUIRE(map.at(0, 0, 0) < map.at(4, 4, 4));
    }
    SECTION("1-D slice through the center matches the Gaussian formula") {
        const double sigma = 0.125 * 9;
        for (std::int64_t i = 0; i < 9; ++i) {
            const double d = (static_cast<double>(i) - 4.0) / sigma;
            const double expect = std::exp(-0.5 * d * d);
            REQUIRE(map.at(i, 4, 4) == Catch::Approx(expect).margin(1e-6));
        }
    }
}

TEST_CASE("sliding window blending identity for a constant model") {
    auto cfg = cfg_with_window(16);
    Tensor<float> x({5, 40, 32, 16});
    RngStream rng(9);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
    const float c = 0.7f;
    auto out = sliding_window_predict(constant_model(c), x, cfg);
    REQUIRE(out.probs.shape() == Shape{3, 40, 32, 16});
    const float expect = 1.0f / (1.0f + std::exp(-c));
    for (std::int64_t i = 0; i < out.probs.numel(); ++i)
        REQUIRE(out.probs[i] == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("window-sized volume equals a single forward pass") {
    auto cfg = cfg_with_window(8);
    RngStream rng(11);
    Tensor<float> x({5, 8, 8, 8});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
    auto model = content_model();
    auto out = sliding_window_predict(model, x, cfg);
    auto logits = model(x);
    for (std::int64_t i = 0; i < out.probs.numel(); ++i) {
        const float expect = 1.0f / (1.0f + std::exp(-logits[i]));
        REQUIRE(out.probs[i] == Catch::Approx(expect).margin(1e-6));
    }
}

TEST_CASE("overlap blending matches hand-computed weighted averages") {
    // 1-D layout: volume (5,1,1,20), window (1,1,8), stride 4.
    SlidingWindowConfig cfg;
    cfg.window = {1, 1, 8};
    RngStream rng(13);
    Tensor<float> x({5, 1, 1, 20});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
    auto model = content_model();
    auto out = sliding_window_predict(model, x, cfg);

    // independent accumulation oracle
    auto weight = gaussian_importance_map({1, 1, 8}, cfg.gaussian_sigma_scale);
    auto origins = axis_origins(20, 8, 4);
    std::vector<double> acc(3 * 20, 0.0), wacc(20, 0.0);
    for (auto o : origins) {
        Tensor<float> patch({5, 1, 1, 8});
        for (std::int64_t c = 0; c < 5; ++c)
            for (std::int64_t d = 0; d < 8; ++d) patch.at(c, 0, 0, d) = x.at(c, 0, 0, o + d);
        auto logits = model(patch);
        for (int c = 0; c < 3; ++c)
            for (std::int64_t d = 0; d < 8; ++d) {
                const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.at(c, 0, 0, d))));
                acc[static_cast<std::size_t>(c * 20 + o + d)] += weight.at(0, 0, d) * p;
                if (c == 0) wacc[static_cast<std::size_t>(o + d)] += weight.at(0, 0, d);
            }
    }
    for (int c = 0; c < 3; ++c)
        for (std::int64_t d = 0; d < 20; ++d)
            REQUIRE(out.probs.at(c, 0, 0, d) ==
                    Catch::Approx(acc[static_cast<std::size_t>(c * 20 + d)] /
                                  wacc[static_cast<std::size_t>(d)])
                        .margin(1e-6));
}

TEST_CASE("window visit order does not change the blend") {
    SlidingWindowConfig cfg;
    cfg.window = {4, 4, 4};
    RngStream rng(15);
    Tensor<float> x({5, 8, 6, 4});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
    auto model = content_model();
    auto out = sliding_window_predict(model, x, cfg);

    // reversed-order accumulation oracle
    auto weight = gaussian_importance_map({4, 4, 4}, cfg.gaussian_sigma_scale);
    auto grid = window_grid({8, 6, 4}, cfg);
    std::reverse(grid.begin(), grid.end());
    Tensor<float> acc({3, 8, 6, 4}, 0.0f), wacc({8, 6, 4}, 0.0f);
    for (const auto& o : grid) {
        Tensor<float> patch({5, 4, 4, 4});
        for (std::int64_t c = 0; c < 5; ++c)
            for (std::int64_t h = 0; h < 4; ++h)
                for (std::int64_t w = 0; w < 4; ++w)
                    for (std::int64_t d = 0; d < 4; ++d)
                        patch.at(c, h, w, d) = x.at(c, o[0] + h, o[1] + w, o[2] + d);
        auto logits = model(patch);
        for (int c = 0; c < 3; ++c)
            for (std::int64_t h = 0; h < 4; ++h)
                for (std::int64_t w = 0; w < 4; ++w)
                    for (std::int64_t d = 0; d < 4; ++d) {
                        const float p = 1.0f / (1.0f + std::exp(-logits.at(c, h, w, d)));
                        acc.at(c, o[0] + h, o[1] + w, o[2] + d) += weight.at(h, w, d) * p;
                        if (c == 0) wacc.at(o[0] + h, o[1] + w, o[2] + d) += weight.at(h, w, d);
                    }
    }
    for (int c = 0; c < 3; ++c)
        for (std::int64_t h = 0; h < 8; ++h)
            for (std::int64_t w = 0; w < 6; ++w)
                for (std::int64_t d = 0; d < 4; ++d)
                    REQUIRE(out.probs.at(c, h, w, d) ==
                            Catch::Approx(acc.at(c, h, w, d) / wacc.at(h, w, d)).margin(1e-6));
}

TEST_CASE("padding round trip preserves shape and identity blend") {
    auto cfg = cfg_with_window(8);
    Tensor<float> x({5, 5, 6, 7}, 0.25f);
    auto out = sliding_window_predict(constant_model(-0.4f), x, cfg);
    REQUIRE(out.probs.shape() == Shape{3, 5, 6, 7});
    const float expect = 1.0f / (1.0f + std::exp(0.4f));
    for (std::int64_t i = 0; i < out.probs.numel(); ++i)
        REQUIRE(out.probs[i] == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("flip set enumerates exactly 8 unique subsets including identity") {
    auto flips = flip_set();
    REQUIRE(flips.size() == 8);
    std::set<std::array<bool, 3>> unique(flips.begin(), flips.end());
    REQUIRE(unique.size() == 8);
    REQUIRE(unique.count({false, false, false}) == 1);
}

TEST_CASE("tta equals the single prediction for a flip-equivariant model") {
    auto cfg = cfg_with_window(4);
    Tensor<float> x({5, 4, 4, 4}, 0.5f);
    auto single = sliding_window_predict(constant_model(1.1f), x, cfg);
    auto tta = tta_predict(constant_model(1.1f), x, cfg);
    for (std::int64_t i = 0; i < tta.probs.numel(); ++i)
        REQUIRE(tta.probs[i] == Catch::Approx(single.probs[i]).margin(1e-7));
}

TEST_CASE("tta matches the brute-force flip average on a 2^3 lookup model") {
    SlidingWindowConfig cfg;
    cfg.window = {2, 2, 2};
    RngStream rng(17);
    Tensor<float> x({5, 2, 2, 2});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
    auto model = content_model();
    auto tta = tta_predict(model, x, cfg);

    // Brute force with an independently written flip.
    auto flip_idx = [](std::int64_t i, std::int64_t n, bool f) { return f ? n - 1 - i : i; };
    Tensor<double> acc({3, 2, 2, 2}, 0.0);
    for (int m = 0; m < 8; ++m) {
        const bool fh = m & 1, fw = m & 2, fd = m & 4;
        Tensor<float> xf({5, 2, 2, 2});
        for (std::int64_t c = 0; c < 5; ++c)
            for (std::int64_t h = 0; h < 2; ++h)
                for (std::int64_t w = 0; w < 2; ++w)
                    for (std::int64_t d = 0; d < 2; ++d)
                        xf.at(c, flip_idx(h, 2, fh), flip_idx(w, 2, fw), flip_idx(d, 2, fd)) =
                            x.at(c, h, w, d);
        auto logits = model(xf);
        for (int c = 0; c < 3; ++c)
            for (std::int64_t h = 0; h < 2; ++h)
                for (std::int64_t w = 0; w < 2; ++w)
                    for (std::int64_t d = 0; d < 2; ++d) {
                        const double p =
                            1.0 / (1.0 + std::exp(-static_cast<double>(logits.at(
                                             c, flip_idx(h, 2, fh), flip_idx(w, 2, fw),
                                             flip_idx(d, 2, fd)))));
                        acc.at(c, h, w, d) += p;
                    }
    }
    for (std::int64_t i = 0; i < tta.probs.numel(); ++i)
        REQUIRE(tta.probs[i] == Catch::Approx(acc[i] / 8.0).margin(1e-7));
}

TEST_CASE("probability map averaging") {
    Tensor<float> a({3, 2, 2, 2}, 0.2f), b({3, 2, 2, 2}, 0.6f);
    SECTION("identical maps average to themselves") {
        auto m = average_probability_maps({a, a, a});
        for (std::int64_t i = 0; i < m.numel(); ++i) REQUIRE(m[i] == Catch::Approx(0.2f));
    }
    SECTION("0.2 and 0.6 average to 0.4 pointwise") {
        auto m = average_probability_maps({a, b});
        for (std::int64_t i = 0; i < m.numel(); ++i) REQUIRE(m[i] == Catch::Approx(0.4f));
    }
    SECTION("mean commutes with voxel selection") {
        RngStream rng(19);
        std::vector<Tensor<float>> maps;
        for (int k = 0; k < 4; ++k) {
            Tensor<float> t({3, 2, 2, 2});
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform());
            maps.push_back(std::move(t));
        }
        auto m = average_probability_maps(maps);
        for (std::int64_t i = 0; i < m.numel(); ++i) {
            double s = 0.0;
            for (const auto& t : maps) s += t[i];
            REQUIRE(m[i] == Catch::Approx(s / 4.0).margin(1e-7));
        }
    }
}
