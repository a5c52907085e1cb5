#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "etstpm/backbone.hpp"
#include "etstpm/optim.hpp"
#include "test_support.hpp"

using namespace etstpm;
using etstpm::testing::desk_config;
using etstpm::testing::random_tensor;
using etstpm::testing::tiny_config;

namespace {

bool same_parameters(const Backbone& a, const Backbone& b) {
    if (a.parameters().size() != b.parameters().size()) return false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        if (a.parameters()[i].name != b.parameters()[i].name) return false;
        if (a.parameters()[i].value != b.parameters()[i].value) return false;
    }
    return true;
}

bool all_finite(const Tensor<float>& t) {
    for (float v : t.storage())
        if (!std::isfinite(v)) return false;
    return true;
}

// One SGD step driven by a random gradient on every pyramid level and the logits.
void random_step(Backbone& b, std::uint64_t seed) {
    const auto batch = random_tensor({4, 3, b.config().input_size, b.config().input_size}, seed);
    auto pass = b.forward_train(batch, NormMode::batch, b.has_head());
    std::array<Tensor<float>, 3> g;
    for (std::size_t l = 0; l < 3; ++l) g[l] = random_tensor(pass.pyramid.levels[l].shape(), seed + 1 + l);
    Tensor<float> dl;
    if (pass.logits) dl = random_tensor(pass.logits->shape(), seed + 9);
    b.zero_grad();
    b.backward(pass, {&g[0], &g[1], &g[2]}, pass.logits ? &dl : nullptr);
    Sgd<float>(SgdConfig{0.1, 0.9, 1e-4}).step(b);
}

} // namespace

TEST_CASE("build is deterministic in (config, seed) and sensitive to the seed") {
    const BackboneConfig cfg;
    CHECK(same_parameters(build_backbone(cfg, 7), build_backbone(cfg, 7)));
    CHECK_FALSE(same_parameters(build_backbone(cfg, 7), build_backbone(cfg, 8)));
}

TEST_CASE("default layout") {
    const Backbone b = build_backbone(BackboneConfig{}, 7);
    CHECK(b.parameter("fc.weight").value.shape() == Shape{15, 256});
    CHECK(b.parameter("fc.bias").value.shape() == Shape{15});
    CHECK(b.parameter("conv1.weight").value.shape() == Shape{64, 3, 7, 7});
    CHECK(b.parameter("layer3.0.downsample.0.weight").value.shape() == Shape{256, 128, 1, 1});
    CHECK_FALSE(b.contains("layer1.0.downsample.0.weight"));
    CHECK_FALSE(b.contains("layer4.0.conv1.weight"));

    std::set<std::string> names;
    for (const auto& p : b.parameters()) names.insert(p.name);
    CHECK(names.size() == b.parameters().size());
}

TEST_CASE("initialization scheme") {
    const Backbone b = build_backbone(BackboneConfig{}, 3);
    const auto& w = b.parameter("layer2.0.conv2.weight").value; // fan_in = 128 * 9
    double sq = 0.0;
    for (float v : w.storage()) sq += static_cast<double>(v) * v;
    const double sd = std::sqrt(sq / static_cast<double>(w.size()));
    CHECK(sd == doctest::Approx(std::sqrt(2.0 / (128 * 9))).epsilon(0.02));
    for (float v : b.parameter("layer2.0.bn2.weight").value.storage()) CHECK(v == 1.0f);
    for (float v : b.parameter("layer2.0.bn2.bias").value.storage()) CHECK(v == 0.0f);
    for (float v : b.parameter("layer2.0.bn2.running_var").value.storage()) CHECK(v == 1.0f);
    for (float v : b.parameter("fc.bias").value.storage()) CHECK(v == 0.0f);
}

TEST_CASE("configuration errors") {
    BackboneConfig c;
    c.input_size = 250;
    CHECK_THROWS_AS(build_backbone(c, 1), ConfigError);
    c = BackboneConfig{};
    c.depth_scale = 0.001;
    CHECK_THROWS_AS(build_backbone(c, 1), ConfigError);
    c = BackboneConfig{};
    c.block_channels = {64, 0, 256};
    CHECK_THROWS_AS(build_backbone(c, 1), ConfigError);
    c = BackboneConfig{};
    c.num_classes = 1;
    CHECK_THROWS_AS(build_backbone(c, 1), ConfigError);
}

TEST_CASE("pyramid shapes at full width") {
    const Backbone b = build_backbone(BackboneConfig{}, 7);
    const auto p = b.extract_pyramid(random_tensor({2, 3, 256, 256}, 5));
    CHECK(p.levels[0].shape() == Shape{2, 64, 64, 64});
    CHECK(p.levels[1].shape() == Shape{2, 128, 32, 32});
    CHECK(p.levels[2].shape() == Shape{2, 256, 16, 16});
}

TEST_CASE("pyramid shape law holds for scaled layouts") {
    for (std::size_t size : {16u, 32u, 64u, 96u}) {
        BackboneConfig c = desk_config();
        c.input_size = size;
        const Backbone b = build_backbone(c, 1);
        const auto p = b.extract_pyramid(random_tensor({1, 3, size, size}, 2));
        const auto widths = c.stage_widths();
        for (std::size_t l = 0; l < 3; ++l) {
            CHECK(p.levels[l].dim(1) == widths[l]);
            CHECK(p.levels[l].dim(2) == size >> (l + 2));
            CHECK(p.levels[l].dim(3) == size >> (l + 2));
        }
    }
    CHECK(desk_config().stage_widths() == std::array<std::size_t, 3>{16, 32, 64});
}

TEST_CASE("wrong input shape is rejected") {
    const Backbone b = build_backbone(desk_config(), 1);
    CHECK_THROWS_AS(b.extract_pyramid(Tensor<float>({1, 3, 32, 32})), ShapeError);
    CHECK_THROWS_AS(b.extract_pyramid(Tensor<float>({1, 1, 64, 64})), ShapeError);
}

TEST_CASE("zero input gives finite features and batch items do not interact") {
    const Backbone b = build_backbone(desk_config(), 4);
    for (const auto& l : b.extract_pyramid(Tensor<float>({2, 3, 64, 64})).levels) CHECK(all_finite(l));

    auto one = random_tensor({1, 3, 64, 64}, 9);
    Tensor<float> two({2, 3, 64, 64});
    std::copy(one.storage().begin(), one.storage().end(), two.storage().begin());
    std::copy(one.storage().begin(), one.storage().end(), two.storage().begin() + static_cast<std::ptrdiff_t>(one.size()));
    const auto p = b.extract_pyramid(two);
    for (const auto& l : p.levels) CHECK(l.slice(0, 1).storage() == l.slice(1, 2).storage());
    CHECK(b.extract_pyramid(one).levels[2].storage() == p.levels[2].slice(0, 1).storage());
}

TEST_CASE("classify agrees with pooling the pyramid through the head") {
    // double instantiation, so the comparison measures the two paths rather than float rounding
    const auto b = build_backbone(desk_config(15), 6).cast<double>();
    const auto batch = random_tensor<double>({4, 3, 64, 64}, 10);
    const auto logits = b.classify(batch);
    REQUIRE(logits.shape() == Shape{4, 15});
    const auto pyr = b.extract_pyramid(batch);
    const auto& l3 = pyr.levels[2];
    const std::size_t c = l3.dim(1), hw = l3.dim(2) * l3.dim(3);
    const auto& w = b.parameter("fc.weight").value;
    const auto& bias = b.parameter("fc.bias").value;
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t k = 0; k < 15; ++k) {
            double s = bias[k];
            for (std::size_t ch = 0; ch < c; ++ch) {
                double pooled = 0.0;
                for (std::size_t q = 0; q < hw; ++q) pooled += l3[(n * c + ch) * hw + q];
                s += pooled / static_cast<double>(hw) * w[k * c + ch];
            }
            CHECK(std::abs(logits[n * 15 + k] - s) <= 1e-6);
        }

    // identical inputs give identical rows
    const auto fb = build_backbone(desk_config(15), 6);
    auto one = random_tensor({1, 3, 64, 64}, 11);
    Tensor<float> two({2, 3, 64, 64});
    std::copy(one.storage().begin(), one.storage().end(), two.storage().begin());
    std::copy(one.storage().begin(), one.storage().end(), two.storage().begin() + static_cast<std::ptrdiff_t>(one.size()));
    const auto rows = fb.classify(two);
    CHECK(rows.slice(0, 1).storage() == rows.slice(1, 2).storage());
}

TEST_CASE("classify needs a head") {
    BackboneConfig c = desk_config(0);
    const Backbone b = build_backbone(c, 1);
    CHECK_FALSE(b.has_head());
    CHECK_THROWS_AS(b.classify(Tensor<float>({1, 3, 64, 64})), StateError);
    CHECK(b.extract_pyramid(Tensor<float>({1, 3, 64, 64})).levels[2].dim(1) == 64);
}

TEST_CASE("replace_head keeps the body and is seeded") {
    const Backbone b = build_backbone(BackboneConfig{}, 7);
    const Backbone h15 = replace_head(b, 15, 99);
    const Backbone h2 = replace_head(b, 2, 99);
    CHECK(body_values(h15) == body_values(b));
    CHECK(body_values(h2) == body_values(b));
    CHECK(h15.num_classes() == 15);
    CHECK(h2.parameter("fc.weight").value.shape() == Shape{2, 256});
    CHECK(replace_head(b, 15, 99).parameter("fc.weight").value == h15.parameter("fc.weight").value);
    CHECK_FALSE(h15.parameter("fc.weight").value == b.parameter("fc.weight").value);
    CHECK_THROWS_AS(replace_head(b, 1, 99), ConfigError);

    const Backbone small = build_backbone(desk_config(3), 2);
    CHECK(replace_head(small, 2, 5).classify(Tensor<float>({3, 3, 64, 64})).shape() == Shape{3, 2});
}

TEST_CASE("optional fourth stage feeds only the head") {
    BackboneConfig c = desk_config(3);
    c.include_stage4_for_finetune = true;
    const Backbone b = build_backbone(c, 1);
    CHECK(b.contains("layer4.0.conv1.weight"));
    CHECK(b.parameter("fc.weight").value.shape() == Shape{3, 128});
    const auto batch = random_tensor({2, 3, 64, 64}, 3);
    CHECK(b.classify(batch).shape() == Shape{2, 3});
    BackboneConfig plain = desk_config(3);
    CHECK(b.extract_pyramid(batch).levels[2].dim(1) == build_backbone(plain, 1).extract_pyramid(batch).levels[2].dim(1));
}

TEST_CASE("freeze contract") {
    Backbone b = build_backbone(tiny_config(3), 5);
    b.set_trainable(TrainableScope::head_only);
    const auto body = body_values(b);
    const auto head = b.parameter("fc.weight").value;
    for (std::uint64_t s = 0; s < 3; ++s) random_step(b, 100 + 10 * s);
    CHECK(body_values(b) == body);
    CHECK_FALSE(b.parameter("fc.weight").value == head);

    b.set_trainable(TrainableScope::all);
    random_step(b, 200);
    CHECK_FALSE(body_values(b) == body);

    Backbone c = set_trainable(build_backbone(tiny_config(3), 5), TrainableScope::all);
    const auto body_c = body_values(c);
    random_step(c, 300);
    CHECK_FALSE(body_values(c) == body_c);
}

TEST_CASE("forward is deterministic and the double instantiation agrees") {
    const Backbone b = build_backbone(desk_config(), 8);
    const auto batch = random_tensor({2, 3, 64, 64}, 12);
    const auto p1 = b.extract_pyramid(batch);
    const auto p2 = b.extract_pyramid(batch);
    for (std::size_t l = 0; l < 3; ++l) CHECK(p1.levels[l] == p2.levels[l]);

    const auto bd = b.cast<double>();
    const auto pd = bd.extract_pyramid(batch.cast<double>());
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t i = 0; i < pd.levels[l].size(); ++i)
            CHECK(std::abs(pd.levels[l][i] - p1.levels[l][i]) <= 1e-3 * std::max(1.0, std::abs(pd.levels[l][i])));
}

TEST_CASE("calibrated running statistics equal the average batch statistics") {
    Backbone b = build_backbone(tiny_config(3), 2);
    const auto b1 = random_tensor({4, 3, 16, 16}, 20);
    const auto b2 = random_tensor({4, 3, 16, 16}, 21, 3.0);
    b.calibrate_norm_stats([&](std::size_t k) { return k == 0 ? b1 : b2; }, 2);

    // the stem sees the raw input, so its statistics can be recomputed directly
    Backbone probe = build_backbone(tiny_config(3), 2);
    auto stats = [&](const Tensor<float>& x, std::size_t c, bool var) {
        const auto y = kernels::conv2d_forward(x, probe.parameter("conv1.weight").value, ConvGeometry{2, 3});
        const std::size_t hw = y.dim(2) * y.dim(3), m = y.dim(0) * hw;
        double mean = 0.0, sq = 0.0;
        for (std::size_t n = 0; n < y.dim(0); ++n)
            for (std::size_t q = 0; q < hw; ++q) mean += y[(n * y.dim(1) + c) * hw + q];
        mean /= static_cast<double>(m);
        for (std::size_t n = 0; n < y.dim(0); ++n)
            for (std::size_t q = 0; q < hw; ++q) {
                const double d = y[(n * y.dim(1) + c) * hw + q] - mean;
                sq += d * d;
            }
        return var ? sq / static_cast<double>(m - 1) : mean;
    };
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(b.parameter("bn1.running_mean").value[c] ==
              doctest::Approx(0.5 * (stats(b1, c, false) + stats(b2, c, false))).epsilon(1e-4));
        CHECK(b.parameter("bn1.running_var").value[c] ==
              doctest::Approx(0.5 * (stats(b1, c, true) + stats(b2, c, true))).epsilon(1e-4));
    }
    // weights are untouched
    CHECK(b.parameter("conv1.weight").value == probe.parameter("conv1.weight").value);
}
