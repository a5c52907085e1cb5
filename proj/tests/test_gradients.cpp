#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "etstpm/distance.hpp"
#include "etstpm/finetune.hpp"
#include "test_support.hpp"

using namespace etstpm;
using etstpm::testing::random_tensor;
using etstpm::testing::tiny_config;

namespace {

using Model = BasicBackbone<double>;

struct Sample {
    std::size_t param, index;
};

std::vector<Sample> sample_parameters(const Model& m, std::size_t count, std::uint64_t seed) {
    std::vector<Sample> all;
    for (std::size_t p = 0; p < m.parameters().size(); ++p)
        if (m.is_trainable(m.parameters()[p]))
            for (std::size_t i = 0; i < m.parameters()[p].value.size(); ++i) all.push_back({p, i});
    Rng rng(seed);
    const auto order = rng.permutation(all.size());
    std::vector<Sample> out;
    for (std::size_t i = 0; i < std::min(count, all.size()); ++i) out.push_back(all[order[i]]);
    return out;
}

struct CheckResult {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst = 0.0;
};

// Central differences with step h against the analytic gradient held in the model.
CheckResult compare(Model& m, const std::vector<Sample>& samples, const std::function<double()>& loss) {
    constexpr double h = 1e-4;
    CheckResult r;
    for (const auto& s : samples) {
        auto& p = m.parameters()[s.param];
        const double analytic = p.grad[s.index];
        const double saved = p.value[s.index];
        p.value[s.index] = saved + h;
        const double up = loss();
        p.value[s.index] = saved - h;
        const double down = loss();
        p.value[s.index] = saved;
        const double numeric = (up - down) / (2 * h);
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        const double err = scale < 1e-7 ? 0.0 : std::abs(analytic - numeric) / scale;
        ++r.checked;
        r.worst = std::max(r.worst, err);
        if (err > 1e-3) {
            ++r.failed;
            MESSAGE(p.name << "[" << s.index << "] analytic " << analytic << " numeric " << numeric);
        }
    }
    return r;
}

} // namespace

TEST_CASE("tiny layout has about a thousand parameters") {
    const Model m(tiny_config(3), 1);
    std::size_t n = 0;
    for (const auto& p : m.parameters())
        if (!p.buffer) n += p.value.size();
    CHECK(n > 500);
    CHECK(n < 1500);
}

TEST_CASE("cross-entropy gradient through the whole network") {
    Model m(tiny_config(3), 17);
    const auto batch = random_tensor<double>({4, 3, 16, 16}, 18);
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    auto loss = [&] {
        auto pass = m.forward_train(batch, NormMode::batch, true, false);
        return cross_entropy(*pass.logits, labels);
    };
    m.zero_grad();
    auto pass = m.forward_train(batch, NormMode::batch, true, false);
    Tensor<double> dlogits;
    cross_entropy(*pass.logits, labels, &dlogits);
    m.backward(pass, {nullptr, nullptr, nullptr}, &dlogits);

    const auto r = compare(m, sample_parameters(m, 150, 3), loss);
    CHECK(r.checked >= 100);
    CHECK(r.failed == 0);
    MESSAGE("worst relative error " << r.worst);
}

TEST_CASE("cross-entropy gradient with a frozen body reaches only the head") {
    Model m(tiny_config(3), 19);
    m.set_trainable(TrainableScope::head_only);
    const auto batch = random_tensor<double>({3, 3, 16, 16}, 20);
    const std::vector<std::size_t> labels{1, 0, 2};
    m.zero_grad();
    auto pass = m.forward_train(batch, NormMode::batch, true);
    CHECK(pass.mode == NormMode::running);
    Tensor<double> dlogits;
    cross_entropy(*pass.logits, labels, &dlogits);
    m.backward(pass, {nullptr, nullptr, nullptr}, &dlogits);
    for (const auto& p : m.parameters())
        if (!p.head)
            for (double g : p.grad.storage()) CHECK(g == 0.0);
    auto loss = [&] { return cross_entropy(*m.forward_train(batch, NormMode::running, true, false).logits, labels); };
    const auto r = compare(m, sample_parameters(m, 100, 4), loss);
    CHECK(r.checked == 15); // fc.weight (3x4) + fc.bias (3)
    CHECK(r.failed == 0);
}

TEST_CASE("distillation-loss gradient with respect to the student") {
    for (NormMode mode : {NormMode::batch, NormMode::running}) {
        CAPTURE(static_cast<int>(mode));
        const Model teacher(tiny_config(0), 31);
        Model student(tiny_config(0), 32);
        const auto batch = random_tensor<double>({3, 3, 16, 16}, 33);
        const auto target = teacher.extract_pyramid(batch);
        const DistanceWeights w{0.7, 1.3};
        auto loss = [&] { return distill_loss(target, student.forward_train(batch, mode, false, false).pyramid, w); };

        student.zero_grad();
        auto pass = student.forward_train(batch, mode, false, false);
        std::array<Tensor<double>, 3> g;
        distill_loss_and_grad(target, pass.pyramid, w, g);
        student.backward(pass, {&g[0], &g[1], &g[2]}, nullptr);

        const auto r = compare(student, sample_parameters(student, 150, 5), loss);
        CHECK(r.checked >= 100);
        CHECK(r.failed == 0);
        MESSAGE("worst relative error " << r.worst);
    }
}

TEST_CASE("pyramid-level gradient of the distance") {
    const auto t = random_tensor<double>({2, 5, 3, 3}, 40);
    const auto s0 = random_tensor<double>({2, 5, 3, 3}, 41);
    for (const DistanceWeights w : {DistanceWeights{1, 1}, DistanceWeights{0, 1}, DistanceWeights{1, 0}}) {
        FeaturePyramid<double> pt{{t, t, t}}, ps{{s0, s0, s0}};
        std::array<Tensor<double>, 3> g;
        const double base = distill_loss_and_grad(pt, ps, w, g);
        CHECK(base == doctest::Approx(distill_loss(pt, ps, w)));
        for (std::size_t i = 0; i < s0.size(); i += 7) {
            constexpr double h = 1e-6;
            auto up = ps, down = ps;
            up.levels[1][i] += h;
            down.levels[1][i] -= h;
            const double numeric = (distill_loss(pt, up, w) - distill_loss(pt, down, w)) / (2 * h);
            CHECK(g[1][i] == doctest::Approx(numeric).epsilon(1e-5));
        }
    }
}
