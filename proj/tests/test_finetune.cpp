#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "etstpm/finetune.hpp"
#include "test_support.hpp"

using namespace etstpm;
using namespace etstpm::testing;

TEST_CASE("cross-entropy values") {
    const std::vector<std::size_t> zero{0};
    CHECK(cross_entropy(Tensor<double>({1, 15}), zero) == doctest::Approx(std::log(15.0)).epsilon(1e-12));
    CHECK(cross_entropy(Tensor<double>({1, 15}), std::vector<std::size_t>{14}) == doctest::Approx(2.70805).epsilon(1e-5));

    Tensor<double> confident({1, 4});
    confident[2] = 1000.0;
    CHECK(cross_entropy(confident, std::vector<std::size_t>{2}) < 1e-6);

    const Tensor<double> two({1, 2}, std::vector<double>{1.0, 2.0});
    CHECK(cross_entropy(two, zero) == doctest::Approx(std::log(1.0 + std::exp(1.0))).epsilon(1e-12));
    CHECK(cross_entropy(two, zero) == doctest::Approx(1.31326).epsilon(1e-5));
}

TEST_CASE("cross-entropy gradient is (softmax - onehot) / N") {
    const auto logits = random_tensor<double>({3, 4}, 5, 3.0);
    const std::vector<std::size_t> labels{3, 0, 1};
    Tensor<double> g;
    const double loss = cross_entropy(logits, labels, &g);
    CHECK(std::isfinite(loss));
    for (std::size_t i = 0; i < 3; ++i) {
        double z = 0.0, row = 0.0;
        for (std::size_t j = 0; j < 4; ++j) z += std::exp(logits[i * 4 + j]);
        for (std::size_t j = 0; j < 4; ++j) {
            const double expect = (std::exp(logits[i * 4 + j]) / z - (j == labels[i] ? 1.0 : 0.0)) / 3.0;
            CHECK(g[i * 4 + j] == doctest::Approx(expect).epsilon(1e-12));
            row += g[i * 4 + j];
        }
        CHECK(std::abs(row) < 1e-15);
    }
}

TEST_CASE("cross-entropy input errors") {
    CHECK_THROWS_AS(cross_entropy(Tensor<double>({1, 3}), std::vector<std::size_t>{3}), DataError);
    CHECK_THROWS_AS(cross_entropy(Tensor<double>({2, 3}), std::vector<std::size_t>{0}), ShapeError);
}

TEST_CASE("classification set: all training images plus the leading share of defects") {
    TempDir dir("ft_ds");
    const auto index = small_synthetic(dir.path(), 16, 4, 2, 5);
    const auto ds = finetune_dataset(index, 0.4);
    CHECK(ds.num_classes == 3);
    CHECK(ds.items.size() == 3 * (4 + 2));
    for (const auto& it : ds.items) {
        const auto rec = std::find_if(index.records.begin(), index.records.end(),
                                      [&](const ImageRecord& r) { return r.image_path == it.image; });
        REQUIRE(rec != index.records.end());
        CHECK(it.label == index.class_id(rec->category));
        CHECK((rec->split == Split::train || rec->label == Label::defect));
    }
    CHECK(finetune_dataset(index, 0.0).items.size() == 12);
    CHECK(finetune_dataset(index, 1.0).items.size() == 27);
}

TEST_CASE("zero epochs return the input; warmup alone moves only the head") {
    TempDir dir("ft_freeze");
    const auto index = small_synthetic(dir.path());
    const auto ds = finetune_dataset(index, 0.5);
    const Backbone start = replace_head(build_backbone(tiny_config(0), 3), 3, 4);

    FinetuneConfig none;
    none.head_warmup_epochs = 0;
    none.full_epochs = 0;
    const auto same = run_finetune(start, ds, none);
    CHECK(same.history.empty());
    for (std::size_t i = 0; i < start.parameters().size(); ++i)
        CHECK(same.teacher.parameters()[i].value == start.parameters()[i].value);

    FinetuneConfig warm;
    warm.head_warmup_epochs = 1;
    warm.full_epochs = 0;
    warm.batch_size = 3; // 21 items; a lone trailing image has no batch statistics at 1x1
    const auto res = run_finetune(start, ds, warm);
    CHECK(body_values(res.teacher) == body_values(start));
    CHECK_FALSE(res.teacher.parameter("fc.weight").value == start.parameter("fc.weight").value);
    REQUIRE(res.history.size() == 1);
    CHECK(res.history[0].phase == "head_only");
    CHECK(res.teacher.trainable_scope() == start.trainable_scope());

    FinetuneConfig both = warm;
    both.full_epochs = 1;
    const auto full = run_finetune(start, ds, both);
    CHECK_FALSE(body_values(full.teacher) == body_values(start));
    CHECK(full.history.back().phase == "all");
    CHECK(full.history.back().epoch == 2);
}

TEST_CASE("fine-tuning preconditions") {
    TempDir dir("ft_pre");
    const auto index = small_synthetic(dir.path());
    const auto ds = finetune_dataset(index, 0.0);
    CHECK_THROWS_AS(run_finetune(build_backbone(tiny_config(2), 1), ds, FinetuneConfig{}), StateError);
    CHECK_THROWS_AS(run_finetune(build_backbone(tiny_config(0), 1), ds, FinetuneConfig{}), StateError);
    LabeledDataset empty{{}, 3};
    CHECK_THROWS_AS(run_finetune(build_backbone(tiny_config(3), 1), empty, FinetuneConfig{}), DataError);
}

TEST_CASE("fine-tuning is deterministic") {
    TempDir dir("ft_det");
    const auto index = small_synthetic(dir.path());
    const auto ds = finetune_dataset(index, 0.5);
    FinetuneConfig cfg;
    cfg.batch_size = 7;
    const auto a = run_finetune(build_backbone(tiny_config(3), 2), ds, cfg);
    const auto b = run_finetune(build_backbone(tiny_config(3), 2), ds, cfg);
    CHECK(a.history == b.history);
    for (std::size_t i = 0; i < a.teacher.parameters().size(); ++i)
        CHECK(a.teacher.parameters()[i].value == b.teacher.parameters()[i].value);
}

TEST_CASE("eval_accuracy") {
    TempDir dir("ft_acc");
    const auto index = small_synthetic(dir.path(), 16, 100, 1, 1);
    LabeledDataset ds = finetune_dataset(index, 0.0);
    REQUIRE(ds.items.size() == 300);
    const Backbone model = build_backbone(tiny_config(3), 12);

    const double random_acc = eval_accuracy(model, ds);
    CHECK(random_acc >= 0.2);
    CHECK(random_acc <= 0.47);

    // relabel with the model's own predictions: everything is correct
    LabeledDataset own = ds;
    std::vector<std::filesystem::path> paths;
    for (const auto& it : own.items) paths.push_back(it.image);
    std::vector<std::size_t> order(paths.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto logits = model.classify(load_batch(paths, order, 0, paths.size(), 16));
    for (std::size_t i = 0; i < own.items.size(); ++i) {
        const float* row = logits.data() + i * 3;
        own.items[i].label = static_cast<std::size_t>(std::max_element(row, row + 3) - row);
    }
    CHECK(eval_accuracy(model, own) == 1.0);

    // two classes: flipping every label complements the accuracy
    const Backbone binary = build_backbone(tiny_config(2), 13);
    LabeledDataset two{{}, 2};
    for (std::size_t i = 0; i < 40; ++i) two.items.push_back({ds.items[i * 7].image, i % 2});
    LabeledDataset flipped = two;
    for (auto& it : flipped.items) it.label = 1 - it.label;
    CHECK(eval_accuracy(binary, two) + eval_accuracy(binary, flipped) == doctest::Approx(1.0));

    CHECK_THROWS_AS(eval_accuracy(build_backbone(tiny_config(0), 1), ds), StateError);
}

TEST_CASE("phase-two loss does not increase in median over seeds") {
    TempDir dir("ft_mono");
    SynthConfig sc; // default synthetic set
    const auto index = generate_synthetic(sc, dir.path());
    const auto ds = finetune_dataset(index, FinetuneConfig{}.abnormal_fraction);
    std::vector<double> first, second;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        FinetuneConfig cfg;
        cfg.seed = seed;
        const Backbone start = replace_head(build_backbone(desk_config(0), seed), 3, seed + 50);
        const auto res = run_finetune(start, ds, cfg);
        REQUIRE(res.history.size() == 3);
        first.push_back(res.history[1].mean_loss);
        second.push_back(res.history[2].mean_loss);
    }
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    CHECK(second[2] <= first[2]);
}
