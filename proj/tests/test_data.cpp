#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "etstpm/data.hpp"
#include "etstpm/errors.hpp"
#include "etstpm/metrics.hpp"
#include "test_support.hpp"

using namespace etstpm;
using namespace etstpm::testing;
namespace fs = std::filesystem;

namespace {

void gray_png(const fs::path& p, std::size_t n, std::uint8_t v) {
    fs::create_directories(p.parent_path());
    write_png(p, Image8{n, n, 1, std::vector<std::uint8_t>(n * n, v)});
}

std::vector<char> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::vector<char>> tree(const fs::path& root) {
    std::map<std::string, std::vector<char>> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = bytes_of(e.path());
    return out;
}

} // namespace

TEST_CASE("indexing the documented layout") {
    TempDir dir("data_index");
    const fs::path c = dir / "bottle";
    gray_png(c / "train" / "good" / "000.png", 8, 100);
    gray_png(c / "train" / "good" / "001.png", 8, 100);
    gray_png(c / "test" / "good" / "000.png", 8, 100);
    gray_png(c / "test" / "crack" / "000.png", 8, 100);
    gray_png(c / "ground_truth" / "crack" / "000_mask.png", 8, 255);

    const auto idx = index_mvtec(dir.path());
    CHECK(idx.records.size() == 4);
    CHECK(idx.mask_count() == 1);
    CHECK(idx.categories == std::vector<std::string>{"bottle"});
    CHECK(idx.select(Split::train).size() == 2);
    const auto test = idx.select(Split::test, "bottle");
    REQUIRE(test.size() == 2);
    const ImageRecord* defect = test[0]->label == Label::defect ? test[0] : test[1];
    CHECK(defect->defect_type == "crack");
    CHECK(defect->mask_path == c / "ground_truth" / "crack" / "000_mask.png");
    for (const auto& r : idx.records)
        if (r.label == Label::good) CHECK_FALSE(r.mask_path.has_value());

    fs::remove(c / "ground_truth" / "crack" / "000_mask.png");
    try {
        index_mvtec(dir.path());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find((c / "test" / "crack" / "000.png").string()) != std::string::npos);
    }
}

TEST_CASE("categories are ordered lexicographically and class ids follow") {
    TempDir dir("data_order");
    for (const char* name : {"zipper", "bottle", "metal_nut"}) {
        gray_png(dir / name / "train" / "good" / "000.png", 8, 10);
        gray_png(dir / name / "test" / "good" / "000.png", 8, 10);
    }
    const auto idx = index_mvtec(dir.path());
    CHECK(idx.categories == std::vector<std::string>{"bottle", "metal_nut", "zipper"});
    CHECK(idx.class_id("metal_nut") == 1);
    CHECK_THROWS(idx.class_id("carpet"));
}

TEST_CASE("malformed datasets are rejected") {
    TempDir dir("data_bad");
    CHECK_THROWS_AS(index_mvtec(dir / "missing"), DataError);
    CHECK_THROWS_AS(index_mvtec(dir.path()), DataError);
    gray_png(dir / "empty" / "train" / "good" / "000.png", 8, 10);
    fs::create_directories(dir / "empty" / "test" / "good");
    CHECK_THROWS_AS(index_mvtec(dir.path()), DataError);
    gray_png(dir / "empty" / "test" / "good" / "000.png", 8, 10);
    CHECK_NOTHROW(index_mvtec(dir.path()));
    gray_png(dir / "empty" / "train" / "scratch" / "000.png", 8, 10);
    CHECK_THROWS_AS(index_mvtec(dir.path()), DataError);
}

TEST_CASE("synthetic data is deterministic and seed dependent") {
    TempDir a("synth_a"), b("synth_b"), c("synth_c");
    small_synthetic(a.path(), 32, 3, 2, 4, 11);
    small_synthetic(b.path(), 32, 3, 2, 4, 11);
    small_synthetic(c.path(), 32, 3, 2, 4, 12);
    const auto ta = tree(a.path());
    CHECK(ta == tree(b.path()));
    const auto tc = tree(c.path());
    CHECK(ta.size() == tc.size());
    CHECK(ta != tc);
}

TEST_CASE("synthetic counts, masks and area fractions") {
    TempDir dir("synth_counts");
    SynthConfig cfg;
    cfg.image_size = 32;
    cfg.train_good_per_cat = 4;
    cfg.test_good_per_cat = 3;
    cfg.test_defect_per_cat = 5;
    cfg.defect_area_fraction = {0.02, 0.08};
    const auto idx = generate_synthetic(cfg, dir.path());
    CHECK(idx.categories.size() == 3);
    CHECK(idx.records.size() == 3 * (4 + 3 + 5));
    CHECK(idx.mask_count() == 15);
    CHECK(index_mvtec(dir.path()).records.size() == idx.records.size());
    for (const auto& r : idx.records) {
        if (!r.mask_path) continue;
        const auto m = load_mask(*r.mask_path, 32);
        double on = 0;
        for (auto v : m.storage()) on += v;
        const double frac = on / (32.0 * 32.0);
        CHECK(frac >= 0.02);
        CHECK(frac <= 0.08);
    }
}

TEST_CASE("rendered defects match the written files") {
    TempDir dir("synth_render");
    SynthConfig cfg;
    cfg.image_size = 32;
    cfg.train_good_per_cat = 1;
    cfg.test_good_per_cat = 1;
    cfg.test_defect_per_cat = 4;
    generate_synthetic(cfg, dir.path());
    for (std::size_t cat = 0; cat < 3; ++cat) {
        std::map<std::string, int> per_type;
        for (std::size_t i = 0; i < 4; ++i) {
            const auto d = render_synthetic_defect(cfg, cat, i);
            char name[16];
            std::snprintf(name, sizeof name, "%03d", per_type[d.type]++);
            const fs::path base = dir / SynthConfig::category_name(cat);
            CHECK(read_png(base / "test" / d.type / (std::string(name) + ".png")).pixels == d.defective.pixels);
            const auto mask = read_png(base / "ground_truth" / d.type / (std::string(name) + "_mask.png"));
            std::size_t outside_equal = 0, outside = 0;
            for (std::size_t p = 0; p < 32 * 32; ++p) {
                CHECK((mask.pixels[p] > 0) == (d.mask[p] == 1));
                if (d.mask[p]) continue;
                ++outside;
                bool same = true;
                for (std::size_t ch = 0; ch < 3; ++ch) same = same && d.clean.pixels[p * 3 + ch] == d.defective.pixels[p * 3 + ch];
                outside_equal += same;
            }
            CHECK(outside_equal == outside);
        }
    }
}

TEST_CASE("image loading standardizes each channel") {
    TempDir dir("load_image");
    gray_png(dir / "gray.png", 4, 128);
    const auto t = load_image(dir / "gray.png", 4);
    REQUIRE(t.shape() == Shape{3, 4, 4});
    for (std::size_t ch = 0; ch < 3; ++ch) {
        const double expected = (128.0 / 255.0 - kChannelMean[ch]) / kChannelStd[ch];
        for (std::size_t i = 0; i < 16; ++i) CHECK(t[ch * 16 + i] == doctest::Approx(expected).epsilon(1e-6));
    }
    CHECK(t[0] == doctest::Approx(0.0740).epsilon(1e-3));

    Image8 rgb{2, 2, 3, {255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255}};
    write_png(dir / "rgb.png", rgb);
    const auto r = load_image(dir / "rgb.png", 2);
    CHECK(r[0] == doctest::Approx((1.0 - kChannelMean[0]) / kChannelStd[0]));
    CHECK(r[4 + 0] == doctest::Approx((0.0 - kChannelMean[1]) / kChannelStd[1]));
    CHECK(r[8 + 2] == doctest::Approx((1.0 - kChannelMean[2]) / kChannelStd[2]));

    // a resize of a constant image is still constant
    const auto big = load_image(dir / "gray.png", 12);
    for (std::size_t i = 0; i < 144; ++i) CHECK(big[i] == t[0]);
    CHECK_THROWS_AS(load_image(dir / "nope.png", 4), IoError);
}

TEST_CASE("mask loading thresholds and resizes by nearest neighbour") {
    TempDir dir("load_mask");
    gray_png(dir / "black.png", 8, 0);
    gray_png(dir / "white.png", 8, 255);
    Image8 checker{4, 4, 1, std::vector<std::uint8_t>(16)};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) checker.pixels[y * 4 + x] = (x + y) % 2 ? 1 : 0;
    write_png(dir / "checker.png", checker);

    const auto b = load_mask(dir / "black.png", 4), w = load_mask(dir / "white.png", 16);
    CHECK(std::all_of(b.storage().begin(), b.storage().end(), [](auto v) { return v == 0; }));
    CHECK(std::all_of(w.storage().begin(), w.storage().end(), [](auto v) { return v == 1; }));
    const auto c = load_mask(dir / "checker.png", 8);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) CHECK(c[y * 8 + x] == ((x / 2 + y / 2) % 2));
}

TEST_CASE("load_batch stacks images in the requested order") {
    TempDir dir("load_batch");
    gray_png(dir / "a.png", 4, 0);
    gray_png(dir / "b.png", 4, 255);
    const std::vector<fs::path> paths{dir / "a.png", dir / "b.png"};
    const auto batch = load_batch(paths, {1, 0, 1}, 1, 3, 4);
    REQUIRE(batch.shape() == Shape{2, 3, 4, 4});
    CHECK(batch[0] == load_image(dir / "a.png", 4)[0]);
    CHECK(batch[48] == load_image(dir / "b.png", 4)[0]);
}

TEST_CASE("a pixel-mean baseline separates synthetic defects") {
    TempDir dir("synth_baseline");
    SynthConfig cfg;
    cfg.train_good_per_cat = 20;
    cfg.test_good_per_cat = 4;
    cfg.test_defect_per_cat = 8;
    const auto idx = generate_synthetic(cfg, dir.path());
    const std::size_t n = cfg.image_size;
    for (const auto& cat : idx.categories) {
        std::vector<double> mean(3 * n * n, 0.0);
        const auto train = idx.select(Split::train, cat);
        for (const auto* r : train) {
            const auto img = load_image(r->image_path, n);
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += img[i] / static_cast<double>(train.size());
        }
        std::vector<AnomalyMap> maps;
        std::vector<Tensor<std::uint8_t>> masks;
        for (const auto* r : idx.select(Split::test, cat)) {
            const auto img = load_image(r->image_path, n);
            AnomalyMap m{Tensor<float>({n, n}), MapSource::fused};
            for (std::size_t p = 0; p < n * n; ++p) {
                double d = 0;
                for (std::size_t ch = 0; ch < 3; ++ch) d += std::abs(img[ch * n * n + p] - mean[ch * n * n + p]);
                m.values[p] = static_cast<float>(d / 3);
            }
            maps.push_back(std::move(m));
            masks.push_back(r->mask_path ? load_mask(*r->mask_path, n) : Tensor<std::uint8_t>({n, n}));
        }
        const double a = pixel_auroc(maps, masks);
        MESSAGE(cat << " baseline pixel AUROC " << a);
        CHECK(a >= 0.7);
    }
}

TEST_CASE("synthetic config validation") {
    SynthConfig c;
    c.image_size = 40;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.defect_area_fraction = {0.1, 0.05};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.test_defect_per_cat = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
