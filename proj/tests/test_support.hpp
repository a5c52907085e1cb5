#pragma once

// Shared helpers for the unit tests.

#include <cstdint>
#include <filesystem>
#include <string>

#include "etstpm/backbone.hpp"
#include "etstpm/rng.hpp"
#include "etstpm/tensor.hpp"

namespace etstpm::testing {

template <class T = float>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.storage()) v = static_cast<T>(scale * rng.normal());
    return t;
}

/// ~1000-parameter extractor: 16x16 input, widths 2/2/4/4, one block per stage.
inline BackboneConfig tiny_config(std::size_t num_classes = 3) {
    BackboneConfig c;
    c.input_size = 16;
    c.stem_channels = 2;
    c.block_channels = {2, 4, 4};
    c.blocks_per_stage = 1;
    c.num_classes = num_classes;
    return c;
}

/// Desk-scale layout used by the end-to-end runs.
inline BackboneConfig desk_config(std::size_t num_classes = 3) {
    BackboneConfig c;
    c.input_size = 64;
    c.depth_scale = 0.25;
    c.num_classes = num_classes;
    return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
        path_ = std::filesystem::temp_directory_path() / ("etstpm_" + tag + "_" + std::to_string(rng.next() % 1000000000));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

} // namespace etstpm::testing

#include "etstpm/data.hpp"

namespace etstpm::testing {

/// Small synthetic dataset written into `dir`.
inline DatasetIndex small_synthetic(const std::filesystem::path& dir, std::size_t image_size = 16,
                                    std::size_t train = 6, std::size_t test_good = 2, std::size_t test_defect = 2,
                                    std::uint64_t seed = 7) {
    SynthConfig c;
    c.image_size = image_size;
    c.train_good_per_cat = train;
    c.test_good_per_cat = test_good;
    c.test_defect_per_cat = test_defect;
    c.defect_area_fraction = {0.02, 0.1};
    c.seed = seed;
    return generate_synthetic(c, dir);
}

} // namespace etstpm::testing
