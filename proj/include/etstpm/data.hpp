#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "etstpm/image_io.hpp"
#include "etstpm/tensor.hpp"

namespace etstpm {

enum class Split { train, test };
enum class Label { good, defect };

struct ImageRecord {
    std::filesystem::path image_path;
    std::string category;
    Split split = Split::train;
    Label label = Label::good;
    std::optional<std::string> defect_type;
    std::optional<std::filesystem::path> mask_path;
};

/// Enumerates a dataset in the MVTec-AD directory convention:
///   <category>/train/good/*.png
///   <category>/test/<good|defect_type>/*.png
///   <category>/ground_truth/<defect_type>/<stem>_mask.png
struct DatasetIndex {
    std::vector<ImageRecord> records;
    std::vector<std::string> categories; // sorted; position is the class id

    std::size_t class_id(const std::string& category) const;
    std::vector<const ImageRecord*> select(Split split) const;
    std::vector<const ImageRecord*> select(Split split, const std::string& category) const;
    std::size_t mask_count() const;
};

DatasetIndex index_mvtec(const std::filesystem::path& root);

enum class TextureKind { grating, checker, noise };

struct SynthConfig {
    std::size_t categories = 3;
    std::size_t image_size = 64;
    std::size_t train_good_per_cat = 60;
    std::size_t test_good_per_cat = 10;
    std::size_t test_defect_per_cat = 10;
    std::array<double, 2> defect_area_fraction{0.01, 0.06};
    std::uint64_t seed = 7;

    void validate() const;
    /// Texture of category i cycles grating, checker, noise.
    static TextureKind texture_of(std::size_t category);
    static std::string category_name(std::size_t category);
};

/// One generated defect image together with the same texture sample and
/// pixel noise without the defect, and its mask (n*n of 0/1).
struct SyntheticDefect {
    std::string type; // "blob" (ellipse) or "patch" (rectangle)
    Image8 defective;
    Image8 clean;
    std::vector<std::uint8_t> mask;
};

/// The i-th defect image of `category`, exactly as generate_synthetic writes it.
SyntheticDefect render_synthetic_defect(const SynthConfig& cfg, std::size_t category, std::size_t i);

/// Writes a deterministic synthetic dataset in the MVTec layout and indexes it.
DatasetIndex generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Channel standardization applied by load_image.
inline constexpr std::array<float, 3> kChannelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd{0.229f, 0.224f, 0.225f};

/// Decode, resize (half-pixel bilinear) to size x size, scale to [0,1] and
/// standardize per channel. Gray sources are replicated to 3 channels.
/// Returns (3, size, size).
Tensor<float> load_image(const std::filesystem::path& path, std::size_t size);

/// Decode, nearest-neighbour resize, threshold > 0. Returns (size, size) of 0/1.
Tensor<std::uint8_t> load_mask(const std::filesystem::path& path, std::size_t size);

/// Stack images listed by `paths[order[i]]` for i in [begin, end) into (N,3,size,size).
Tensor<float> load_batch(const std::vector<std::filesystem::path>& paths, const std::vector<std::size_t>& order,
                         std::size_t begin, std::size_t end, std::size_t size);

} // namespace etstpm
