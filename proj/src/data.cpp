#include "etstpm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>

#include "etstpm/errors.hpp"
#include "etstpm/image_io.hpp"
#include "etstpm/resample.hpp"
#include "etstpm/rng.hpp"

namespace fs = std::filesystem;

namespace etstpm {

std::size_t DatasetIndex::class_id(const std::string& category) const {
    auto it = std::find(categories.begin(), categories.end(), category);
    if (it == categories.end()) throw DataError("unknown category " + category);
    return static_cast<std::size_t>(it - categories.begin());
}

std::vector<const ImageRecord*> DatasetIndex::select(Split split) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(&r);
    return out;
}

std::vector<const ImageRecord*> DatasetIndex::select(Split split, const std::string& category) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.split == split && r.category == category) out.push_back(&r);
    return out;
}

std::size_t DatasetIndex::mask_count() const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const ImageRecord& r) { return r.mask_path.has_value(); }));
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool want_dirs) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (want_dirs && e.is_directory()) out.push_back(e.path());
        if (!want_dirs && e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

DatasetIndex index_mvtec(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
    DatasetIndex index;
    for (const auto& cat_dir : sorted_entries(root, true)) {
        const std::string category = cat_dir.filename().string();
        const fs::path train = cat_dir / "train";
        const fs::path test = cat_dir / "test";
        if (!fs::is_directory(train) && !fs::is_directory(test)) continue; // not a category
        std::size_t n_train = 0, n_test = 0;

        for (const auto& sub : sorted_entries(train, true))
            if (sub.filename() != "good")
                throw DataError("training split must contain only 'good' images: " + sub.string());
        for (const auto& img : sorted_entries(train / "good", false)) {
            index.records.push_back({img, category, Split::train, Label::good, std::nullopt, std::nullopt});
            ++n_train;
        }

        for (const auto& sub : sorted_entries(test, true)) {
            const std::string kind = sub.filename().string();
            const bool good = kind == "good";
            std::set<fs::path> expected_masks;
            for (const auto& img : sorted_entries(sub, false)) {
                ImageRecord r{img, category, Split::test, good ? Label::good : Label::defect, std::nullopt, std::nullopt};
                if (!good) {
                    r.defect_type = kind;
                    fs::path mask = cat_dir / "ground_truth" / kind / (img.stem().string() + "_mask.png");
                    if (!fs::is_regular_file(mask))
                        throw DataError("missing ground-truth mask for defect image " + img.string() +
                                        " (expected " + mask.string() + ")");
                    expected_masks.insert(mask);
                    r.mask_path = mask;
                }
                index.records.push_back(std::move(r));
                ++n_test;
            }
            if (!good)
                for (const auto& m : sorted_entries(cat_dir / "ground_truth" / kind, false))
                    if (!expected_masks.contains(m))
                        throw DataError("ground-truth mask without a test image: " + m.string());
        }
        if (n_train == 0 || n_test == 0)
            throw DataError("category " + category + " has no " + (n_train == 0 ? "training" : "test") + " images");
        index.categories.push_back(category);
    }
    if (index.categories.empty()) throw DataError("no categories found under " + root.string());
    return index;
}

// --- synthetic generator -------------------------------------------------

void SynthConfig::validate() const {
    if (categories == 0 || image_size == 0 || train_good_per_cat == 0 || test_good_per_cat == 0 ||
        test_defect_per_cat == 0)
        throw ConfigError("synthetic data counts must all be at least 1");
    if (image_size % 16 != 0) throw ConfigError("synthetic image_size must be a multiple of 16");
    const auto [lo, hi] = defect_area_fraction;
    if (!(lo > 0.0 && lo <= hi && hi <= 0.25))
        throw ConfigError("defect_area_fraction must satisfy 0 < min <= max <= 0.25");
}

TextureKind SynthConfig::texture_of(std::size_t category) {
    switch (category % 3) {
    case 0: return TextureKind::grating;
    case 1: return TextureKind::checker;
    default: return TextureKind::noise;
    }
}

std::string SynthConfig::category_name(std::size_t category) {
    static constexpr const char* kinds[] = {"grating", "checker", "noise"};
    char buf[64];
    std::snprintf(buf, sizeof buf, "cat%02zu_%s", category, kinds[category % 3]);
    return buf;
}

namespace {

using Plane = std::vector<double>;

struct CategoryStyle {
    TextureKind kind;
    double angle;  // grating orientation
    double period; // grating period / checker cell size
    std::array<double, 3> tint;
};

CategoryStyle style_for(std::size_t category, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 1000 + category));
    CategoryStyle s;
    s.kind = SynthConfig::texture_of(category);
    s.angle = rng.uniform(0.0, std::numbers::pi);
    s.period = s.kind == TextureKind::grating ? rng.uniform(7.0, 10.0) : rng.uniform(6.0, 9.0);
    static constexpr std::array<std::array<double, 3>, 3> tints{{{1.0, 0.8, 0.55}, {0.6, 0.95, 0.7}, {0.7, 0.75, 1.0}}};
    s.tint = tints[category % 3];
    for (auto& t : s.tint) t = std::clamp(t + rng.uniform(-0.05, 0.05), 0.3, 1.0);
    return s;
}

Plane blurred_noise(Rng& rng, std::size_t n, double sigma) {
    Plane white(n * n);
    for (auto& v : white) v = rng.normal();
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) ksum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= ksum;
    auto wrap = [n](long i) { return static_cast<std::size_t>((i % static_cast<long>(n) + static_cast<long>(n)) % static_cast<long>(n)); };
    Plane tmp(n * n, 0.0), out(n * n, 0.0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            for (int i = -radius; i <= radius; ++i) tmp[y * n + x] += k[i + radius] * white[y * n + wrap(static_cast<long>(x) + i)];
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            for (int i = -radius; i <= radius; ++i) out[y * n + x] += k[i + radius] * tmp[wrap(static_cast<long>(y) + i) * n + x];
    double mean = 0.0, sq = 0.0;
    for (double v : out) mean += v;
    mean /= static_cast<double>(out.size());
    for (double v : out) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(out.size()));
    for (auto& v : out) v = (v - mean) / sd;
    return out;
}

// Intensity texture in roughly [0, 1]. `disrupted` renders the variant used
// inside defects: rotated / phase-flipped grating, half-size checker, finer noise.
Plane render_texture(const CategoryStyle& st, Rng& rng, std::size_t n, bool disrupted) {
    Plane p(n * n);
    switch (st.kind) {
    case TextureKind::grating: {
        double angle = st.angle + rng.uniform(-0.12, 0.12);
        const double period = st.period * rng.uniform(0.93, 1.07);
        double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        if (disrupted) angle += std::numbers::pi / 2.0;
        const double c = std::cos(angle), s = std::sin(angle);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x)
                p[y * n + x] = 0.5 + 0.22 * std::sin(2.0 * std::numbers::pi * (x * c + y * s) / period + phase);
        break;
    }
    case TextureKind::checker: {
        double cell = st.period * rng.uniform(0.93, 1.07);
        if (disrupted) cell *= 0.4;
        const double ox = rng.uniform(0.0, 2.0 * cell), oy = rng.uniform(0.0, 2.0 * cell);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const long a = static_cast<long>(std::floor((x + ox) / cell));
                const long b = static_cast<long>(std::floor((y + oy) / cell));
                p[y * n + x] = ((a + b) % 2 == 0) ? 0.64 : 0.36;
            }
        break;
    }
    case TextureKind::noise: {
        const Plane z = blurred_noise(rng, n, disrupted ? 0.6 : 2.0);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.5 + 0.15 * z[i];
        break;
    }
    }
    return p;
}

// Ellipse or rectangle with area close to `fraction` of the image; pixel
// centres inside the shape belong to the mask.
std::vector<std::uint8_t> defect_shape(Rng& rng, std::size_t n, bool ellipse, double fraction) {
    const double area = fraction * static_cast<double>(n * n);
    const double aspect = rng.uniform(0.5, 2.0);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    double a, b;
    if (ellipse) {
        a = std::sqrt(area * aspect / std::numbers::pi);
        b = std::sqrt(area / (std::numbers::pi * aspect));
    } else {
        a = 0.5 * std::sqrt(area * aspect);
        b = 0.5 * std::sqrt(area / aspect);
    }
    const double ext = std::max(a, b) + 1.0;
    const double cx = rng.uniform(ext, static_cast<double>(n) - ext);
    const double cy = rng.uniform(ext, static_cast<double>(n) - ext);
    const double c = std::cos(theta), s = std::sin(theta);
    std::vector<std::uint8_t> mask(n * n, 0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double u = dx * c + dy * s, v = -dx * s + dy * c;
            const bool inside = ellipse ? (u * u) / (a * a) + (v * v) / (b * b) <= 1.0
                                        : std::abs(u) <= a && std::abs(v) <= b;
            mask[y * n + x] = inside ? 1 : 0;
        }
    return mask;
}

Image8 to_rgb(const Plane& intensity, const CategoryStyle& st, Rng& rng, std::size_t n) {
    Image8 img{n, n, 3, std::vector<std::uint8_t>(n * n * 3)};
    for (std::size_t i = 0; i < n * n; ++i) {
        const double v = intensity[i] + 0.02 * rng.normal();
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double out = std::clamp(0.1 + 0.85 * v * st.tint[ch], 0.0, 1.0);
            img.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(out * 255.0));
        }
    }
    return img;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

std::string numbered(std::size_t i, const char* suffix) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu%s", i, suffix);
    return buf;
}

} // namespace

SyntheticDefect render_synthetic_defect(const SynthConfig& cfg, std::size_t category, std::size_t i) {
    cfg.validate();
    const std::size_t n = cfg.image_size;
    const CategoryStyle st = style_for(category, cfg.seed);
    Rng rng(derive_seed(cfg.seed, (category << 40) ^ (std::uint64_t{3} << 32) ^ i));
    const bool ellipse = i % 2 == 0;

    const Plane clean = render_texture(st, rng, n, false);
    const Plane inner = render_texture(st, rng, n, true);
    std::vector<std::uint8_t> mask;
    for (int attempt = 0;; ++attempt) {
        const double target = rng.uniform(cfg.defect_area_fraction[0], cfg.defect_area_fraction[1]);
        mask = defect_shape(rng, n, ellipse, target);
        const double frac = static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(n * n);
        if (frac >= cfg.defect_area_fraction[0] && frac <= cfg.defect_area_fraction[1]) break;
        if (attempt > 1000) throw ConfigError("cannot place a defect with the requested area fraction");
    }
    const double shift = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.28, 0.40);
    Plane defective = clean;
    for (std::size_t p = 0; p < n * n; ++p)
        if (mask[p]) defective[p] = inner[p] + shift;

    Rng pixel_noise = rng; // the clean twin shares the pixel noise
    SyntheticDefect out;
    out.type = ellipse ? "blob" : "patch";
    out.defective = to_rgb(defective, st, rng, n);
    out.clean = to_rgb(clean, st, pixel_noise, n);
    out.mask = std::move(mask);
    return out;
}

DatasetIndex generate_synthetic(const SynthConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const std::size_t n = cfg.image_size;
    ensure_dir(out_dir);
    for (std::size_t c = 0; c < cfg.categories; ++c) {
        const CategoryStyle st = style_for(c, cfg.seed);
        const fs::path cat = out_dir / SynthConfig::category_name(c);
        ensure_dir(cat / "train" / "good");
        ensure_dir(cat / "test" / "good");

        auto image_rng = [&](std::uint64_t group, std::size_t i) {
            return Rng(derive_seed(cfg.seed, (c << 40) ^ (group << 32) ^ i));
        };
        for (std::size_t i = 0; i < cfg.train_good_per_cat; ++i) {
            Rng rng = image_rng(1, i);
            write_png(cat / "train" / "good" / numbered(i, ".png"), to_rgb(render_texture(st, rng, n, false), st, rng, n));
        }
        for (std::size_t i = 0; i < cfg.test_good_per_cat; ++i) {
            Rng rng = image_rng(2, i);
            write_png(cat / "test" / "good" / numbered(i, ".png"), to_rgb(render_texture(st, rng, n, false), st, rng, n));
        }
        std::map<std::string, std::size_t> per_type;
        for (std::size_t i = 0; i < cfg.test_defect_per_cat; ++i) {
            const SyntheticDefect d = render_synthetic_defect(cfg, c, i);
            const std::size_t k = per_type[d.type]++;
            ensure_dir(cat / "test" / d.type);
            ensure_dir(cat / "ground_truth" / d.type);
            write_png(cat / "test" / d.type / numbered(k, ".png"), d.defective);
            Image8 m{n, n, 1, std::vector<std::uint8_t>(n * n)};
            for (std::size_t p = 0; p < n * n; ++p) m.pixels[p] = d.mask[p] ? 255 : 0;
            write_png(cat / "ground_truth" / d.type / numbered(k, "_mask.png"), m);
        }
    }
    return index_mvtec(out_dir);
}

// --- loaders --------------------------------------------------------------

Tensor<float> load_image(const fs::path& path, std::size_t size) {
    const Image8 img = read_png(path);
    if (img.width == 0 || img.height == 0) throw IoError("empty image " + path.string());
    Tensor<float> out({3, size, size});
    std::vector<float> plane(img.width * img.height), resized(size * size);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t src_ch = img.channels == 1 ? 0 : ch;
        for (std::size_t i = 0; i < plane.size(); ++i)
            plane[i] = static_cast<float>(img.pixels[i * img.channels + src_ch]) / 255.0f;
        resize_bilinear_plane(plane.data(), img.height, img.width, resized.data(), size, size);
        float* dst = out.data() + ch * size * size;
        for (std::size_t i = 0; i < resized.size(); ++i) dst[i] = (resized[i] - kChannelMean[ch]) / kChannelStd[ch];
    }
    return out;
}

Tensor<std::uint8_t> load_mask(const fs::path& path, std::size_t size) {
    const Image8 img = read_png(path);
    std::vector<std::uint8_t> bin(img.width * img.height);
    for (std::size_t i = 0; i < bin.size(); ++i) {
        bool on = false;
        for (std::size_t ch = 0; ch < img.channels; ++ch) on = on || img.pixels[i * img.channels + ch] > 0;
        bin[i] = on ? 1 : 0;
    }
    Tensor<std::uint8_t> out({size, size});
    resize_nearest_plane(bin.data(), img.height, img.width, out.data(), size, size);
    return out;
}

Tensor<float> load_batch(const std::vector<fs::path>& paths, const std::vector<std::size_t>& order,
                         std::size_t begin, std::size_t end, std::size_t size) {
    const std::size_t per = 3 * size * size;
    Tensor<float> batch({end - begin, 3, size, size});
    for (std::size_t i = begin; i < end; ++i) {
        const Tensor<float> img = load_image(paths.at(order.at(i)), size);
        std::copy(img.data(), img.data() + per, batch.data() + (i - begin) * per);
    }
    return batch;
}

} // namespace etstpm
