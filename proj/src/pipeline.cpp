#include "etstpm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "etstpm/calibration.hpp"
#include "etstpm/resample.hpp"
#include "etstpm/rng.hpp"

namespace etstpm {

Backbone initial_teacher(const RunConfig& cfg, std::size_t num_classes) {
    Backbone teacher = build_backbone(cfg.backbone, cfg.seed);
    teacher.replace_head(num_classes, derive_seed(cfg.finetune.seed, 0x48));
    return teacher;
}

FinetuneResult finetune_stage(const RunConfig& cfg, const DatasetIndex& index, const LogFn& log) {
    const LabeledDataset ds = finetune_dataset(index, cfg.finetune.abnormal_fraction);
    std::vector<std::filesystem::path> images;
    for (const auto& it : ds.items) images.push_back(it.image);
    Backbone teacher = initial_teacher(cfg, ds.num_classes);
    if (cfg.finetune.calibrate_norm_stats) calibrate_norm_stats(teacher, images, cfg.finetune.batch_size, cfg.finetune.seed);
    FinetuneResult res = run_finetune(std::move(teacher), ds, cfg.finetune, [&](const EpochStats& st) {
        if (!log) return;
        std::ostringstream os;
        os << "finetune epoch " << st.epoch << " [" << st.phase << "] loss " << st.mean_loss << " accuracy "
           << st.accuracy;
        log(os.str());
    });
    if (cfg.finetune.calibrate_norm_stats && !res.history.empty())
        calibrate_norm_stats(res.teacher, images, cfg.finetune.batch_size, cfg.finetune.seed);
    return res;
}

std::vector<std::filesystem::path> normal_training_images(const DatasetIndex& index) {
    std::vector<std::filesystem::path> out;
    for (const auto* r : index.select(Split::train)) {
        if (r->label != Label::good) throw DataError("training split holds a defect image: " + r->image_path.string());
        out.push_back(r->image_path);
    }
    return out;
}

DistillState train_stage(const RunConfig& cfg, const Backbone& teacher, const DatasetIndex& index, const LogFn& log) {
    return train_student(teacher, normal_training_images(index), cfg.train_config(), [&](std::size_t epoch, double loss) {
        if (!log) return;
        std::ostringstream os;
        os << "distill epoch " << epoch << " loss " << loss;
        log(os.str());
    });
}

Backbone load_backbone_for_run(const std::filesystem::path& path, const RunConfig& cfg) {
    const BackboneConfig stored = checkpoint_config(path);
    const BackboneConfig& want = cfg.backbone;
    auto mismatch = [&](const std::string& what) {
        throw ConfigError("checkpoint " + path.string() + " does not match the configured backbone: " + what);
    };
    if (stored.input_size != want.input_size) mismatch("input_size");
    if (stored.stem_width() != want.stem_width()) mismatch("stem width");
    if (stored.stage_widths() != want.stage_widths()) mismatch("stage widths");
    if (stored.blocks_per_stage != want.blocks_per_stage) mismatch("blocks_per_stage");
    if (stored.include_stage4_for_finetune != want.include_stage4_for_finetune) mismatch("include_stage4_for_finetune");
    return load_checkpoint(path, stored);
}

std::filesystem::path history_path(const std::filesystem::path& checkpoint) {
    return std::filesystem::path(checkpoint.string() + ".history.json");
}

void save_history(const std::filesystem::path& checkpoint, const TrainingHistory& h) {
    std::ofstream out(history_path(checkpoint), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + history_path(checkpoint).string());
    out << history_to_json(h).dump(2) << "\n";
}

TrainingHistory load_history(const std::filesystem::path& checkpoint) {
    std::ifstream in(history_path(checkpoint), std::ios::binary);
    if (!in) return {};
    try {
        return history_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed history file " + history_path(checkpoint).string() + ": " + e.what());
    }
}

RunReport make_report(const RunConfig& cfg, EvalReport eval, TrainingHistory history,
                      std::optional<double> wall_clock_seconds) {
    RunReport r;
    r.eval = std::move(eval);
    r.history = std::move(history);
    r.config = to_json(cfg);
    r.seed = cfg.seed;
    if (cfg.record_wall_clock) r.wall_clock_seconds = wall_clock_seconds;
    return r;
}

std::array<std::uint8_t, 3> heat_colour(double t) {
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    return {static_cast<std::uint8_t>(std::lround(255.0 * t)), 0, static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)))};
}

Image8 render_heatmap(const FloatMap& map, const Image8& image) {
    const std::size_t w = map.width, h = map.height;
    if (w == 0 || h == 0) throw DataError("empty anomaly map");
    std::vector<float> rgb[3];
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<float> plane(image.width * image.height);
        const std::size_t src_c = image.channels == 1 ? 0 : c;
        for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = image.pixels[i * image.channels + src_c];
        rgb[c].resize(w * h);
        resize_bilinear_plane(plane.data(), image.height, image.width, rgb[c].data(), h, w);
    }
    const float peak = *std::max_element(map.values.begin(), map.values.end());
    Image8 out{w, h, 3, std::vector<std::uint8_t>(w * h * 3)};
    for (std::size_t i = 0; i < w * h; ++i) {
        const double t = peak > 0.0f ? map.values[i] / peak : 0.0;
        const auto col = heat_colour(t);
        for (std::size_t c = 0; c < 3; ++c)
            out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(0.5 * rgb[c][i] + 0.5 * col[c], 0.0, 255.0)));
    }
    return out;
}

} // namespace etstpm
