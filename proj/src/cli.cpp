#include "etstpm/cli.hpp"

#include <chrono>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "etstpm/pipeline.hpp"

namespace etstpm {

namespace {

struct Options {
    std::string config, out, data, teacher, student, report, image, map_out, map;
};

RunConfig config_or_default(const std::string& path) {
    return path.empty() ? RunConfig{} : load_run_config(path);
}

int run_command(const std::string& cmd, const Options& o, std::ostream& out) {
    LogFn log = [&](const std::string& line) { out << line << '\n' << std::flush; };

    if (cmd == "synth-data") {
        const RunConfig cfg = load_run_config(o.config);
        const DatasetIndex index = generate_synthetic(cfg.synth, o.out);
        out << "wrote " << index.records.size() << " images (" << index.mask_count() << " masks) in "
            << index.categories.size() << " categories to " << o.out << '\n';
        return kExitOk;
    }
    if (cmd == "finetune") {
        const RunConfig cfg = load_run_config(o.config);
        const DatasetIndex index = index_mvtec(o.data);
        FinetuneResult res = finetune_stage(cfg, index, log);
        save_checkpoint(res.teacher, o.out);
        save_history(o.out, TrainingHistory{res.history, {}});
        out << "saved teacher to " << o.out << '\n';
        return kExitOk;
    }
    if (cmd == "train") {
        const RunConfig cfg = load_run_config(o.config);
        const DatasetIndex index = index_mvtec(o.data);
        const Backbone teacher = load_backbone_for_run(o.teacher, cfg);
        DistillState st = train_stage(cfg, teacher, index, log);
        save_checkpoint(st.student, o.out);
        TrainingHistory h = load_history(o.teacher);
        h.distill_epoch_losses = st.epoch_losses;
        save_history(o.out, h);
        out << "saved student to " << o.out << '\n';
        return kExitOk;
    }
    if (cmd == "eval") {
        const auto start = std::chrono::steady_clock::now();
        const RunConfig cfg = load_run_config(o.config);
        const DatasetIndex index = index_mvtec(o.data);
        const Backbone teacher = load_backbone_for_run(o.teacher, cfg);
        const Backbone student = load_backbone_for_run(o.student, cfg);
        EvalReport eval = evaluate(teacher, student, index, cfg.eval_config());
        for (const auto& w : eval.warnings) std::cerr << "warning: " << w << '\n';
        TrainingHistory h = load_history(o.student);
        if (h.finetune.empty()) h.finetune = load_history(o.teacher).finetune;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const RunReport report = make_report(cfg, std::move(eval), std::move(h), secs);
        write_report(report, o.report);
        out << "mean image AUROC " << report.eval.mean_image_auroc << ", mean pixel AUROC "
            << report.eval.mean_pixel_auroc << '\n';
        return kExitOk;
    }
    if (cmd == "infer") {
        const RunConfig cfg = config_or_default(o.config);
        const Backbone teacher = o.config.empty() ? load_checkpoint(o.teacher) : load_backbone_for_run(o.teacher, cfg);
        const Backbone student = o.config.empty() ? load_checkpoint(o.student) : load_backbone_for_run(o.student, cfg);
        if (!(teacher.config().stage_widths() == student.config().stage_widths()) ||
            teacher.config().input_size != student.config().input_size)
            throw ConfigError("teacher and student checkpoints have different layouts");
        const std::size_t size = teacher.config().input_size;
        Tensor<float> img = load_image(o.image, size);
        img.reshape({1, 3, size, size});
        const auto scored = score_batch(teacher, student, img, cfg.scoring);
        const auto& fused = scored.front().fused;
        write_pfm(o.map_out, FloatMap{fused.width(), fused.height(), fused.values.storage()});
        out << "image score " << scored.front().score << '\n';
        return kExitOk;
    }
    if (cmd == "visualize") {
        const FloatMap map = read_pfm(o.map);
        write_png(o.out, render_heatmap(map, read_png(o.image)));
        return kExitOk;
    }
    return kExitUsage;
}

} // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Student-teacher feature pyramid anomaly detection with a fine-tuned teacher", "etstpm"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth-data", "Generate the synthetic texture-defect dataset");
    synth->add_option("--config", o.config, "Run configuration (JSON)")->required();
    synth->add_option("--out", o.out, "Output directory")->required();

    auto* ft = app.add_subcommand("finetune", "Fine-tune the teacher on category classification");
    ft->add_option("--config", o.config)->required();
    ft->add_option("--data", o.data, "Dataset root (MVTec layout)")->required();
    ft->add_option("--out", o.out, "Teacher checkpoint to write")->required();

    auto* tr = app.add_subcommand("train", "Distill the teacher into a fresh student");
    tr->add_option("--config", o.config)->required();
    tr->add_option("--teacher", o.teacher)->required();
    tr->add_option("--data", o.data)->required();
    tr->add_option("--out", o.out, "Student checkpoint to write")->required();

    auto* ev = app.add_subcommand("eval", "Image- and pixel-level AUROC on the test split");
    ev->add_option("--config", o.config)->required();
    ev->add_option("--teacher", o.teacher)->required();
    ev->add_option("--student", o.student)->required();
    ev->add_option("--data", o.data)->required();
    ev->add_option("--report", o.report)->required();

    auto* inf = app.add_subcommand("infer", "Anomaly map of one image");
    inf->add_option("--config", o.config, "Optional run configuration (scoring section)");
    inf->add_option("--teacher", o.teacher)->required();
    inf->add_option("--student", o.student)->required();
    inf->add_option("--image", o.image)->required();
    inf->add_option("--map-out", o.map_out, "Fused map as a PFM float image")->required();

    auto* vis = app.add_subcommand("visualize", "Heatmap overlay of a fused map");
    vis->add_option("--map", o.map)->required();
    vis->add_option("--image", o.image)->required();
    vis->add_option("--out", o.out, "PNG to write")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back(); // program name
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return run_command(cmd, o, out);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitDataOrConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitDataOrConfig;
    }
}

} // namespace etstpm
