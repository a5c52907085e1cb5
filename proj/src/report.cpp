#include "etstpm/report.hpp"

#include <fstream>
#include <sstream>

namespace etstpm {

using nlohmann::json;

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace

json history_to_json(const TrainingHistory& h) {
    json ft = json::array();
    for (const auto& e : h.finetune)
        ft.push_back({{"epoch", e.epoch}, {"phase", e.phase}, {"mean_loss", e.mean_loss}, {"accuracy", e.accuracy}});
    return {{"finetune", ft}, {"distill_epoch_losses", h.distill_epoch_losses}};
}

TrainingHistory history_from_json(const json& j) {
    TrainingHistory h;
    if (j.contains("finetune"))
        for (const auto& e : j.at("finetune"))
            h.finetune.push_back({e.at("epoch").get<std::size_t>(), e.at("phase").get<std::string>(),
                                  e.at("mean_loss").get<double>(), e.at("accuracy").get<double>()});
    if (j.contains("distill_epoch_losses")) h.distill_epoch_losses = j.at("distill_epoch_losses").get<std::vector<double>>();
    return h;
}

std::string serialize_report(const RunReport& r) {
    json cats = json::array();
    for (const auto& c : r.eval.per_category)
        cats.push_back({{"category", c.category},
                        {"image_auroc", optional_number(c.image_auroc)},
                        {"pixel_auroc", optional_number(c.pixel_auroc)},
                        {"n_images", c.n_images}});
    json doc = {{"tool", "etstpm"},
                {"tool_version", r.tool_version},
                {"seed", r.seed},
                {"config", r.config},
                {"per_category", cats},
                {"mean_image_auroc", r.eval.mean_image_auroc},
                {"mean_pixel_auroc", r.eval.mean_pixel_auroc},
                {"warnings", r.eval.warnings},
                {"history", history_to_json(r.history)}};
    if (r.wall_clock_seconds) doc["wall_clock_seconds"] = *r.wall_clock_seconds;
    return doc.dump(2) + "\n";
}

RunReport parse_report(const std::string& text) {
    RunReport r;
    try {
        const json doc = json::parse(text);
        r.tool_version = doc.at("tool_version").get<std::string>();
        r.seed = doc.at("seed").get<std::uint64_t>();
        r.config = doc.at("config");
        for (const auto& c : doc.at("per_category"))
            r.eval.per_category.push_back({c.at("category").get<std::string>(), read_optional(c.at("image_auroc")),
                                           read_optional(c.at("pixel_auroc")), c.at("n_images").get<std::size_t>()});
        r.eval.mean_image_auroc = doc.at("mean_image_auroc").get<double>();
        r.eval.mean_pixel_auroc = doc.at("mean_pixel_auroc").get<double>();
        r.eval.warnings = doc.at("warnings").get<std::vector<std::string>>();
        r.history = history_from_json(doc.at("history"));
        if (doc.contains("wall_clock_seconds")) r.wall_clock_seconds = doc.at("wall_clock_seconds").get<double>();
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
    return r;
}

void write_report(const RunReport& report, const std::filesystem::path& path) {
    const std::string text = serialize_report(report);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report " + path.string());
    out << text;
    if (!out) throw IoError("cannot write report " + path.string());
}

RunReport read_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open report " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_report(ss.str());
}

} // namespace etstpm
