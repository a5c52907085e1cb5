#include "etstpm/run_config.hpp"

#include <fstream>
#include <set>

namespace etstpm {

using nlohmann::json;

void RunConfig::validate() const {
    backbone.validate();
    finetune.validate();
    train_config().validate();
    synth.validate();
    if (eval_batch_size == 0) throw ConfigError("eval.batch_size must be at least 1");
    if (scoring.top_k == 0) throw ConfigError("scoring.top_k must be at least 1");
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t = distill;
    t.weights = scoring.weights;
    return t;
}

namespace {

// Reads keys of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("invalid value for " + qualified(key) + ": " + e.what());
        }
    }

    void get_unsigned(const char* key, std::size_t& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        const json& v = obj_.at(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw ConfigError(qualified(key) + " must be a non-negative integer");
        out = v.get<std::size_t>();
    }

    void get_seed(const char* key, std::uint64_t& out) {
        std::size_t v = out;
        get_unsigned(key, v);
        out = v;
    }

    void get_number(const char* key, double& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        if (!obj_.at(key).is_number()) throw ConfigError(qualified(key) + " must be a number");
        out = obj_.at(key).get<double>();
    }

    std::optional<Section> child(const char* key) {
        seen_.insert(key);
        if (!obj_.contains(key)) return std::nullopt;
        return Section(obj_.at(key), qualified(key));
    }

    bool has(const char* key) const { return obj_.contains(key); }

    void finish() const {
        for (const auto& [k, v] : obj_.items())
            if (!seen_.contains(k)) throw ConfigError("unknown configuration key " + qualified(k.c_str()));
    }

private:
    std::string where() const { return path_.empty() ? "configuration" : path_; }
    std::string qualified(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace

RunConfig parse_run_config(const json& doc) {
    RunConfig cfg;
    Section root(doc, "");
    root.get_seed("seed", cfg.seed);

    if (auto s = root.child("backbone")) {
        auto& b = cfg.backbone;
        s->get_unsigned("input_size", b.input_size);
        s->get_unsigned("stem_channels", b.stem_channels);
        if (s->has("block_channels")) {
            std::vector<std::size_t> v;
            s->get("block_channels", v);
            if (v.size() != 3) throw ConfigError("backbone.block_channels must list exactly 3 counts");
            b.block_channels = {v[0], v[1], v[2]};
        } else {
            std::vector<std::size_t> unused;
            s->get("block_channels", unused);
        }
        s->get_unsigned("blocks_per_stage", b.blocks_per_stage);
        s->get_unsigned("num_classes", b.num_classes);
        s->get_number("depth_scale", b.depth_scale);
        s->get("include_stage4_for_finetune", b.include_stage4_for_finetune);
        s->finish();
    }
    if (auto s = root.child("finetune")) {
        auto& f = cfg.finetune;
        s->get_unsigned("head_warmup_epochs", f.head_warmup_epochs);
        s->get_unsigned("full_epochs", f.full_epochs);
        s->get_number("learning_rate", f.optimizer.learning_rate);
        s->get_number("momentum", f.optimizer.momentum);
        s->get_number("weight_decay", f.optimizer.weight_decay);
        s->get_unsigned("batch_size", f.batch_size);
        s->get_seed("seed", f.seed);
        s->get_number("abnormal_fraction", f.abnormal_fraction);
        s->get("calibrate_norm_stats", f.calibrate_norm_stats);
        s->finish();
    }
    if (auto s = root.child("distill")) {
        auto& d = cfg.distill;
        s->get_unsigned("epochs", d.epochs);
        s->get_number("learning_rate", d.optimizer.learning_rate);
        s->get_number("momentum", d.optimizer.momentum);
        s->get_number("weight_decay", d.optimizer.weight_decay);
        s->get_unsigned("batch_size", d.batch_size);
        s->get_seed("seed", d.seed);
        std::string norm = to_string(d.student_norm);
        s->get("student_norm", norm);
        s->get("calibrate_student_norm", d.calibrate_student_norm);
        d.student_norm = parse_norm_mode(norm);
        std::size_t cache_mb = d.feature_cache_bytes >> 20;
        s->get_unsigned("feature_cache_mb", cache_mb);
        d.feature_cache_bytes = cache_mb << 20;
        s->finish();
    }
    if (auto s = root.child("scoring")) {
        auto& sc = cfg.scoring;
        std::string fusion = to_string(sc.fusion), stat = to_string(sc.statistic);
        s->get("fusion", fusion);
        s->get("image_score", stat);
        sc.fusion = parse_fusion_mode(fusion);
        sc.statistic = parse_image_statistic(stat);
        s->get_unsigned("top_k", sc.top_k);
        s->get_number("lambda_l1", sc.weights.lambda_l1);
        s->get_number("lambda_cos", sc.weights.lambda_cos);
        s->finish();
    }
    if (auto s = root.child("data")) {
        if (s->has("root")) {
            std::string r;
            s->get("root", r);
            cfg.data_root = r;
        } else {
            std::string unused;
            s->get("root", unused);
        }
        if (auto y = s->child("synth")) {
            auto& sy = cfg.synth;
            y->get_unsigned("categories", sy.categories);
            y->get_unsigned("image_size", sy.image_size);
            y->get_unsigned("train_good_per_cat", sy.train_good_per_cat);
            y->get_unsigned("test_good_per_cat", sy.test_good_per_cat);
            y->get_unsigned("test_defect_per_cat", sy.test_defect_per_cat);
            y->get_number("defect_area_min", sy.defect_area_fraction[0]);
            y->get_number("defect_area_max", sy.defect_area_fraction[1]);
            y->get_seed("seed", sy.seed);
            y->finish();
        }
        s->finish();
    }
    if (auto s = root.child("eval")) {
        s->get_unsigned("batch_size", cfg.eval_batch_size);
        s->get("record_wall_clock", cfg.record_wall_clock);
        s->finish();
    }
    root.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open configuration " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse configuration " + path.string() + ": " + e.what());
    }
    return parse_run_config(doc);
}

json to_json(const RunConfig& cfg) {
    const auto& b = cfg.backbone;
    const auto& f = cfg.finetune;
    const auto& d = cfg.distill;
    const auto& sc = cfg.scoring;
    const auto& sy = cfg.synth;
    json data = {{"synth",
                  {{"categories", sy.categories},
                   {"image_size", sy.image_size},
                   {"train_good_per_cat", sy.train_good_per_cat},
                   {"test_good_per_cat", sy.test_good_per_cat},
                   {"test_defect_per_cat", sy.test_defect_per_cat},
                   {"defect_area_min", sy.defect_area_fraction[0]},
                   {"defect_area_max", sy.defect_area_fraction[1]},
                   {"seed", sy.seed}}}};
    if (cfg.data_root) data["root"] = cfg.data_root->string();
    return {
        {"seed", cfg.seed},
        {"backbone",
         {{"input_size", b.input_size},
          {"stem_channels", b.stem_channels},
          {"block_channels", b.block_channels},
          {"blocks_per_stage", b.blocks_per_stage},
          {"num_classes", b.num_classes},
          {"depth_scale", b.depth_scale},
          {"include_stage4_for_finetune", b.include_stage4_for_finetune}}},
        {"finetune",
         {{"head_warmup_epochs", f.head_warmup_epochs},
          {"full_epochs", f.full_epochs},
          {"learning_rate", f.optimizer.learning_rate},
          {"momentum", f.optimizer.momentum},
          {"weight_decay", f.optimizer.weight_decay},
          {"batch_size", f.batch_size},
          {"seed", f.seed},
          {"abnormal_fraction", f.abnormal_fraction},
          {"calibrate_norm_stats", f.calibrate_norm_stats}}},
        {"distill",
         {{"epochs", d.epochs},
          {"learning_rate", d.optimizer.learning_rate},
          {"momentum", d.optimizer.momentum},
          {"weight_decay", d.optimizer.weight_decay},
          {"batch_size", d.batch_size},
          {"seed", d.seed},
          {"student_norm", to_string(d.student_norm)},
          {"calibrate_student_norm", d.calibrate_student_norm},
          {"feature_cache_mb", d.feature_cache_bytes >> 20}}},
        {"scoring",
         {{"fusion", to_string(sc.fusion)},
          {"image_score", to_string(sc.statistic)},
          {"top_k", sc.top_k},
          {"lambda_l1", sc.weights.lambda_l1},
          {"lambda_cos", sc.weights.lambda_cos}}},
        {"data", data},
        {"eval", {{"batch_size", cfg.eval_batch_size}, {"record_wall_clock", cfg.record_wall_clock}}},
    };
}

} // namespace etstpm
