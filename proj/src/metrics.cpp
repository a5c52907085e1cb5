#include "etstpm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace etstpm {

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size())
        throw ShapeError("auroc: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) +
                         " labels");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (auto l : labels) n_pos += l ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUROC undefined: labels contain a single class");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Ranks are 1-based; a tie group spanning ranks [i+1, j] gets (i+1+j)/2.
    // Doubled ranks stay integral, so the whole statistic is integer arithmetic.
    std::uint64_t pos_rank2 = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const std::uint64_t rank2 = i + 1 + j;
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) pos_rank2 += rank2;
        i = j;
    }
    const std::uint64_t u2 = pos_rank2 - std::uint64_t{n_pos} * (n_pos + 1);
    const std::uint64_t den = 2 * std::uint64_t{n_pos} * n_neg;

    // Round u2/den to a multiple of 2^-52, ties to even. On that grid both a
    // and 1 - a are representable, so negating tie-free scores gives exactly
    // the complement.
    using u128 = unsigned __int128;
    const u128 num = static_cast<u128>(u2) << 52;
    u128 q = num / den;
    const u128 rem2 = 2 * (num % den);
    if (rem2 > den || (rem2 == den && (q & 1))) ++q;
    return std::ldexp(static_cast<double>(static_cast<std::uint64_t>(q)), -52);
}

double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<Tensor<std::uint8_t>>& masks) {
    if (maps.size() != masks.size())
        throw ShapeError("pixel_auroc: " + std::to_string(maps.size()) + " maps vs " + std::to_string(masks.size()) +
                         " masks");
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].values.shape() != masks[i].shape())
            throw ShapeError("pixel_auroc: map " + shape_str(maps[i].values.shape()) + " vs mask " +
                             shape_str(masks[i].shape()));
        scores.insert(scores.end(), maps[i].values.storage().begin(), maps[i].values.storage().end());
        for (auto m : masks[i].storage()) labels.push_back(m ? 1 : 0);
    }
    return auroc(scores, labels);
}

void EvalReport::finalize() {
    double si = 0.0, sp = 0.0;
    std::size_t ni = 0, np = 0;
    for (const auto& c : per_category) {
        if (c.image_auroc) {
            si += *c.image_auroc;
            ++ni;
        }
        if (c.pixel_auroc) {
            sp += *c.pixel_auroc;
            ++np;
        }
    }
    mean_image_auroc = ni ? si / static_cast<double>(ni) : 0.0;
    mean_pixel_auroc = np ? sp / static_cast<double>(np) : 0.0;
}

std::vector<ScoredRecord> score_category(const Backbone& teacher, const Backbone& student, const DatasetIndex& index,
                                         const std::string& category, const EvalConfig& cfg) {
    const std::size_t size = teacher.config().input_size;
    const auto records = index.select(Split::test, category);
    std::vector<std::filesystem::path> paths;
    for (const auto* r : records) {
        if (r->label == Label::defect && !r->mask_path)
            throw DataError("defect image without a ground-truth mask: " + r->image_path.string());
        paths.push_back(r->image_path);
    }
    std::vector<std::size_t> order(paths.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<ScoredRecord> out;
    const std::size_t bs = std::max<std::size_t>(cfg.batch_size, 1);
    for (std::size_t begin = 0; begin < paths.size(); begin += bs) {
        const std::size_t end = std::min(paths.size(), begin + bs);
        const Tensor<float> batch = load_batch(paths, order, begin, end, size);
        auto scored = score_batch(teacher, student, batch, cfg.scoring);
        for (std::size_t i = begin; i < end; ++i) {
            ScoredRecord sr;
            sr.record = records[i];
            sr.fused = std::move(scored[i - begin].fused);
            sr.score = scored[i - begin].score;
            sr.mask = records[i]->mask_path ? load_mask(*records[i]->mask_path, size)
                                            : Tensor<std::uint8_t>({size, size});
            out.push_back(std::move(sr));
        }
    }
    return out;
}

EvalReport evaluate(const Backbone& teacher, const Backbone& student, const DatasetIndex& index,
                    const EvalConfig& cfg) {
    EvalReport report;
    for (const auto& category : index.categories) {
        const auto scored = score_category(teacher, student, index, category, cfg);
        CategoryResult res;
        res.category = category;
        res.n_images = scored.size();
        std::vector<double> scores;
        std::vector<std::uint8_t> labels;
        std::vector<AnomalyMap> maps;
        std::vector<Tensor<std::uint8_t>> masks;
        for (const auto& s : scored) {
            scores.push_back(s.score);
            labels.push_back(s.record->label == Label::defect ? 1 : 0);
            maps.push_back(s.fused);
            masks.push_back(s.mask);
        }
        try {
            res.image_auroc = auroc(scores, labels);
        } catch (const UndefinedMetricError& e) {
            report.warnings.push_back(category + ": image AUROC excluded from mean: " + e.what());
        }
        try {
            res.pixel_auroc = pixel_auroc(maps, masks);
        } catch (const UndefinedMetricError& e) {
            report.warnings.push_back(category + ": pixel AUROC excluded from mean: " + e.what());
        }
        report.per_category.push_back(std::move(res));
    }
    report.finalize();
    return report;
}

} // namespace etstpm
