#include "etstpm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "etstpm/rng.hpp"

namespace etstpm {

void FinetuneConfig::validate() const {
    if (batch_size == 0) throw ConfigError("finetune.batch_size must be at least 1");
    if (!(abnormal_fraction >= 0.0 && abnormal_fraction <= 1.0))
        throw ConfigError("finetune.abnormal_fraction must lie in [0, 1]");
    optimizer.validate("finetune");
}

void LabeledDataset::validate() const {
    if (num_classes < 2) throw DataError("classification needs at least 2 classes");
    if (items.empty()) throw DataError("classification dataset is empty");
    for (const auto& it : items)
        if (it.label >= num_classes)
            throw DataError("label " + std::to_string(it.label) + " out of range for " + it.image.string());
}

LabeledDataset finetune_dataset(const DatasetIndex& index, double abnormal_fraction) {
    LabeledDataset ds;
    ds.num_classes = index.categories.size();
    for (const auto& category : index.categories) {
        const std::size_t id = index.class_id(category);
        for (const auto* r : index.select(Split::train, category)) ds.items.push_back({r->image_path, id});
        std::vector<const ImageRecord*> defects;
        for (const auto* r : index.select(Split::test, category))
            if (r->label == Label::defect) defects.push_back(r);
        const auto take = static_cast<std::size_t>(std::floor(abnormal_fraction * static_cast<double>(defects.size())));
        for (std::size_t i = 0; i < take; ++i) ds.items.push_back({defects[i]->image_path, id});
    }
    return ds;
}

template <class T>
double cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels, Tensor<T>* grad) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (grad) *grad = Tensor<T>(logits.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k)
            throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(k) + " classes");
        const T* row = logits.data() + i * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double log_z = mx + std::log(z);
        total += log_z - row[labels[i]];
        if (grad)
            for (std::size_t j = 0; j < k; ++j)
                (*grad)[i * k + j] = static_cast<T>((std::exp(row[j] - log_z) - (j == labels[i] ? 1.0 : 0.0)) /
                                                    static_cast<double>(n));
    }
    return total / static_cast<double>(n);
}

namespace {

std::size_t argmax_row(const Tensor<float>& logits, std::size_t i) {
    const std::size_t k = logits.dim(1);
    const float* row = logits.data() + i * k;
    return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

} // namespace

FinetuneResult run_finetune(Backbone teacher, const LabeledDataset& ds, const FinetuneConfig& cfg,
                            const EpochCallback& on_epoch) {
    cfg.validate();
    ds.validate();
    if (!teacher.has_head() || teacher.num_classes() != ds.num_classes)
        throw StateError("teacher head has " + std::to_string(teacher.num_classes()) + " outputs but the dataset has " +
                         std::to_string(ds.num_classes) + " classes; replace the head first");

    std::vector<std::filesystem::path> paths;
    std::vector<std::size_t> labels;
    for (const auto& it : ds.items) {
        paths.push_back(it.image);
        labels.push_back(it.label);
    }
    const std::size_t size = teacher.config().input_size;
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5348));
    Sgd<float> opt(cfg.optimizer);
    FinetuneResult result{std::move(teacher), {}};
    Backbone& model = result.teacher;
    const TrainableScope original_scope = model.trainable_scope();

    const std::size_t total = cfg.head_warmup_epochs + cfg.full_epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < total; ++epoch) {
        const bool warmup = epoch < cfg.head_warmup_epochs;
        model.set_trainable(warmup ? TrainableScope::head_only : TrainableScope::all);
        const auto order = shuffle_rng.permutation(paths.size());
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            const Tensor<float> batch = load_batch(paths, order, begin, end, size);
            std::vector<std::size_t> batch_labels;
            for (std::size_t i = begin; i < end; ++i) batch_labels.push_back(labels[order[i]]);

            model.zero_grad();
            auto pass = model.forward_train(batch, NormMode::batch, true);
            Tensor<float> dlogits;
            const double loss = cross_entropy(*pass.logits, batch_labels, &dlogits);
            ++step;
            if (!std::isfinite(loss)) throw NumericError("non-finite fine-tuning loss", step);
            for (std::size_t i = 0; i < batch_labels.size(); ++i)
                correct += argmax_row(*pass.logits, i) == batch_labels[i] ? 1 : 0;
            loss_sum += loss * static_cast<double>(end - begin);
            model.backward(pass, {nullptr, nullptr, nullptr}, &dlogits);
            if (const auto bad = opt.step(model))
                throw NumericError("non-finite parameter " + *bad + " after fine-tuning update", step);
        }
        EpochStats st{epoch + 1, warmup ? "head_only" : "all", loss_sum / static_cast<double>(paths.size()),
                      static_cast<double>(correct) / static_cast<double>(paths.size())};
        result.history.push_back(st);
        if (on_epoch) on_epoch(st);
    }
    model.set_trainable(original_scope);
    model.zero_grad();
    return result;
}

double eval_accuracy(const Backbone& b, const LabeledDataset& ds, std::size_t batch_size) {
    ds.validate();
    if (!b.has_head()) throw StateError("backbone has no classification head");
    if (b.num_classes() != ds.num_classes)
        throw StateError("head has " + std::to_string(b.num_classes()) + " outputs, dataset has " +
                         std::to_string(ds.num_classes) + " classes");
    std::vector<std::filesystem::path> paths;
    for (const auto& it : ds.items) paths.push_back(it.image);
    std::vector<std::size_t> order(paths.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t correct = 0;
    const std::size_t bs = std::max<std::size_t>(batch_size, 1);
    for (std::size_t begin = 0; begin < paths.size(); begin += bs) {
        const std::size_t end = std::min(paths.size(), begin + bs);
        const Tensor<float> logits = b.classify(load_batch(paths, order, begin, end, b.config().input_size));
        for (std::size_t i = begin; i < end; ++i) correct += argmax_row(logits, i - begin) == ds.items[i].label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(paths.size());
}

template double cross_entropy(const Tensor<float>&, std::span<const std::size_t>, Tensor<float>*);
template double cross_entropy(const Tensor<double>&, std::span<const std::size_t>, Tensor<double>*);

} // namespace etstpm
