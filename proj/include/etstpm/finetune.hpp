#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "etstpm/backbone.hpp"
#include "etstpm/data.hpp"
#include "etstpm/optim.hpp"

namespace etstpm {

/// Two-phase schedule: head only (body frozen) for head_warmup_epochs, then
/// every layer for full_epochs.
struct FinetuneConfig {
    std::size_t head_warmup_epochs = 1;
    std::size_t full_epochs = 2;
    SgdConfig optimizer{0.01, 0.9, 1e-4};
    std::size_t batch_size = 32;
    std::uint64_t seed = 11;
    // Share of each category's defect test images added to the classification set.
    double abnormal_fraction = 0.2;
    // Re-estimate batch-norm running statistics on the classification set
    // before the first and after the last epoch (see calibrate_norm_stats).
    bool calibrate_norm_stats = true;

    void validate() const;
    friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct LabeledItem {
    std::filesystem::path image;
    std::size_t label = 0;
};

struct LabeledDataset {
    std::vector<LabeledItem> items;
    std::size_t num_classes = 0;

    void validate() const;
};

/// Category-classification set: every training image plus the first
/// `abnormal_fraction` of each category's defect images, all labeled by category.
LabeledDataset finetune_dataset(const DatasetIndex& index, double abnormal_fraction);

struct EpochStats {
    std::size_t epoch = 0; // 1-based, counted across both phases
    std::string phase;     // "head_only" or "all"
    double mean_loss = 0.0;
    double accuracy = 0.0; // running training accuracy over the epoch

    friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct FinetuneResult {
    Backbone teacher;
    std::vector<EpochStats> history;
};

/// Mean over the batch of -log softmax(logits)[label]. When `grad` is given
/// it receives d(loss)/d(logits).
template <class T>
double cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels, Tensor<T>* grad = nullptr);

using EpochCallback = std::function<void(const EpochStats&)>;

FinetuneResult run_finetune(Backbone teacher, const LabeledDataset& ds, const FinetuneConfig& cfg,
                            const EpochCallback& on_epoch = {});

/// Fraction of items whose argmax logit equals the label (inference mode).
double eval_accuracy(const Backbone& b, const LabeledDataset& ds, std::size_t batch_size = 32);

} // namespace etstpm
