#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "etstpm/backbone.hpp"

namespace etstpm {

/// Averages batch statistics over `images` into the running statistics of
/// every batch-norm layer. Batches of `batch_size` follow a permutation
/// seeded by `seed`, so each batch mixes the dataset the way training
/// batches do (an index-ordered pass would see one category per batch).
void calibrate_norm_stats(Backbone& b, const std::vector<std::filesystem::path>& images, std::size_t batch_size,
                          std::uint64_t seed = 0);

} // namespace etstpm
