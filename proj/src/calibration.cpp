#include "etstpm/calibration.hpp"

#include <algorithm>

#include "etstpm/data.hpp"
#include "etstpm/rng.hpp"

namespace etstpm {

void calibrate_norm_stats(Backbone& b, const std::vector<std::filesystem::path>& images, std::size_t batch_size,
                          std::uint64_t seed) {
    if (images.size() < 2) throw DataError("calibrating normalization statistics needs at least two images");
    const std::size_t bs = std::max<std::size_t>(batch_size, 2);
    std::vector<std::size_t> bounds;
    for (std::size_t begin = 0; begin < images.size(); begin += bs) bounds.push_back(begin);
    bounds.push_back(images.size());
    // a single trailing image has no batch variance: fold it into the previous batch
    if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1)
        bounds.erase(bounds.end() - 2);
    const std::vector<std::size_t> order = Rng(derive_seed(seed, 0x424e)).permutation(images.size());
    b.calibrate_norm_stats(
        [&](std::size_t k) { return load_batch(images, order, bounds[k], bounds[k + 1], b.config().input_size); },
        bounds.size() - 1);
}

} // namespace etstpm
