#pragma once

#include <cstdint>

#include "sssm/types.hpp"

namespace sssm {

/// Median wall time in seconds of featurize() on `batch` random sequences of
/// length L with d_in channels against a K-filter Primary bank. The bank is
/// built once, outside the timed region.
double median_featurize_seconds(Eigen::Index L, Eigen::Index K, Eigen::Index d_in, std::size_t batch,
                                int repeats, std::uint64_t seed);

}  // namespace sssm
