#include "sssm/bench.hpp"

#include <chrono>

#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/stu.hpp"

namespace sssm {

double median_featurize_seconds(Eigen::Index L, Eigen::Index K, Eigen::Index d_in, std::size_t batch,
                                int repeats, std::uint64_t seed) {
  require(repeats >= 1, "median_featurize_seconds: repeats must be positive");
  const FilterBank bank = compute_filterbank(L, K, HankelVariant::Primary);
  const SequenceBatch inputs = gaussian_inputs(batch, L, d_in, seed);
  featurize(bank, inputs, FeatureScaling::Scaled);  // warm the FFT plan cache
  std::vector<double> times;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto f = featurize(bank, inputs, FeatureScaling::Scaled);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (f.empty()) return 0.0;
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace sssm
