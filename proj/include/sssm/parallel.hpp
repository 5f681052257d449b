#pragma once

#include <cstddef>
#include <functional>

namespace sssm {

/// Thread budget handed down from the CLI. `deterministic` forces every
/// loop onto the calling thread.
struct ThreadBudget {
  int threads = 1;
  bool deterministic = false;

  int effective() const noexcept { return deterministic || threads < 1 ? 1 : threads; }
};

/// Runs body(i) for i in [0, n) on up to budget.effective() threads.
/// Iterations must write to disjoint outputs; callers reduce afterwards in
/// index order so results do not depend on the schedule. The first exception
/// thrown by any iteration is rethrown on the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, const ThreadBudget& budget = {});

}  // namespace sssm
