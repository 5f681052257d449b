#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when an argument violates an operation's precondition.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An iterative solver gave up before reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : std::runtime_error(what + " (after " + std::to_string(iterations) + " iterations)"),
        iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

/// A training loop produced a non-finite loss.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, long step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Batch of multichannel real sequences.
///
/// Each item is a (length x channels) matrix; row r holds time step r + 1.
/// Inputs at nonpositive time indices are implicitly zero.
struct SequenceBatch {
  std::vector<Matrix> items;

  SequenceBatch() = default;
  explicit SequenceBatch(std::vector<Matrix> seqs) : items(std::move(seqs)) {}

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
  Eigen::Index channels() const { return items.empty() ? 0 : items.front().cols(); }
  Eigen::Index max_length() const {
    Eigen::Index m = 0;
    for (const auto& s : items) m = std::max(m, s.rows());
    return m;
  }
  const Matrix& operator[](std::size_t i) const { return items[i]; }
  Matrix& operator[](std::size_t i) { return items[i]; }
};

/// Input/target pairs for supervised sequence fitting.
struct SequenceDataset {
  SequenceBatch inputs;
  SequenceBatch targets;

  std::size_t size() const noexcept { return inputs.size(); }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DomainError(msg);
}

}  // namespace sssm
