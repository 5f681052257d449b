#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "sssm/filterbank.hpp"
#include "sssm/parallel.hpp"
#include "sssm/stu.hpp"
#include "sssm/trainer.hpp"

namespace sssm {

enum class Pooling { Mean, Last };

std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& name);

struct StackConfig {
  Eigen::Index n_layers = 2;
  Eigen::Index d_model = 32;
  Eigen::Index K = 16;
  Eigen::Index k_y = 0;  // 0: vanilla STU layers
  Eigen::Index d_input = 1;
  Eigen::Index n_classes = 2;
  Eigen::Index L = 256;  // filter bank length, the longest accepted input
  Pooling pooling = Pooling::Mean;
  double layer_input_scale = 1.0;  // ablation knob, multiplies each STU input

  void validate() const;
  std::string to_json() const;
  static StackConfig from_json(const std::string& text);
};

/// One STU layer followed by GLU(y) = (W_a y + b_a) . sigmoid(W_b y + b_b).
struct StackLayer {
  StuParams stu;
  Matrix W_a, W_b;
  Vector b_a, b_b;
};

/// embedding -> n_layers x (STU -> GLU) -> time pooling -> readout.
struct StackModel {
  StackConfig config;
  std::shared_ptr<const FilterBank> bank;
  std::shared_ptr<const SpectralFeaturizer> featurizer;
  Matrix W_embed;
  Vector b_embed;
  std::vector<StackLayer> layers;
  Matrix W_out;
  Vector b_out;

  /// All-zero parameters over a Primary bank of length config.L.
  static StackModel zeros(const StackConfig& config, std::shared_ptr<const FilterBank> bank);
  /// Small Gaussian initialization.
  static StackModel random(const StackConfig& config, std::shared_ptr<const FilterBank> bank, std::uint64_t seed);

  Eigen::Index parameter_count() const;
  /// Order: W_embed, b_embed, per layer (STU pack, W_a, b_a, W_b, b_b), W_out, b_out.
  Vector pack() const;
  void unpack(const Vector& flat);
};

/// Logits, one row per sequence (batch x n_classes).
Matrix stack_forward(const StackModel& model, const SequenceBatch& inputs, const ThreadBudget& budget = {});

/// Mean softmax cross-entropy.
double stack_loss(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                  const ThreadBudget& budget = {});

struct StackGradients {
  double loss = 0.0;
  Vector grad;  // StackModel::pack() order
};

/// Reverse-mode gradients of mean softmax cross-entropy. Per-item
/// gradients are reduced in index order regardless of the thread count.
StackGradients stack_gradients(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                               const ThreadBudget& budget = {});

double stack_accuracy(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                      const ThreadBudget& budget = {});

// ---------------------------------------------------------------- tasks

enum class StackTask { DelayedRecall, ParityPrefix, NoisyLdsClass };

std::string to_string(StackTask t);
StackTask parse_task(const std::string& name);

struct TaskConfig {
  StackTask task = StackTask::DelayedRecall;
  std::size_t n_train = 256;
  std::size_t n_test = 256;
  Eigen::Index length = 256;
  Eigen::Index delay = 128;       // delayed_recall: steps between cue and the end
  Eigen::Index n_symbols = 4;     // delayed_recall: cue alphabet (= channels = classes)
  double noise = 0.05;            // std of additive input noise
  bool random_labels = false;     // replace every label by an independent uniform draw
  std::uint64_t seed = 0;
};

struct ClassificationData {
  SequenceBatch inputs;
  std::vector<int> labels;
  Eigen::Index n_classes = 2;
};

struct TaskSplit {
  ClassificationData train, test;
};

/// delayed_recall: noise plus a one-hot cue `delay` steps before the end;
/// the label is the cue symbol.
/// parity_prefix: N(0, 1) scalar inputs; the label is the sign of the sum
/// over steps with the same parity as the final step.
/// noisy_lds_class: N(0, 1) inputs through a fixed marginally-stable LDS;
/// the label is the sign of its time-averaged output plus label noise.
TaskSplit make_task(const TaskConfig& task);

struct StackTrainResult {
  TrainReport report;
  StackModel model;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Minibatch training of a randomly initialized model on one task. A batch
/// size >= n_train trains full-batch. Throws NonFiniteLoss.
StackTrainResult train_stack(const TaskSplit& data, const StackConfig& config, const TrainConfig& train,
                             const ThreadBudget& budget = {});

/// The StackConfig fields d_input and n_classes are taken from the task.
StackTrainResult train_stack(const TaskConfig& task, StackConfig config, const TrainConfig& train,
                             const ThreadBudget& budget = {});

void save_stack_model(const StackModel& model, const std::filesystem::path& dir);
/// Rebuilds the filter bank (through the cache when configured).
StackModel load_stack_model(const std::filesystem::path& dir);

}  // namespace sssm
