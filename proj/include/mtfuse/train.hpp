#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mtfuse/config.hpp"
#include "mtfuse/data.hpp"
#include "mtfuse/heads.hpp"
#include "mtfuse/model.hpp"

namespace mtfuse {

struct TrainOptions {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::size_t train_samples = 400;
  std::size_t val_samples = 256;
  std::size_t eval_batch = 64;
  bool augment = true;
  /// Evaluate (and emit a record) every this many epochs; 0 only at the ends.
  std::size_t eval_every_epochs = 1;
  std::function<void(const TaskMetrics&)> on_eval;
};

struct TrainResult {
  Model model;
  std::vector<TaskMetrics> trajectory;  // first entry is before any update
  std::vector<double> step_losses;
  bool stopped_early = false;
};

/// Validation metrics with batch-statistic normalization over fixed chunks of
/// `samples`; the gate running statistics are left untouched.
TaskMetrics evaluate(const Model& model, std::span<const SampleBundle> samples, std::size_t eval_batch = 64);

/// Trains `model` in place on `train` with the config's optimizer settings.
/// Throws NumericError on a non-finite loss.
TrainResult train(Model model, std::span<const SampleBundle> train, std::span<const SampleBundle> val,
                  const TrainOptions& options, std::uint64_t seed);

/// Generates train/val sets from `recipe` and trains a fresh model.
TrainResult train_toy(const ModelConfig& config, const SyntheticRecipe& recipe, const TrainOptions& options,
                      std::uint64_t seed);

/// One metrics record as a single JSON line.
std::string metrics_json(const TaskMetrics& m);

}  // namespace mtfuse
