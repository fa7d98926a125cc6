#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mtfuse/mgmi.hpp"
#include "mtfuse/param.hpp"
#include "mtfuse/tensor.hpp"
#include "mtfuse/types.hpp"

namespace mtfuse {

struct TaskSpec {
  TaskId task = TaskId::kDer;
  std::size_t num_classes = 2;
};

struct HeadParams {
  TaskSpec spec;
  Tensor weight;  // [C x K]
  Tensor bias;    // [K]

  static HeadParams init(TaskSpec spec, std::size_t channels, std::mt19937_64& rng);
};

/// Global average pool then a linear classifier. [N x C x H x W] -> [N x K],
/// or [C x H x W] -> [K].
Tensor head_forward(const Tensor& features, const HeadParams& head);

struct LossBreakdown {
  Tensor total;                         // scalar, on the tape when recording
  std::vector<double> per_task;         // same order as the logits
};

/// Sum over tasks of the batch-mean cross-entropy. logits[r] is [N x K_r] (or
/// [K_r] for one sample); labels[r] holds N class indices.
LossBreakdown total_loss(std::span<const Tensor> logits, std::span<const std::vector<std::size_t>> labels);

/// Per-task accuracy and mean accuracy. Entries for tasks that are not
/// `active` are zero and excluded from the mean.
struct TaskMetrics {
  std::size_t epoch = 0;
  std::array<bool, kNumTasks> active{true, true, true, true};
  std::array<double, kNumTasks> accuracy{};
  double mean_accuracy = 0.0;
  std::array<double, kNumTasks> task_loss{};
  double total_loss = 0.0;
  GateTelemetry gate_telemetry{};
  std::size_t param_count = 0;
  double fps = 0.0;
};

/// predictions[r] / labels[r] are streams for tasks[r]. Throws ArgumentError
/// on an empty dataset or mismatched lengths.
TaskMetrics compute_metrics(std::span<const TaskId> tasks, std::span<const std::vector<std::size_t>> predictions,
                            std::span<const std::vector<std::size_t>> labels);
/// All four tasks in canonical order.
TaskMetrics compute_metrics(std::span<const std::vector<std::size_t>> predictions,
                            std::span<const std::vector<std::size_t>> labels);

/// Mean of the per-task accuracies.
double mean_accuracy(std::span<const double> accuracies);

/// Row-wise argmax of [N x K] logits.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// Piecewise-constant learning rate by epoch: `base` before `mid_epoch`,
/// `mid` through `late_epoch` inclusive, `late` afterwards.
struct LrSchedule {
  double base = 1e-3;
  double mid = 5e-4;
  double late = 5e-5;
  std::size_t mid_epoch = 25;
  std::size_t late_epoch = 50;

  double rate(std::size_t epoch) const;
  bool operator==(const LrSchedule&) const = default;
};

struct OptimizerState {
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epoch = 0;
  std::vector<std::vector<double>> velocity;  // parallel to the parameter list

  double learning_rate() const { return schedule.rate(epoch); }
};

/// v <- momentum*v + g + weight_decay*w;  w <- w - lr*v.
/// Parameters without a gradient (not reached by the loss) are skipped.
/// Throws NumericError naming the first parameter with a non-finite gradient.
void sgd_step(OptimizerState& state, ParamList& params);

/// Stops once the validation mean accuracy has failed to improve by at least
/// `min_delta` for `patience` consecutive evaluations.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 15, double min_delta = 0.001)
      : patience_(patience), min_delta_(min_delta) {}

  /// Records one evaluation; returns true when training should stop.
  bool update(double mean_accuracy);
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = -1.0;
  std::size_t stale_ = 0;
};

}  // namespace mtfuse
