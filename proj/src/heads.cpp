#include "mtfuse/heads.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtfuse/errors.hpp"
#include "mtfuse/layers.hpp"
#include "mtfuse/ops.hpp"

namespace mtfuse {

HeadParams HeadParams::init(TaskSpec spec, std::size_t channels, std::mt19937_64& rng) {
  if (spec.num_classes < 2) {
    throw ConfigError("head for " + std::string(task_name(spec.task)) + " needs at least 2 classes");
  }
  return {spec, layers::init_uniform({channels, spec.num_classes}, channels, rng),
          layers::init_const({spec.num_classes}, 0.0)};
}

Tensor head_forward(const Tensor& features, const HeadParams& head) {
  if (features.rank() == 3) return layers::squeeze0(head_forward(layers::unsqueeze0(features), head));
  return ops::linear(layers::global_avg_pool(features), head.weight, head.bias);
}

LossBreakdown total_loss(std::span<const Tensor> logits, std::span<const std::vector<std::size_t>> labels) {
  if (logits.size() != labels.size() || logits.empty()) {
    throw InputError("total_loss: " + std::to_string(logits.size()) + " logit sets for " +
                     std::to_string(labels.size()) + " label sets");
  }
  LossBreakdown out;
  for (std::size_t r = 0; r < logits.size(); ++r) {
    Tensor z = logits[r].rank() == 1 ? layers::unsqueeze0(logits[r]) : logits[r];
    Tensor ce = ops::cross_entropy(z, labels[r]);
    out.per_task.push_back(ce.item());
    out.total = out.total.defined() ? ops::add(out.total, ce) : ce;
  }
  return out;
}

double mean_accuracy(std::span<const double> accuracies) {
  if (accuracies.empty()) throw ArgumentError("mean_accuracy of zero tasks");
  double s = 0.0;
  for (double a : accuracies) s += a;
  return s / static_cast<double>(accuracies.size());
}

TaskMetrics compute_metrics(std::span<const TaskId> tasks, std::span<const std::vector<std::size_t>> predictions,
                            std::span<const std::vector<std::size_t>> labels) {
  if (tasks.empty() || predictions.size() != tasks.size() || labels.size() != tasks.size()) {
    throw ArgumentError("compute_metrics: need one prediction and label stream per task");
  }
  TaskMetrics m;
  m.active.fill(false);
  std::vector<double> accs;
  for (std::size_t r = 0; r < tasks.size(); ++r) {
    if (predictions[r].size() != labels[r].size()) {
      throw ArgumentError("compute_metrics: " + std::to_string(predictions[r].size()) + " predictions vs " +
                          std::to_string(labels[r].size()) + " labels for " + std::string(task_name(tasks[r])));
    }
    if (labels[r].empty()) throw ArgumentError("compute_metrics: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels[r].size(); ++i) correct += predictions[r][i] == labels[r][i];
    const double acc = static_cast<double>(correct) / static_cast<double>(labels[r].size());
    m.active[index(tasks[r])] = true;
    m.accuracy[index(tasks[r])] = acc;
    accs.push_back(acc);
  }
  m.mean_accuracy = mean_accuracy(accs);
  return m;
}

TaskMetrics compute_metrics(std::span<const std::vector<std::size_t>> predictions,
                            std::span<const std::vector<std::size_t>> labels) {
  return compute_metrics(kAllTasks, predictions, labels);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  Tensor z = logits.rank() == 1 ? layers::unsqueeze0(logits) : logits;
  if (z.rank() != 2) throw DimensionError("argmax_rows: expected [N x K], got " + shape_str(logits.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> out(n);
  auto d = z.data();
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = d.subspan(r * k, k);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double LrSchedule::rate(std::size_t epoch) const {
  if (epoch < mid_epoch) return base;
  if (epoch <= late_epoch) return mid;
  return late;
}

void sgd_step(OptimizerState& state, ParamList& params) {
  if (state.velocity.size() != params.size()) {
    state.velocity.assign(params.size(), {});
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  const double lr = state.learning_rate();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    if (!t.has_grad()) continue;
    auto& v = state.velocity[i];
    if (v.size() != t.numel()) v.assign(t.numel(), 0.0);
    auto w = t.mutable_data();
    auto g = t.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = state.momentum * v[k] + g[k] + state.weight_decay * w[k];
      w[k] -= lr * v[k];
    }
  }
}

bool EarlyStopping::update(double mean_accuracy) {
  if (mean_accuracy >= best_ + min_delta_ || best_ < 0.0) {
    best_ = std::max(best_, mean_accuracy);
    stale_ = 0;
    return false;
  }
  return ++stale_ >= patience_;
}

}  // namespace mtfuse
