#include "mtfuse/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "mtfuse/errors.hpp"

namespace mtfuse {

TaskMetrics evaluate(const Model& model, std::span<const SampleBundle> samples, std::size_t eval_batch) {
  if (samples.empty()) throw ArgumentError("evaluate: no samples");
  if (eval_batch == 0) throw ArgumentError("evaluate: eval_batch must be positive");
  FrozenNormStats frozen(model);
  const std::size_t R = model.tasks.size();
  std::vector<std::vector<std::size_t>> preds(R), labels(R);
  std::array<double, kNumTasks> loss_sum{};
  GateTelemetry gate_sum{};
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t begin = 0; begin < samples.size(); begin += eval_batch) {
    const auto chunk = samples.subspan(begin, std::min(eval_batch, samples.size() - begin));
    const Batch batch = make_batch(chunk);
    const ForwardResult out = model.forward(batch, ops::NormMode::kTrain);
    for (std::size_t r = 0; r < R; ++r) {
      const auto task = index(model.tasks[r]);
      const auto& y = batch.labels[task];
      const Tensor ce = ops::cross_entropy(out.logits[r], y);
      loss_sum[task] += ce.item() * static_cast<double>(chunk.size());
      const auto p = argmax_rows(out.logits[r]);
      preds[r].insert(preds[r].end(), p.begin(), p.end());
      labels[r].insert(labels[r].end(), y.begin(), y.end());
    }
    for (std::size_t t = 0; t < kNumTasks; ++t)
      for (std::size_t m = 0; m < kNumModalities; ++m)
        gate_sum[t][m] += out.telemetry[t][m] * static_cast<double>(chunk.size());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  TaskMetrics metrics = compute_metrics(model.tasks, preds, labels);
  const double n = static_cast<double>(samples.size());
  metrics.total_loss = 0.0;
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    metrics.task_loss[t] = loss_sum[t] / n;
    metrics.total_loss += metrics.task_loss[t];
    for (std::size_t m = 0; m < kNumModalities; ++m) metrics.gate_telemetry[t][m] = gate_sum[t][m] / n;
  }
  metrics.param_count = count_params(model.parameters()).total;
  metrics.fps = seconds > 0.0 ? n / seconds : 0.0;
  return metrics;
}

TrainResult train(Model model, std::span<const SampleBundle> train_set, std::span<const SampleBundle> val,
                  const TrainOptions& options, std::uint64_t seed) {
  if (train_set.empty()) throw ArgumentError("train: empty training set");
  if (options.batch_size == 0) throw ArgumentError("train: batch_size must be positive");
  TrainResult result{std::move(model), {}, {}, false};
  Model& m = result.model;
  ParamList params = m.parameters();
  OptimizerState opt;
  opt.schedule = m.config.schedule;
  opt.momentum = m.config.momentum;
  opt.weight_decay = m.config.weight_decay;
  EarlyStopping stopper;

  auto record = [&](std::size_t epoch) {
    TaskMetrics metrics = evaluate(m, val, options.eval_batch);
    metrics.epoch = epoch;
    if (options.on_eval) options.on_eval(metrics);
    result.trajectory.push_back(metrics);
    return metrics.mean_accuracy;
  };
  record(0);

  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::size_t epoch = 0;
  std::vector<std::vector<std::size_t>> labels(m.tasks.size());

  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<SampleBundle> chunk;
    for (std::size_t i = 0; i < options.batch_size; ++i) {
      if (cursor == order.size()) {
        cursor = 0;
        std::shuffle(order.begin(), order.end(), rng);
      }
      const SampleBundle& s = train_set[order[cursor++]];
      chunk.push_back(options.augment ? augment(s, rng()) : s);
    }
    const Batch batch = make_batch(chunk);
    for (std::size_t r = 0; r < m.tasks.size(); ++r) labels[r] = batch.labels[index(m.tasks[r])];

    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = total_loss(m.forward(batch, ops::NormMode::kTrain).logits, labels).total;
    }
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite training loss at step " + std::to_string(step) + " (epoch " +
                         std::to_string(epoch) + ")");
    }
    result.step_losses.push_back(loss.item());
    for (auto& p : params) p.tensor.zero_grad();
    backward(tape, loss);
    opt.epoch = epoch;
    sgd_step(opt, params);

    const std::size_t seen = (step + 1) * options.batch_size;
    const std::size_t new_epoch = seen / train_set.size();
    const bool last = step + 1 == options.steps;
    if (new_epoch != epoch || last) {
      const bool crossed = new_epoch != epoch;
      epoch = new_epoch;
      const bool cadence = crossed && options.eval_every_epochs > 0 && epoch % options.eval_every_epochs == 0;
      if (cadence || last) {
        const double macc = record(epoch);
        if (stopper.update(macc) && !last) {
          result.stopped_early = true;
          break;
        }
      }
    }
  }
  return result;
}

TrainResult train_toy(const ModelConfig& config, const SyntheticRecipe& recipe, const TrainOptions& options,
                      std::uint64_t seed) {
  const auto train_set = generate_synthetic(recipe, options.train_samples, seed);
  const auto val_set = generate_synthetic(recipe, options.val_samples, seed ^ 0xC0FFEE1234ULL);
  return train(Model::create(config, seed), train_set, val_set, options, seed);
}

std::string metrics_json(const TaskMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss_total"] = m.total_loss;
  for (auto t : kAllTasks) j["loss_" + std::string(task_name(t))] = m.task_loss[index(t)];
  for (auto t : kAllTasks) j["acc_" + std::string(task_name(t))] = m.accuracy[index(t)];
  j["macc"] = m.mean_accuracy;
  std::vector<double> gates;
  for (const auto& row : m.gate_telemetry) gates.insert(gates.end(), row.begin(), row.end());
  j["gate_telemetry"] = gates;
  j["param_count"] = m.param_count;
  j["fps"] = m.fps;
  return j.dump();
}

}  // namespace mtfuse
