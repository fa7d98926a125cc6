#include "mtfuse/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "mtfuse/errors.hpp"
#include "mtfuse/model.hpp"

namespace mtfuse {

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ArgumentError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double rank = std::ceil(std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size()));
  const std::size_t i = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return values[std::min(i, values.size() - 1)];
}

BenchRecord bench_fps(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed) {
  if (!(options.duration_s > 0.0)) throw ArgumentError("bench: duration must be positive");
  if (options.batch_size == 0) throw ArgumentError("bench: batch size must be positive");
  if (options.threads == 0) throw ArgumentError("bench: thread count must be positive");
  const Model model = Model::create(config, seed);
  const SyntheticRecipe recipe = SyntheticRecipe::for_config(config, 0.1);
  const Batch batch = make_batch(generate_synthetic(recipe, options.batch_size, seed));

  using Clock = std::chrono::steady_clock;
  std::mutex mu;
  std::vector<double> latencies;
  std::size_t measured = 0;

  auto worker = [&](Clock::time_point deadline) {
    std::vector<double> local;
    while (Clock::now() < deadline) {
      const auto t0 = Clock::now();
      (void)model.forward(batch, ops::NormMode::kEval);
      local.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
    std::lock_guard lock(mu);
    latencies.insert(latencies.end(), local.begin(), local.end());
    measured += local.size();
  };

  // Warmup runs on the same threads as the measurement, then every worker
  // waits for a common start.
  std::vector<std::thread> pool;
  std::mutex start_mu;
  std::condition_variable start_cv;
  std::size_t warmed = 0;
  Clock::time_point start, deadline;
  bool released = false;
  for (std::size_t t = 0; t < options.threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = 0; i < options.warmup_batches; ++i) (void)model.forward(batch, ops::NormMode::kEval);
      Clock::time_point until;
      {
        std::unique_lock lock(start_mu);
        if (++warmed == options.threads) {
          start = Clock::now();
          deadline = start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(options.duration_s));
          released = true;
          start_cv.notify_all();
        }
        start_cv.wait(lock, [&] { return released; });
        until = deadline;
      }
      worker(until);
    });
  }
  for (auto& th : pool) th.join();
  const double wall = std::chrono::duration<double>(Clock::now() - start).count();

  BenchRecord r;
  r.config_hash = config_hash(config);
  r.param_count = count_params(model.parameters()).total;
  r.threads = options.threads;
  r.batch_size = options.batch_size;
  r.warmup_batches = options.warmup_batches * options.threads;
  r.measured_batches = measured;
  r.duration_s = wall;
  r.fps = static_cast<double>(measured * options.batch_size) / wall;
  r.latency_p50_ms = percentile(latencies, 50.0);
  r.latency_p95_ms = percentile(latencies, 95.0);
  return r;
}

std::string bench_json(const BenchRecord& r) {
  nlohmann::ordered_json j;
  j["config_hash"] = r.config_hash;
  j["param_count"] = r.param_count;
  j["fps"] = r.fps;
  j["latency_p50_ms"] = r.latency_p50_ms;
  j["latency_p95_ms"] = r.latency_p95_ms;
  j["threads"] = r.threads;
  j["batch_size"] = r.batch_size;
  j["warmup_batches"] = r.warmup_batches;
  j["measured_batches"] = r.measured_batches;
  j["duration_s"] = r.duration_s;
  return j.dump();
}

std::vector<std::string> standard_variants() {
  return {"full",           "no_mgmi",        "no_dual_scan",  "no_global_local", "no_self_attention",
          "no_multi_gating", "exterior_only", "interior_only", "joints_only"};
}

AblationVariant make_variant(const ModelConfig& base, const std::string& name) {
  ModelConfig c = base;
  auto only = [&c](Modality keep) {
    for (auto m : kAllModalities) c.ablation.drop_modalities[index(m)] = m != keep;
  };
  if (name == "full") {
    c.ablation = AblationFlags{};
  } else if (name == "config") {
  } else if (name == "no_mgmi") {
    c.ablation.no_mgmi = true;
  } else if (name == "no_dual_scan") {
    c.ablation.no_dual_scan = true;
  } else if (name == "no_global_local") {
    c.ablation.no_global_local = true;
  } else if (name == "no_self_attention") {
    c.ablation.no_self_attention = true;
  } else if (name == "no_multi_gating") {
    c.ablation.no_multi_gating = true;
  } else if (name == "exterior_only") {
    only(Modality::kExterior);
  } else if (name == "interior_only") {
    only(Modality::kInterior);
  } else if (name == "joints_only") {
    only(Modality::kJoints);
  } else {
    throw ArgumentError("unknown ablation variant '" + name + "'");
  }
  c.validate();
  return {name, c};
}

std::vector<AblationRow> ablate(const std::vector<AblationVariant>& variants, const SyntheticRecipe& recipe,
                                const TrainOptions& options, std::uint64_t seed) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    v.config.validate();
    TrainOptions quiet = options;
    quiet.on_eval = nullptr;
    TrainResult result = train_toy(v.config, recipe, quiet, seed);
    AblationRow row;
    row.name = v.name;
    row.params = count_params(result.model.parameters()).total;
    row.metrics = result.trajectory.back();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mtfuse
