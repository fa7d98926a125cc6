#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtfuse/config.hpp"
#include "mtfuse/data.hpp"
#include "mtfuse/heads.hpp"
#include "mtfuse/train.hpp"

namespace mtfuse {

struct BenchRecord {
  std::string config_hash;
  std::size_t param_count = 0;
  double fps = 0.0;  // samples per second over the measured window
  double latency_p50_ms = 0.0;
  double latency_p95_ms = 0.0;
  std::size_t threads = 1;
  std::size_t batch_size = 1;
  std::size_t warmup_batches = 0;
  std::size_t measured_batches = 0;
  double duration_s = 0.0;
};

struct BenchOptions {
  std::size_t batch_size = 8;
  double duration_s = 2.0;
  std::size_t threads = 1;
  std::size_t warmup_batches = 10;  // per worker, excluded from the timing
};

/// Eval-mode inference throughput. Each worker owns its batch and shares the
/// weights read-only. Throws ArgumentError when duration <= 0.
BenchRecord bench_fps(const ModelConfig& config, const BenchOptions& options, std::uint64_t seed);

/// Nearest-rank percentile of `values` (p in [0, 100]).
double percentile(std::vector<double> values, double p);

std::string bench_json(const BenchRecord& r);

struct AblationVariant {
  std::string name;
  ModelConfig config;
};

/// Standard variant names: full, no_mgmi, no_dual_scan, no_global_local,
/// no_self_attention, no_multi_gating, exterior_only, interior_only,
/// joints_only.
std::vector<std::string> standard_variants();

/// `base` with the named variant's flags layered on top. "config" returns
/// `base` unchanged. Throws ArgumentError for an unknown name.
AblationVariant make_variant(const ModelConfig& base, const std::string& name);

struct AblationRow {
  std::string name;
  std::size_t params = 0;
  TaskMetrics metrics;  // final validation metrics
};

/// count_params + train_toy for every variant, all on the same seeded data.
std::vector<AblationRow> ablate(const std::vector<AblationVariant>& variants, const SyntheticRecipe& recipe,
                                const TrainOptions& options, std::uint64_t seed);

}  // namespace mtfuse
