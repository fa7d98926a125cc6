#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtfuse/config.hpp"
#include "mtfuse/data.hpp"
#include "mtfuse/heads.hpp"
#include "mtfuse/joints_cnn.hpp"
#include "mtfuse/mgmi.hpp"
#include "mtfuse/mts_mamba.hpp"
#include "mtfuse/param.hpp"

namespace mtfuse {

struct ForwardResult {
  std::vector<Tensor> logits;  // parallel to Model::tasks, each [N x K]
  GateTelemetry telemetry{};   // zeros when concat fusion is used
};

/// The whole network: per-modality branches, fusion, and task heads. Dropped
/// tasks and modalities are simply not built.
struct Model {
  ModelConfig config;
  std::vector<TaskId> tasks;
  std::vector<Modality> modalities;
  std::optional<StemParams> exterior_stem;
  std::optional<StemParams> interior_stem;
  std::vector<MtsBlockParams> exterior_blocks;
  std::vector<MtsBlockParams> interior_blocks;
  std::optional<JointsParams> joints;
  std::optional<GateParams> gates;
  std::optional<ConcatFuseParams> concat;
  std::vector<HeadParams> heads;  // parallel to tasks

  static Model create(const ModelConfig& config, std::uint64_t seed);

  /// Branch outputs for the active modalities.
  ModalityFeatures features(const Batch& batch) const;
  ForwardResult forward(const Batch& batch, ops::NormMode mode) const;

  /// Trainable tensors (handles share storage with the model). Tensors shared
  /// between scan directions appear once.
  ParamList parameters() const;

  /// Parameters followed by the gate BatchNorm running statistics.
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
};

struct ParamCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> breakdown;  // by module, in build order
};

ParamCount count_params(const ParamList& params);
ParamCount count_params(const ModelConfig& config);

/// Restores the gate BatchNorm running statistics on scope exit, so a
/// train-mode forward can be used for evaluation without side effects.
class FrozenNormStats {
 public:
  explicit FrozenNormStats(const Model& model);
  ~FrozenNormStats();
  FrozenNormStats(const FrozenNormStats&) = delete;
  FrozenNormStats& operator=(const FrozenNormStats&) = delete;

 private:
  const Model& model_;
  std::vector<ops::RunningStats> saved_;
};

}  // namespace mtfuse
