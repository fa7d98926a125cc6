#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <vector>

#include "mtfuse/ops.hpp"
#include "mtfuse/tensor.hpp"
#include "mtfuse/types.hpp"

namespace mtfuse {

/// Branch outputs, all [N x C x H x W] (or [C x H x W] for a single sample),
/// ordered as `modalities`.
struct ModalityFeatures {
  std::vector<Modality> modalities;
  std::vector<Tensor> features;

  /// The usual three-branch bundle (exterior, interior, joints).
  static ModalityFeatures of(Tensor h1, Tensor h2, Tensor h3);
  void validate() const;
};

/// One task gating unit: depthwise 3x3 conv over the shared features repeated
/// once per modality (M*C channels), BatchNorm over all M*C channels, then a
/// sigmoid; the result is split into M per-modality gate maps.
struct GateUnit {
  Tensor conv_weight;  // [M*C x 1 x 3 x 3]
  Tensor conv_bias;    // [M*C]
  Tensor bn_scale;     // [M*C]
  Tensor bn_shift;     // [M*C]
  mutable ops::RunningStats stats;  // advanced only by train-mode forwards
};

struct GateParams {
  std::vector<Modality> modalities;
  Tensor query_weight;  // [M*C x C], no bias
  Tensor key_weight;    // [M*C x C]
  Tensor value_weight;  // [M*C x C]
  std::vector<GateUnit> gates;  // one per task, or a single shared unit
  bool self_attention = true;   // false: S is the mean of the modality features
  std::size_t channels = 0;

  static GateParams init(std::span<const Modality> modalities, std::size_t channels, std::size_t num_gates,
                         std::mt19937_64& rng);
};

inline constexpr double kBatchNormEps = 1e-5;

/// Optional trace of the attention matrix softmax(Q K^T / sqrt(HW)), [N x C x C].
struct AttentionTrace {
  Tensor weights;
};

/// Task-shared features S [N x C x H x W].
Tensor shared_attention(const ModalityFeatures& m, const GateParams& p, AttentionTrace* trace = nullptr);

struct TaskFusion {
  Tensor fused;                        // F_r
  std::vector<Tensor> gates;           // per modality, same shape as F_r
  std::array<double, kNumModalities> mean_gate{};  // 0 for absent modalities
};

/// F_r = sum_i H_i (.) g_r^i. `task` indexes p.gates (0-based); a single shared
/// unit serves every task.
TaskFusion task_fuse(const ModalityFeatures& m, const Tensor& shared, const GateParams& p, std::size_t task,
                     ops::NormMode mode);

using GateTelemetry = std::array<std::array<double, kNumModalities>, kNumTasks>;

struct FusionOutput {
  std::vector<Tensor> task_features;  // one per requested task
  GateTelemetry telemetry{};          // mean gate per (task, modality)
};

/// Shared attention once, then one task_fuse per task in `tasks`.
FusionOutput fuse_all(const ModalityFeatures& m, const GateParams& p, std::span<const TaskId> tasks,
                      ops::NormMode mode);
FusionOutput fuse_all(const ModalityFeatures& m, const GateParams& p, ops::NormMode mode);

/// Channel concatenation followed by a 1x1 projection back to C channels.
struct ConcatFuseParams {
  Tensor weight;  // [M*C x C]
  Tensor bias;    // [C]

  static ConcatFuseParams init(std::size_t num_modalities, std::size_t channels, std::mt19937_64& rng);
};

Tensor concat_fuse(const ModalityFeatures& m, const ConcatFuseParams& p);

}  // namespace mtfuse
