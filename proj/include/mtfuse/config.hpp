#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mtfuse/heads.hpp"
#include "mtfuse/types.hpp"

namespace mtfuse {

struct AblationFlags {
  bool no_mgmi = false;            // concat fusion instead of gated fusion
  bool no_dual_scan = false;       // both paths scan forward
  bool no_global_local = false;    // global path pools locally
  bool no_self_attention = false;  // shared features = modality mean
  bool no_multi_gating = false;    // one gating unit shared by all tasks
  std::array<bool, kNumTasks> drop_tasks{};
  std::array<bool, kNumModalities> drop_modalities{};

  bool operator==(const AblationFlags&) const = default;
};

/// Every architecture and training hyperparameter. Defaults are the
/// full-size network; `toy_config()` gives a desk-scale variant.
struct ModelConfig {
  std::size_t frame_count = 16;
  std::size_t channels = 192;
  std::size_t height = 7;
  std::size_t width = 7;
  std::size_t state_dim = 16;
  std::size_t depth = 2;
  std::size_t joint_count = 17;
  std::size_t view_height = 32;
  std::size_t view_width = 32;
  std::size_t stem_kernel = 3;
  std::size_t global_pool = 3;
  double gamma_init = 0.5;
  std::array<std::size_t, kNumTasks> num_classes{4, 4, 4, 4};
  AblationFlags ablation;
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 24;
  double split_train = 0.65;
  double split_test = 0.15;
  double split_val = 0.20;
  std::uint64_t seed = 0;

  std::vector<TaskId> active_tasks() const;
  std::vector<Modality> active_modalities() const;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Desk-scale preset used by tests and the toy benchmarks.
ModelConfig toy_config();

/// Parses flat `key=value` text (newline or comma separated, '#' comments)
/// on top of the defaults. A comma-separated token without '=' continues the
/// previous value, so `drop_tasks=der,dbr` works inline.
ModelConfig parse_config(std::string_view text);
/// Same grammar, applied on top of `base`.
ModelConfig apply_overrides(ModelConfig base, std::string_view text);

std::string to_text(const ModelConfig& config);
ModelConfig load_config(const std::filesystem::path& path);

/// Stable 64-bit FNV-1a of the canonical text, as 16 hex digits.
std::string config_hash(const ModelConfig& config);

}  // namespace mtfuse
