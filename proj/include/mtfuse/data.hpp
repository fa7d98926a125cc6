#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mtfuse/config.hpp"
#include "mtfuse/tensor.hpp"
#include "mtfuse/types.hpp"

namespace mtfuse {

/// One synchronized multimodal sample. Views are [T x 3 x Hv x Wv] in
/// kExteriorViews / kInteriorViews order; joints are [T x J x 3].
struct SampleBundle {
  std::string id;
  std::array<Tensor, 3> exterior;
  std::array<Tensor, 3> interior;
  Tensor joints;
  std::array<std::size_t, kNumTasks> labels{};
};

/// Where a task's class signal is planted. For image modalities `channel` is
/// the colour channel; for joints it is the coordinate (0 x, 1 y, 2 confidence).
struct TaskSignal {
  Modality modality = Modality::kExterior;
  std::size_t channel = 0;
  double amplitude = 0.4;
};

struct SyntheticRecipe {
  std::array<TaskSignal, kNumTasks> tasks{{
      {Modality::kJoints, 2, 0.4},     // der
      {Modality::kInterior, 0, 0.4},   // dbr
      {Modality::kExterior, 0, 0.4},   // tcr
      {Modality::kExterior, 1, 0.4},   // vbr
  }};
  double noise = 0.0;
  std::size_t frame_count = 16;
  std::size_t view_height = 32;
  std::size_t view_width = 32;
  std::size_t joint_count = 17;
  std::array<std::size_t, kNumTasks> num_classes{4, 4, 4, 4};

  static SyntheticRecipe for_config(const ModelConfig& config, double noise = 0.0);
  Modality designated(TaskId t) const { return tasks[index(t)].modality; }
  /// Throws ConfigError unless the designated modalities cover all three.
  void validate() const;
};

/// Class code of label k at frame t: a level plus a phase-shifted cosine.
double class_code(std::size_t k, std::size_t classes, std::size_t t, std::size_t frames);

/// Deterministic in (recipe, count, seed); labels are balanced per task.
std::vector<SampleBundle> generate_synthetic(const SyntheticRecipe& recipe, std::size_t count, std::uint64_t seed);

struct FlipDraw {
  bool horizontal = false;
  bool vertical = false;
};

/// Two fair coin flips derived from `seed`.
FlipDraw draw_flips(std::uint64_t seed);
/// Mirrors every frame of every view, and the joint coordinates with them.
SampleBundle apply_flips(const SampleBundle& b, FlipDraw flips);
SampleBundle augment(const SampleBundle& b, std::uint64_t seed);

struct SplitFractions {
  double train = 0.65;
  double test = 0.15;
  double val = 0.20;
};

/// Largest-remainder rounding of n * fractions; sums to n.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitFractions& f);

/// FNV-1a of the sample id; the split order key.
std::uint64_t sample_hash(std::string_view id);

struct DatasetSplits {
  std::vector<SampleBundle> train;
  std::vector<SampleBundle> test;
  std::vector<SampleBundle> val;
  std::size_t warnings = 0;
  std::vector<std::string> warning_messages;
  /// 1 + largest label seen per task (0 when nothing loaded).
  std::array<std::size_t, kNumTasks> inferred_classes{};
};

/// Assigns bundles to splits by sorted id hash and largest-remainder quotas.
DatasetSplits split_samples(std::vector<SampleBundle> samples, const SplitFractions& f);

/// Reads root/<id>/... (see README for the layout). Frames are resized to the
/// config's view size; pixel values above 1 are treated as 8-bit and scaled.
/// Samples with a missing file are skipped and counted; malformed headers
/// throw LoadError.
DatasetSplits load_sample_dir(const std::filesystem::path& root, const SplitFractions& f, const ModelConfig& config);

/// Writes one bundle in the loader's layout. Face and body views go to their
/// own directories, which the loader prefers over box crops.
void write_sample_dir(const std::filesystem::path& root, const SampleBundle& b);

/// Binary PPM (P6) to [3 x H x W] in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);

/// Bilinear resize of [3 x H x W] (half-pixel centres). Same size is a copy.
Tensor resize_frame(const Tensor& frame, std::size_t height, std::size_t width);

/// Stacked samples: views [N x T x 3 x Hv x Wv], joints [N x T x J x 3].
struct Batch {
  std::array<Tensor, 3> exterior;
  std::array<Tensor, 3> interior;
  Tensor joints;
  std::array<std::vector<std::size_t>, kNumTasks> labels;
  std::size_t size = 0;
};

Batch make_batch(std::span<const SampleBundle> samples);

}  // namespace mtfuse
