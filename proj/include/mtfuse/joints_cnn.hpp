#pragma once

#include <cstddef>
#include <filesystem>
#include <random>

#include "mtfuse/tensor.hpp"

namespace mtfuse {

/// T frames of J joints, each (x, y, confidence) in [0, 1]: [T x J x 3].
struct JointSequence {
  Tensor joints;
};

/// Two 3x3x3 conv + GELU + pool stages, then a projection to C channels that
/// is broadcast over the H x W grid of the image branches.
struct JointsParams {
  Tensor conv1_weight, conv1_bias;  // [16 x 1 x 3 x 3 x 3], [16]
  Tensor conv2_weight, conv2_bias;  // [32 x 16 x 3 x 3 x 3], [32]
  Tensor proj_weight, proj_bias;    // [32*4 x C], [C]
  std::size_t frame_count = 0;
  std::size_t joint_count = 0;
  std::size_t out_height = 0;
  std::size_t out_width = 0;

  std::size_t channels() const { return proj_weight.dim(1); }

  static JointsParams init(std::size_t frame_count, std::size_t joint_count, std::size_t channels,
                           std::size_t out_height, std::size_t out_width, std::mt19937_64& rng);
};

inline constexpr std::size_t kJointStage1 = 16;
inline constexpr std::size_t kJointStage2 = 32;

/// Batched: joints [N x T x J x 3] -> H3 [N x C x H x W].
Tensor joints_forward(const Tensor& joints, const JointsParams& p);
/// Single sample: [T x J x 3] -> [C x H x W].
Tensor joints_forward(const JointSequence& seq, const JointsParams& p);

// Joint file: "T3JT", u32 T, u32 J, then T*J*3 LE f32.
void save_joints(const std::filesystem::path& path, const Tensor& joints);
Tensor load_joints(const std::filesystem::path& path);

}  // namespace mtfuse
