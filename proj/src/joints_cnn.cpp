#include "mtfuse/joints_cnn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>

#include "mtfuse/errors.hpp"
#include "mtfuse/layers.hpp"
#include "mtfuse/ops.hpp"
#include "mtfuse/serialize.hpp"

namespace mtfuse {

namespace {

// pooled extents after each stage
Shape stage1_target(std::size_t t, std::size_t j) { return {std::max<std::size_t>(t / 2, 1), std::max<std::size_t>(j / 2, 1), 3}; }
Shape stage2_target(std::size_t t, std::size_t j) {
  const Shape s1 = stage1_target(t, j);
  return {std::min<std::size_t>(s1[0], 2), std::min<std::size_t>(s1[1], 2), 1};
}

}  // namespace

// This branch has no residual path, so it uses variance-preserving bounds;
// the default 1/sqrt(fan_in) shrinks its output far below the image branches.
const double kActivationGain = std::sqrt(6.0);
const double kLinearGain = std::sqrt(3.0);

JointsParams JointsParams::init(std::size_t frame_count, std::size_t joint_count, std::size_t channels,
                                std::size_t out_height, std::size_t out_width, std::mt19937_64& rng) {
  if (frame_count == 0 || joint_count == 0) throw ConfigError("joints: frame_count and joint_count must be positive");
  JointsParams p;
  p.frame_count = frame_count;
  p.joint_count = joint_count;
  p.out_height = out_height;
  p.out_width = out_width;
  p.conv1_weight = layers::init_uniform({kJointStage1, 1, 3, 3, 3}, 27, rng, kActivationGain);
  p.conv1_bias = layers::init_const({kJointStage1}, 0.0);
  p.conv2_weight = layers::init_uniform({kJointStage2, kJointStage1, 3, 3, 3}, 27 * kJointStage1, rng, kActivationGain);
  p.conv2_bias = layers::init_const({kJointStage2}, 0.0);
  const Shape s2 = stage2_target(frame_count, joint_count);
  const std::size_t flat = kJointStage2 * numel_of(s2);
  p.proj_weight = layers::init_uniform({flat, channels}, flat, rng, kLinearGain);
  p.proj_bias = layers::init_const({channels}, 0.0);
  return p;
}

Tensor joints_forward(const Tensor& joints, const JointsParams& p) {
  if (joints.rank() != 4 || joints.dim(3) != 3) {
    throw DimensionError("joints: expected [N x T x J x 3], got " + shape_str(joints.shape()));
  }
  if (joints.dim(2) != p.joint_count) {
    throw InputError("joints: expected " + std::to_string(p.joint_count) + " joints per frame, got " +
                     std::to_string(joints.dim(2)));
  }
  if (joints.dim(1) != p.frame_count) {
    throw InputError("joints: expected " + std::to_string(p.frame_count) + " frames, got " +
                     std::to_string(joints.dim(1)));
  }
  const std::size_t n = joints.dim(0), t = p.frame_count, j = p.joint_count;
  Tensor vol = ops::reshape(joints, {n, 1, t, j, 3});
  Tensor h1 = ops::gelu(ops::convolve(vol, p.conv1_weight, p.conv1_bias, ops::ConvKind::k3d, 1, 1));
  h1 = ops::pool(h1, ops::PoolKind::kAvgAdaptive, stage1_target(t, j));
  Tensor h2 = ops::gelu(ops::convolve(h1, p.conv2_weight, p.conv2_bias, ops::ConvKind::k3d, 1, 1));
  h2 = ops::pool(h2, ops::PoolKind::kAvgAdaptive, stage2_target(t, j));
  Tensor flat = ops::reshape(h2, {n, h2.numel() / n});
  Tensor proj = ops::linear(flat, p.proj_weight, p.proj_bias);
  const std::size_t c = p.channels();
  return ops::expand(ops::reshape(proj, {n, c, 1, 1}), {n, c, p.out_height, p.out_width});
}

Tensor joints_forward(const JointSequence& seq, const JointsParams& p) {
  if (seq.joints.rank() != 3) throw DimensionError("joints: expected [T x J x 3], got " + shape_str(seq.joints.shape()));
  return layers::squeeze0(joints_forward(layers::unsqueeze0(seq.joints), p));
}

namespace {
constexpr std::array<char, 4> kJointMagic = {'T', '3', 'J', 'T'};
}  // namespace

void save_joints(const std::filesystem::path& path, const Tensor& joints) {
  if (joints.rank() != 3 || joints.dim(2) != 3) throw DimensionError("save_joints: expected [T x J x 3]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open " + path.string() + " for writing");
  os.write(kJointMagic.data(), 4);
  detail::put_u32(os, static_cast<std::uint32_t>(joints.dim(0)));
  detail::put_u32(os, static_cast<std::uint32_t>(joints.dim(1)));
  for (double v : joints.data()) detail::put_f32(os, static_cast<float>(v));
}

Tensor load_joints(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kJointMagic) throw LoadError(path.string() + ": bad joint header (expected T3JT)");
  try {
    const std::size_t t = detail::get_u32(is);
    const std::size_t j = detail::get_u32(is);
    std::vector<double> v(t * j * 3);
    for (auto& x : v) x = detail::get_f32(is);
    return Tensor({t, j, 3}, std::move(v));
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace mtfuse
