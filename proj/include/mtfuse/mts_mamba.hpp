#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "mtfuse/ssm.hpp"
#include "mtfuse/tensor.hpp"
#include "mtfuse/types.hpp"

namespace mtfuse {

/// T frames of one camera, [T x 3 x H x W] with pixels in [0, 1].
struct ViewSequence {
  ViewId view = ViewId::kFront;
  Tensor frames;
};

/// Per-view depthwise + pointwise projection feeding one branch.
///
/// View v contributes `per_frame[v]` channels to every frame group, so the
/// stem output has C = T * sum(per_frame) channels laid out as
/// [T x sum(per_frame)] and the temporal axis stays recoverable.
struct StemParams {
  std::vector<ViewId> views;
  std::vector<std::size_t> per_frame;
  std::vector<Tensor> dw_weight;  // [3T x 1 x k x k]
  std::vector<Tensor> dw_bias;    // [3T]
  std::vector<Tensor> pw_weight;  // [T*per_frame x 3T x 1 x 1]
  std::vector<Tensor> pw_bias;    // [T*per_frame]
  std::size_t frame_count = 0;
  std::size_t out_height = 0;
  std::size_t out_width = 0;

  std::size_t channels() const;

  /// Splits C/T per-frame channels across the views as evenly as possible.
  static StemParams init(std::span<const ViewId> views, std::size_t frame_count, std::size_t channels,
                         std::size_t out_height, std::size_t out_width, std::size_t kernel, std::mt19937_64& rng);
};

/// Batched stem: `views[v]` is [N x T x 3 x Hv x Wv] for params.views[v].
/// Returns F_f as [N x C x H x W].
Tensor stem(std::span<const Tensor> views, const StemParams& p);

/// Single sample: looks each expected view up by id. Returns [C x H x W].
Tensor stem(const std::vector<ViewSequence>& views, const StemParams& p);

struct MtsBlockOptions {
  std::size_t frame_count = 16;
  std::size_t global_pool = 3;
  bool dual_scan = true;     // false: the global path scans forward too
  bool global_local = true;  // false: the global path pools locally like the local path
};

struct MtsBlockParams {
  Tensor conv_weight;  // [1 x 1 x 3], along the channel axis
  Tensor conv_bias;    // [1]
  SsmParams ssm_forward;
  SsmParams ssm_backward;  // shares B and C_mat with ssm_forward
  Tensor local_weight, local_bias;    // [C x C], [C]
  Tensor global_weight, global_bias;  // [C x C], [C]
  Tensor out_weight, out_bias;        // [C x C], [C]
  Tensor gamma;                       // [1]
  MtsBlockOptions options;

  std::size_t channels() const { return local_weight.dim(0); }

  static MtsBlockParams init(std::size_t channels, std::size_t state_dim, MtsBlockOptions options,
                             std::mt19937_64& rng, double gamma = 0.5);
};

/// F_o = F_f + gamma * LN(W_ssm (.) (F_l + F_g)). Accepts [C x H x W] or
/// [N x C x H x W]; the result has the input's shape.
Tensor mts_block(const Tensor& features, const MtsBlockParams& p);

/// Applies the blocks in order. Throws ConfigError on an empty list.
Tensor mts_stack(const Tensor& features, std::span<const MtsBlockParams> blocks);

}  // namespace mtfuse
