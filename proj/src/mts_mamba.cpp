#include "mtfuse/mts_mamba.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "mtfuse/errors.hpp"
#include "mtfuse/layers.hpp"
#include "mtfuse/ops.hpp"

namespace mtfuse {

std::size_t StemParams::channels() const {
  return frame_count * std::accumulate(per_frame.begin(), per_frame.end(), std::size_t{0});
}

StemParams StemParams::init(std::span<const ViewId> views, std::size_t frame_count, std::size_t channels,
                            std::size_t out_height, std::size_t out_width, std::size_t kernel,
                            std::mt19937_64& rng) {
  if (views.empty()) throw ConfigError("stem: no views");
  if (frame_count == 0 || channels % frame_count != 0) {
    throw ConfigError("stem: channels (" + std::to_string(channels) + ") must be a multiple of frame_count (" +
                      std::to_string(frame_count) + ")");
  }
  const std::size_t group = channels / frame_count;
  if (group < views.size()) {
    throw ConfigError("stem: channels/frame_count = " + std::to_string(group) + " leaves no channel for some of the " +
                      std::to_string(views.size()) + " views");
  }
  StemParams p;
  p.views.assign(views.begin(), views.end());
  p.frame_count = frame_count;
  p.out_height = out_height;
  p.out_width = out_width;
  const std::size_t in_ch = 3 * frame_count;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const std::size_t share = group / views.size() + (v < group % views.size() ? 1 : 0);
    p.per_frame.push_back(share);
    p.dw_weight.push_back(layers::init_uniform({in_ch, 1, kernel, kernel}, kernel * kernel, rng));
    p.dw_bias.push_back(layers::init_uniform({in_ch}, kernel * kernel, rng));
    p.pw_weight.push_back(layers::init_uniform({frame_count * share, in_ch, 1, 1}, in_ch, rng));
    p.pw_bias.push_back(layers::init_uniform({frame_count * share}, in_ch, rng));
  }
  return p;
}

Tensor stem(std::span<const Tensor> views, const StemParams& p) {
  if (views.size() != p.views.size()) {
    const std::size_t missing = std::min(views.size(), p.views.size());
    throw InputError("stem: expected " + std::to_string(p.views.size()) + " views, got " +
                     std::to_string(views.size()) +
                     (missing < p.views.size() ? "; missing view '" + std::string(view_name(p.views[missing])) + "'"
                                               : std::string()));
  }
  const std::size_t t = p.frame_count;
  std::vector<Tensor> grouped;
  std::size_t n = 0;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const Tensor& x = views[v];
    if (x.rank() != 5 || x.dim(1) != t || x.dim(2) != 3) {
      throw DimensionError("stem: view '" + std::string(view_name(p.views[v])) + "' must be [N x " +
                           std::to_string(t) + " x 3 x H x W], got " + shape_str(x.shape()));
    }
    if (v == 0) n = x.dim(0);
    if (x.dim(0) != n) throw DimensionError("stem: views disagree on batch size");
    // frames stacked on channels: channel t*3 + rgb
    Tensor stacked = ops::reshape(x, {n, 3 * t, x.dim(3), x.dim(4)});
    Tensor dw = ops::convolve(stacked, p.dw_weight[v], p.dw_bias[v], ops::ConvKind::kDepthwise2d);
    Tensor pw = ops::convolve(dw, p.pw_weight[v], p.pw_bias[v], ops::ConvKind::k2d);
    Tensor pooled = ops::pool(pw, ops::PoolKind::kAvgAdaptive, {p.out_height, p.out_width});
    grouped.push_back(ops::reshape(pooled, {n, t, p.per_frame[v], p.out_height, p.out_width}));
  }
  Tensor joined = ops::concat(grouped, 2);
  return ops::reshape(joined, {n, p.channels(), p.out_height, p.out_width});
}

Tensor stem(const std::vector<ViewSequence>& views, const StemParams& p) {
  std::vector<Tensor> ordered;
  for (ViewId id : p.views) {
    auto it = std::find_if(views.begin(), views.end(), [id](const ViewSequence& s) { return s.view == id; });
    if (it == views.end()) throw InputError("stem: missing view '" + std::string(view_name(id)) + "'");
    if (it->frames.rank() != 4 || it->frames.dim(0) != p.frame_count) {
      throw DimensionError("stem: view '" + std::string(view_name(id)) + "' must be [" +
                           std::to_string(p.frame_count) + " x 3 x H x W], got " + shape_str(it->frames.shape()));
    }
    ordered.push_back(layers::unsqueeze0(it->frames));
  }
  return layers::squeeze0(stem(ordered, p));
}

MtsBlockParams MtsBlockParams::init(std::size_t channels, std::size_t state_dim, MtsBlockOptions options,
                                    std::mt19937_64& rng, double gamma) {
  if (options.frame_count == 0 || channels % options.frame_count != 0) {
    throw ConfigError("mts_block: channels (" + std::to_string(channels) + ") % frame_count (" +
                      std::to_string(options.frame_count) + ") != 0");
  }
  MtsBlockParams p;
  p.options = options;
  p.conv_weight = layers::init_uniform({1, 1, 3}, 3, rng);
  p.conv_bias = layers::init_const({1}, 0.0);
  p.ssm_forward = SsmParams::init(channels, state_dim, rng);
  p.ssm_backward = SsmParams::init_sharing(p.ssm_forward, rng);
  p.local_weight = layers::init_uniform({channels, channels}, channels, rng);
  p.local_bias = layers::init_const({channels}, 0.0);
  p.global_weight = layers::init_uniform({channels, channels}, channels, rng);
  p.global_bias = layers::init_const({channels}, 0.0);
  p.out_weight = layers::init_uniform({channels, channels}, channels, rng);
  p.out_bias = layers::init_const({channels}, 0.0);
  p.gamma = layers::init_const({1}, gamma);
  return p;
}

namespace {

Tensor scan_path(const Tensor& x, const SsmParams& ssm, ScanDirection dir, std::size_t frames) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor seq = ops::reshape(x, {n, frames, c / frames, h * w});
  return ops::reshape(scan(seq, ssm, dir), {n, c, h, w});
}

Tensor local_pool(const Tensor& x) { return ops::pool(x, ops::PoolKind::kAvgFixed, {3, 3}, 1, 1); }

Tensor global_pool(const Tensor& x, std::size_t grid) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor coarse = ops::pool(x, ops::PoolKind::kAvgAdaptive, {std::min(grid, h), std::min(grid, w)});
  return ops::upsample_nearest(coarse, {h, w});
}

}  // namespace

Tensor mts_block(const Tensor& features, const MtsBlockParams& p) {
  if (features.rank() == 3) return layers::squeeze0(mts_block(layers::unsqueeze0(features), p));
  if (features.rank() != 4) throw DimensionError("mts_block: expected [N x C x H x W], got " + shape_str(features.shape()));
  const std::size_t c = features.dim(1);
  const std::size_t frames = p.options.frame_count;
  if (frames == 0 || c % frames != 0) {
    throw ConfigError("mts_block: channels (" + std::to_string(c) + ") % frame_count (" + std::to_string(frames) +
                      ") != 0");
  }
  if (p.channels() != c) {
    throw DimensionError("mts_block: block built for " + std::to_string(p.channels()) + " channels, input " +
                         shape_str(features.shape()));
  }

  Tensor enhanced = ops::gelu(layers::channel_conv1d(features, p.conv_weight, p.conv_bias));

  Tensor fwd = scan_path(enhanced, p.ssm_forward, ScanDirection::kForward, frames);
  Tensor local = layers::channel_linear(local_pool(fwd), p.local_weight, p.local_bias);

  const ScanDirection global_dir = p.options.dual_scan ? ScanDirection::kBackward : ScanDirection::kForward;
  Tensor bwd = scan_path(enhanced, p.ssm_backward, global_dir, frames);
  Tensor pooled = p.options.global_local ? global_pool(bwd, p.options.global_pool) : local_pool(bwd);
  Tensor global = layers::channel_linear(pooled, p.global_weight, p.global_bias);

  Tensor gate = compute_gate(p.ssm_forward);
  Tensor mixed = layers::scale_channels(ops::add(local, global), gate);
  Tensor projected = layers::channel_linear(mixed, p.out_weight, p.out_bias);
  return ops::add(features, ops::scale_by(projected, p.gamma));
}

Tensor mts_stack(const Tensor& features, std::span<const MtsBlockParams> blocks) {
  if (blocks.empty()) throw ConfigError("mts_stack: at least one block is required");
  Tensor x = features;
  for (const auto& b : blocks) x = mts_block(x, b);
  return x;
}

}  // namespace mtfuse
