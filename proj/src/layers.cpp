#include "mtfuse/layers.hpp"

#include <cmath>

#include "mtfuse/errors.hpp"
#include "mtfuse/ops.hpp"

namespace mtfuse::layers {

Tensor channel_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 2) throw DimensionError("channel_linear: input " + shape_str(x.shape()) + " has no channel axis");
  const std::size_t rank = x.rank();
  std::vector<std::size_t> to_last(rank), back(rank);
  to_last[0] = 0;
  for (std::size_t i = 1; i + 1 < rank; ++i) to_last[i] = i + 1;
  to_last[rank - 1] = 1;
  for (std::size_t i = 0; i < rank; ++i) back[to_last[i]] = i;
  Tensor y = ops::linear(ops::permute(x, to_last), weight, bias);
  return ops::permute(y, back);
}

Tensor channel_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4) throw DimensionError("channel_conv1d: expected [N x C x H x W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = weight.dim(2);
  Tensor seq = ops::reshape(ops::permute(ops::reshape(x, {n, c, h * w}), {0, 2, 1}), {n * h * w, 1, c});
  Tensor conv = ops::convolve(seq, weight, bias, ops::ConvKind::k1d, 1, k / 2);
  return ops::reshape(ops::permute(ops::reshape(conv, {n, h * w, c}), {0, 2, 1}), {n, c, h, w});
}

Tensor scale_channels(const Tensor& x, const Tensor& w) {
  if (x.rank() < 2 || w.rank() != 1 || w.dim(0) != x.dim(1)) {
    throw DimensionError("scale_channels: weights " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  }
  Shape one(x.rank(), 1);
  one[1] = x.dim(1);
  return ops::mul(x, ops::expand(ops::reshape(w, one), x.shape()));
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 3) throw DimensionError("global_avg_pool: input " + shape_str(x.shape()) + " has no spatial axes");
  const std::size_t spatial = x.numel() / (x.dim(0) * x.dim(1));
  Tensor flat = ops::reshape(x, {x.dim(0), x.dim(1), spatial});
  return ops::reshape(ops::pool(flat, ops::PoolKind::kAvgAdaptive, {1}), {x.dim(0), x.dim(1)});
}

Tensor unsqueeze0(const Tensor& x) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return ops::reshape(x, s);
}

Tensor squeeze0(const Tensor& x) {
  if (x.rank() == 0 || x.dim(0) != 1) throw DimensionError("squeeze0: leading axis of " + shape_str(x.shape()) + " is not 1");
  Shape s(x.shape().begin() + 1, x.shape().end());
  return ops::reshape(x, s);
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound).requires_grad_();
}

Tensor init_const(Shape shape, double value) { return Tensor::full(std::move(shape), value).requires_grad_(); }

}  // namespace mtfuse::layers
