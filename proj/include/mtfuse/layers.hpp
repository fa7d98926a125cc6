#pragma once

#include <random>

#include "mtfuse/tensor.hpp"

// Small compositions of primitives shared by the network modules.
namespace mtfuse::layers {

/// Affine map over axis 1 of [N x C x ...]: weight [C x C_out], bias [C_out]
/// (bias may be undefined).
Tensor channel_linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// 1-d convolution running along the channel axis of [N x C x H x W], one
/// input and one output feature; weight [1 x 1 x k], bias [1].
Tensor channel_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x [N x C x ...] scaled per channel by w [C].
Tensor scale_channels(const Tensor& x, const Tensor& w);

/// Global average over the trailing spatial axes: [N x C x ...] -> [N x C].
Tensor global_avg_pool(const Tensor& x);

/// Adds a leading batch axis of size 1.
Tensor unsqueeze0(const Tensor& x);
/// Drops a leading batch axis of size 1.
Tensor squeeze0(const Tensor& x);

/// Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) initialisation, marked
/// trainable. gain sqrt(3) preserves variance; sqrt(6) also offsets the
/// halving by a GELU/ReLU-like activation.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0);
Tensor init_const(Shape shape, double value);

}  // namespace mtfuse::layers
