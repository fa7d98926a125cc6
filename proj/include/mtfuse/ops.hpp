#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtfuse/tensor.hpp"

// Differentiable primitives. Every function records a tape node when a tape
// is active on the calling thread and at least one input requires a gradient.
namespace mtfuse::ops {

// ---- elementwise and reductions -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// `x * s` where `s` is a single-element (possibly learnable) tensor.
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- layout ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor flip(const Tensor& x, std::size_t axis);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Broadcast size-1 axes up to `shape`; ranks must agree.
Tensor expand(const Tensor& x, const Shape& shape);

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product: [N x m x k] . [N x k x p] -> [N x m x p].
Tensor bmm(const Tensor& a, const Tensor& b);
/// Affine map over the last axis. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- convolution and pooling -----------------------------------------------

enum class ConvKind { k1d, k2d, k3d, kDepthwise2d };

/// Cross-correlation. Layouts: x [N x Cin x spatial...], weight
/// [Cout x Cin x kernel...] (depthwise: [C x 1 x kh x kw]). `bias` may be
/// undefined. Output size per axis is floor((in + 2*pad - k) / stride) + 1.
Tensor convolve(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvKind kind, std::size_t stride = 1,
                std::size_t padding = 0);

enum class PoolKind { kAvgFixed, kAvgAdaptive };

/// Average pooling over the trailing `size.size()` axes. For kAvgFixed `size`
/// is the window and padded cells are excluded from the average; for
/// kAvgAdaptive it is the target extent per axis.
Tensor pool(const Tensor& x, PoolKind kind, const Shape& size, std::size_t stride = 1, std::size_t padding = 0);

/// Nearest-neighbour resize of the trailing axes to `size`.
Tensor upsample_nearest(const Tensor& x, const Shape& size);

// ---- activations -------------------------------------------------------------

enum class Activation { kSigmoid, kGelu, kSoftmax };

Tensor activation(const Tensor& x, Activation kind, std::size_t axis = 0);
Tensor sigmoid(const Tensor& x);
/// Exact erf form.
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softplus(const Tensor& x);

// ---- normalization and losses ------------------------------------------------

enum class NormMode { kTrain, kEval };

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;

  static RunningStats fresh(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), 0.1};
  }
};

/// Per-channel normalization over every axis except axis 1. Train mode
/// normalizes with batch statistics and folds them into `stats`.
Tensor batchnorm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps, NormMode mode,
                 RunningStats& stats);

/// Mean over the batch of -log softmax(logits)[label]. logits: [N x K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace mtfuse::ops
