#pragma once

#include <cstddef>
#include <random>

#include "mtfuse/tensor.hpp"

namespace mtfuse {

enum class ScanDirection { kForward, kBackward };

/// Diagonal state-space parameters for C channels with state size n.
///
/// `A` is stored unconstrained; the recurrence uses the per-step decay
/// exp(-softplus(A)), which keeps the transition in (0, 1). The gate reads
/// `A` directly. `d_state` and `d_dim` are fixed unit vectors and never
/// receive updates.
struct SsmParams {
  Tensor A;      // [C x n]
  Tensor B;      // [C x n]
  Tensor C_mat;  // [C x n]
  Tensor D;      // [C]
  Tensor d_state;  // [n]
  Tensor d_dim;    // [C]

  std::size_t channels() const { return A.dim(0); }
  std::size_t state_dim() const { return A.dim(1); }

  /// Throws DimensionError when the six tensors disagree on C or n.
  void validate() const;

  static SsmParams init(std::size_t channels, std::size_t state_dim, std::mt19937_64& rng);
  /// Same B and C_mat handles as `shared`, fresh A and D.
  static SsmParams init_sharing(const SsmParams& shared, std::mt19937_64& rng);
};

/// All-ones vector scaled to unit Euclidean norm.
Tensor unit_vector(std::size_t length);

/// sigmoid(A . d_state + (B . C_mat^T) . d_dim + D), shape [C].
Tensor compute_gate(const SsmParams& p);

/// Linear recurrence over the temporal axis of x, shaped [T x C' x L] or
/// [N x T x C' x L]. Parameter row t*C' + j drives group channel j at step t,
/// so the parameters must have exactly T*C' rows.
Tensor scan(const Tensor& x, const SsmParams& p, ScanDirection dir);

/// The recurrence with an explicit log-decay (entries <= 0 keep it stable):
///   h_t = exp(a) * h_{t-1} + b * x_t,   y_t = <c, h_t> + d * x_t.
Tensor scan_with_decay(const Tensor& x, const Tensor& log_decay, const Tensor& B, const Tensor& C_mat,
                       const Tensor& D, ScanDirection dir);

/// One plain gradient step on A, B, C_mat and D using their gradient slots.
/// Returns fresh tensors; `p` is left untouched.
SsmParams apply_update(const SsmParams& p, double learning_rate);

}  // namespace mtfuse
