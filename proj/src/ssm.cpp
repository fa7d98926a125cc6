#include "mtfuse/ssm.hpp"

#include <cmath>
#include <string>

#include "mtfuse/errors.hpp"
#include "mtfuse/ops.hpp"

namespace mtfuse {

void SsmParams::validate() const {
  if (A.rank() != 2) throw DimensionError("ssm: A must be [C x n], got " + shape_str(A.shape()));
  const Shape cn = A.shape();
  if (B.shape() != cn || C_mat.shape() != cn) {
    throw DimensionError("ssm: A " + shape_str(cn) + ", B " + shape_str(B.shape()) + ", C " +
                         shape_str(C_mat.shape()) + " must agree");
  }
  if (D.shape() != Shape{cn[0]}) throw DimensionError("ssm: D " + shape_str(D.shape()) + " for C=" + std::to_string(cn[0]));
  if (d_state.shape() != Shape{cn[1]} || d_dim.shape() != Shape{cn[0]}) {
    throw DimensionError("ssm: unit vectors " + shape_str(d_state.shape()) + " / " + shape_str(d_dim.shape()) +
                         " do not match " + shape_str(cn));
  }
}

Tensor unit_vector(std::size_t length) {
  if (length == 0) throw ArgumentError("unit_vector: zero length");
  return Tensor::full({length}, 1.0 / std::sqrt(static_cast<double>(length)));
}

SsmParams SsmParams::init(std::size_t channels, std::size_t state_dim, std::mt19937_64& rng) {
  SsmParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(state_dim));
  // decay exp(-softplus(A)) starts near 0.6-0.8 so a few frames of history survive
  p.A = Tensor::uniform({channels, state_dim}, rng, -1.5, 0.0).requires_grad_();
  p.B = Tensor::randn({channels, state_dim}, rng, s).requires_grad_();
  p.C_mat = Tensor::randn({channels, state_dim}, rng, s).requires_grad_();
  p.D = Tensor::uniform({channels}, rng, -0.1, 0.1).requires_grad_();
  p.d_state = unit_vector(state_dim);
  p.d_dim = unit_vector(channels);
  return p;
}

SsmParams SsmParams::init_sharing(const SsmParams& shared, std::mt19937_64& rng) {
  SsmParams p = init(shared.channels(), shared.state_dim(), rng);
  p.B = shared.B;
  p.C_mat = shared.C_mat;
  return p;
}

Tensor compute_gate(const SsmParams& p) {
  p.validate();
  const std::size_t c = p.channels(), n = p.state_dim();
  Tensor state_term = ops::matmul(p.A, ops::reshape(p.d_state, {n, 1}));
  // (B . C^T) . d_dim evaluated as B . (C^T . d_dim)
  Tensor ct_d = ops::matmul(ops::permute(p.C_mat, {1, 0}), ops::reshape(p.d_dim, {c, 1}));
  Tensor mix_term = ops::matmul(p.B, ct_d);
  Tensor pre = ops::add(ops::reshape(ops::add(state_term, mix_term), {c}), p.D);
  return ops::sigmoid(pre);
}

namespace {

Tensor forward_scan(const Tensor& x, const Tensor& log_decay, const Tensor& B, const Tensor& C_mat,
                    const Tensor& D) {
  const std::size_t nb = x.dim(0), steps = x.dim(1), group = x.dim(2), len = x.dim(3);
  const std::size_t ns = log_decay.dim(1);
  auto xs = x.data();
  auto as = log_decay.data();
  auto bs = B.data();
  auto cs = C_mat.data();
  auto ds = D.data();

  std::vector<double> decay(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) decay[i] = std::exp(as[i]);

  std::vector<double> y(xs.size());
  // hidden states kept for the backward sweep: [N x T x C' x L x n]
  std::vector<double> hidden(xs.size() * ns);
  std::vector<double> h(ns);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t j = 0; j < group; ++j)
      for (std::size_t l = 0; l < len; ++l) {
        std::fill(h.begin(), h.end(), 0.0);
        for (std::size_t t = 0; t < steps; ++t) {
          const std::size_t r = t * group + j;
          const std::size_t xi = ((b * steps + t) * group + j) * len + l;
          const double xv = xs[xi];
          double acc = ds[r] * xv;
          for (std::size_t s = 0; s < ns; ++s) {
            h[s] = decay[r * ns + s] * h[s] + bs[r * ns + s] * xv;
            acc += cs[r * ns + s] * h[s];
            hidden[xi * ns + s] = h[s];
          }
          y[xi] = acc;
        }
      }

  Tensor out(x.shape(), std::move(y));
  if (Tape* tape = recording_tape({&x, &log_decay, &B, &C_mat, &D})) {
    tape->record(
        "ssm_scan", {x, log_decay, B, C_mat, D}, out,
        [x, log_decay, B, C_mat, D, decay = std::move(decay), hidden = std::move(hidden), nb, steps, group, len,
         ns](std::span<const double> g) mutable {
          auto xs = x.data();
          auto bs = B.data();
          auto cs = C_mat.data();
          auto ds = D.data();
          std::vector<double> gx(xs.size(), 0.0), ga(decay.size(), 0.0), gb(decay.size(), 0.0),
              gc(decay.size(), 0.0), gd(ds.size(), 0.0);
          std::vector<double> carry(ns), gh(ns);
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t j = 0; j < group; ++j)
              for (std::size_t l = 0; l < len; ++l) {
                std::fill(carry.begin(), carry.end(), 0.0);
                for (std::size_t t = steps; t-- > 0;) {
                  const std::size_t r = t * group + j;
                  const std::size_t xi = ((b * steps + t) * group + j) * len + l;
                  const double gy = g[xi];
                  const double xv = xs[xi];
                  double gxv = gy * ds[r];
                  gd[r] += gy * xv;
                  for (std::size_t s = 0; s < ns; ++s) {
                    const std::size_t k = r * ns + s;
                    const double ht = hidden[xi * ns + s];
                    const double hprev = t > 0 ? hidden[(xi - group * len) * ns + s] : 0.0;
                    gh[s] = gy * cs[k] + carry[s];
                    gc[k] += gy * ht;
                    gb[k] += gh[s] * xv;
                    ga[k] += gh[s] * decay[k] * hprev;
                    gxv += gh[s] * bs[k];
                    carry[s] = gh[s] * decay[k];
                  }
                  gx[xi] += gxv;
                }
              }
          if (x.requires_grad()) x.accumulate_grad(gx);
          if (log_decay.requires_grad()) log_decay.accumulate_grad(ga);
          if (B.requires_grad()) B.accumulate_grad(gb);
          if (C_mat.requires_grad()) C_mat.accumulate_grad(gc);
          if (D.requires_grad()) D.accumulate_grad(gd);
        });
  }
  return out;
}

}  // namespace

Tensor scan_with_decay(const Tensor& x, const Tensor& log_decay, const Tensor& B, const Tensor& C_mat,
                       const Tensor& D, ScanDirection dir) {
  const bool unbatched = x.rank() == 3;
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("scan: input must be [T x C' x L] or [N x T x C' x L], got " + shape_str(x.shape()));
  }
  Tensor xb = unbatched ? ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  const std::size_t steps = xb.dim(1), group = xb.dim(2);
  if (log_decay.rank() != 2 || log_decay.dim(0) != steps * group) {
    throw DimensionError("scan: parameters hold " + (log_decay.rank() ? std::to_string(log_decay.dim(0)) : "0") +
                         " channel rows, input " + shape_str(x.shape()) + " needs T*C' = " +
                         std::to_string(steps * group));
  }
  const Shape cn = log_decay.shape();
  if (B.shape() != cn || C_mat.shape() != cn || D.shape() != Shape{cn[0]}) {
    throw DimensionError("scan: B " + shape_str(B.shape()) + ", C " + shape_str(C_mat.shape()) + ", D " +
                         shape_str(D.shape()) + " inconsistent with " + shape_str(cn));
  }
  Tensor y;
  if (dir == ScanDirection::kForward) {
    y = forward_scan(xb, log_decay, B, C_mat, D);
  } else {
    y = ops::flip(forward_scan(ops::flip(xb, 1), log_decay, B, C_mat, D), 1);
  }
  return unbatched ? ops::reshape(y, x.shape()) : y;
}

Tensor scan(const Tensor& x, const SsmParams& p, ScanDirection dir) {
  p.validate();
  Tensor log_decay = ops::scale(ops::softplus(p.A), -1.0);
  return scan_with_decay(x, log_decay, p.B, p.C_mat, p.D, dir);
}

SsmParams apply_update(const SsmParams& p, double learning_rate) {
  p.validate();
  auto step = [learning_rate](const Tensor& t, const char* name) {
    if (!t.has_grad()) throw PreconditionError(std::string("apply_update: no gradient for ") + name);
    std::vector<double> v(t.data().begin(), t.data().end());
    auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * g[i];
    return Tensor(t.shape(), std::move(v)).requires_grad_(t.requires_grad());
  };
  SsmParams out = p;
  out.A = step(p.A, "A");
  out.B = step(p.B, "B");
  out.C_mat = step(p.C_mat, "C");
  out.D = step(p.D, "D");
  return out;
}

}  // namespace mtfuse
