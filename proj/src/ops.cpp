#include "mtfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "mtfuse/errors.hpp"

namespace mtfuse::ops {

namespace {

using Strides = std::vector<std::ptrdiff_t>;

Strides row_major_strides(const Shape& shape) {
  Strides s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * static_cast<std::ptrdiff_t>(shape[i]);
  return s;
}

// A read pattern over `src`: output element with multi-index i lives at
// offset + sum(i_k * strides_k). Covers permute, flip, slice and broadcast.
struct StridedView {
  Shape shape;
  Strides strides;
  std::ptrdiff_t offset = 0;
};

template <typename Fn>
void walk(const StridedView& v, Fn&& fn) {
  const std::size_t rank = v.shape.size();
  const std::size_t total = numel_of(v.shape);
  if (total == 0) return;
  if (rank == 0) {
    fn(std::size_t{0}, v.offset);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t last = v.shape[rank - 1];
  const std::ptrdiff_t last_stride = v.strides[rank - 1];
  std::size_t flat = 0;
  std::ptrdiff_t base = v.offset;
  while (flat < total) {
    std::ptrdiff_t src = base;
    for (std::size_t j = 0; j < last; ++j, src += last_stride) fn(flat++, src);
    // advance the outer counters
    for (std::size_t a = rank - 1; a-- > 0;) {
      base += v.strides[a];
      if (++idx[a] < v.shape[a]) break;
      base -= v.strides[a] * static_cast<std::ptrdiff_t>(v.shape[a]);
      idx[a] = 0;
    }
  }
}

std::vector<double> gather(std::span<const double> src, const StridedView& v) {
  std::vector<double> out(numel_of(v.shape));
  walk(v, [&](std::size_t flat, std::ptrdiff_t s) { out[flat] = src[static_cast<std::size_t>(s)]; });
  return out;
}

void scatter_add(std::span<const double> g, const StridedView& v, std::span<double> dst) {
  walk(v, [&](std::size_t flat, std::ptrdiff_t s) { dst[static_cast<std::size_t>(s)] += g[flat]; });
}

Tensor strided_op(const char* kind, const Tensor& x, StridedView view) {
  Tensor out(view.shape, gather(x.data(), view));
  if (Tape* tape = recording_tape({&x})) {
    tape->record(kind, {x}, out, [x, view](std::span<const double> g) mutable {
      scatter_add(g, view, x.mutable_grad());
    });
  }
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = fwd(xs[i]);
  Tensor out(x.shape(), std::move(y));
  if (Tape* tape = recording_tape({&x})) {
    tape->record(kind, {x}, out, [x, out, deriv](std::span<const double> g) mutable {
      auto gx = x.mutable_grad();
      auto xs = x.data();
      auto ys = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Splits a shape into (outer, trailing spatial axes padded to three).
struct Trailing {
  std::size_t outer = 1;
  std::size_t dims[3] = {1, 1, 1};
};

Trailing split_trailing(const Shape& shape, std::size_t nd, const char* op) {
  if (nd == 0 || nd > 3 || shape.size() < nd) {
    throw ArgumentError(std::string(op) + ": cannot pool " + std::to_string(nd) + " trailing axes of " +
                        shape_str(shape));
  }
  Trailing t;
  for (std::size_t i = 0; i < shape.size() - nd; ++i) t.outer *= shape[i];
  for (std::size_t i = 0; i < nd; ++i) t.dims[3 - nd + i] = shape[shape.size() - nd + i];
  return t;
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto as = a.data(), bs = b.data();
  std::vector<double> v(as.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = as[i] + bs[i];
  Tensor out(a.shape(), std::move(v));
  if (Tape* tape = recording_tape({&a, &b})) {
    tape->record("add", {a, b}, out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto as = a.data(), bs = b.data();
  std::vector<double> v(as.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = as[i] - bs[i];
  Tensor out(a.shape(), std::move(v));
  if (Tape* tape = recording_tape({&a, &b})) {
    tape->record("sub", {a, b}, out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto as = a.data(), bs = b.data();
  std::vector<double> v(as.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = as[i] * bs[i];
  Tensor out(a.shape(), std::move(v));
  if (Tape* tape = recording_tape({&a, &b})) {
    tape->record("mul", {a, b}, out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto bs = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto as = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: scale must hold one value, got " + shape_str(s.shape()));
  const double k = s.item();
  auto xs = x.data();
  std::vector<double> v(xs.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xs[i] * k;
  Tensor out(x.shape(), std::move(v));
  if (Tape* tape = recording_tape({&x, &s})) {
    tape->record("scale_by", {x, s}, out, [x, s](std::span<const double> g) mutable {
      const double k = s.item();
      auto xs = x.data();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * k;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs[i];
        s.mutable_grad()[0] += acc;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  auto xs = x.data();
  Tensor out = Tensor::scalar(std::accumulate(xs.begin(), xs.end(), 0.0));
  if (Tape* tape = recording_tape({&x})) {
    tape->record("sum", {x}, out, [x](std::span<const double> g) mutable {
      for (auto& v : x.mutable_grad()) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ArgumentError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- layout --------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (Tape* tape = recording_tape({&x})) {
    tape->record("reshape", {x}, out, [x](std::span<const double> g) mutable { x.accumulate_grad(g); });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) throw ArgumentError("permute: permutation rank differs from " + shape_str(x.shape()));
  std::vector<bool> seen(perm.size(), false);
  auto in_strides = row_major_strides(x.shape());
  StridedView view;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw ArgumentError("permute: invalid permutation");
    seen[perm[i]] = true;
    view.shape.push_back(x.shape()[perm[i]]);
    view.strides.push_back(in_strides[perm[i]]);
  }
  return strided_op("permute", x, std::move(view));
}

Tensor flip(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ArgumentError("flip: axis out of range for " + shape_str(x.shape()));
  StridedView view{x.shape(), row_major_strides(x.shape()), 0};
  if (x.shape()[axis] > 0) {
    view.offset = view.strides[axis] * static_cast<std::ptrdiff_t>(x.shape()[axis] - 1);
    view.strides[axis] = -view.strides[axis];
  }
  return strided_op("flip", x, std::move(view));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.shape()[axis]) {
    throw ArgumentError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                        shape_str(x.shape()));
  }
  StridedView view{x.shape(), row_major_strides(x.shape()), 0};
  view.shape[axis] = end - begin;
  view.offset = view.strides[axis] * static_cast<std::ptrdiff_t>(begin);
  return strided_op("slice", x, std::move(view));
}

Tensor expand(const Tensor& x, const Shape& shape) {
  if (shape.size() != x.rank()) {
    throw DimensionError("expand: rank mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  StridedView view{shape, row_major_strides(x.shape()), 0};
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (x.shape()[i] == shape[i]) continue;
    if (x.shape()[i] != 1) {
      throw DimensionError("expand: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    view.strides[i] = 0;
  }
  return strided_op("expand", x, std::move(view));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ArgumentError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(s));
    out_shape[axis] += s[axis];
    s[axis] = first[axis];
    if (s != first) throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(first));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> v(numel_of(out_shape));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[axis] * inner;
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  v.begin() + static_cast<std::ptrdiff_t>(o * row + col));
    }
    col += chunk;
  }
  Tensor out(out_shape, std::move(v));
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  if (Tape* tape = recording_tape(std::span<const Tensor>(inputs))) {
    tape->record("concat", inputs, out, [inputs, outer, inner, row, axis](std::span<const double> g) mutable {
      std::size_t col = 0;
      for (auto& p : inputs) {
        const std::size_t chunk = p.shape()[axis] * inner;
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += g[o * row + col + j];
          }
        }
        col += chunk;
      }
    });
  }
  return out;
}

// ---- linear algebra --------------------------------------------------------------

namespace {

// c[m x p] += a[m x k] . b[k x p]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      const double* bl = b + l * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[m x k] += g[m x p] . b[k x p]^T
void gemm_acc_bt(const double* g, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double* gi = g + i * p;
      const double* bl = b + l * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += gi[j] * bl[j];
      c[i * k + l] += acc;
    }
  }
}

// c[k x p] += a[m x k]^T . g[m x p]
void gemm_acc_at(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      double* cl = c + l * p;
      const double* gi = g + i * p;
      for (std::size_t j = 0; j < p; ++j) cl[j] += av * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> v(m * p, 0.0);
  gemm_acc(a.data().data(), b.data().data(), v.data(), m, k, p);
  Tensor out({m, p}, std::move(v));
  if (Tape* tape = recording_tape({&a, &b})) {
    tape->record("matmul", {a, b}, out, [a, b, m, k, p](std::span<const double> g) mutable {
      if (a.requires_grad()) gemm_acc_bt(g.data(), b.data().data(), a.mutable_grad().data(), m, k, p);
      if (b.requires_grad()) gemm_acc_at(a.data().data(), g.data(), b.mutable_grad().data(), m, k, p);
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
  std::vector<double> v(n * m * p, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    gemm_acc(a.data().data() + i * m * k, b.data().data() + i * k * p, v.data() + i * m * p, m, k, p);
  }
  Tensor out({n, m, p}, std::move(v));
  if (Tape* tape = recording_tape({&a, &b})) {
    tape->record("bmm", {a, b}, out, [a, b, n, m, k, p](std::span<const double> g) mutable {
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m * p;
        if (a.requires_grad())
          gemm_acc_bt(gi, b.data().data() + i * k * p, a.mutable_grad().data() + i * m * k, m, k, p);
        if (b.requires_grad())
          gemm_acc_at(a.data().data() + i * m * k, gi, b.mutable_grad().data() + i * k * p, m, k, p);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<double> v(rows * out_dim, 0.0);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), v.begin() + r * out_dim);
  }
  gemm_acc(x.data().data(), weight.data().data(), v.data(), rows, in, out_dim);
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out(std::move(out_shape), std::move(v));
  if (Tape* tape = recording_tape({&x, &weight, &bias})) {
    tape->record("linear", {x, weight, bias}, out,
                 [x, weight, bias, rows, in, out_dim](std::span<const double> g) mutable {
                   if (x.requires_grad())
                     gemm_acc_bt(g.data(), weight.data().data(), x.mutable_grad().data(), rows, in, out_dim);
                   if (weight.requires_grad())
                     gemm_acc_at(x.data().data(), g.data(), weight.mutable_grad().data(), rows, in, out_dim);
                   if (bias.defined() && bias.requires_grad()) {
                     auto gb = bias.mutable_grad();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                   }
                 });
  }
  return out;
}

// ---- convolution -------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t n = 0, cin = 0, cout = 0, groups = 1, cin_pg = 0, cout_pg = 0;
  std::size_t in[3] = {1, 1, 1}, k[3] = {1, 1, 1}, out[3] = {1, 1, 1};
  std::size_t stride[3] = {1, 1, 1}, pad[3] = {0, 0, 0};

  std::size_t in_vol() const { return in[0] * in[1] * in[2]; }
  std::size_t out_vol() const { return out[0] * out[1] * out[2]; }
  std::size_t k_vol() const { return k[0] * k[1] * k[2]; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, ConvKind kind, std::size_t stride, std::size_t padding) {
  std::size_t nd = 0;
  switch (kind) {
    case ConvKind::k1d: nd = 1; break;
    case ConvKind::k2d: nd = 2; break;
    case ConvKind::kDepthwise2d: nd = 2; break;
    case ConvKind::k3d: nd = 3; break;
  }
  if (stride == 0) throw ArgumentError("convolve: stride must be positive");
  if (x.rank() != nd + 2 || w.rank() != nd + 2) {
    throw DimensionError("convolve: input " + shape_str(x.shape()) + " and kernel " + shape_str(w.shape()) +
                         " do not match a " + std::to_string(nd) + "-d convolution");
  }
  ConvGeom g;
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.cout = w.dim(0);
  if (kind == ConvKind::kDepthwise2d) {
    if (w.dim(1) != 1 || g.cout != g.cin) {
      throw DimensionError("convolve: depthwise kernel " + shape_str(w.shape()) + " for input " +
                           shape_str(x.shape()) + " needs shape [C x 1 x kh x kw]");
    }
    g.groups = g.cin;
  } else if (w.dim(1) != g.cin) {
    throw DimensionError("convolve: kernel " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input " + shape_str(x.shape()) + " has " + std::to_string(g.cin));
  }
  g.cin_pg = g.cin / g.groups;
  g.cout_pg = g.cout / g.groups;
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t a = 3 - nd + i;
    g.in[a] = x.dim(2 + i);
    g.k[a] = w.dim(2 + i);
    g.stride[a] = stride;
    g.pad[a] = padding;
    if (g.k[a] == 0 || g.k[a] > g.in[a] + 2 * padding) {
      throw DimensionError("convolve: kernel " + shape_str(w.shape()) + " larger than padded input " +
                           shape_str(x.shape()));
    }
    g.out[a] = (g.in[a] + 2 * padding - g.k[a]) / stride + 1;
  }
  return g;
}

// Output indices o with 0 <= o*s + kk - p < in form [lo, hi).
void valid_range(std::size_t in, std::size_t out, std::size_t s, std::size_t kk, std::size_t p, std::size_t& lo,
                 std::size_t& hi) {
  lo = kk >= p ? 0 : (p - kk + s - 1) / s;
  if (in + p < kk + 1) {
    hi = 0;
  } else {
    hi = std::min(out, (in - 1 + p - kk) / s + 1);
  }
  if (lo > hi) lo = hi;
}

// Visits every (input offset, output offset, weight offset) triple of the
// convolution and hands contiguous output rows to `row`.
template <typename RowFn>
void conv_sweep(const ConvGeom& g, RowFn&& row) {
  const std::size_t in_vol = g.in_vol(), out_vol = g.out_vol(), k_vol = g.k_vol();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oc = 0; oc < g.cout; ++oc) {
      const std::size_t grp = oc / g.cout_pg;
      const std::size_t out_base = (n * g.cout + oc) * out_vol;
      for (std::size_t icg = 0; icg < g.cin_pg; ++icg) {
        const std::size_t ic = grp * g.cin_pg + icg;
        const std::size_t in_base = (n * g.cin + ic) * in_vol;
        const std::size_t w_base = (oc * g.cin_pg + icg) * k_vol;
        for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
          std::size_t d_lo, d_hi;
          valid_range(g.in[0], g.out[0], g.stride[0], kd, g.pad[0], d_lo, d_hi);
          for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
            std::size_t h_lo, h_hi;
            valid_range(g.in[1], g.out[1], g.stride[1], kh, g.pad[1], h_lo, h_hi);
            for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
              std::size_t w_lo, w_hi;
              valid_range(g.in[2], g.out[2], g.stride[2], kw, g.pad[2], w_lo, w_hi);
              if (w_lo >= w_hi) continue;
              const std::size_t w_off = w_base + (kd * g.k[1] + kh) * g.k[2] + kw;
              for (std::size_t od = d_lo; od < d_hi; ++od) {
                const std::size_t id = od * g.stride[0] + kd - g.pad[0];
                for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                  const std::size_t ih = oh * g.stride[1] + kh - g.pad[1];
                  const std::size_t out_row = out_base + (od * g.out[1] + oh) * g.out[2];
                  const std::size_t in_row = in_base + (id * g.in[1] + ih) * g.in[2];
                  // input column for output column ow is ow*stride + kw - pad
                  row(in_row + w_lo * g.stride[2] + kw - g.pad[2], out_row + w_lo, w_off, w_hi - w_lo,
                      g.stride[2]);
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor convolve(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvKind kind, std::size_t stride,
                std::size_t padding) {
  const ConvGeom g = conv_geometry(x, weight, kind, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("convolve: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.cout) +
                         " output channels");
  }
  const std::size_t out_vol = g.out_vol();
  std::vector<double> v(g.n * g.cout * out_vol, 0.0);
  if (bias.defined()) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t oc = 0; oc < g.cout; ++oc)
        std::fill_n(v.begin() + static_cast<std::ptrdiff_t>((n * g.cout + oc) * out_vol), out_vol, bias[oc]);
  }
  const double* xs = x.data().data();
  const double* ws = weight.data().data();
  conv_sweep(g, [&](std::size_t in_off, std::size_t out_off, std::size_t w_off, std::size_t len, std::size_t s) {
    const double wv = ws[w_off];
    const double* src = xs + in_off;
    double* dst = v.data() + out_off;
    for (std::size_t j = 0; j < len; ++j) dst[j] += wv * src[j * s];
  });

  Shape out_shape{g.n, g.cout};
  const std::size_t nd = x.rank() - 2;
  for (std::size_t i = 0; i < nd; ++i) out_shape.push_back(g.out[3 - nd + i]);
  Tensor out(std::move(out_shape), std::move(v));
  if (Tape* tape = recording_tape({&x, &weight, &bias})) {
    tape->record("convolve", {x, weight, bias}, out, [x, weight, bias, g](std::span<const double> gout) mutable {
      const bool want_x = x.requires_grad(), want_w = weight.requires_grad();
      double* gx = want_x ? x.mutable_grad().data() : nullptr;
      double* gw = want_w ? weight.mutable_grad().data() : nullptr;
      const double* xs = x.data().data();
      const double* ws = weight.data().data();
      conv_sweep(g, [&](std::size_t in_off, std::size_t out_off, std::size_t w_off, std::size_t len, std::size_t s) {
        const double* go = gout.data() + out_off;
        if (want_x) {
          const double wv = ws[w_off];
          double* dst = gx + in_off;
          for (std::size_t j = 0; j < len; ++j) dst[j * s] += wv * go[j];
        }
        if (want_w) {
          const double* src = xs + in_off;
          double acc = 0.0;
          for (std::size_t j = 0; j < len; ++j) acc += go[j] * src[j * s];
          gw[w_off] += acc;
        }
      });
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        const std::size_t vol = g.out_vol();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t oc = 0; oc < g.cout; ++oc) {
            const double* go = gout.data() + (n * g.cout + oc) * vol;
            gb[oc] += std::accumulate(go, go + vol, 0.0);
          }
      }
    });
  }
  return out;
}

// ---- pooling -------------------------------------------------------------------------

namespace {

// One pooled output cell: the box [lo, hi) per padded axis.
struct PoolBox {
  std::size_t lo[3];
  std::size_t hi[3];
};

template <typename BoxFn>
Tensor pool_with(const char* kind, const Tensor& x, std::size_t nd, const std::size_t out_dims[3], BoxFn box_of) {
  const Trailing t = split_trailing(x.shape(), nd, kind);
  const std::size_t in_vol = t.dims[0] * t.dims[1] * t.dims[2];
  const std::size_t out_vol = out_dims[0] * out_dims[1] * out_dims[2];

  std::vector<PoolBox> boxes(out_vol);
  std::vector<double> inv_count(out_vol);
  for (std::size_t a = 0; a < out_dims[0]; ++a)
    for (std::size_t b = 0; b < out_dims[1]; ++b)
      for (std::size_t c = 0; c < out_dims[2]; ++c) {
        const std::size_t o = (a * out_dims[1] + b) * out_dims[2] + c;
        boxes[o] = box_of(a, b, c, t.dims);
        std::size_t count = 1;
        for (int ax = 0; ax < 3; ++ax) count *= boxes[o].hi[ax] - boxes[o].lo[ax];
        if (count == 0) throw ArgumentError(std::string(kind) + ": empty pooling window");
        inv_count[o] = 1.0 / static_cast<double>(count);
      }

  auto xs = x.data();
  std::vector<double> v(t.outer * out_vol, 0.0);
  for (std::size_t r = 0; r < t.outer; ++r) {
    const double* src = xs.data() + r * in_vol;
    for (std::size_t o = 0; o < out_vol; ++o) {
      const PoolBox& bx = boxes[o];
      double acc = 0.0;
      for (std::size_t i = bx.lo[0]; i < bx.hi[0]; ++i)
        for (std::size_t j = bx.lo[1]; j < bx.hi[1]; ++j)
          for (std::size_t k = bx.lo[2]; k < bx.hi[2]; ++k) acc += src[(i * t.dims[1] + j) * t.dims[2] + k];
      v[r * out_vol + o] = acc * inv_count[o];
    }
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - static_cast<std::ptrdiff_t>(nd));
  for (std::size_t i = 0; i < nd; ++i) out_shape.push_back(out_dims[3 - nd + i]);
  Tensor out(std::move(out_shape), std::move(v));
  if (Tape* tape = recording_tape({&x})) {
    tape->record(kind, {x}, out,
                 [x, t, boxes = std::move(boxes), inv_count = std::move(inv_count), in_vol,
                  out_vol](std::span<const double> g) mutable {
                   auto gx = x.mutable_grad();
                   for (std::size_t r = 0; r < t.outer; ++r) {
                     double* dst = gx.data() + r * in_vol;
                     for (std::size_t o = 0; o < out_vol; ++o) {
                       const PoolBox& bx = boxes[o];
                       const double share = g[r * out_vol + o] * inv_count[o];
                       for (std::size_t i = bx.lo[0]; i < bx.hi[0]; ++i)
                         for (std::size_t j = bx.lo[1]; j < bx.hi[1]; ++j)
                           for (std::size_t k = bx.lo[2]; k < bx.hi[2]; ++k)
                             dst[(i * t.dims[1] + j) * t.dims[2] + k] += share;
                     }
                   }
                 });
  }
  return out;
}

}  // namespace

Tensor pool(const Tensor& x, PoolKind kind, const Shape& size, std::size_t stride, std::size_t padding) {
  const std::size_t nd = size.size();
  const Trailing t = split_trailing(x.shape(), nd, "pool");
  for (auto s : size) {
    if (s == 0) throw ArgumentError("pool: zero-size window or target " + shape_str(size));
  }
  std::size_t sz[3] = {1, 1, 1};
  for (std::size_t i = 0; i < nd; ++i) sz[3 - nd + i] = size[i];

  if (kind == PoolKind::kAvgAdaptive) {
    for (int a = 0; a < 3; ++a) {
      if (sz[a] > t.dims[a]) {
        throw ArgumentError("pool: adaptive target " + shape_str(size) + " exceeds input " + shape_str(x.shape()));
      }
    }
    // bin i spans [ceil(i*L/t), ceil((i+1)*L/t))
    return pool_with("adaptive_avg_pool", x, nd, sz,
                     [sz](std::size_t a, std::size_t b, std::size_t c, const std::size_t* in) {
                       const std::size_t idx[3] = {a, b, c};
                       PoolBox bx{};
                       for (int ax = 0; ax < 3; ++ax) {
                         bx.lo[ax] = (idx[ax] * in[ax] + sz[ax] - 1) / sz[ax];
                         bx.hi[ax] = ((idx[ax] + 1) * in[ax] + sz[ax] - 1) / sz[ax];
                       }
                       return bx;
                     });
  }

  if (stride == 0) throw ArgumentError("pool: stride must be positive");
  std::size_t out[3] = {1, 1, 1}, st[3] = {1, 1, 1}, pd[3] = {0, 0, 0};
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t a = 3 - nd + i;
    if (sz[a] > t.dims[a] + 2 * padding) {
      throw DimensionError("pool: window " + shape_str(size) + " larger than padded input " + shape_str(x.shape()));
    }
    st[a] = stride;
    pd[a] = padding;
    out[a] = (t.dims[a] + 2 * padding - sz[a]) / stride + 1;
  }
  return pool_with("avg_pool", x, nd, out,
                   [sz, st, pd](std::size_t a, std::size_t b, std::size_t c, const std::size_t* in) {
                     const std::size_t idx[3] = {a, b, c};
                     PoolBox bx{};
                     for (int ax = 0; ax < 3; ++ax) {
                       const auto start = static_cast<std::ptrdiff_t>(idx[ax] * st[ax]) -
                                          static_cast<std::ptrdiff_t>(pd[ax]);
                       const auto stop = start + static_cast<std::ptrdiff_t>(sz[ax]);
                       bx.lo[ax] = static_cast<std::size_t>(std::max<std::ptrdiff_t>(start, 0));
                       bx.hi[ax] = static_cast<std::size_t>(
                           std::min<std::ptrdiff_t>(stop, static_cast<std::ptrdiff_t>(in[ax])));
                       if (bx.hi[ax] < bx.lo[ax]) bx.hi[ax] = bx.lo[ax];
                     }
                     return bx;
                   });
}

Tensor upsample_nearest(const Tensor& x, const Shape& size) {
  const std::size_t nd = size.size();
  const Trailing t = split_trailing(x.shape(), nd, "upsample_nearest");
  std::size_t sz[3] = {1, 1, 1};
  for (std::size_t i = 0; i < nd; ++i) {
    if (size[i] == 0) throw ArgumentError("upsample_nearest: zero target " + shape_str(size));
    sz[3 - nd + i] = size[i];
  }
  std::vector<std::size_t> src_of(sz[0] * sz[1] * sz[2]);
  for (std::size_t a = 0; a < sz[0]; ++a)
    for (std::size_t b = 0; b < sz[1]; ++b)
      for (std::size_t c = 0; c < sz[2]; ++c) {
        const std::size_t ia = a * t.dims[0] / sz[0], ib = b * t.dims[1] / sz[1], ic = c * t.dims[2] / sz[2];
        src_of[(a * sz[1] + b) * sz[2] + c] = (ia * t.dims[1] + ib) * t.dims[2] + ic;
      }
  const std::size_t in_vol = t.dims[0] * t.dims[1] * t.dims[2];
  const std::size_t out_vol = src_of.size();
  auto xs = x.data();
  std::vector<double> v(t.outer * out_vol);
  for (std::size_t r = 0; r < t.outer; ++r)
    for (std::size_t o = 0; o < out_vol; ++o) v[r * out_vol + o] = xs[r * in_vol + src_of[o]];
  Shape out_shape(x.shape().begin(), x.shape().end() - static_cast<std::ptrdiff_t>(nd));
  out_shape.insert(out_shape.end(), size.begin(), size.end());
  Tensor out(std::move(out_shape), std::move(v));
  if (Tape* tape = recording_tape({&x})) {
    tape->record("upsample_nearest", {x}, out,
                 [x, src_of = std::move(src_of), outer = t.outer, in_vol, out_vol](std::span<const double> g) mutable {
                   auto gx = x.mutable_grad();
                   for (std::size_t r = 0; r < outer; ++r)
                     for (std::size_t o = 0; o < out_vol; ++o) gx[r * in_vol + src_of[o]] += g[r * out_vol + o];
                 });
  }
  return out;
}

// ---- activations -----------------------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + v * pdf;
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ArgumentError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto xs = x.data();
  std::vector<double> v(xs.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xs[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        v[base + j * inner] = std::exp(xs[base + j * inner] - mx);
        z += v[base + j * inner];
      }
      for (std::size_t j = 0; j < len; ++j) v[base + j * inner] /= z;
    }
  Tensor out(x.shape(), std::move(v));
  if (Tape* tape = recording_tape({&x})) {
    tape->record("softmax", {x}, out, [x, out, outer, inner, len](std::span<const double> g) mutable {
      auto gx = x.mutable_grad();
      auto y = out.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t i = base + j * inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
    });
  }
  return out;
}

Tensor activation(const Tensor& x, Activation kind, std::size_t axis) {
  switch (kind) {
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kGelu: return gelu(x);
    case Activation::kSoftmax: return softmax(x, axis);
  }
  throw ArgumentError("activation: unknown kind");
}

// ---- normalization ------------------------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps, NormMode mode,
                 RunningStats& stats) {
  if (x.rank() < 2) throw DimensionError("batchnorm: input " + shape_str(x.shape()) + " has no channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.numel() / (n * c);
  if (scale.numel() != c || shift.numel() != c) {
    throw DimensionError("batchnorm: scale " + shape_str(scale.shape()) + " / shift " + shape_str(shift.shape()) +
                         " for " + std::to_string(c) + " channels");
  }
  if (stats.mean.size() != c || stats.var.size() != c) {
    throw DimensionError("batchnorm: running stats sized for " + std::to_string(stats.mean.size()) +
                         " channels, input has " + std::to_string(c));
  }
  const std::size_t m = n * inner;
  auto xs = x.data();
  std::vector<double> mu(c), inv(c);
  if (mode == NormMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += xs[(b * c + ch) * inner + i];
      mu[ch] = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xs[(b * c + ch) * inner + i] - mu[ch];
          ss += d * d;
        }
      const double var = ss / static_cast<double>(m);
      inv[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mu[ch];
      stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      inv[ch] = 1.0 / std::sqrt(stats.var[ch] + eps);
    }
  }
  std::vector<double> xhat(xs.size()), v(xs.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (b * c + ch) * inner + i;
        xhat[k] = (xs[k] - mu[ch]) * inv[ch];
        v[k] = xhat[k] * scale[ch] + shift[ch];
      }
  Tensor out(x.shape(), std::move(v));
  if (Tape* tape = recording_tape({&x, &scale, &shift})) {
    tape->record("batchnorm", {x, scale, shift}, out,
                 [x, scale, shift, xhat = std::move(xhat), inv = std::move(inv), n, c, inner, m,
                  train = mode == NormMode::kTrain](std::span<const double> g) mutable {
                   std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                   for (std::size_t b = 0; b < n; ++b)
                     for (std::size_t ch = 0; ch < c; ++ch)
                       for (std::size_t i = 0; i < inner; ++i) {
                         const std::size_t k = (b * c + ch) * inner + i;
                         sum_g[ch] += g[k];
                         sum_gx[ch] += g[k] * xhat[k];
                       }
                   if (scale.requires_grad()) {
                     auto gs = scale.mutable_grad();
                     for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += sum_gx[ch];
                   }
                   if (shift.requires_grad()) {
                     auto gb = shift.mutable_grad();
                     for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                   }
                   if (!x.requires_grad()) return;
                   auto gx = x.mutable_grad();
                   const double md = static_cast<double>(m);
                   for (std::size_t b = 0; b < n; ++b)
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double k_scale = scale[ch] * inv[ch];
                       for (std::size_t i = 0; i < inner; ++i) {
                         const std::size_t k = (b * c + ch) * inner + i;
                         if (train) {
                           gx[k] += k_scale * (g[k] - sum_g[ch] / md - xhat[k] * sum_gx[ch] / md);
                         } else {
                           gx[k] += k_scale * g[k];
                         }
                       }
                     }
                 });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows of logits");
  }
  for (auto y : labels) {
    if (y >= k) throw InputError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                                 std::to_string(k) + " classes");
  }
  auto z = logits.data();
  std::vector<double> prob(z.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = z.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) prob[r * k + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[r]];
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));
  if (Tape* tape = recording_tape({&logits})) {
    std::vector<std::size_t> ys(labels.begin(), labels.end());
    tape->record("cross_entropy", {logits}, out,
                 [logits, prob = std::move(prob), ys = std::move(ys), n, k](std::span<const double> g) mutable {
                   auto gz = logits.mutable_grad();
                   const double w = g[0] / static_cast<double>(n);
                   for (std::size_t r = 0; r < n; ++r)
                     for (std::size_t j = 0; j < k; ++j)
                       gz[r * k + j] += w * (prob[r * k + j] - (j == ys[r] ? 1.0 : 0.0));
                 });
  }
  return out;
}

}  // namespace mtfuse::ops
