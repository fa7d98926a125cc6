#pragma once

// Straight-line reference implementations. Nothing here calls into ops::;
// every index is spelled out so the library's own layout code is checked
// against a second reading of the same definitions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "mtfuse/mgmi.hpp"
#include "mtfuse/mts_mamba.hpp"
#include "mtfuse/joints_cnn.hpp"
#include "mtfuse/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;
using mtfuse::Tensor;

inline Vec values(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

inline double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Vec& b) { return max_abs_diff(values(a), b); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

// [m x k] . [k x p]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t p) {
  Vec c(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < k; ++q) s += a[i * k + q] * b[q * p + j];
      c[i * p + j] = s;
    }
  return c;
}

// Full 2-d cross-correlation of one sample, x [cin x h x w], w [cout x cin x kh x kw].
inline Vec conv2d(const Vec& x, std::size_t cin, std::size_t h, std::size_t w, const Vec& wt, std::size_t cout,
                  std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Vec y(cout * oh * ow, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b) {
              const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
              const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              s += x[(c * h + yy) * w + xx] * wt[((o * cin + c) * kh + a) * kw + b];
            }
        y[(o * oh + i) * ow + j] = s;
      }
  return y;
}

// Per-channel k x k kernel, w [c x 1 x k x k].
inline Vec depthwise2d(const Vec& x, std::size_t c, std::size_t h, std::size_t w, const Vec& wt, std::size_t k,
                       const Vec& bias, std::size_t pad) {
  const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
  Vec y(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = bias.empty() ? 0.0 : bias[ch];
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) {
            const long yy = static_cast<long>(i + a) - static_cast<long>(pad);
            const long xx = static_cast<long>(j + b) - static_cast<long>(pad);
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            s += x[(ch * h + yy) * w + xx] * wt[(ch * k + a) * k + b];
          }
        y[(ch * oh + i) * ow + j] = s;
      }
  return y;
}

// 3x3x3 convolution, stride 1, pad 1, one sample: x [cin x d0 x d1 x d2].
inline Vec conv3d_same(const Vec& x, std::size_t cin, std::size_t d0, std::size_t d1, std::size_t d2, const Vec& wt,
                       std::size_t cout, const Vec& bias) {
  Vec y(cout * d0 * d1 * d2, 0.0);
  auto in = [&](long v, std::size_t n) { return v >= 0 && v < static_cast<long>(n); };
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t a = 0; a < d0; ++a)
      for (std::size_t b = 0; b < d1; ++b)
        for (std::size_t c = 0; c < d2; ++c) {
          double s = bias[o];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (long p = -1; p <= 1; ++p)
              for (long q = -1; q <= 1; ++q)
                for (long r = -1; r <= 1; ++r) {
                  const long ia = static_cast<long>(a) + p, ib = static_cast<long>(b) + q, ic = static_cast<long>(c) + r;
                  if (!in(ia, d0) || !in(ib, d1) || !in(ic, d2)) continue;
                  s += x[((ci * d0 + ia) * d1 + ib) * d2 + ic] *
                       wt[(((o * cin + ci) * 3 + (p + 1)) * 3 + (q + 1)) * 3 + (r + 1)];
                }
          y[((o * d0 + a) * d1 + b) * d2 + c] = s;
        }
  return y;
}

// Bin i of an axis of length L split into t parts: [ceil(i*L/t), ceil((i+1)*L/t)).
inline std::size_t bin_lo(std::size_t i, std::size_t L, std::size_t t) { return (i * L + t - 1) / t; }

// Adaptive average over the trailing axes of each of `planes` blocks.
inline Vec adaptive_pool(const Vec& x, std::size_t planes, const std::vector<std::size_t>& in,
                         const std::vector<std::size_t>& out) {
  std::vector<std::size_t> pad_in = in, pad_out = out;
  while (pad_in.size() < 3) {
    pad_in.insert(pad_in.begin(), 1);
    pad_out.insert(pad_out.begin(), 1);
  }
  const std::size_t iv = pad_in[0] * pad_in[1] * pad_in[2], ov = pad_out[0] * pad_out[1] * pad_out[2];
  Vec y(planes * ov, 0.0);
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t a = 0; a < pad_out[0]; ++a)
      for (std::size_t b = 0; b < pad_out[1]; ++b)
        for (std::size_t c = 0; c < pad_out[2]; ++c) {
          double s = 0.0;
          std::size_t cnt = 0;
          for (std::size_t i = bin_lo(a, pad_in[0], pad_out[0]); i < bin_lo(a + 1, pad_in[0], pad_out[0]); ++i)
            for (std::size_t j = bin_lo(b, pad_in[1], pad_out[1]); j < bin_lo(b + 1, pad_in[1], pad_out[1]); ++j)
              for (std::size_t k = bin_lo(c, pad_in[2], pad_out[2]); k < bin_lo(c + 1, pad_in[2], pad_out[2]); ++k) {
                s += x[pl * iv + (i * pad_in[1] + j) * pad_in[2] + k];
                ++cnt;
              }
          y[pl * ov + (a * pad_out[1] + b) * pad_out[2] + c] = s / static_cast<double>(cnt);
        }
  return y;
}

// 3x3 window, stride 1, pad 1, padded cells left out of the count.
inline Vec avg3x3(const Vec& x, std::size_t planes, std::size_t h, std::size_t w) {
  Vec y(x.size(), 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0.0;
        int cnt = 0;
        for (int a = -1; a <= 1; ++a)
          for (int b = -1; b <= 1; ++b) {
            const long yy = static_cast<long>(i) + a, xx = static_cast<long>(j) + b;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            s += x[(p * h + yy) * w + xx];
            ++cnt;
          }
        y[(p * h + i) * w + j] = s / cnt;
      }
  return y;
}

// x [c x p], weight [c x c_out], bias [c_out] (may be empty) -> [c_out x p]
inline Vec channel_map(const Vec& x, std::size_t c, std::size_t p, const Vec& wt, std::size_t c_out, const Vec& bias) {
  Vec y(c_out * p, 0.0);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t q = 0; q < p; ++q) {
      double s = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < c; ++i) s += x[i * p + q] * wt[i * c_out + o];
      y[o * p + q] = s;
    }
  return y;
}

// One direction of the diagonal recurrence on a [T x G x L] block. Row
// s*G + j drives group channel j at scan step s; a backward scan visits
// frames in reverse, so step s touches frame T-1-s.
inline Vec scan(const Vec& x, std::size_t T, std::size_t G, std::size_t L, const Vec& log_decay, const Vec& B,
                const Vec& Cm, const Vec& D, std::size_t n, bool backward) {
  Vec y(x.size(), 0.0);
  for (std::size_t j = 0; j < G; ++j)
    for (std::size_t l = 0; l < L; ++l) {
      Vec h(n, 0.0);
      for (std::size_t s = 0; s < T; ++s) {
        const std::size_t frame = backward ? T - 1 - s : s;
        const std::size_t row = s * G + j;
        const double xv = x[(frame * G + j) * L + l];
        double out = D[row] * xv;
        for (std::size_t k = 0; k < n; ++k) {
          h[k] = std::exp(log_decay[row * n + k]) * h[k] + B[row * n + k] * xv;
          out += Cm[row * n + k] * h[k];
        }
        y[(frame * G + j) * L + l] = out;
      }
    }
  return y;
}

inline Vec ssm_log_decay(const mtfuse::SsmParams& p) {
  Vec a = values(p.A);
  for (auto& v : a) v = -softplus(v);
  return a;
}

inline Vec gate(const mtfuse::SsmParams& p) {
  const std::size_t c = p.A.dim(0), n = p.A.dim(1);
  const Vec A = values(p.A), B = values(p.B), Cm = values(p.C_mat), D = values(p.D);
  const double us = 1.0 / std::sqrt(static_cast<double>(n)), uc = 1.0 / std::sqrt(static_cast<double>(c));
  Vec g(c);
  for (std::size_t i = 0; i < c; ++i) {
    double pre = D[i];
    for (std::size_t k = 0; k < n; ++k) {
      pre += A[i * n + k] * us;
      double col = 0.0;
      for (std::size_t r = 0; r < c; ++r) col += Cm[r * n + k] * uc;
      pre += B[i * n + k] * col;
    }
    g[i] = sigmoid(pre);
  }
  return g;
}

// Stem for one sample. views[v] is [T x 3 x Hv x Wv].
inline Vec stem(const std::vector<Vec>& views, std::size_t hv, std::size_t wv, const mtfuse::StemParams& p) {
  const std::size_t T = p.frame_count, H = p.out_height, W = p.out_width;
  std::size_t group = 0;
  for (auto pf : p.per_frame) group += pf;
  const std::size_t k = p.dw_weight[0].dim(2);
  const std::size_t oh = hv - k + 1, ow = wv - k + 1;
  Vec out(T * group * H * W, 0.0);
  std::size_t offset = 0;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const std::size_t cin = 3 * T, pf = p.per_frame[v];
    Vec dw = depthwise2d(views[v], cin, hv, wv, values(p.dw_weight[v]), k, values(p.dw_bias[v]), 0);
    Vec pw = conv2d(dw, cin, oh, ow, values(p.pw_weight[v]), T * pf, 1, 1, values(p.pw_bias[v]), 1, 0);
    Vec pooled = adaptive_pool(pw, T * pf, {oh, ow}, {H, W});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t q = 0; q < pf; ++q)
        for (std::size_t s = 0; s < H * W; ++s) out[((t * group) + offset + q) * H * W + s] = pooled[(t * pf + q) * H * W + s];
    offset += pf;
  }
  return out;
}

// One mts block on one sample [C x H x W].
inline Vec mts_block(const Vec& f, std::size_t C, std::size_t H, std::size_t W, const mtfuse::MtsBlockParams& p) {
  const std::size_t P = H * W, T = p.options.frame_count, G = C / T, n = p.ssm_forward.A.dim(1);
  const Vec cw = values(p.conv_weight);
  const double cb = p.conv_bias[0];
  Vec e(C * P);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < P; ++q) {
      double s = cb;
      for (int k = 0; k < 3; ++k) {
        const long src = static_cast<long>(c) + k - 1;
        if (src >= 0 && src < static_cast<long>(C)) s += cw[k] * f[src * P + q];
      }
      e[c * P + q] = gelu(s);
    }
  const auto& sf = p.ssm_forward;
  const auto& sb = p.ssm_backward;
  Vec fwd = scan(e, T, G, P, ssm_log_decay(sf), values(sf.B), values(sf.C_mat), values(sf.D), n, false);
  Vec bwd = scan(e, T, G, P, ssm_log_decay(sb), values(sb.B), values(sb.C_mat), values(sb.D), n, p.options.dual_scan);

  Vec local = channel_map(avg3x3(fwd, C, H, W), C, P, values(p.local_weight), C, values(p.local_bias));
  Vec pooled;
  if (p.options.global_local) {
    const std::size_t gh = std::min(p.options.global_pool, H), gw = std::min(p.options.global_pool, W);
    Vec coarse = adaptive_pool(bwd, C, {H, W}, {gh, gw});
    pooled.assign(C * P, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) pooled[(c * H + i) * W + j] = coarse[(c * gh + i * gh / H) * gw + j * gw / W];
  } else {
    pooled = avg3x3(bwd, C, H, W);
  }
  Vec global = channel_map(pooled, C, P, values(p.global_weight), C, values(p.global_bias));
  const Vec g = gate(sf);
  Vec mixed(C * P);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < P; ++q) mixed[c * P + q] = g[c] * (local[c * P + q] + global[c * P + q]);
  Vec proj = channel_map(mixed, C, P, values(p.out_weight), C, values(p.out_bias));
  Vec out(C * P);
  const double gamma = p.gamma[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f[i] + gamma * proj[i];
  return out;
}

// Shared features for one sample from M modality blocks [C x P].
inline Vec attention(const std::vector<Vec>& mods, std::size_t C, std::size_t P, const mtfuse::GateParams& p,
                     Vec* weights = nullptr) {
  const std::size_t M = mods.size();
  Vec joined;
  for (const auto& m : mods) joined.insert(joined.end(), m.begin(), m.end());
  Vec q = channel_map(joined, M * C, P, values(p.query_weight), C, {});
  Vec k = channel_map(joined, M * C, P, values(p.key_weight), C, {});
  Vec v = channel_map(joined, M * C, P, values(p.value_weight), C, {});
  Vec a(C * C);
  for (std::size_t i = 0; i < C; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < C; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < P; ++r) s += q[i * P + r] * k[j * P + r];
      a[i * C + j] = s / std::sqrt(static_cast<double>(P));
      mx = std::max(mx, a[i * C + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) z += (a[i * C + j] = std::exp(a[i * C + j] - mx));
    for (std::size_t j = 0; j < C; ++j) a[i * C + j] /= z;
  }
  if (weights) *weights = a;
  return matmul(a, v, C, C, P);
}

// Gated fusion over a batch with batch-statistic normalisation.
// mods[m][b] is sample b of modality m, shared[b] the shared features.
inline std::vector<Vec> task_fuse(const std::vector<std::vector<Vec>>& mods, const std::vector<Vec>& shared,
                                  std::size_t C, std::size_t H, std::size_t W, const mtfuse::GateUnit& u,
                                  double eps) {
  const std::size_t M = mods.size(), N = shared.size(), P = H * W, MC = M * C;
  std::vector<Vec> pre(N);
  for (std::size_t b = 0; b < N; ++b) {
    Vec rep;
    for (std::size_t m = 0; m < M; ++m) rep.insert(rep.end(), shared[b].begin(), shared[b].end());
    pre[b] = depthwise2d(rep, MC, H, W, values(u.conv_weight), 3, values(u.conv_bias), 1);
  }
  const Vec scale = values(u.bn_scale), shift = values(u.bn_shift);
  std::vector<Vec> gate(N, Vec(MC * P));
  for (std::size_t ch = 0; ch < MC; ++ch) {
    double mean = 0.0, var = 0.0;
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t q = 0; q < P; ++q) mean += pre[b][ch * P + q];
    mean /= static_cast<double>(N * P);
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t q = 0; q < P; ++q) var += (pre[b][ch * P + q] - mean) * (pre[b][ch * P + q] - mean);
    var /= static_cast<double>(N * P);
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t q = 0; q < P; ++q)
        gate[b][ch * P + q] = sigmoid((pre[b][ch * P + q] - mean) / std::sqrt(var + eps) * scale[ch] + shift[ch]);
  }
  std::vector<Vec> fused(N, Vec(C * P, 0.0));
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < C * P; ++i) fused[b][i] += mods[m][b][i] * gate[b][m * C * P + i];
  return fused;
}

// Joint branch for one sample [T x J x 3] -> [C x H x W].
inline Vec joints(const Vec& x, const mtfuse::JointsParams& p) {
  const std::size_t T = p.frame_count, J = p.joint_count, C = p.channels();
  const std::size_t t1 = std::max<std::size_t>(T / 2, 1), j1 = std::max<std::size_t>(J / 2, 1);
  const std::size_t t2 = std::min<std::size_t>(t1, 2), j2 = std::min<std::size_t>(j1, 2);
  Vec h1 = conv3d_same(x, 1, T, J, 3, values(p.conv1_weight), 16, values(p.conv1_bias));
  for (auto& v : h1) v = gelu(v);
  h1 = adaptive_pool(h1, 16, {T, J, 3}, {t1, j1, 3});
  Vec h2 = conv3d_same(h1, 16, t1, j1, 3, values(p.conv2_weight), 32, values(p.conv2_bias));
  for (auto& v : h2) v = gelu(v);
  h2 = adaptive_pool(h2, 32, {t1, j1, 3}, {t2, j2, 1});
  const std::size_t flat = h2.size();
  const Vec w = values(p.proj_weight), b = values(p.proj_bias);
  Vec out(C * p.out_height * p.out_width);
  for (std::size_t c = 0; c < C; ++c) {
    double s = b[c];
    for (std::size_t i = 0; i < flat; ++i) s += h2[i] * w[i * C + c];
    for (std::size_t q = 0; q < p.out_height * p.out_width; ++q) out[c * p.out_height * p.out_width + q] = s;
  }
  return out;
}

}  // namespace oracle
