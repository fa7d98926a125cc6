#include "mtfuse/mgmi.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mtfuse/errors.hpp"
#include "mtfuse/layers.hpp"

namespace mtfuse {

ModalityFeatures ModalityFeatures::of(Tensor h1, Tensor h2, Tensor h3) {
  return {{Modality::kExterior, Modality::kInterior, Modality::kJoints}, {std::move(h1), std::move(h2), std::move(h3)}};
}

void ModalityFeatures::validate() const {
  if (features.empty() || features.size() != modalities.size()) {
    throw DimensionError("modality features: " + std::to_string(features.size()) + " tensors for " +
                         std::to_string(modalities.size()) + " modalities");
  }
  for (const auto& f : features) {
    if (f.shape() != features[0].shape()) {
      throw DimensionError("modality features disagree: " + shape_str(f.shape()) + " vs " +
                           shape_str(features[0].shape()));
    }
  }
}

GateParams GateParams::init(std::span<const Modality> modalities, std::size_t channels, std::size_t num_gates,
                            std::mt19937_64& rng) {
  if (modalities.empty()) throw ConfigError("gated fusion: no modalities");
  if (num_gates == 0) throw ConfigError("gated fusion: no gating units");
  GateParams p;
  p.modalities.assign(modalities.begin(), modalities.end());
  p.channels = channels;
  const std::size_t mc = modalities.size() * channels;
  p.query_weight = layers::init_uniform({mc, channels}, mc, rng);
  p.key_weight = layers::init_uniform({mc, channels}, mc, rng);
  p.value_weight = layers::init_uniform({mc, channels}, mc, rng);
  for (std::size_t g = 0; g < num_gates; ++g) {
    GateUnit u;
    u.conv_weight = layers::init_uniform({mc, 1, 3, 3}, 9, rng);
    u.conv_bias = layers::init_const({mc}, 0.0);
    u.bn_scale = layers::init_const({mc}, 1.0);
    u.bn_shift = layers::init_const({mc}, 0.0);
    u.stats = ops::RunningStats::fresh(mc);
    p.gates.push_back(std::move(u));
  }
  return p;
}

namespace {

bool batched(const ModalityFeatures& m) { return m.features[0].rank() == 4; }

ModalityFeatures as_batch(const ModalityFeatures& m) {
  ModalityFeatures b{m.modalities, {}};
  for (const auto& f : m.features) b.features.push_back(layers::unsqueeze0(f));
  return b;
}

void check_layout(const ModalityFeatures& m, const GateParams& p) {
  m.validate();
  if (m.modalities != p.modalities) throw DimensionError("gated fusion: modality list differs from the parameters");
  const auto& f = m.features[0];
  if (f.rank() != 4 || f.dim(1) != p.channels) {
    throw DimensionError("gated fusion: features " + shape_str(f.shape()) + " for " + std::to_string(p.channels) +
                         " channels");
  }
}

}  // namespace

Tensor shared_attention(const ModalityFeatures& m, const GateParams& p, AttentionTrace* trace) {
  m.validate();
  if (!batched(m)) return layers::squeeze0(shared_attention(as_batch(m), p, trace));
  check_layout(m, p);
  const auto& f0 = m.features[0];
  const std::size_t n = f0.dim(0), c = f0.dim(1), h = f0.dim(2), w = f0.dim(3);

  if (!p.self_attention) {
    Tensor acc = m.features[0];
    for (std::size_t i = 1; i < m.features.size(); ++i) acc = ops::add(acc, m.features[i]);
    return ops::scale(acc, 1.0 / static_cast<double>(m.features.size()));
  }

  Tensor joined = ops::concat(m.features, 1);
  auto project = [&](const Tensor& weight) {
    return ops::reshape(layers::channel_linear(joined, weight, Tensor()), {n, c, h * w});
  };
  Tensor q = project(p.query_weight);
  Tensor k = project(p.key_weight);
  Tensor v = project(p.value_weight);
  Tensor scores = ops::scale(ops::bmm(q, ops::permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(h * w)));
  Tensor attn = ops::softmax(scores, 2);
  if (trace) trace->weights = attn;
  return ops::reshape(ops::bmm(attn, v), {n, c, h, w});
}

TaskFusion task_fuse(const ModalityFeatures& m, const Tensor& shared, const GateParams& p, std::size_t task,
                     ops::NormMode mode) {
  m.validate();
  if (p.gates.empty()) throw ArgumentError("task_fuse: no gating units");
  if (p.gates.size() > 1 && task >= p.gates.size()) {
    throw ArgumentError("task_fuse: task index " + std::to_string(task) + " out of range [0, " +
                        std::to_string(p.gates.size()) + ")");
  }
  if (p.gates.size() == 1 && task >= kNumTasks) {
    throw ArgumentError("task_fuse: task index " + std::to_string(task) + " out of range");
  }
  if (!batched(m)) {
    TaskFusion r = task_fuse(as_batch(m), layers::unsqueeze0(shared), p, task, mode);
    r.fused = layers::squeeze0(r.fused);
    for (auto& g : r.gates) g = layers::squeeze0(g);
    return r;
  }
  check_layout(m, p);
  if (shared.shape() != m.features[0].shape()) {
    throw DimensionError("task_fuse: shared features " + shape_str(shared.shape()) + " vs modality features " +
                         shape_str(m.features[0].shape()));
  }
  const GateUnit& unit = p.gates[p.gates.size() == 1 ? 0 : task];
  const std::size_t mods = m.features.size(), c = p.channels;

  std::vector<Tensor> repeated(mods, shared);
  Tensor pre = ops::convolve(ops::concat(repeated, 1), unit.conv_weight, unit.conv_bias, ops::ConvKind::kDepthwise2d,
                             1, 1);
  Tensor gate = ops::sigmoid(ops::batchnorm(pre, unit.bn_scale, unit.bn_shift, kBatchNormEps, mode, unit.stats));

  TaskFusion r;
  for (std::size_t i = 0; i < mods; ++i) {
    Tensor gi = ops::slice(gate, 1, i * c, (i + 1) * c);
    auto gv = gi.data();
    r.mean_gate[index(m.modalities[i])] = std::accumulate(gv.begin(), gv.end(), 0.0) / static_cast<double>(gv.size());
    Tensor term = ops::mul(m.features[i], gi);
    r.fused = r.fused.defined() ? ops::add(r.fused, term) : term;
    r.gates.push_back(std::move(gi));
  }
  return r;
}

FusionOutput fuse_all(const ModalityFeatures& m, const GateParams& p, std::span<const TaskId> tasks,
                      ops::NormMode mode) {
  Tensor shared = shared_attention(m, p);
  FusionOutput out;
  if (p.gates.size() == 1) {
    // one shared unit: evaluate once so train-mode statistics advance once per batch
    TaskFusion f = task_fuse(m, shared, p, 0, mode);
    for (TaskId t : tasks) {
      out.task_features.push_back(f.fused);
      out.telemetry[index(t)] = f.mean_gate;
    }
    return out;
  }
  for (TaskId t : tasks) {
    TaskFusion f = task_fuse(m, shared, p, index(t), mode);
    out.task_features.push_back(std::move(f.fused));
    out.telemetry[index(t)] = f.mean_gate;
  }
  return out;
}

FusionOutput fuse_all(const ModalityFeatures& m, const GateParams& p, ops::NormMode mode) {
  return fuse_all(m, p, kAllTasks, mode);
}

ConcatFuseParams ConcatFuseParams::init(std::size_t num_modalities, std::size_t channels, std::mt19937_64& rng) {
  const std::size_t mc = num_modalities * channels;
  return {layers::init_uniform({mc, channels}, mc, rng), layers::init_const({channels}, 0.0)};
}

Tensor concat_fuse(const ModalityFeatures& m, const ConcatFuseParams& p) {
  m.validate();
  if (!batched(m)) return layers::squeeze0(concat_fuse(as_batch(m), p));
  const std::size_t mc = m.features.size() * m.features[0].dim(1);
  if (p.weight.rank() != 2 || p.weight.dim(0) != mc) {
    throw DimensionError("concat_fuse: weight " + shape_str(p.weight.shape()) + " for " + std::to_string(mc) +
                         " concatenated channels");
  }
  return layers::channel_linear(ops::concat(m.features, 1), p.weight, p.bias);
}

}  // namespace mtfuse
