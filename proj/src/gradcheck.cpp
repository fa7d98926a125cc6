#include "mtfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "mtfuse/errors.hpp"
#include "mtfuse/heads.hpp"
#include "mtfuse/joints_cnn.hpp"
#include "mtfuse/layers.hpp"
#include "mtfuse/mgmi.hpp"
#include "mtfuse/model.hpp"
#include "mtfuse/mts_mamba.hpp"
#include "mtfuse/ops.hpp"
#include "mtfuse/ssm.hpp"

namespace mtfuse {

bool GradcheckReport::passed() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const TensorCheck& t) { return t.passed; });
}

double GradcheckReport::worst() const {
  double w = 0.0;
  for (const auto& t : tensors) w = std::max(w, t.max_rel_error);
  return w;
}

namespace {

std::vector<std::size_t> sample_entries(std::size_t n, std::size_t max_entries) {
  std::vector<std::size_t> idx;
  if (n <= max_entries) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < max_entries; ++k) idx.push_back((2 * k + 1) * n / (2 * max_entries));
  return idx;
}

}  // namespace

GradcheckReport check_gradients(const std::string& module, const ParamList& inputs, const ProbeFn& probe,
                                const GradcheckOptions& options) {
  GradcheckReport report;
  report.module = module;
  for (const auto& p : inputs) p.tensor.zero_grad();
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = probe();
  }
  if (!tape.empty()) backward(tape, loss);

  for (const auto& p : inputs) {
    Tensor t = p.tensor;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    if (options.corrupt) options.corrupt(p.name, analytic);

    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    const auto idx = sample_entries(t.numel(), options.max_entries);
    auto values = t.mutable_data();
    for (std::size_t i : idx) {
      const double orig = values[i];
      values[i] = orig + options.step;
      const double plus = probe().item();
      values[i] = orig - options.step;
      const double minus = probe().item();
      values[i] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    TensorCheck c;
    c.name = p.name;
    c.entries = idx.size();
    c.max_rel_error = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), options.floor);
    if (!std::isfinite(c.max_rel_error)) c.max_rel_error = INFINITY;
    c.passed = c.max_rel_error < options.tolerance;
    report.tensors.push_back(std::move(c));
  }
  for (const auto& p : inputs) p.tensor.zero_grad();
  return report;
}

namespace {

using Rng = std::mt19937_64;

Tensor leaf(Shape shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev).requires_grad_();
}

Tensor positive_leaf(Shape shape, Rng& rng) { return Tensor::uniform(std::move(shape), rng, 0.5, 1.5).requires_grad_(); }

/// sum(y * R) with R drawn once for the output shape, so the probe has a
/// generic (non-symmetric) cotangent.
ProbeFn weighted(std::function<Tensor()> forward, Rng& rng) {
  const Tensor shape_probe = forward();
  Tensor weights = Tensor::randn(shape_probe.shape(), rng, 1.0 / std::sqrt(static_cast<double>(shape_probe.numel())));
  return [forward = std::move(forward), weights] { return ops::sum(ops::mul(forward(), weights)); };
}

struct Case {
  std::string name;
  ParamList inputs;
  ProbeFn probe;
};

NamedParam named(const std::string& name, const std::string& module, const Tensor& t) { return {name, module, t}; }

std::vector<Case> tensor_core_cases(Rng& rng) {
  std::vector<Case> cases;
  const std::string mod = "tensor-core";
  auto add_case = [&](const std::string& op, std::vector<std::pair<std::string, Tensor>> ins,
                      std::function<Tensor()> fwd) {
    Case c;
    c.name = mod + "/" + op;
    for (auto& [n, t] : ins) c.inputs.push_back(named(op + "." + n, mod, t));
    c.probe = weighted(std::move(fwd), rng);
    cases.push_back(std::move(c));
  };
  {
    Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
    add_case("add", {{"a", a}, {"b", b}}, [=] { return ops::add(a, b); });
    add_case("sub", {{"a", a}, {"b", b}}, [=] { return ops::sub(a, b); });
    add_case("mul", {{"a", a}, {"b", b}}, [=] { return ops::mul(a, b); });
  }
  {
    Tensor x = leaf({2, 3, 2}, rng), s = leaf({1}, rng);
    add_case("scale", {{"x", x}}, [=] { return ops::scale(x, -1.7); });
    add_case("scale_by", {{"x", x}, {"s", s}}, [=] { return ops::scale_by(x, s); });
    add_case("mean", {{"x", x}}, [=] { return ops::scale_by(ops::mean(x), s); });
    add_case("reshape", {{"x", x}}, [=] { return ops::reshape(x, {3, 4}); });
    add_case("permute", {{"x", x}}, [=] { return ops::permute(x, {2, 0, 1}); });
    add_case("flip", {{"x", x}}, [=] { return ops::flip(x, 1); });
    add_case("slice", {{"x", x}}, [=] { return ops::slice(x, 1, 1, 3); });
  }
  {
    Tensor a = leaf({2, 2, 3}, rng), b = leaf({2, 1, 3}, rng);
    add_case("concat", {{"a", a}, {"b", b}}, [=] {
      std::vector<Tensor> parts{a, b};
      return ops::concat(parts, 1);
    });
    add_case("expand", {{"b", b}}, [=] { return ops::expand(b, {2, 4, 3}); });
  }
  {
    Tensor a = leaf({3, 4}, rng), b = leaf({4, 2}, rng);
    add_case("matmul", {{"a", a}, {"b", b}}, [=] { return ops::matmul(a, b); });
    Tensor ba = leaf({2, 3, 4}, rng), bb = leaf({2, 4, 2}, rng);
    add_case("bmm", {{"a", ba}, {"b", bb}}, [=] { return ops::bmm(ba, bb); });
    Tensor x = leaf({2, 3, 4}, rng), w = leaf({4, 5}, rng), bias = leaf({5}, rng);
    add_case("linear", {{"x", x}, {"weight", w}, {"bias", bias}}, [=] { return ops::linear(x, w, bias); });
  }
  {
    Tensor x = leaf({2, 2, 7}, rng), w = leaf({3, 2, 3}, rng), b = leaf({3}, rng);
    add_case("conv1d", {{"x", x}, {"weight", w}, {"bias", b}},
             [=] { return ops::convolve(x, w, b, ops::ConvKind::k1d, 1, 1); });
    Tensor x2 = leaf({2, 2, 5, 5}, rng), w2 = leaf({3, 2, 3, 3}, rng), b2 = leaf({3}, rng);
    add_case("conv2d", {{"x", x2}, {"weight", w2}, {"bias", b2}},
             [=] { return ops::convolve(x2, w2, b2, ops::ConvKind::k2d, 2, 1); });
    Tensor wd = leaf({2, 1, 3, 3}, rng), bd = leaf({2}, rng);
    add_case("depthwise2d", {{"x", x2}, {"weight", wd}, {"bias", bd}},
             [=] { return ops::convolve(x2, wd, bd, ops::ConvKind::kDepthwise2d, 1, 1); });
    Tensor x3 = leaf({1, 2, 3, 4, 3}, rng), w3 = leaf({2, 2, 3, 3, 3}, rng), b3 = leaf({2}, rng);
    add_case("conv3d", {{"x", x3}, {"weight", w3}, {"bias", b3}},
             [=] { return ops::convolve(x3, w3, b3, ops::ConvKind::k3d, 1, 1); });
  }
  {
    Tensor x = leaf({2, 2, 5, 5}, rng);
    add_case("pool_fixed", {{"x", x}}, [=] { return ops::pool(x, ops::PoolKind::kAvgFixed, {3, 3}, 1, 1); });
    add_case("pool_adaptive", {{"x", x}}, [=] { return ops::pool(x, ops::PoolKind::kAvgAdaptive, {2, 3}); });
    Tensor s = leaf({2, 2, 2, 3}, rng);
    add_case("upsample_nearest", {{"x", s}}, [=] { return ops::upsample_nearest(s, {5, 5}); });
  }
  {
    Tensor x = leaf({3, 5}, rng, 2.0);
    add_case("sigmoid", {{"x", x}}, [=] { return ops::sigmoid(x); });
    add_case("gelu", {{"x", x}}, [=] { return ops::gelu(x); });
    add_case("softmax", {{"x", x}}, [=] { return ops::softmax(x, 1); });
    add_case("softplus", {{"x", x}}, [=] { return ops::softplus(x); });
  }
  {
    Tensor x = leaf({4, 3, 2, 2}, rng), scale = positive_leaf({3}, rng), shift = leaf({3}, rng);
    add_case("batchnorm", {{"x", x}, {"scale", scale}, {"shift", shift}}, [=] {
      auto stats = ops::RunningStats::fresh(3);
      return ops::batchnorm(x, scale, shift, 1e-5, ops::NormMode::kTrain, stats);
    });
    Tensor logits = leaf({4, 3}, rng);
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    Case c;
    c.name = mod + "/cross_entropy";
    c.inputs.push_back(named("cross_entropy.logits", mod, logits));
    c.probe = [=] { return ops::cross_entropy(logits, labels); };
    cases.push_back(std::move(c));
  }
  return cases;
}

void add_ssm_params(ParamList& out, const std::string& prefix, const std::string& mod, const SsmParams& p,
                    bool shared_too) {
  out.push_back(named(prefix + "A", mod, p.A));
  out.push_back(named(prefix + "D", mod, p.D));
  if (shared_too) {
    out.push_back(named(prefix + "B", mod, p.B));
    out.push_back(named(prefix + "C", mod, p.C_mat));
  }
}

std::vector<Case> ssm_cases(const ModelConfig& cfg, Rng& rng) {
  std::vector<Case> cases;
  const std::size_t T = cfg.frame_count, group = std::min<std::size_t>(cfg.channels / cfg.frame_count, 3);
  const std::size_t C = T * group, n = std::min<std::size_t>(cfg.state_dim, 3);
  SsmParams fwd = SsmParams::init(C, n, rng);
  SsmParams bwd = SsmParams::init_sharing(fwd, rng);
  Tensor x = leaf({2, T, group, 4}, rng);
  for (auto dir : {ScanDirection::kForward, ScanDirection::kBackward}) {
    const SsmParams& p = dir == ScanDirection::kForward ? fwd : bwd;
    Case c;
    c.name = dir == ScanDirection::kForward ? "ssm/scan_forward" : "ssm/scan_backward";
    c.inputs.push_back(named("x", "ssm", x));
    add_ssm_params(c.inputs, "", "ssm", p, true);
    c.probe = weighted([x, p, dir] { return scan(x, p, dir); }, rng);
    cases.push_back(std::move(c));
  }
  Case g;
  g.name = "ssm/compute_gate";
  add_ssm_params(g.inputs, "", "ssm", fwd, true);
  g.probe = weighted([fwd] { return compute_gate(fwd); }, rng);
  cases.push_back(std::move(g));
  return cases;
}

std::vector<Case> stem_cases(const ModelConfig& cfg, Rng& rng) {
  const std::size_t T = cfg.frame_count;
  StemParams p = StemParams::init(kExteriorViews, T, cfg.channels, cfg.height, cfg.width, cfg.stem_kernel, rng);
  std::vector<Tensor> views;
  Case c;
  c.name = "mts-mamba/stem";
  for (std::size_t v = 0; v < 3; ++v) {
    views.push_back(Tensor::uniform({2, T, 3, cfg.view_height, cfg.view_width}, rng, 0.0, 1.0).requires_grad_());
    c.inputs.push_back(named("view" + std::to_string(v), "stem", views.back()));
    c.inputs.push_back(named("dw_weight" + std::to_string(v), "stem", p.dw_weight[v]));
    c.inputs.push_back(named("dw_bias" + std::to_string(v), "stem", p.dw_bias[v]));
    c.inputs.push_back(named("pw_weight" + std::to_string(v), "stem", p.pw_weight[v]));
    c.inputs.push_back(named("pw_bias" + std::to_string(v), "stem", p.pw_bias[v]));
  }
  c.probe = weighted([views, p] { return stem(views, p); }, rng);
  return {std::move(c)};
}

void add_block_params(ParamList& out, const std::string& mod, const MtsBlockParams& b) {
  out.push_back(named("conv_weight", mod, b.conv_weight));
  out.push_back(named("conv_bias", mod, b.conv_bias));
  add_ssm_params(out, "ssm_forward.", mod, b.ssm_forward, true);
  add_ssm_params(out, "ssm_backward.", mod, b.ssm_backward, false);
  out.push_back(named("local_weight", mod, b.local_weight));
  out.push_back(named("local_bias", mod, b.local_bias));
  out.push_back(named("global_weight", mod, b.global_weight));
  out.push_back(named("global_bias", mod, b.global_bias));
  out.push_back(named("out_weight", mod, b.out_weight));
  out.push_back(named("out_bias", mod, b.out_bias));
  out.push_back(named("gamma", mod, b.gamma));
}

std::vector<Case> block_cases(const ModelConfig& cfg, Rng& rng) {
  std::vector<Case> cases;
  struct Variant {
    const char* name;
    bool dual, global_local;
  };
  for (const Variant& v : {Variant{"mts_block", true, true}, Variant{"mts_block_no_dual_scan", false, true},
                           Variant{"mts_block_no_global_local", true, false}}) {
    const MtsBlockOptions opts{cfg.frame_count, cfg.global_pool, v.dual, v.global_local};
    MtsBlockParams b = MtsBlockParams::init(cfg.channels, cfg.state_dim, opts, rng, 0.5);
    Tensor x = leaf({2, cfg.channels, cfg.height, cfg.width}, rng);
    Case c;
    c.name = std::string("mts-mamba/") + v.name;
    c.inputs.push_back(named("input", "mts_block", x));
    add_block_params(c.inputs, "mts_block", b);
    c.probe = weighted([x, b] { return mts_block(x, b); }, rng);
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<Case> joints_cases(const ModelConfig& cfg, Rng& rng) {
  JointsParams p = JointsParams::init(cfg.frame_count, cfg.joint_count, cfg.channels, cfg.height, cfg.width, rng);
  Tensor x = Tensor::uniform({2, cfg.frame_count, cfg.joint_count, 3}, rng, 0.0, 1.0).requires_grad_();
  Case c;
  c.name = "joints-3dcnn/joints_forward";
  c.inputs = {named("joints", "joints", x),
              named("conv1_weight", "joints", p.conv1_weight),
              named("conv1_bias", "joints", p.conv1_bias),
              named("conv2_weight", "joints", p.conv2_weight),
              named("conv2_bias", "joints", p.conv2_bias),
              named("proj_weight", "joints", p.proj_weight),
              named("proj_bias", "joints", p.proj_bias)};
  c.probe = weighted([x, p] { return joints_forward(x, p); }, rng);
  return {std::move(c)};
}

std::vector<Case> mgmi_cases(const ModelConfig& cfg, Rng& rng) {
  std::vector<Case> cases;
  const Shape shape{2, cfg.channels, cfg.height, cfg.width};
  ModalityFeatures m = ModalityFeatures::of(leaf(shape, rng), leaf(shape, rng), leaf(shape, rng));
  GateParams p = GateParams::init(m.modalities, cfg.channels, kNumTasks, rng);
  for (auto& g : p.gates) {
    // generic scale/shift so the BatchNorm affine terms are exercised
    g.bn_scale = Tensor::uniform(g.bn_scale.shape(), rng, 0.5, 1.5).requires_grad_();
    g.bn_shift = Tensor::randn(g.bn_shift.shape(), rng, 0.3).requires_grad_();
  }
  ParamList features;
  for (std::size_t i = 0; i < 3; ++i) features.push_back(named("H" + std::to_string(i + 1), "mgmi", m.features[i]));
  ParamList attention = {named("query_weight", "mgmi", p.query_weight), named("key_weight", "mgmi", p.key_weight),
                         named("value_weight", "mgmi", p.value_weight)};
  {
    Case c;
    c.name = "mgmi/shared_attention";
    c.inputs = features;
    c.inputs.insert(c.inputs.end(), attention.begin(), attention.end());
    c.probe = weighted([m, p] { return shared_attention(m, p); }, rng);
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "mgmi/task_fuse";
    c.inputs = features;
    c.inputs.insert(c.inputs.end(), attention.begin(), attention.end());
    const auto& g = p.gates[1];
    c.inputs.push_back(named("gate.conv_weight", "mgmi", g.conv_weight));
    c.inputs.push_back(named("gate.conv_bias", "mgmi", g.conv_bias));
    c.inputs.push_back(named("gate.bn_scale", "mgmi", g.bn_scale));
    c.inputs.push_back(named("gate.bn_shift", "mgmi", g.bn_shift));
    c.probe = weighted(
        [m, p] { return task_fuse(m, shared_attention(m, p), p, 1, ops::NormMode::kTrain).fused; }, rng);
    cases.push_back(std::move(c));
  }
  {
    ConcatFuseParams cp = ConcatFuseParams::init(3, cfg.channels, rng);
    Case c;
    c.name = "mgmi/concat_fuse";
    c.inputs = features;
    c.inputs.push_back(named("weight", "concat_fuse", cp.weight));
    c.inputs.push_back(named("bias", "concat_fuse", cp.bias));
    c.probe = weighted([m, cp] { return concat_fuse(m, cp); }, rng);
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<Case> heads_cases(const ModelConfig& cfg, Rng& rng) {
  std::vector<Tensor> features;
  std::vector<HeadParams> heads;
  std::vector<std::vector<std::size_t>> labels;
  Case c;
  c.name = "multitask-heads/total_loss";
  for (auto t : kAllTasks) {
    features.push_back(leaf({3, cfg.channels, cfg.height, cfg.width}, rng));
    heads.push_back(HeadParams::init({t, cfg.num_classes[index(t)]}, cfg.channels, rng));
    std::uniform_int_distribution<std::size_t> pick(0, cfg.num_classes[index(t)] - 1);
    labels.push_back({pick(rng), pick(rng), pick(rng)});
    const std::string name(task_name(t));
    c.inputs.push_back(named(name + ".features", "heads", features.back()));
    c.inputs.push_back(named(name + ".weight", "heads", heads.back().weight));
    c.inputs.push_back(named(name + ".bias", "heads", heads.back().bias));
  }
  c.probe = [features, heads, labels] {
    std::vector<Tensor> logits;
    for (std::size_t r = 0; r < heads.size(); ++r) logits.push_back(head_forward(features[r], heads[r]));
    return total_loss(logits, labels).total;
  };
  return {std::move(c)};
}

std::vector<Case> model_cases(const ModelConfig& cfg, std::uint64_t seed) {
  Model model = Model::create(cfg, seed);
  SyntheticRecipe recipe = SyntheticRecipe::for_config(cfg, 0.05);
  Batch batch = make_batch(generate_synthetic(recipe, 3, seed));
  std::vector<std::vector<std::size_t>> labels;
  for (auto t : model.tasks) labels.push_back(batch.labels[index(t)]);
  Case c;
  c.name = "model/total_loss";
  c.inputs = model.parameters();
  c.probe = [model, batch, labels] {
    return total_loss(model.forward(batch, ops::NormMode::kTrain).logits, labels).total;
  };
  return {std::move(c)};
}

using Builder = std::function<std::vector<Case>(const ModelConfig&, std::uint64_t)>;

const std::vector<std::pair<std::string, Builder>>& builders() {
  static const std::vector<std::pair<std::string, Builder>> table = {
      {"tensor-core", [](const ModelConfig&, std::uint64_t s) { Rng r(s); return tensor_core_cases(r); }},
      {"ssm", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return ssm_cases(c, r); }},
      {"stem", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return stem_cases(c, r); }},
      {"mts-block", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return block_cases(c, r); }},
      {"joints", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return joints_cases(c, r); }},
      {"mgmi", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return mgmi_cases(c, r); }},
      {"heads", [](const ModelConfig& c, std::uint64_t s) { Rng r(s); return heads_cases(c, r); }},
      {"model", [](const ModelConfig& c, std::uint64_t s) { return model_cases(c, s); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> gradcheck_modules() {
  std::vector<std::string> names;
  for (const auto& [name, _] : builders()) names.push_back(name);
  names.push_back("all");
  return names;
}

std::vector<GradcheckReport> gradcheck_run(const ModelConfig& config, const std::string& selector,
                                           std::uint64_t seed, const GradcheckOptions& options) {
  config.validate();
  std::vector<GradcheckReport> reports;
  bool matched = false;
  for (const auto& [name, build] : builders()) {
    if (selector != "all" && selector != name) continue;
    matched = true;
    for (const Case& c : build(config, seed)) reports.push_back(check_gradients(c.name, c.inputs, c.probe, options));
  }
  if (!matched) {
    std::string known;
    for (const auto& n : gradcheck_modules()) known += (known.empty() ? "" : ", ") + n;
    throw ArgumentError("unknown gradcheck module '" + selector + "' (known: " + known + ")");
  }
  return reports;
}

}  // namespace mtfuse
