#include "mtfuse/model.hpp"

#include <random>

#include "mtfuse/errors.hpp"
#include "mtfuse/ops.hpp"
#include "mtfuse/serialize.hpp"

namespace mtfuse {

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  m.tasks = config.active_tasks();
  m.modalities = config.active_modalities();
  std::mt19937_64 rng(seed);

  const MtsBlockOptions opts{config.frame_count, config.global_pool, !config.ablation.no_dual_scan,
                             !config.ablation.no_global_local};
  auto branch = [&](std::span<const ViewId> views, std::optional<StemParams>& stem_out,
                    std::vector<MtsBlockParams>& blocks) {
    stem_out = StemParams::init(views, config.frame_count, config.channels, config.height, config.width,
                                config.stem_kernel, rng);
    for (std::size_t d = 0; d < config.depth; ++d) {
      blocks.push_back(MtsBlockParams::init(config.channels, config.state_dim, opts, rng, config.gamma_init));
    }
  };
  for (Modality mod : m.modalities) {
    switch (mod) {
      case Modality::kExterior:
        branch(kExteriorViews, m.exterior_stem, m.exterior_blocks);
        break;
      case Modality::kInterior:
        branch(kInteriorViews, m.interior_stem, m.interior_blocks);
        break;
      case Modality::kJoints:
        m.joints = JointsParams::init(config.frame_count, config.joint_count, config.channels, config.height,
                                      config.width, rng);
        break;
    }
  }
  if (config.ablation.no_mgmi) {
    m.concat = ConcatFuseParams::init(m.modalities.size(), config.channels, rng);
  } else {
    const std::size_t units = config.ablation.no_multi_gating ? 1 : m.tasks.size();
    m.gates = GateParams::init(m.modalities, config.channels, units, rng);
    m.gates->self_attention = !config.ablation.no_self_attention;
  }
  for (TaskId t : m.tasks) {
    m.heads.push_back(HeadParams::init({t, config.num_classes[index(t)]}, config.channels, rng));
  }
  return m;
}

namespace {

// Pixels and joint coordinates live in [0, 1]; shifting them to be centred on
// zero conditions plain SGD far better than the raw offset.
constexpr double kInputCentre = 0.5;

Tensor centred(const Tensor& x) { return ops::add(x, Tensor::full(x.shape(), -kInputCentre)); }

std::array<Tensor, 3> centred(const std::array<Tensor, 3>& views) {
  return {centred(views[0]), centred(views[1]), centred(views[2])};
}

}  // namespace

ModalityFeatures Model::features(const Batch& batch) const {
  ModalityFeatures f;
  for (Modality mod : modalities) {
    f.modalities.push_back(mod);
    switch (mod) {
      case Modality::kExterior:
        f.features.push_back(mts_stack(stem(centred(batch.exterior), *exterior_stem), exterior_blocks));
        break;
      case Modality::kInterior:
        f.features.push_back(mts_stack(stem(centred(batch.interior), *interior_stem), interior_blocks));
        break;
      case Modality::kJoints:
        f.features.push_back(joints_forward(centred(batch.joints), *joints));
        break;
    }
  }
  return f;
}

ForwardResult Model::forward(const Batch& batch, ops::NormMode mode) const {
  const ModalityFeatures f = features(batch);
  ForwardResult out;
  std::vector<Tensor> task_features;
  if (concat) {
    Tensor fused = concat_fuse(f, *concat);
    task_features.assign(tasks.size(), fused);
  } else {
    const Tensor shared = shared_attention(f, *gates);
    if (gates->gates.size() == 1) {
      TaskFusion tf = task_fuse(f, shared, *gates, 0, mode);
      for (TaskId t : tasks) {
        task_features.push_back(tf.fused);
        out.telemetry[index(t)] = tf.mean_gate;
      }
    } else {
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        TaskFusion tf = task_fuse(f, shared, *gates, i, mode);
        task_features.push_back(std::move(tf.fused));
        out.telemetry[index(tasks[i])] = tf.mean_gate;
      }
    }
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) out.logits.push_back(head_forward(task_features[i], heads[i]));
  return out;
}

namespace {

void add(ParamList& out, const std::string& module, const std::string& name, const Tensor& t) {
  out.push_back({module + "." + name, module, t});
}

void add_stem(ParamList& out, const std::string& module, const StemParams& s) {
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    const std::string view(view_name(s.views[v]));
    add(out, module, view + ".dw_weight", s.dw_weight[v]);
    add(out, module, view + ".dw_bias", s.dw_bias[v]);
    add(out, module, view + ".pw_weight", s.pw_weight[v]);
    add(out, module, view + ".pw_bias", s.pw_bias[v]);
  }
}

void add_blocks(ParamList& out, const std::string& module, const std::vector<MtsBlockParams>& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    add(out, module, p + "conv_weight", b.conv_weight);
    add(out, module, p + "conv_bias", b.conv_bias);
    add(out, module, p + "ssm.A_forward", b.ssm_forward.A);
    add(out, module, p + "ssm.D_forward", b.ssm_forward.D);
    add(out, module, p + "ssm.A_backward", b.ssm_backward.A);
    add(out, module, p + "ssm.D_backward", b.ssm_backward.D);
    add(out, module, p + "ssm.B", b.ssm_forward.B);
    add(out, module, p + "ssm.C", b.ssm_forward.C_mat);
    add(out, module, p + "local_weight", b.local_weight);
    add(out, module, p + "local_bias", b.local_bias);
    add(out, module, p + "global_weight", b.global_weight);
    add(out, module, p + "global_bias", b.global_bias);
    add(out, module, p + "out_weight", b.out_weight);
    add(out, module, p + "out_bias", b.out_bias);
    add(out, module, p + "gamma", b.gamma);
  }
}

}  // namespace

ParamList Model::parameters() const {
  ParamList out;
  if (exterior_stem) {
    add_stem(out, "exterior_stem", *exterior_stem);
    add_blocks(out, "exterior_mts", exterior_blocks);
  }
  if (interior_stem) {
    add_stem(out, "interior_stem", *interior_stem);
    add_blocks(out, "interior_mts", interior_blocks);
  }
  if (joints) {
    add(out, "joints_cnn", "conv1_weight", joints->conv1_weight);
    add(out, "joints_cnn", "conv1_bias", joints->conv1_bias);
    add(out, "joints_cnn", "conv2_weight", joints->conv2_weight);
    add(out, "joints_cnn", "conv2_bias", joints->conv2_bias);
    add(out, "joints_cnn", "proj_weight", joints->proj_weight);
    add(out, "joints_cnn", "proj_bias", joints->proj_bias);
  }
  if (gates) {
    add(out, "mgmi", "query_weight", gates->query_weight);
    add(out, "mgmi", "key_weight", gates->key_weight);
    add(out, "mgmi", "value_weight", gates->value_weight);
    for (std::size_t i = 0; i < gates->gates.size(); ++i) {
      const auto& g = gates->gates[i];
      const std::string p = "gate" + std::to_string(i) + ".";
      add(out, "mgmi", p + "conv_weight", g.conv_weight);
      add(out, "mgmi", p + "conv_bias", g.conv_bias);
      add(out, "mgmi", p + "bn_scale", g.bn_scale);
      add(out, "mgmi", p + "bn_shift", g.bn_shift);
    }
  }
  if (concat) {
    add(out, "concat_fuse", "weight", concat->weight);
    add(out, "concat_fuse", "bias", concat->bias);
  }
  for (const auto& h : heads) {
    const std::string task(task_name(h.spec.task));
    add(out, "heads", task + ".weight", h.weight);
    add(out, "heads", task + ".bias", h.bias);
  }
  return out;
}

void Model::save(const std::filesystem::path& path) const {
  std::vector<Tensor> all;
  for (const auto& p : parameters()) all.push_back(p.tensor);
  if (gates) {
    for (const auto& g : gates->gates) {
      all.push_back(Tensor({g.stats.mean.size()}, g.stats.mean));
      all.push_back(Tensor({g.stats.var.size()}, g.stats.var));
    }
  }
  save_tensors(path, all);
}

void Model::load(const std::filesystem::path& path) {
  const auto stored = load_tensors(path);
  ParamList params = parameters();
  const std::size_t stats = gates ? 2 * gates->gates.size() : 0;
  if (stored.size() != params.size() + stats) {
    throw LoadError(path.string() + ": holds " + std::to_string(stored.size()) + " tensors, model expects " +
                    std::to_string(params.size() + stats));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stored[i].shape() != params[i].tensor.shape()) {
      throw LoadError(path.string() + ": " + params[i].name + " has shape " + shape_str(stored[i].shape()) +
                      ", expected " + shape_str(params[i].tensor.shape()));
    }
    auto dst = params[i].tensor.mutable_data();
    std::copy(stored[i].data().begin(), stored[i].data().end(), dst.begin());
  }
  if (gates) {
    std::size_t k = params.size();
    for (auto& g : gates->gates) {
      const auto& mean = stored[k++];
      const auto& var = stored[k++];
      if (mean.numel() != g.stats.mean.size() || var.numel() != g.stats.var.size()) {
        throw LoadError(path.string() + ": gate statistics have the wrong length");
      }
      g.stats.mean.assign(mean.data().begin(), mean.data().end());
      g.stats.var.assign(var.data().begin(), var.data().end());
    }
  }
}

ParamCount count_params(const ParamList& params) {
  ParamCount out;
  for (const auto& p : params) {
    const std::size_t n = p.tensor.numel();
    out.total += n;
    if (out.breakdown.empty() || out.breakdown.back().first != p.module) {
      out.breakdown.emplace_back(p.module, 0);
    }
    out.breakdown.back().second += n;
  }
  return out;
}

ParamCount count_params(const ModelConfig& config) { return count_params(Model::create(config, 0).parameters()); }

FrozenNormStats::FrozenNormStats(const Model& model) : model_(model) {
  if (model_.gates)
    for (const auto& g : model_.gates->gates) saved_.push_back(g.stats);
}

FrozenNormStats::~FrozenNormStats() {
  if (!model_.gates) return;
  for (std::size_t i = 0; i < saved_.size(); ++i) model_.gates->gates[i].stats = saved_[i];
}

}  // namespace mtfuse
