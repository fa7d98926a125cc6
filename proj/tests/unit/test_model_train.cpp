#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "mtfuse/bench.hpp"
#include "mtfuse/config.hpp"
#include "mtfuse/errors.hpp"
#include "mtfuse/gradcheck.hpp"
#include "mtfuse/model.hpp"
#include "mtfuse/train.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace mtfuse;

namespace {

// Learnable scalars of the whole network, summed layer by layer from the
// config alone.
std::size_t hand_count(const ModelConfig& c) {
  const std::size_t T = c.frame_count, C = c.channels, n = c.state_dim, k = c.stem_kernel;
  const auto mods = c.active_modalities();
  auto has = [&](Modality m) { return std::find(mods.begin(), mods.end(), m) != mods.end(); };
  std::size_t total = 0;
  const std::size_t in = 3 * T, group = C / T;
  std::size_t stem = 0;
  for (std::size_t v = 0; v < 3; ++v) {
    const std::size_t share = group / 3 + (v < group % 3 ? 1 : 0);
    stem += in * k * k + in + T * share * in + T * share;
  }
  const std::size_t block = (3 + 1) + (3 * C * n + C) + (C * n + C) + 3 * (C * C + C) + 1;
  for (Modality m : {Modality::kExterior, Modality::kInterior})
    if (has(m)) total += stem + c.depth * block;
  if (has(Modality::kJoints)) {
    const std::size_t t1 = std::max<std::size_t>(T / 2, 1), j1 = std::max<std::size_t>(c.joint_count / 2, 1);
    const std::size_t flat = 32 * std::min<std::size_t>(t1, 2) * std::min<std::size_t>(j1, 2);
    total += (16 * 27 + 16) + (32 * 16 * 27 + 32) + (flat * C + C);
  }
  const std::size_t M = mods.size(), tasks = c.active_tasks().size();
  if (c.ablation.no_mgmi) {
    total += M * C * C + C;
  } else {
    const std::size_t units = c.ablation.no_multi_gating ? 1 : tasks;
    total += 3 * M * C * C + units * (M * C * 9 + 3 * M * C);
  }
  for (TaskId t : c.active_tasks()) total += C * c.num_classes[index(t)] + c.num_classes[index(t)];
  return total;
}

TrainOptions quick(std::size_t steps) {
  TrainOptions o;
  o.steps = steps;
  o.train_samples = 48;
  o.val_samples = 32;
  o.eval_every_epochs = 0;
  return o;
}

}  // namespace

TEST(CountParams, SingleLinear) {
  ParamList p{{"w", "lin", Tensor::zeros({10, 4})}, {"b", "lin", Tensor::zeros({4})}};
  EXPECT_EQ(count_params(p).total, 44u);
}

TEST(CountParams, DefaultMatchesHandSumAndBudget) {
  ModelConfig c;
  ParamCount pc = count_params(c);
  EXPECT_EQ(pc.total, hand_count(c));
  EXPECT_EQ(pc.total, 918660u);
  EXPECT_LT(pc.total, 6000000u);
  std::size_t sum = 0;
  for (const auto& [name, n] : pc.breakdown) sum += n;
  EXPECT_EQ(sum, pc.total);
}

TEST(CountParams, VariantsAgreeWithHandSum) {
  for (const auto& name : standard_variants()) {
    for (const ModelConfig& base : {ModelConfig{}, toy_config()}) {
      AblationVariant v = make_variant(base, name);
      EXPECT_EQ(count_params(v.config).total, hand_count(v.config)) << name;
    }
  }
}

TEST(CountParams, FewerComponentsNeverMoreParams) {
  const ModelConfig full;
  const std::size_t n = count_params(full).total;
  for (const auto& name : standard_variants()) {
    EXPECT_LE(count_params(make_variant(full, name).config).total, n) << name;
  }
  ModelConfig no_mgmi = full;
  no_mgmi.ablation.no_mgmi = true;
  EXPECT_LT(count_params(no_mgmi).total, n);
  ModelConfig fewer_tasks = full;
  fewer_tasks.ablation.drop_tasks = {true, true, false, false};
  EXPECT_LT(count_params(fewer_tasks).total, n);
}

TEST(Model, ForwardShapesFollowConfig) {
  ModelConfig c = toy_config();
  c.ablation.drop_tasks[1] = true;
  c.num_classes[3] = 3;
  Model m = Model::create(c, 1);
  auto samples = generate_synthetic(SyntheticRecipe::for_config(c), 4, 1);
  ForwardResult r = m.forward(make_batch(samples), ops::NormMode::kTrain);
  ASSERT_EQ(r.logits.size(), 3u);
  EXPECT_EQ(r.logits[2].shape(), (Shape{4, 3}));
  EXPECT_EQ(r.telemetry[1][0], 0.0);
  EXPECT_GT(r.telemetry[0][0], 0.0);
}

TEST(Model, SingleModalityBuildsOneBranch) {
  ModelConfig c = toy_config();
  c.ablation.drop_modalities = {false, true, true};
  Model m = Model::create(c, 2);
  EXPECT_TRUE(m.exterior_stem.has_value());
  EXPECT_FALSE(m.interior_stem.has_value());
  EXPECT_FALSE(m.joints.has_value());
  auto samples = generate_synthetic(SyntheticRecipe::for_config(c), 2, 1);
  auto r = m.forward(make_batch(samples), ops::NormMode::kTrain);
  for (const auto& row : r.telemetry) EXPECT_EQ(row[2], 0.0);
}

TEST(Model, SaveLoadRoundTrip) {
  ModelConfig c = toy_config();
  Model a = Model::create(c, 3), b = Model::create(c, 4);
  auto path = std::filesystem::temp_directory_path() / "mtfuse_model.t3tn";
  a.save(path);
  b.load(path);
  auto samples = generate_synthetic(SyntheticRecipe::for_config(c), 4, 1);
  Batch batch = make_batch(samples);
  auto ra = a.forward(batch, ops::NormMode::kEval), rb = b.forward(batch, ops::NormMode::kEval);
  for (std::size_t t = 0; t < ra.logits.size(); ++t) EXPECT_LT(oracle::max_abs_diff(ra.logits[t], oracle::values(rb.logits[t])), 1e-5);
  ModelConfig other = c;
  other.ablation.no_mgmi = true;
  Model wrong = Model::create(other, 1);
  EXPECT_THROW(wrong.load(path), LoadError);
}

TEST(Train, DeterministicUnderSeed) {
  ModelConfig c = toy_config();
  auto recipe = SyntheticRecipe::for_config(c, 0.1);
  auto a = train_toy(c, recipe, quick(6), 11), b = train_toy(c, recipe, quick(6), 11);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.trajectory.back().total_loss, b.trajectory.back().total_loss);
  EXPECT_EQ(a.trajectory.back().accuracy, b.trajectory.back().accuracy);
  EXPECT_EQ(a.trajectory.back().gate_telemetry, b.trajectory.back().gate_telemetry);
  auto d = train_toy(c, recipe, quick(6), 12);
  EXPECT_NE(a.step_losses, d.step_losses);
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  ModelConfig c = toy_config();
  c.schedule = {0.0, 0.0, 0.0, 25, 50};
  TrainOptions o = quick(12);
  o.eval_every_epochs = 1;
  o.train_samples = 16;
  auto r = train_toy(c, SyntheticRecipe::for_config(c), o, 5);
  ASSERT_GE(r.trajectory.size(), 3u);
  for (const auto& m : r.trajectory) EXPECT_DOUBLE_EQ(m.total_loss, r.trajectory.front().total_loss);
}

TEST(Train, DivergenceAborts) {
  ModelConfig c = toy_config();
  c.schedule = {1e6, 1e6, 1e6, 25, 50};
  EXPECT_THROW(train_toy(c, SyntheticRecipe::for_config(c), quick(20), 1), NumericError);
}

TEST(Train, MetricsRecordFields) {
  TaskMetrics m;
  m.epoch = 3;
  m.accuracy = {0.5, 0.25, 1.0, 0.75};
  m.mean_accuracy = 0.625;
  m.gate_telemetry[2][1] = 0.9;
  auto j = nlohmann::ordered_json::parse(metrics_json(m));
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"epoch", "loss_total", "loss_der", "loss_dbr", "loss_tcr", "loss_vbr",
                                            "acc_der", "acc_dbr", "acc_tcr", "acc_vbr", "macc", "gate_telemetry",
                                            "param_count", "fps"}));
  EXPECT_EQ(j["gate_telemetry"].size(), 12u);
  EXPECT_DOUBLE_EQ(j["gate_telemetry"][7].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(j["macc"].get<double>(), 0.625);
}

TEST(Ablate, DroppedModalitiesReportOnlyThatVariant) {
  ModelConfig c = toy_config();
  c.ablation.drop_modalities = {false, true, true};
  auto rows = ablate({{"exterior_only", c}}, SyntheticRecipe::for_config(c), quick(2), 1);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].name, "exterior_only");
  EXPECT_EQ(rows[0].params, count_params(c).total);
  for (bool a : rows[0].metrics.active) EXPECT_TRUE(a);
  ModelConfig none = toy_config();
  none.ablation.drop_tasks = {true, true, true, true};
  EXPECT_THROW(ablate({{"none", none}}, SyntheticRecipe::for_config(c), quick(2), 1), ConfigError);
  EXPECT_THROW(make_variant(c, "no_such_variant"), ArgumentError);
}

TEST(Gradcheck, CorruptedGradientIsReportedByName) {
  GradcheckOptions opts;
  opts.corrupt = [](const std::string& name, std::span<double> g) {
    if (name == "matmul.b") g[0] += 1.0;
  };
  bool seen = false;
  for (const auto& r : gradcheck_run(toy_config(), "tensor-core", 1, opts)) {
    for (const auto& t : r.tensors) {
      if (t.name == "matmul.b") {
        seen = true;
        EXPECT_FALSE(t.passed);
        EXPECT_FALSE(r.passed());
      } else {
        EXPECT_TRUE(t.passed) << t.name;
      }
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Gradcheck, UnknownSelector) {
  EXPECT_THROW(gradcheck_run(toy_config(), "nonsense", 1), ArgumentError);
}

TEST(Gradcheck, WholeModel) {
  for (const auto& r : gradcheck_run(toy_config(), "model", 3)) EXPECT_TRUE(r.passed()) << r.module << " " << r.worst();
}

TEST(Bench, RecordSanity) {
  BenchOptions o;
  o.duration_s = 0.3;
  o.warmup_batches = 10;
  BenchRecord r = bench_fps(toy_config(), o, 1);
  EXPECT_GT(r.fps, 0.0);
  EXPECT_LE(r.latency_p50_ms, r.latency_p95_ms);
  EXPECT_EQ(r.config_hash, config_hash(toy_config()));
  EXPECT_EQ(r.param_count, count_params(toy_config()).total);
  EXPECT_EQ(r.warmup_batches, 10u);
  o.duration_s = 0.0;
  EXPECT_THROW(bench_fps(toy_config(), o, 1), ArgumentError);
}

TEST(Bench, TwoThreadsNoPathologicalContention) {
  BenchOptions o;
  o.duration_s = 0.6;
  const double one = bench_fps(toy_config(), o, 1).fps;
  o.threads = 2;
  const double two = bench_fps(toy_config(), o, 1).fps;
  EXPECT_GE(two, 0.9 * one);
}

TEST(Bench, Percentile) {
  std::vector<double> v{5, 1, 4, 2, 3, 10, 9, 8, 7, 6};
  EXPECT_EQ(percentile(v, 50), 5.0);
  EXPECT_EQ(percentile(v, 95), 10.0);
  EXPECT_EQ(percentile(v, 0), 1.0);
  EXPECT_EQ(percentile(v, 100), 10.0);
}
