#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mtfuse/config.hpp"
#include "mtfuse/errors.hpp"
#include "mtfuse/gradcheck.hpp"
#include "mtfuse/joints_cnn.hpp"
#include "mtfuse/mgmi.hpp"
#include "mtfuse/ops.hpp"
#include "oracles.hpp"

using namespace mtfuse;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mtfuse_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ModalityFeatures random_modalities(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  return ModalityFeatures::of(Tensor::randn({n, c, h, w}, rng), Tensor::randn({n, c, h, w}, rng),
                              Tensor::randn({n, c, h, w}, rng));
}

oracle::Vec sample(const Tensor& t, std::size_t b) {
  const std::size_t per = t.numel() / t.dim(0);
  return oracle::Vec(t.data().begin() + b * per, t.data().begin() + (b + 1) * per);
}

}  // namespace

TEST(Joints, ZeroInputZeroBias) {
  std::mt19937_64 rng(1);
  JointsParams p = JointsParams::init(4, 6, 8, 3, 3, rng);
  for (double v : oracle::values(joints_forward(JointSequence{Tensor::zeros({4, 6, 3})}, p))) EXPECT_EQ(v, 0.0);
}

TEST(Joints, MatchesSecondImplementation) {
  std::mt19937_64 rng(2);
  for (auto [t, j] : {std::pair<std::size_t, std::size_t>{4, 8}, {16, 17}, {3, 5}}) {
    JointsParams p = JointsParams::init(t, j, 12, 2, 3, rng);
    p.conv1_bias = Tensor::randn({16}, rng, 0.1);
    p.conv2_bias = Tensor::randn({32}, rng, 0.1);
    p.proj_bias = Tensor::randn({12}, rng, 0.1);
    Tensor x = Tensor::uniform({t, j, 3}, rng, 0.0, 1.0);
    Tensor y = joints_forward(JointSequence{x}, p);
    ASSERT_EQ(y.shape(), (Shape{12, 2, 3}));
    EXPECT_LT(oracle::max_abs_diff(y, oracle::joints(oracle::values(x), p)), 1e-10) << "T=" << t << " J=" << j;
  }
}

TEST(Joints, Deterministic) {
  std::mt19937_64 rng(3);
  JointsParams p = JointsParams::init(4, 8, 8, 2, 2, rng);
  Tensor x = Tensor::uniform({4, 8, 3}, rng, 0.0, 1.0);
  EXPECT_EQ(oracle::values(joints_forward(JointSequence{x}, p)), oracle::values(joints_forward(JointSequence{x}, p)));
}

TEST(Joints, CountMismatch) {
  std::mt19937_64 rng(4);
  JointsParams p = JointsParams::init(4, 8, 8, 2, 2, rng);
  EXPECT_THROW(joints_forward(JointSequence{Tensor::zeros({4, 7, 3})}, p), InputError);
  EXPECT_THROW(joints_forward(JointSequence{Tensor::zeros({5, 8, 3})}, p), InputError);
}

TEST(Joints, FileRoundTrip) {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::uniform({4, 17, 3}, rng, 0.0, 1.0);
  auto path = temp_path("j.t3jt");
  save_joints(path, x);
  EXPECT_EQ(std::filesystem::file_size(path), 4u + 8 + 4 * 17 * 3 * 4);
  Tensor back = load_joints(path);
  EXPECT_EQ(back.shape(), x.shape());
  EXPECT_LT(oracle::max_abs_diff(back, oracle::values(x)), 1e-6);
  std::ofstream(path, std::ios::binary) << "T3TN....";
  EXPECT_THROW(load_joints(path), LoadError);
}

TEST(Attention, MatchesSecondImplementationAndRowsSumToOne) {
  std::mt19937_64 rng(6);
  for (auto [c, h, w] : {std::tuple<std::size_t, std::size_t, std::size_t>{2, 2, 2}, {16, 4, 4}, {5, 3, 2}}) {
    GateParams p = GateParams::init(kAllModalities, c, 4, rng);
    ModalityFeatures m = random_modalities(2, c, h, w, rng);
    AttentionTrace trace;
    Tensor s = shared_attention(m, p, &trace);
    for (std::size_t b = 0; b < 2; ++b) {
      oracle::Vec weights;
      auto ref = oracle::attention({sample(m.features[0], b), sample(m.features[1], b), sample(m.features[2], b)}, c,
                                   h * w, p, &weights);
      EXPECT_LT(oracle::max_abs_diff(sample(s, b), ref), 1e-10);
      EXPECT_LT(oracle::max_abs_diff(sample(trace.weights, b), weights), 1e-12);
    }
    for (std::size_t row = 0; row < 2 * c; ++row) {
      double sum = 0.0;
      for (std::size_t k = 0; k < c; ++k) sum += trace.weights[row * c + k];
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Attention, ZeroQueryGivesRowMeanOfValues) {
  std::mt19937_64 rng(7);
  GateParams p = GateParams::init(kAllModalities, 3, 4, rng);
  p.query_weight = Tensor::zeros({9, 3});
  ModalityFeatures m = random_modalities(1, 3, 2, 2, rng);
  Tensor s = shared_attention(m, p);
  oracle::Vec joined;
  for (const auto& f : m.features) joined.insert(joined.end(), f.data().begin(), f.data().end());
  auto v = oracle::channel_map(joined, 9, 4, oracle::values(p.value_weight), 3, {});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(s[c * 4 + q], (v[q] + v[4 + q] + v[8 + q]) / 3.0, 1e-14);
}

TEST(Attention, ZeroValueGivesZero) {
  std::mt19937_64 rng(8);
  GateParams p = GateParams::init(kAllModalities, 3, 4, rng);
  p.value_weight = Tensor::zeros({9, 3});
  for (double v : oracle::values(shared_attention(random_modalities(2, 3, 2, 2, rng), p))) EXPECT_EQ(v, 0.0);
}

TEST(Attention, ShapeMismatch) {
  std::mt19937_64 rng(9);
  GateParams p = GateParams::init(kAllModalities, 3, 4, rng);
  ModalityFeatures m = ModalityFeatures::of(Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({1, 3, 2, 2}),
                                            Tensor::zeros({1, 3, 2, 3}));
  EXPECT_THROW(shared_attention(m, p), DimensionError);
}

TEST(TaskFuse, MatchesSecondImplementation) {
  std::mt19937_64 rng(10);
  const std::size_t n = 3, c = 4, h = 3, w = 3;
  GateParams p = GateParams::init(kAllModalities, c, 4, rng);
  for (auto& u : p.gates) {
    u.conv_bias = Tensor::randn({3 * c}, rng, 0.2);
    u.bn_scale = Tensor::uniform({3 * c}, rng, 0.5, 1.5);
    u.bn_shift = Tensor::randn({3 * c}, rng, 0.2);
  }
  ModalityFeatures m = random_modalities(n, c, h, w, rng);
  Tensor s = shared_attention(m, p);
  std::vector<std::vector<oracle::Vec>> mods(3);
  std::vector<oracle::Vec> shared;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < 3; ++i) mods[i].push_back(sample(m.features[i], b));
    shared.push_back(sample(s, b));
  }
  for (std::size_t task = 0; task < 4; ++task) {
    TaskFusion f = task_fuse(m, s, p, task, ops::NormMode::kTrain);
    auto ref = oracle::task_fuse(mods, shared, c, h, w, p.gates[task], kBatchNormEps);
    for (std::size_t b = 0; b < n; ++b) EXPECT_LT(oracle::max_abs_diff(sample(f.fused, b), ref[b]), 1e-10);
    for (const auto& g : f.gates)
      for (double v : g.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
  }
}

TEST(TaskFuse, HalfGatesAndPassthrough) {
  std::mt19937_64 rng(11);
  GateParams p = GateParams::init(kAllModalities, 3, 4, rng);
  for (auto& u : p.gates) u.bn_scale = Tensor::zeros({9});
  ModalityFeatures m = random_modalities(2, 3, 2, 2, rng);
  Tensor s = shared_attention(m, p);
  TaskFusion f = task_fuse(m, s, p, 2, ops::NormMode::kTrain);
  for (std::size_t i = 0; i < f.fused.numel(); ++i) {
    EXPECT_NEAR(f.fused[i], 0.5 * (m.features[0][i] + m.features[1][i] + m.features[2][i]), 1e-14);
  }
  auto out = fuse_all(m, p, ops::NormMode::kTrain);
  for (const auto& row : out.telemetry)
    for (double g : row) EXPECT_DOUBLE_EQ(g, 0.5);

  GateParams q = GateParams::init(kAllModalities, 3, 4, rng);
  ModalityFeatures only_first = ModalityFeatures::of(m.features[0], Tensor::zeros({2, 3, 2, 2}), Tensor::zeros({2, 3, 2, 2}));
  TaskFusion g = task_fuse(only_first, shared_attention(only_first, q), q, 1, ops::NormMode::kTrain);
  EXPECT_EQ(oracle::values(g.fused), oracle::values(ops::mul(m.features[0], g.gates[0])));
}

TEST(TaskFuse, TaskIndexChecked) {
  std::mt19937_64 rng(12);
  GateParams p = GateParams::init(kAllModalities, 3, 4, rng);
  ModalityFeatures m = random_modalities(2, 3, 2, 2, rng);
  EXPECT_THROW(task_fuse(m, shared_attention(m, p), p, 4, ops::NormMode::kTrain), ArgumentError);
}

TEST(FuseAll, IdenticalParamsGiveIdenticalTasks) {
  std::mt19937_64 rng(13);
  GateParams p = GateParams::init(kAllModalities, 4, 4, rng);
  for (std::size_t i = 1; i < 4; ++i) {
    p.gates[i].conv_weight = p.gates[0].conv_weight;
    p.gates[i].conv_bias = p.gates[0].conv_bias;
  }
  auto out = fuse_all(random_modalities(2, 4, 3, 3, rng), p, ops::NormMode::kTrain);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(oracle::values(out.task_features[i]), oracle::values(out.task_features[0]));
  for (const auto& row : out.telemetry)
    for (double g : row) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
}

TEST(ConcatFuse, Cases) {
  std::mt19937_64 rng(14);
  const std::size_t c = 3;
  ConcatFuseParams p = ConcatFuseParams::init(3, c, rng);
  ModalityFeatures m = random_modalities(2, c, 2, 2, rng);
  Tensor select = Tensor::zeros({3 * c, c});
  for (std::size_t i = 0; i < c; ++i) select.mutable_data()[i * c + i] = 1.0;
  EXPECT_EQ(oracle::values(concat_fuse(m, {select, Tensor::zeros({c})})), oracle::values(m.features[0]));
  ModalityFeatures zeros = ModalityFeatures::of(Tensor::zeros({1, c, 2, 2}), Tensor::zeros({1, c, 2, 2}),
                                                Tensor::zeros({1, c, 2, 2}));
  for (double v : oracle::values(concat_fuse(zeros, p))) EXPECT_EQ(v, 0.0);
  Tensor y = concat_fuse(m, p);
  for (std::size_t b = 0; b < 2; ++b) {
    oracle::Vec joined;
    for (const auto& f : m.features) {
      auto s = sample(f, b);
      joined.insert(joined.end(), s.begin(), s.end());
    }
    EXPECT_LT(oracle::max_abs_diff(sample(y, b), oracle::channel_map(joined, 3 * c, 4, oracle::values(p.weight), c,
                                                                      oracle::values(p.bias))),
              1e-12);
  }
}

TEST(JointsMgmiGradients, FiniteDifference) {
  for (std::uint64_t seed : {1, 2}) {
    for (const char* sel : {"joints", "mgmi"}) {
      for (const auto& r : gradcheck_run(toy_config(), sel, seed)) {
        EXPECT_TRUE(r.passed()) << r.module << " seed " << seed << " worst " << r.worst();
      }
    }
  }
}
