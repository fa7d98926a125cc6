#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtfuse/bench.hpp"
#include "mtfuse/config.hpp"
#include "mtfuse/data.hpp"
#include "mtfuse/errors.hpp"
#include "mtfuse/gradcheck.hpp"
#include "mtfuse/heads.hpp"
#include "mtfuse/model.hpp"
#include "mtfuse/ssm.hpp"
#include "mtfuse/train.hpp"

namespace py = pybind11;
using namespace mtfuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ModelConfig resolve(const std::string& preset, const std::string& overrides) {
  if (preset != "toy" && preset != "default") throw ArgumentError("preset must be 'toy' or 'default'");
  ModelConfig base = preset == "toy" ? toy_config() : ModelConfig{};
  return overrides.empty() ? base : apply_overrides(base, overrides);
}

SsmParams ssm_params(const Array& A, const Array& B, const Array& C, const Array& D) {
  SsmParams p;
  p.A = to_tensor(A);
  p.B = to_tensor(B);
  p.C_mat = to_tensor(C);
  p.D = to_tensor(D);
  if (p.A.rank() != 2) throw DimensionError("A must be [C x n]");
  p.d_state = unit_vector(p.A.dim(1));
  p.d_dim = unit_vector(p.A.dim(0));
  p.validate();
  return p;
}

py::dict metrics_dict(const TaskMetrics& m) {
  py::dict d;
  py::dict acc, loss;
  for (TaskId t : kAllTasks) {
    if (!m.active[index(t)]) continue;
    acc[py::str(std::string(task_name(t)))] = m.accuracy[index(t)];
    loss[py::str(std::string(task_name(t)))] = m.task_loss[index(t)];
  }
  d["epoch"] = m.epoch;
  d["total_loss"] = m.total_loss;
  d["task_loss"] = loss;
  d["accuracy"] = acc;
  d["macc"] = m.mean_accuracy;
  d["gate_telemetry"] = m.gate_telemetry;
  d["param_count"] = m.param_count;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mtfuse, m) {
  m.doc() = "Multimodal multi-task fusion network: core operations";
  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def(
      "config_text",
      [](const std::string& preset, const std::string& overrides) { return to_text(resolve(preset, overrides)); },
      py::arg("preset") = "default", py::arg("overrides") = "",
      "Validated key=value text of a preset with overrides applied.");

  m.def(
      "config_hash",
      [](const std::string& preset, const std::string& overrides) { return config_hash(resolve(preset, overrides)); },
      py::arg("preset") = "default", py::arg("overrides") = "");

  m.def(
      "count_params",
      [](const std::string& preset, const std::string& overrides) {
        ParamCount pc = count_params(resolve(preset, overrides));
        py::dict d;
        d["total"] = pc.total;
        d["breakdown"] = pc.breakdown;
        return d;
      },
      py::arg("preset") = "default", py::arg("overrides") = "");

  m.def(
      "mean_accuracy",
      [](const std::vector<std::vector<std::size_t>>& predictions,
         const std::vector<std::vector<std::size_t>>& labels) {
        return compute_metrics(predictions, labels).mean_accuracy;
      },
      py::arg("predictions"), py::arg("labels"), "Mean of per-task accuracies over four prediction streams.");

  m.def(
      "compute_gate",
      [](const Array& A, const Array& B, const Array& C, const Array& D) {
        return to_array(compute_gate(ssm_params(A, B, C, D)));
      },
      py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"));

  m.def(
      "scan",
      [](const Array& x, const Array& A, const Array& B, const Array& C, const Array& D, bool backward) {
        return to_array(scan(to_tensor(x), ssm_params(A, B, C, D),
                             backward ? ScanDirection::kBackward : ScanDirection::kForward));
      },
      py::arg("x"), py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"), py::arg("backward") = false,
      "Diagonal state-space scan over axis -3 of x [.. x T x G x L]; parameters have T*G rows.");

  m.def(
      "gradcheck",
      [](const std::string& module, std::uint64_t seed, const std::string& preset, const std::string& overrides) {
        py::list out;
        for (const auto& r : gradcheck_run(resolve(preset, overrides), module, seed)) {
          py::dict d;
          d["module"] = r.module;
          d["passed"] = r.passed();
          d["worst"] = r.worst();
          out.append(d);
        }
        return out;
      },
      py::arg("module") = "all", py::arg("seed") = 0, py::arg("preset") = "toy", py::arg("overrides") = "");

  m.def(
      "train_toy",
      [](std::size_t steps, std::uint64_t seed, double noise, std::size_t train_samples, std::size_t val_samples,
         const std::string& overrides) {
        ModelConfig c = resolve("toy", overrides);
        TrainOptions o;
        o.steps = steps;
        o.train_samples = train_samples;
        o.val_samples = val_samples;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_toy(c, SyntheticRecipe::for_config(c, noise), o, seed);
        }
        py::dict d;
        py::list traj;
        for (const auto& t : r.trajectory) traj.append(metrics_dict(t));
        d["trajectory"] = traj;
        d["step_losses"] = r.step_losses;
        d["stopped_early"] = r.stopped_early;
        return d;
      },
      py::arg("steps") = 200, py::arg("seed") = 0, py::arg("noise") = 0.0, py::arg("train_samples") = 400,
      py::arg("val_samples") = 256, py::arg("overrides") = "");

  m.def(
      "bench",
      [](double duration, std::size_t batch, std::size_t threads, std::uint64_t seed, const std::string& preset,
         const std::string& overrides) {
        BenchOptions o;
        o.duration_s = duration;
        o.batch_size = batch;
        o.threads = threads;
        ModelConfig c = resolve(preset, overrides);
        BenchRecord r;
        {
          py::gil_scoped_release release;
          r = bench_fps(c, o, seed);
        }
        py::dict d;
        d["config_hash"] = r.config_hash;
        d["param_count"] = r.param_count;
        d["fps"] = r.fps;
        d["latency_p50_ms"] = r.latency_p50_ms;
        d["latency_p95_ms"] = r.latency_p95_ms;
        d["threads"] = r.threads;
        d["batch_size"] = r.batch_size;
        d["measured_batches"] = r.measured_batches;
        return d;
      },
      py::arg("duration") = 1.0, py::arg("batch") = 8, py::arg("threads") = 1, py::arg("seed") = 0,
      py::arg("preset") = "toy", py::arg("overrides") = "");

  m.def(
      "generate_synthetic",
      [](std::size_t count, std::uint64_t seed, double noise, const std::string& overrides) {
        ModelConfig c = resolve("toy", overrides);
        py::list out;
        for (const auto& s : generate_synthetic(SyntheticRecipe::for_config(c, noise), count, seed)) {
          py::dict d;
          d["id"] = s.id;
          d["labels"] = s.labels;
          py::list ext, in;
          for (const auto& v : s.exterior) ext.append(to_array(v));
          for (const auto& v : s.interior) in.append(to_array(v));
          d["exterior"] = ext;
          d["interior"] = in;
          d["joints"] = to_array(s.joints);
          out.append(d);
        }
        return out;
      },
      py::arg("count"), py::arg("seed") = 0, py::arg("noise") = 0.0, py::arg("overrides") = "",
      "Samples at the toy preset's sizes, labels in der/dbr/tcr/vbr order.");
}
