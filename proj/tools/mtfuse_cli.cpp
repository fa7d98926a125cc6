// Command-line front end: params, bench, gradcheck, train-toy, ablate, gen-data.
// Exit codes: 0 success, 1 validation failure, 2 usage error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtfuse/bench.hpp"
#include "mtfuse/config.hpp"
#include "mtfuse/data.hpp"
#include "mtfuse/errors.hpp"
#include "mtfuse/gradcheck.hpp"
#include "mtfuse/model.hpp"
#include "mtfuse/train.hpp"

namespace {

using namespace mtfuse;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out;
  bool json = false;
};

void add_common(CLI::App* app, Common& c, const char* default_preset) {
  c.preset = default_preset;
  app->add_option("--config", c.config_path, "key=value config file, applied on top of the preset");
  app->add_option("--preset", c.preset, "starting configuration")
      ->check(CLI::IsMember({"toy", "default"}))
      ->capture_default_str();
  app->add_option("--set", c.overrides, "extra key=value overrides, applied last");
  app->add_option("--seed", c.seed, "RNG seed")->capture_default_str();
  app->add_option("--out", c.out, "write JSON-lines records here");
  app->add_flag("--json", c.json, "print JSON lines instead of a table");
}

ModelConfig resolve_config(const Common& c) {
  ModelConfig cfg = c.preset == "toy" ? toy_config() : ModelConfig{};
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path);
    if (!is) throw UsageError("cannot open config file " + c.config_path);
    std::stringstream ss;
    ss << is.rdbuf();
    cfg = apply_overrides(cfg, ss.str());
  }
  std::string joined;
  for (const auto& o : c.overrides) joined += o + "\n";
  if (!joined.empty()) cfg = apply_overrides(cfg, joined);
  return cfg;
}

class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }
  void print(std::ostream& os) const {
    std::vector<std::size_t> width;
    for (const auto& r : rows_)
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (width.size() <= i) width.push_back(0);
        width[i] = std::max(width[i], r[i].size());
      }
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      for (std::size_t i = 0; i < rows_[k].size(); ++i) {
        if (i) os << "  ";
        // first column left-aligned, numbers right-aligned
        if (i == 0)
          os << std::left << std::setw(static_cast<int>(width[i])) << rows_[k][i];
        else
          os << std::right << std::setw(static_cast<int>(width[i])) << rows_[k][i];
      }
      os << '\n';
      if (k == 0) {
        std::size_t total = 0;
        for (auto w : width) total += w;
        os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
      }
    }
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

class Sink {
 public:
  explicit Sink(const Common& c) : to_stdout_(c.json) {
    if (!c.out.empty()) {
      file_.open(c.out);
      if (!file_) throw UsageError("cannot open --out file " + c.out);
    }
  }
  void line(const std::string& json) {
    if (file_.is_open()) file_ << json << '\n';
    if (to_stdout_) std::cout << json << '\n';
  }
  bool table() const { return !to_stdout_; }

 private:
  bool to_stdout_;
  std::ofstream file_;
};

int cmd_params(const Common& c, std::size_t budget) {
  const ModelConfig cfg = resolve_config(c);
  const ParamCount pc = count_params(cfg);
  Sink sink(c);
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["param_count"] = pc.total;
  nlohmann::ordered_json modules;
  for (const auto& [name, n] : pc.breakdown) modules[name] = n;
  j["breakdown"] = modules;
  sink.line(j.dump());
  if (sink.table()) {
    Table t({"module", "params"});
    for (const auto& [name, n] : pc.breakdown) t.add({name, std::to_string(n)});
    t.add({"total", std::to_string(pc.total)});
    t.print(std::cout);
  }
  if (budget > 0 && pc.total >= budget) {
    std::cerr << "parameter count " << pc.total << " exceeds budget " << budget << '\n';
    return kValidation;
  }
  return kOk;
}

int cmd_bench(const Common& c, const BenchOptions& opts) {
  const ModelConfig cfg = resolve_config(c);
  const BenchRecord r = bench_fps(cfg, opts, c.seed);
  Sink sink(c);
  sink.line(bench_json(r));
  if (sink.table()) {
    Table t({"config", "params", "batch", "threads", "fps", "p50_ms", "p95_ms", "batches", "seconds"});
    t.add({r.config_hash, std::to_string(r.param_count), std::to_string(r.batch_size), std::to_string(r.threads),
           fmt(r.fps, 1), fmt(r.latency_p50_ms, 3), fmt(r.latency_p95_ms, 3), std::to_string(r.measured_batches),
           fmt(r.duration_s, 2)});
    t.print(std::cout);
  }
  return r.fps > 0.0 && r.latency_p50_ms <= r.latency_p95_ms ? kOk : kValidation;
}

int cmd_gradcheck(const Common& c, const std::string& module, const GradcheckOptions& opts) {
  const ModelConfig cfg = resolve_config(c);
  const auto known = gradcheck_modules();
  if (std::find(known.begin(), known.end(), module) == known.end()) {
    throw UsageError("unknown module '" + module + "'");
  }
  const auto reports = gradcheck_run(cfg, module, c.seed, opts);
  Sink sink(c);
  Table t({"check", "tensors", "max_rel_error", "status"});
  bool ok = true;
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["module"] = r.module;
    j["passed"] = r.passed();
    j["max_rel_error"] = r.worst();
    j["tolerance"] = opts.tolerance;
    nlohmann::ordered_json failed = nlohmann::ordered_json::array();
    for (const auto& tc : r.tensors)
      if (!tc.passed) failed.push_back({{"tensor", tc.name}, {"rel_error", tc.max_rel_error}});
    j["failed"] = failed;
    sink.line(j.dump());
    t.add({r.module, std::to_string(r.tensors.size()), sci(r.worst()), r.passed() ? "pass" : "FAIL"});
    ok = ok && r.passed();
    for (const auto& tc : r.tensors)
      if (!tc.passed) std::cerr << r.module << ": " << tc.name << " rel error " << tc.max_rel_error << '\n';
  }
  if (sink.table()) t.print(std::cout);
  return ok ? kOk : kValidation;
}

void metrics_table(const std::vector<TaskMetrics>& traj, std::ostream& os) {
  Table t({"epoch", "loss", "der", "dbr", "tcr", "vbr", "macc", "params"});
  for (const auto& m : traj) {
    t.add({std::to_string(m.epoch), fmt(m.total_loss), fmt(m.accuracy[0]), fmt(m.accuracy[1]), fmt(m.accuracy[2]),
           fmt(m.accuracy[3]), fmt(m.mean_accuracy), std::to_string(m.param_count)});
  }
  t.print(os);
}

int cmd_train(const Common& c, TrainOptions opts, double noise, const std::string& weights) {
  const ModelConfig cfg = resolve_config(c);
  Sink sink(c);
  opts.on_eval = [&sink](const TaskMetrics& m) { sink.line(metrics_json(m)); };
  const TrainResult r = train_toy(cfg, SyntheticRecipe::for_config(cfg, noise), opts, c.seed);
  if (sink.table()) {
    metrics_table(r.trajectory, std::cout);
    const auto& g = r.trajectory.back().gate_telemetry;
    Table gt({"gates", "exterior", "interior", "joints"});
    for (auto t : kAllTasks) {
      gt.add({std::string(task_name(t)), fmt(g[index(t)][0]), fmt(g[index(t)][1]), fmt(g[index(t)][2])});
    }
    std::cout << '\n';
    gt.print(std::cout);
  }
  if (!weights.empty()) r.model.save(weights);
  return kOk;
}

int cmd_ablate(const Common& c, std::vector<std::string> names, const TrainOptions& opts, double noise) {
  const ModelConfig cfg = resolve_config(c);
  if (names.empty()) names = standard_variants();
  std::vector<AblationVariant> variants;
  for (const auto& n : names) {
    const auto std_names = standard_variants();
    if (n != "config" && std::find(std_names.begin(), std_names.end(), n) == std_names.end()) {
      throw UsageError("unknown variant '" + n + "'");
    }
    variants.push_back(make_variant(cfg, n));
  }
  const auto rows = ablate(variants, SyntheticRecipe::for_config(cfg, noise), opts, c.seed);
  Sink sink(c);
  Table t({"variant", "params", "der", "dbr", "tcr", "vbr", "macc"});
  for (const auto& row : rows) {
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(metrics_json(row.metrics));
    j["variant"] = row.name;
    sink.line(j.dump());
    std::vector<std::string> cells{row.name, std::to_string(row.params)};
    for (auto task : kAllTasks) cells.push_back(row.metrics.active[index(task)] ? fmt(row.metrics.accuracy[index(task)]) : "-");
    cells.push_back(fmt(row.metrics.mean_accuracy));
    t.add(std::move(cells));
  }
  if (sink.table()) t.print(std::cout);
  return kOk;
}

int cmd_gen_data(const Common& c, std::size_t count, double noise) {
  if (c.out.empty()) throw UsageError("gen-data needs --out <directory>");
  const ModelConfig cfg = resolve_config(c);
  const auto samples = generate_synthetic(SyntheticRecipe::for_config(cfg, noise), count, c.seed);
  std::filesystem::create_directories(c.out);
  for (const auto& s : samples) write_sample_dir(c.out, s);
  std::ofstream(std::filesystem::path(c.out) / "config.txt") << to_text(cfg);
  std::cout << "wrote " << samples.size() << " samples to " << c.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal multi-task network: parameter counts, benchmarks, gradient checks, toy training"};
  app.require_subcommand(1);

  Common params_c, bench_c, grad_c, train_c, ablate_c, gen_c;
  std::size_t budget = 6'000'000;
  auto* params = app.add_subcommand("params", "count learnable parameters per module");
  add_common(params, params_c, "default");
  params->add_option("--budget", budget, "fail when the total reaches this (0 disables)")->capture_default_str();

  BenchOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "eval-mode inference throughput");
  add_common(bench, bench_c, "default");
  bench->add_option("--batch", bench_opts.batch_size)->capture_default_str();
  bench->add_option("--duration", bench_opts.duration_s, "measured seconds")->capture_default_str();
  bench->add_option("--threads", bench_opts.threads)->capture_default_str();
  bench->add_option("--warmup", bench_opts.warmup_batches, "warmup batches per worker")->capture_default_str();

  GradcheckOptions grad_opts;
  std::string module = "all";
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(grad, grad_c, "toy");
  grad->add_option("--module", module, "one of the known modules, or all")->capture_default_str();
  grad->add_option("--tol", grad_opts.tolerance)->capture_default_str();
  grad->add_option("--entries", grad_opts.max_entries, "sampled entries per tensor")->capture_default_str();

  TrainOptions train_opts;
  double train_noise = 0.0;
  std::string weights;
  auto* train = app.add_subcommand("train-toy", "train on synthetic data and log metrics records");
  add_common(train, train_c, "toy");
  train->add_option("--steps", train_opts.steps)->capture_default_str();
  train->add_option("--batch", train_opts.batch_size)->capture_default_str();
  train->add_option("--train-samples", train_opts.train_samples)->capture_default_str();
  train->add_option("--val-samples", train_opts.val_samples)->capture_default_str();
  train->add_option("--noise", train_noise, "synthetic noise level")->capture_default_str();
  train->add_option("--save", weights, "write trained weights (T3TN records)");

  TrainOptions ablate_opts;
  double ablate_noise = 0.0;
  std::vector<std::string> variants;
  auto* abl = app.add_subcommand("ablate", "train each variant and compare");
  add_common(abl, ablate_c, "toy");
  abl->add_option("--variants", variants, "variant names (default: the standard set); 'config' is the config as given")
      ->delimiter(',');
  abl->add_option("--steps", ablate_opts.steps)->capture_default_str();
  abl->add_option("--noise", ablate_noise)->capture_default_str();

  std::size_t count = 20;
  double gen_noise = 0.0;
  auto* gen = app.add_subcommand("gen-data", "write synthetic samples in the directory layout");
  add_common(gen, gen_c, "toy");
  gen->add_option("--count", count)->capture_default_str();
  gen->add_option("--noise", gen_noise)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*params) return cmd_params(params_c, budget);
    if (*bench) return cmd_bench(bench_c, bench_opts);
    if (*grad) return cmd_gradcheck(grad_c, module, grad_opts);
    if (*train) return cmd_train(train_c, train_opts, train_noise, weights);
    if (*abl) return cmd_ablate(ablate_c, variants, ablate_opts, ablate_noise);
    if (*gen) return cmd_gen_data(gen_c, count, gen_noise);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const mtfuse::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kUsage;
}
