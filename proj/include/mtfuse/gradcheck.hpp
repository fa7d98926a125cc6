#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mtfuse/config.hpp"
#include "mtfuse/param.hpp"
#include "mtfuse/tensor.hpp"

namespace mtfuse {

/// Called with each tensor's analytic gradient before comparison. Tests use it
/// to plant a wrong gradient and confirm the checker notices.
using GradientHook = std::function<void(const std::string& name, std::span<double> grad)>;

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t max_entries = 24;  // sampled entries per tensor
  /// Floor on the error denominator; keeps round-off on exactly-zero
  /// gradients from reading as a relative failure.
  double floor = 1e-6;
  GradientHook corrupt;
};

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::string module;
  std::vector<TensorCheck> tensors;
  bool passed() const;
  double worst() const;
};

/// Scalar probe rebuilt from the current values of the checked tensors.
using ProbeFn = std::function<Tensor()>;

/// Central differences on sampled entries of every tensor in `inputs`
/// against one reverse-mode sweep. The error per tensor is
/// ||analytic - numeric|| / max(||analytic|| + ||numeric||, floor) over the
/// sampled entries.
GradcheckReport check_gradients(const std::string& module, const ParamList& inputs, const ProbeFn& probe,
                                const GradcheckOptions& options = {});

/// Selectors accepted by gradcheck_run.
std::vector<std::string> gradcheck_modules();

/// Builds seeded probes for the named module ("all" runs every one) at the
/// config's sizes. Throws ArgumentError on an unknown selector.
std::vector<GradcheckReport> gradcheck_run(const ModelConfig& config, const std::string& selector,
                                           std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace mtfuse
