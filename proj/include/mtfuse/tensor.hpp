#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mtfuse {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}  // namespace detail

/// Dense row-major float64 array with an optional gradient slot.
///
/// `Tensor` is a cheap handle: copies share storage. Operations never mutate
/// their inputs, so a value produced by an op can be read concurrently. The
/// only mutating entry points are `mutable_data()` (parameter updates) and the
/// gradient accessors, which belong to whoever owns the training loop.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// Gaussian entries with the given standard deviation.
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  /// Uniform entries in [lo, hi).
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double operator[](std::size_t flat) const { return data()[flat]; }
  double item() const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool value = true);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient buffer, allocated as zeros on first access. The gradient slot
  /// is shared by every handle, so these are const like the handle itself.
  std::span<double> mutable_grad() const;
  void accumulate_grad(std::span<const double> delta) const;
  void zero_grad() const;

  /// Unique per storage; used by the tape to locate the loss node.
  std::uint64_t id() const;

  /// Deep copy of the values with no gradient or tape history.
  Tensor detach() const;

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeNode {
  const char* kind = "";
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, so the list is topologically sorted by construction.
/// A tape belongs to one thread.
class Tape {
 public:
  void record(const char* kind, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

/// Makes `tape` the recording target for the current thread until destroyed.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Tape active on this thread, or nullptr.
Tape* active_tape();

/// Returns the active tape if any of `inputs` requires a gradient.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs);
Tape* recording_tape(std::span<const Tensor> inputs);

struct BackwardReport {
  std::size_t nodes_visited = 0;
};

/// Reverse-mode sweep from `loss` (a single-element tensor). Leaf gradients
/// accumulate; the tape is cleared afterwards.
BackwardReport backward(Tape& tape, const Tensor& loss);

}  // namespace mtfuse
