#include "mtfuse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

#include "mtfuse/errors.hpp"

namespace mtfuse {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

namespace {
std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;
}  // namespace

}  // namespace detail

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  if (numel_of(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " + std::to_string(numel_of(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->id = detail::next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
  static const Shape empty{};
  return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool value) {
  if (impl_) impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!impl_) return {};
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::accumulate_grad(std::span<const double> delta) const {
  auto g = mutable_grad();
  if (g.size() != delta.size()) {
    throw DimensionError("gradient of size " + std::to_string(delta.size()) + " for tensor " + shape_str(shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void Tensor::zero_grad() const {
  if (impl_) impl_->grad.clear();
}

std::uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data);
}

void Tape::record(const char* kind, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  output.requires_grad_(true);
  nodes_.push_back(TapeNode{kind, std::move(inputs), std::move(output), std::move(fn)});
}

TapeScope::TapeScope(Tape& tape) : previous_(detail::current_tape) { detail::current_tape = &tape; }

TapeScope::~TapeScope() { detail::current_tape = previous_; }

Tape* active_tape() { return detail::current_tape; }

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = detail::current_tape;
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return tape;
  }
  return nullptr;
}

Tape* recording_tape(std::span<const Tensor> inputs) {
  Tape* tape = detail::current_tape;
  if (!tape) return nullptr;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

BackwardReport backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (tape.empty()) throw EmptyTapeError("backward() on an empty tape");
  const auto& nodes = tape.nodes();
  std::size_t end = nodes.size();
  while (end > 0 && nodes[end - 1].output.id() != loss.id()) --end;
  if (end == 0) throw EmptyTapeError("loss was not recorded on this tape (detached value?)");

  Tensor seed = nodes[end - 1].output;
  seed.zero_grad();
  seed.mutable_grad()[0] = 1.0;

  BackwardReport report;
  for (std::size_t i = end; i-- > 0;) {
    const TapeNode& node = nodes[i];
    ++report.nodes_visited;
    if (!node.output.has_grad()) continue;
    node.backward(node.output.grad());
  }
  tape.clear();
  return report;
}

}  // namespace mtfuse
