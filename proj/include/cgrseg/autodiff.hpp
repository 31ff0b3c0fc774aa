#pragma once

#include "cgrseg/kernels.hpp"
#include "cgrseg/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <vector>

namespace cgr {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse of
/// insertion order is a valid topological order for backward.
class Tape {
 public:
  /// Receives the gradient and value of the node's output and accumulates
  /// into the inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives a gradient.
  Var constant(Tensor value);
  /// A leaf whose gradient is read back with grad().
  Var variable(Tensor value);
  /// Binds an external parameter. backward() writes its gradient into the
  /// tensor's grad slot. Binding the same tensor twice returns the same node.
  Var parameter(Tensor& param);

  /// Appends an op result. `fn` runs only if some input requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward function once
  /// in reverse order. Bound parameters receive their gradient (zeros if the
  /// loss does not depend on them).
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }
  /// Gradient accumulated at `v` by backward(); zeros if none reached it.
  Tensor grad(const Var& v) const;

  /// Adds `g` into the gradient of `v`; no-op for constants.
  void accumulate(const Var& v, const Tensor& g);
  void accumulate(const Var& v, Tensor&& g);

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until something accumulates into it
    bool requires_grad = false;
    BackwardFn backward;
    Tensor* bound = nullptr;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Differentiable ops. Each mirrors the Tensor kernel of the same name.

Var add_broadcast(Var a, Var b);
Var mul_hadamard(Var a, Var b);
Var scale(Var x, double factor);
Var matmul(Var a, Var b);
Var transpose2d(Var a);
Var reshape(Var x, Shape shape);

/// `bias` may be an invalid (default-constructed) Var for no bias.
Var conv2d(Var x, Var weight, Var bias, const Conv2dOptions& opt);

Var avg_pool2d(Var x, Index factor);
Var pool_rows(Var x);
Var pool_cols(Var x);

Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
               NormMode mode, double momentum, double eps);
Var layer_norm(Var x, Var gamma, Var beta, double eps);

Var relu(Var x);

/// While alive, every relu(Var) on this thread appends the sign pattern of its
/// input (x > 0). Finite-difference checks use it to spot perturbations that
/// cross a kink. Recorders do not nest.
class ReluSignRecorder {
 public:
  ReluSignRecorder();
  ~ReluSignRecorder();
  ReluSignRecorder(const ReluSignRecorder&) = delete;
  ReluSignRecorder& operator=(const ReluSignRecorder&) = delete;

  const std::vector<bool>& signs() const { return signs_; }

 private:
  friend Var relu(Var x);
  std::vector<bool> signs_;
};
Var sigmoid(Var x);
Var softmax(Var x, int axis);

Var upsample_bilinear(Var x, Index out_h, Index out_w);

Var concat_channels(std::span<const Var> xs);
std::vector<Var> split_channels(Var x, std::span<const Index> sizes);
Var select_batch(Var x, Index n);
Var stack_batch(std::span<const Var> xs);

/// Sum of all elements as a (1,1,1,1) scalar.
Var sum(Var x);
Var mean(Var x);

}  // namespace cgr
