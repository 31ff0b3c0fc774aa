#include "cgrseg/autodiff.hpp"

#include <algorithm>
#include <memory>
#include <utility>

namespace cgr {

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Tape::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  return push(std::move(node));
}

Var Tape::parameter(Tensor& param) {
  if (auto it = bound_.find(&param); it != bound_.end()) return Var(this, it->second);
  Node node;
  node.value = param.reshaped(param.shape());
  node.requires_grad = true;
  node.bound = &param;
  Var v = push(std::move(node));
  bound_.emplace(&param, v.id());
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    if (!in.valid()) continue;
    if (&in.tape() != this) throw Error("op mixes vars from different tapes");
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  return push(std::move(node));
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& node = nodes_.at(v.id());
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ShapeError("gradient " + g.shape().str() + " does not match value " + node.value.shape().str());
  }
  if (node.grad.empty() && node.value.size() > 0) {
    node.grad = g.reshaped(g.shape());
  } else {
    node.grad.data() += g.data();
  }
}

void Tape::accumulate(const Var& v, Tensor&& g) {
  Node& node = nodes_.at(v.id());
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ShapeError("gradient " + g.shape().str() + " does not match value " + node.value.shape().str());
  }
  if (node.grad.empty() && node.value.size() > 0) {
    node.grad = std::move(g);
  } else {
    node.grad.data() += g.data();
  }
}

void Tape::backward(Var loss) {
  if (nodes_.empty() || !loss.valid() || &loss.tape() != this || loss.id() >= nodes_.size()) {
    throw Error("backward called before a forward pass recorded the loss");
  }
  if (backward_done_) throw Error("backward already ran on this tape");
  const Shape scalar{1, 1, 1, 1};
  if (loss.shape() != scalar) {
    throw ShapeError("backward needs a scalar (1,1,1,1) loss, got " + loss.shape().str());
  }
  backward_done_ = true;
  Node& root = nodes_[loss.id()];
  if (root.requires_grad) root.grad = Tensor::ones(scalar);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad, node.value);
  }
  for (Node& node : nodes_) {
    if (!node.bound) continue;
    if (node.grad.empty()) {
      node.bound->set_grad(Tensor::Vector::Zero(node.value.size()));
    } else {
      node.bound->set_grad(node.grad.data());
    }
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.empty()) return Tensor::zeros(node.value.shape());
  return node.grad.reshaped(node.grad.shape());
}

// ---------------------------------------------------------------------------

Var add_broadcast(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(add_broadcast(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(a)) tp.accumulate(a, sum_to_shape(g, a.shape()));
    if (tp.requires_grad(b)) tp.accumulate(b, sum_to_shape(g, b.shape()));
  });
}

Var mul_hadamard(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(mul_hadamard(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(a)) tp.accumulate(a, sum_to_shape(mul_hadamard(g, b.value()), a.shape()));
    if (tp.requires_grad(b)) tp.accumulate(b, sum_to_shape(mul_hadamard(g, a.value()), b.shape()));
  });
}

Var scale(Var x, double factor) {
  return x.tape().record(scale(x.value(), factor), {x}, [x, factor](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, scale(g, factor));
  });
}

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(a)) tp.accumulate(a, matmul(g, transpose2d(b.value())));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul(transpose2d(a.value()), g));
  });
}

Var transpose2d(Var a) {
  return a.tape().record(transpose2d(a.value()), {a}, [a](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, transpose2d(g));
  });
}

Var reshape(Var x, Shape shape) {
  const Shape from = x.shape();
  return x.tape().record(x.value().reshaped(shape), {x}, [x, from](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, g.reshaped(from));
  });
}

Var conv2d(Var x, Var weight, Var bias, const Conv2dOptions& opt) {
  Tape& t = x.tape();
  const bool has_bias = bias.valid();
  Tensor out = conv2d(x.value(), weight.value(), has_bias ? &bias.value() : nullptr, opt);
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return t.record(std::move(out), inputs, [x, weight, bias, has_bias, opt](Tape& tp, const Tensor& g, const Tensor&) {
    auto grads = conv2d_backward(x.value(), weight.value(), has_bias, g, opt);
    tp.accumulate(x, std::move(grads.input));
    tp.accumulate(weight, std::move(grads.weight));
    if (has_bias) tp.accumulate(bias, grads.bias.reshaped(bias.shape()));
  });
}

Var avg_pool2d(Var x, Index factor) {
  return x.tape().record(avg_pool2d(x.value(), factor), {x}, [x, factor](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, avg_pool2d_backward(g, x.shape(), factor));
  });
}

Var pool_rows(Var x) {
  return x.tape().record(pool_rows(x.value()), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
    const Shape s = x.shape();
    tp.accumulate(x, scale(add_broadcast(Tensor::zeros(s), g), 1.0 / static_cast<double>(s.w)));
  });
}

Var pool_cols(Var x) {
  return x.tape().record(pool_cols(x.value()), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
    const Shape s = x.shape();
    tp.accumulate(x, scale(add_broadcast(Tensor::zeros(s), g), 1.0 / static_cast<double>(s.h)));
  });
}

Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, NormMode mode,
               double momentum, double eps) {
  auto cache = std::make_shared<NormCache<double>>();
  Tensor out = batch_norm(x.value(), gamma.value(), beta.value(), running_mean, running_var, mode,
                          momentum, eps, cache.get());
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, cache, mode](Tape& tp, const Tensor& g, const Tensor&) {
                           auto grads = batch_norm_backward(g, gamma.value(), *cache, mode);
                           tp.accumulate(x, std::move(grads.input));
                           tp.accumulate(gamma, grads.gamma.reshaped(gamma.shape()));
                           tp.accumulate(beta, grads.beta.reshaped(beta.shape()));
                         });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  auto cache = std::make_shared<NormCache<double>>();
  Tensor out = layer_norm(x.value(), gamma.value(), beta.value(), eps, cache.get());
  return x.tape().record(std::move(out), {x, gamma, beta}, [x, gamma, beta, cache](Tape& tp, const Tensor& g, const Tensor&) {
    auto grads = layer_norm_backward(g, gamma.value(), *cache);
    tp.accumulate(x, std::move(grads.input));
    tp.accumulate(gamma, grads.gamma.reshaped(gamma.shape()));
    tp.accumulate(beta, grads.beta.reshaped(beta.shape()));
  });
}

namespace {
thread_local ReluSignRecorder* active_recorder = nullptr;
}  // namespace

ReluSignRecorder::ReluSignRecorder() {
  if (active_recorder) throw Error("ReluSignRecorder does not nest");
  active_recorder = this;
}

ReluSignRecorder::~ReluSignRecorder() { active_recorder = nullptr; }

Var relu(Var x) {
  if (active_recorder) {
    const auto& v = x.value().data();
    for (Index i = 0; i < v.size(); ++i) active_recorder->signs_.push_back(v[i] > 0.0);
  }
  return x.tape().record(relu(x.value()), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, relu_backward(x.value(), g));
  });
}

Var sigmoid(Var x) {
  return x.tape().record(sigmoid(x.value()), {x}, [x](Tape& tp, const Tensor& g, const Tensor& y) {
    tp.accumulate(x, sigmoid_backward(y, g));
  });
}

Var softmax(Var x, int axis) {
  return x.tape().record(softmax(x.value(), axis), {x}, [x, axis](Tape& tp, const Tensor& g, const Tensor& y) {
    tp.accumulate(x, softmax_backward(y, g, axis));
  });
}

Var upsample_bilinear(Var x, Index out_h, Index out_w) {
  return x.tape().record(upsample_bilinear(x.value(), out_h, out_w), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, upsample_bilinear_backward(g, x.shape()));
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat_channels of an empty list");
  std::vector<Tensor> values;
  std::vector<Index> sizes;
  values.reserve(xs.size());
  for (const Var& v : xs) {
    values.push_back(v.value().reshaped(v.shape()));
    sizes.push_back(v.shape().c);
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  Tensor out = concat_channels(std::span<const Tensor>(values));
  return xs[0].tape().record(std::move(out), xs, [inputs, sizes](Tape& tp, const Tensor& g, const Tensor&) {
    auto parts = split_channels(g, std::span<const Index>(sizes));
    for (std::size_t i = 0; i < inputs.size(); ++i) tp.accumulate(inputs[i], std::move(parts[i]));
  });
}

std::vector<Var> split_channels(Var x, std::span<const Index> sizes) {
  auto parts = split_channels(x.value(), sizes);
  std::vector<Var> out;
  out.reserve(parts.size());
  Index c0 = 0;
  const Shape s = x.shape();
  for (auto& part : parts) {
    const Index k = part.shape().c;
    out.push_back(x.tape().record(std::move(part), {x}, [x, s, c0, k](Tape& tp, const Tensor& g, const Tensor&) {
      Tensor full(s);
      const Index plane = s.h * s.w;
      for (Index n = 0; n < s.n; ++n) {
        std::copy(g.plane(n, 0), g.plane(n, 0) + k * plane, full.plane(n, c0));
      }
      tp.accumulate(x, std::move(full));
    }));
    c0 += k;
  }
  return out;
}

Var select_batch(Var x, Index n) {
  return x.tape().record(select_batch(x.value(), n), {x}, [x, n](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor full(x.shape());
    std::copy(g.ptr(), g.ptr() + g.size(), full.ptr() + n * g.size());
    tp.accumulate(x, std::move(full));
  });
}

Var stack_batch(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("stack_batch of an empty list");
  std::vector<Tensor> values;
  values.reserve(xs.size());
  for (const Var& v : xs) values.push_back(v.value().reshaped(v.shape()));
  std::vector<Var> inputs(xs.begin(), xs.end());
  Tensor out = stack_batch(std::span<const Tensor>(values));
  return xs[0].tape().record(std::move(out), xs, [inputs](Tape& tp, const Tensor& g, const Tensor&) {
    Index offset = 0;
    for (const Var& v : inputs) {
      const Index len = v.value().size();
      Tensor part(v.shape());
      std::copy(g.ptr() + offset, g.ptr() + offset + len, part.ptr());
      tp.accumulate(v, std::move(part));
      offset += len;
    }
  });
}

Var sum(Var x) {
  const Shape scalar{1, 1, 1, 1};
  Tensor out = Tensor::constant(scalar, x.value().data().sum());
  return x.tape().record(std::move(out), {x}, [x](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(x, Tensor::constant(x.shape(), g[0]));
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

}  // namespace cgr
