#include "cgrseg/layers.hpp"

#include <cmath>

namespace cgr {

BatchNormParams BatchNormParams::identity(Index channels) {
  const Shape s = channel_shape(channels);
  return BatchNormParams{Tensor::ones(s), Tensor::zeros(s), Tensor::zeros(s), Tensor::ones(s)};
}

void visit_params(BatchNormParams& bn, const std::string& prefix, const ParamVisitor& visit) {
  visit(prefix + ".gamma", bn.gamma, ParamKind::learnable);
  visit(prefix + ".beta", bn.beta, ParamKind::learnable);
  visit(prefix + ".running_mean", bn.running_mean, ParamKind::buffer);
  visit(prefix + ".running_var", bn.running_var, ParamKind::buffer);
}

Var batch_norm(Var x, BatchNormParams& bn, NormMode mode) {
  Tape& t = x.tape();
  return batch_norm(x, t.parameter(bn.gamma), t.parameter(bn.beta), bn.running_mean, bn.running_var,
                    mode, kBatchNormMomentum, kNormEps);
}

Tensor kaiming_uniform(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape.c * shape.h * shape.w);
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace cgr
