#pragma once

// Parameter plumbing shared by blocks and the model: naming, initialization,
// and the batch-norm parameter bundle.

#include "cgrseg/autodiff.hpp"
#include "cgrseg/rng.hpp"
#include "cgrseg/tensor.hpp"

#include <functional>
#include <string>

namespace cgr {

enum class ParamKind {
  learnable,  // updated by the optimizer
  buffer,     // running statistics; saved but not trained
};

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor, ParamKind kind)>;

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static BatchNormParams identity(Index channels);
};

void visit_params(BatchNormParams& bn, const std::string& prefix, const ParamVisitor& visit);

/// Batch norm with momentum 0.1 and eps 1e-5, binding gamma/beta on x's tape.
Var batch_norm(Var x, BatchNormParams& bn, NormMode mode);

/// Uniform(-b, b) with b = sqrt(6 / fan_in), fan_in = shape.c * shape.h * shape.w.
Tensor kaiming_uniform(Shape shape, Rng& rng);

/// Channel vector (1, C, 1, 1).
inline Shape channel_shape(Index channels) { return Shape{1, channels, 1, 1}; }

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kNormEps = 1e-5;

}  // namespace cgr
