#pragma once

#include "cgrseg/autodiff.hpp"
#include "cgrseg/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cgr {

/// Builds the scalar objective on a fresh tape from the current parameter
/// values. Must be deterministic (freeze batch norm in eval mode).
using Objective = std::function<Var(Tape&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double floor = 1e-8;  // lower bound of the relative-error denominator
  int samples = 20;     // sampled coordinates
  std::uint64_t seed = 0;
  /// Test hook: scale the analytic gradient of this tensor by `corrupt_factor`
  /// to simulate a broken backward pass. Empty disables it.
  std::string corrupt;
  double corrupt_factor = 1.5;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int checked = 0;        // coordinates compared
  int kinks_skipped = 0;  // draws redrawn because +-eps crossed a ReLU kink
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares backward() against central differences on sampled coordinates of
/// the learnable tensors in `params`. Each sample picks a tensor uniformly,
/// then a coordinate within it. Draws whose +-eps interval flips the sign of
/// any ReLU input are redrawn, so `checked` reaches `samples` unless kinks are
/// pervasive. A corrupted tensor is always checked.
/// Throws NumericError if the objective is not finite.
GradCheckResult grad_check(const Objective& f, std::span<const NamedTensor> params,
                           const GradCheckOptions& opt);

struct BlockCheck {
  std::string block;
  GradCheckResult result;
};

/// Finite-difference suite over RCA, RCM (add and mul), the DPG head and the
/// tiny end-to-end model, each with randomized weights and eval-mode BN.
std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& opt);

/// Overwrites every tensor with seeded noise (variances stay positive) so
/// zero-initialized paths are exercised.
void randomize_params(std::span<const NamedTensor> params, std::uint64_t seed);

}  // namespace cgr
