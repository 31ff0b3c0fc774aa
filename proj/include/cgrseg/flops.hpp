#pragma once

#include "cgrseg/model.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cgr {

/// Cost of one module for a single image.
///
/// Multiply-accumulates are split by kind so resolution scaling can be
/// audited: conv and matmul MACs grow with H*W, while `fc_macs` (products on
/// pooled per-image vectors and matrices) do not. Pooling, activations, normalization, resampling
/// and elementwise arithmetic contribute no MACs; they are tallied in
/// `elementwise` (one per element produced or reduced).
struct FlopsEntry {
  std::string name;
  std::int64_t conv_macs = 0;
  std::int64_t matmul_macs = 0;
  std::int64_t fc_macs = 0;
  std::int64_t elementwise = 0;
  std::int64_t params = 0;   // learnable
  std::int64_t buffers = 0;  // BN running statistics

  std::int64_t macs() const { return conv_macs + matmul_macs + fc_macs; }
};

struct FlopsReport {
  Index input_h = 0;
  Index input_w = 0;
  std::vector<FlopsEntry> entries;

  std::int64_t total_macs() const;
  std::int64_t total_params() const;
  std::int64_t total_buffers() const;
  std::int64_t total_elementwise() const;
  const FlopsEntry& entry(std::string_view name) const;
};

/// N * Cout * Hout * Wout * (Cin / groups) * kh * kw.
std::int64_t conv_macs(Index batch, Index cout, Index hout, Index wout, Index cin_per_group, Index kh,
                       Index kw);

/// Per-module ledger derived from the config alone.
FlopsReport count_flops(const ModelConfig& cfg, Index h, Index w);

/// Module owning a registry name, e.g. "sfr.s8.mlp_w1" -> "sfr.s8",
/// "backbone.stage2.conv1.bn.gamma" -> "backbone.stage2.conv1".
std::string param_module(std::string_view name);

struct ParamCount {
  std::string module;
  std::int64_t learnable = 0;
  std::int64_t buffers = 0;
};

/// Element counts from the parameter registry grouped by module, in registry order.
std::vector<ParamCount> count_params(ModelParams& params);

}  // namespace cgr
