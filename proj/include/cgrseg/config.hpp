#pragma once

// JSON run configuration:
//
//   { "model": { "strip_kernel": 11, ... }, "train": { "steps": 2000, ... } }
//
// Keys mirror ModelConfig and TrainConfig fields. Missing keys keep their
// defaults; unknown keys and wrongly typed values are rejected.

#include "cgrseg/model.hpp"
#include "cgrseg/train.hpp"

#include <string>
#include <string_view>

namespace cgr {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Parses and validates. Throws Error with the offending key path.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);
/// Every field, two-space indented; parse_config(dump_config(c)) == c.
std::string dump_config(const RunConfig& cfg);

}  // namespace cgr
