#pragma once

#include <cstdint>
#include <string>

#include "metarec/meta.hpp"
#include "metarec/recommender.hpp"

namespace metarec {

// Everything needed to resume or evaluate a run. Stored as a small JSON
// header (shapes, optimizer scalars, provenance) followed by the raw
// little-endian tensor payload, so reloading is bit-exact.
struct Checkpoint {
  ParameterSet model;
  ParameterSet encoder;
  OptimizerState opt;
  int64_t step = 0;
  std::string mode;
  uint64_t config_hash = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metarec
