#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Checkpoint file layout (little-endian throughout):
//   "MMC1" | u32 tensor count | per tensor:
//   u32 name length | UTF-8 name | u32 ndim | u32 dims[] | f64 payload
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);

// Loads all tensors; throws on bad magic, truncation, or trailing bytes.
NamedTensors load_checkpoint(const std::string& path);

// Copies loaded values into the given tensors by name; every destination
// name must be present with a matching shape.
void restore_checkpoint(const std::string& path, const NamedTensors& dest);

}  // namespace mmc
