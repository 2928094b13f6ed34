#pragma once
// Named-tensor container used for model checkpoints ("MTOK" files).
//
// Layout, little-endian:
//   magic "MTOK" | u16 version=1 | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 rank | u32 dims[rank] | f32 data
//
// A config string rides along as a reserved tensor named
// "__meta__/config_json" holding one byte per f32 element.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "motok/tensor.hpp"

namespace motok {

inline constexpr const char* kSnapshotConfigKey = "__meta__/config_json";

struct Snapshot {
  std::map<std::string, Tensor> tensors;  // reserved entries stripped
  std::string config_json;                // empty when absent
};

void save_snapshot(const std::string& path,
                   const std::vector<std::pair<std::string, Tensor>>& tensors,
                   const std::string& config_json = "");

Snapshot load_snapshot(const std::string& path);

// Convenience for module save/load: every parameter keyed by its name.
void save_parameters(const std::string& path, const std::vector<Parameter*>& params,
                     const std::string& config_json = "");
void load_parameters(const std::string& path, const std::vector<Parameter*>& params,
                     std::string* config_json = nullptr);

}  // namespace motok
