#pragma once

// Named-array container used for backbone weights and training checkpoints.
//
// Layout (safetensors-compatible framing, F64 payloads only):
//   u64 little-endian header length N
//   N bytes of JSON: {"__metadata__": {string: string}, name: {"dtype": "F64",
//                     "shape": [rows, cols], "data_offsets": [begin, end]}, ...}
//   raw little-endian doubles, row-major, arrays in sorted name order

#include <filesystem>
#include <map>
#include <string>

#include "oslo/autograd.hpp"

namespace oslo {

struct NamedArrays {
  std::map<std::string, Matrix> arrays;
  std::map<std::string, std::string> metadata;

  const Matrix& at(const std::string& name) const;
  const std::string& meta(const std::string& key) const;
  bool has(const std::string& name) const { return arrays.count(name) != 0; }
};

void save_named_arrays(const std::filesystem::path& path, const NamedArrays& data);
// Throws SchemaError on truncated or malformed files.
NamedArrays load_named_arrays(const std::filesystem::path& path);

}  // namespace oslo
