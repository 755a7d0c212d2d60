#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rml/tensor.hpp"

// Binary parameter container: a magic/version header, a JSON block naming
// kind, metadata and tensor shapes, then raw little-endian float64 payloads
// in header order. Round-trips bit-exactly.

namespace rml {

struct Checkpoint {
  std::string kind;
  nlohmann::ordered_json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rml
