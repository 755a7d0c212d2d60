#pragma once

namespace rml {

// Reserved vocabulary slots, fixed across every corpus and model.
enum SpecialToken : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kUnk = 3,
  kNumSpecials = 4,
};

}  // namespace rml
