#pragma once

#include <string>
#include <vector>

#include "foal/data.hpp"
#include "foal/model.hpp"

namespace foal {

inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_relative_error <= tolerance; }
};

// Toy configuration: N=4, T=3, F=2, D_a=8, D_v=6, two heads.
FoalNetConfig gradcheck_model_config();
Batch gradcheck_batch(std::uint64_t seed = 11);

// Every primitive, every layer type (eval mode) and the full objective.
std::vector<GradCheckEntry> run_gradcheck_suite();

}  // namespace foal
