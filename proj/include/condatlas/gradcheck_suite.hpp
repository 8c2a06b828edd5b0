#pragma once

#include <string>
#include <vector>

namespace condatlas {

struct GradcheckRow {
  std::string name;
  double max_rel_err = 0;
  bool pass = false;
};

// Central-difference verification of every differentiable op plus the full
// four-term training loss on a small 2D instance (and 3D variants of the
// geometry ops). Runs in float64.
std::vector<GradcheckRow> run_gradcheck_suite(double h, double threshold, uint64_t seed);

} // namespace condatlas
