#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsts {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  bool all_pass = true;
};

// Central finite-difference verification (step 1e-5, f64) of every
// differentiable operation plus the layer and a tiny end-to-end model.
// Per-op tolerance 1e-4, end-to-end 1e-3. Entries are subsampled per
// parameter tensor so the suite stays fast.
GradCheckReport run_gradcheck(std::uint64_t seed);

}  // namespace fsts
