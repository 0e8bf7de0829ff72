#pragma once

// Finite-difference verification of every primitive and of the summed
// pre-training loss on a micro model.

#include <cstddef>
#include <string>
#include <vector>

#include "coavt/diffcore.hpp"

namespace coavt::tools {

struct GradcheckCase {
  std::string primitive;  // primitive name, or "total_loss"
  std::string variant;    // input shapes
  double max_rel_error = 0.0;
  std::size_t elements = 0;
};

struct GradcheckSuiteReport {
  std::vector<GradcheckCase> cases;
  double tolerance = 1e-4;
  double seconds = 0.0;

  /// Worst case per primitive name, in first-seen order.
  std::vector<GradcheckCase> worst_per_primitive() const;
  bool passed() const;
  std::string to_text() const;
  std::string to_json() const;
};

struct GradcheckSuiteOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 11;
  bool primitives = true;
  bool full_loss = true;
  double init_std = 0.5;  // micro model only
};

GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteOptions& options = {});

}  // namespace coavt::tools
