#pragma once

// Central-difference checks of every differentiable block and loss in 64-bit.

#include <cstdint>
#include <string>
#include <vector>

#include "elnet/ndarr.hpp"

namespace elnet::gradsuite {

struct SuiteOptions {
  std::size_t batch = 8;
  std::size_t size = 16;  // spatial extent of the input instances
  double tol = 1e-4;
  double step = 1e-4;
  std::size_t retries = 3;
  double retry_above = 1e-6;
  double floor = 1e-6;
  // Sampled entries per tensor for the block checks; 0 checks every entry.
  std::size_t entries_per_tensor = 24;
  // Sampled entries per tensor for the whole-model check.
  std::size_t model_entries_per_tensor = 4;
  bool include_model = true;
  std::uint64_t seed = 0;
};

struct CaseResult {
  std::string name;
  ndarr::GradCheckReport report;
  double seconds = 0;
};

std::vector<CaseResult> run_suite(const SuiteOptions& opts = {});

}  // namespace elnet::gradsuite
