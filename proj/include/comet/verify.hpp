#pragma once

// Property suites shared by the `verify` subcommand and the acceptance harness.

#include <cstdint>
#include <string>
#include <vector>

#include "comet/gradcheck.hpp"

namespace comet::verify {

struct Check {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::string detail;
};

/// Integer pairs against the raster oracle (value = mismatch count) and real
/// pairs against the sweep oracle (value = max abs difference).
std::vector<Check> geometry(std::uint64_t seed, int integer_pairs = 100000, int real_pairs = 100000);

/// Proposal generation contract at the reference and test thresholds.
std::vector<Check> proposal_contract(std::uint64_t seed, int generations = 10000);

/// PrRoI box and feature gradients on random cases, double precision.
std::vector<Check> prroi_gradcheck(std::uint64_t seed, int cases = 100);

/// Whole-network gradient check on the tiny config (2 references x 4 test
/// boxes). max_elems_per_tensor = 0 checks every element.
std::vector<Check> network_gradcheck(std::uint64_t seed, std::size_t max_elems_per_tensor = 0);

/// Grouped heads against stacked single-reference calls.
std::vector<Check> group_equivalence(std::uint64_t seed);

}  // namespace comet::verify
