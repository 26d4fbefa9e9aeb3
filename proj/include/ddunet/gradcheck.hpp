#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ddunet/tensor.hpp"

namespace ddunet {

enum class GradcheckLevel { op, block, model };

std::string to_string(GradcheckLevel level);

struct GradcheckOptions {
  double step = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor): entries whose true
  // gradient is below the floor are held to an absolute error of tolerance * floor.
  double floor = 1e-3;
  // An entry that misses the tolerance at `step` is retried at step/10 and
  // step/100 and keeps its smallest error, so a nonsmooth point (relu kink)
  // straddled by the first step does not fail a correct gradient.
  // 0 checks every entry; otherwise a seeded random subset of this many per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct GradcheckResult {
  std::string name;
  GradcheckLevel level = GradcheckLevel::op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // entries that needed a smaller step
  std::string worst;  // "<tensor>[<flat index>]" of the largest error
  bool passed() const { return max_rel_error < tolerance; }
};

double gradcheck_relative_error(double analytic, double numeric, double floor);

/// Compares reverse-mode gradients of sum(fn() * R), R a fixed random
/// projection, against central differences for every tensor in `inputs`.
/// `fn` must be deterministic and may read the inputs only through the
/// handles given here.
GradcheckResult check_gradients(const std::string& name, GradcheckLevel level, double tolerance,
                                const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                                const std::function<Tensor<double>()>& fn, const GradcheckOptions& options = {});

/// Every primitive op, every block, DMSC, the DWBG head with dynamic conv and
/// the full model (B=1, S=16, base_channels=2). Op and block cases must stay
/// below 1e-5, the model case below 1e-3.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 1);

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-3;

}  // namespace ddunet
