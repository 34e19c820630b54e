#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dain/autodiff.hpp"

namespace dain::ad {

struct GradcheckOptions {
  double h = 1e-4;
  double tol = 1e-5;
  /// 0 checks every element; otherwise a seeded random subset per tensor.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Elements whose central differences at h and h/2 disagree straddle a kink
  /// (ReLU, max) and are counted as skipped rather than failed.
  bool skip_nonsmooth = true;
};

struct TensorGradReport {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  double max_rel = 0.0;
  double mean_rel = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<TensorGradReport> tensors;
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  bool passed = true;
};

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double analytic, double numeric);

/// Scalar-valued program rebuilt on a fresh tape for every evaluation.
using ScalarProgram = std::function<Var(Tape&)>;

/// Compares backward() against central differences for every f64 parameter.
/// Throws std::runtime_error if two forward passes disagree (non-deterministic f).
GradcheckReport finite_difference_gradcheck(const ScalarProgram& f, std::span<Parameter* const> params,
                                            const GradcheckOptions& opts = {});

}  // namespace dain::ad
