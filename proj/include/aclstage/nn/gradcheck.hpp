#pragma once

#include <functional>
#include <string>
#include <vector>

#include "aclstage/nn/parameters.hpp"

namespace aclstage::nn {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|numeric|, floor).
  double denominator_floor = 1e-6;
  // Multiplies the analytic gradient before comparison; 1 in normal use,
  // other values inject a known fault.
  double analytic_scale = 1.0;
  // 0 checks every element; otherwise at most this many evenly spaced
  // elements per leaf.
  std::size_t max_elements_per_leaf = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

// Builds a scalar loss on a fresh tape from the current leaf values.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

// Central finite differences against reverse-mode gradients for every
// element of every leaf. Throws std::domain_error on a non-finite loss.
GradCheckReport finite_diff_check(const LossBuilder& loss, const std::vector<NamedParameter<double>>& leaves,
                                  const GradCheckOptions& options = {});

}  // namespace aclstage::nn
