#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cte/tape.hpp"

namespace cte::num {

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  /// Relative errors are taken against max(|analytic|, |numeric|, scale_floor)
  /// so that entries whose true gradient is ~0 are compared absolutely.
  double scale_floor = 1e-4;
};

/// Builds a scalar loss on the given tape. Parameters must enter through
/// tape.leaf() so that backward() reaches them.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients against central differences for every
/// element of every parameter. Always runs on a 64-bit tape.
///
/// Throws DeterminismError if two evaluations at the same point differ.
GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace cte::num
