#include "aclstage/nn/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace aclstage::nn {

namespace {

double evaluate(const LossBuilder& loss) {
  Tape<double> tape;
  auto out = loss(tape);
  if (!out || out->tensor.size() != 1) throw ShapeError("gradient check needs a scalar loss");
  const double v = out->value()[0];
  if (!std::isfinite(v)) throw std::domain_error("gradient check: loss is not finite (" + std::to_string(v) + ")");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, const std::vector<NamedParameter<double>>& leaves,
                                  const GradCheckOptions& options) {
  for (const auto& leaf : leaves) leaf.var->tensor.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    auto out = loss(tape);
    if (!out || out->tensor.size() != 1) throw ShapeError("gradient check needs a scalar loss");
    if (!std::isfinite(out->value()[0])) {
      throw std::domain_error("gradient check: loss is not finite (" + std::to_string(out->value()[0]) + ")");
    }
    tape.backward(out);
    for (const auto& leaf : leaves) analytic.emplace_back(leaf.var->grad().begin(), leaf.var->grad().end());
  }

  GradCheckReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].var->value();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_elements_per_leaf > 0 && n > options.max_elements_per_leaf) {
      stride = (n + options.max_elements_per_leaf - 1) / options.max_elements_per_leaf;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = evaluate(loss);
      values[i] = saved - options.step;
      const double minus = evaluate(loss);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[l][i] * options.analytic_scale;
      const double rel = std::abs(a - numeric) / std::max(std::abs(numeric), options.denominator_floor);
      ++report.checked;
      if (rel > report.max_relative_error || report.checked == 1) {
        report.max_relative_error = rel;
        report.worst_leaf = leaves[l].name;
        report.worst_index = i;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace aclstage::nn
