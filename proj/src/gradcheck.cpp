#include "cte/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cte/error.hpp"

namespace cte::num {

namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape(Precision::f64);
  const Var out = loss(tape);
  if (out.value().size() != 1) throw ContractError("grad_check: loss must be scalar");
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  std::vector<bool> previous(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    previous[i] = params[i].tensor->requires_grad();
    params[i].tensor->set_requires_grad(true);
    params[i].tensor->zero_grad();
  }

  double base = 0.0;
  {
    Tape tape(Precision::f64);
    const Var out = loss(tape);
    base = out.value().item();
    tape.backward(out);
  }
  if (const double again = evaluate(loss); again != base) {
    throw DeterminismError("grad_check: loss is not deterministic (" + std::to_string(base) + " vs " +
                           std::to_string(again) + ")");
  }

  GradCheckReport report;
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    GradCheckEntry entry;
    entry.name = p.name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + options.step;
      const double up = evaluate(loss);
      t[i] = saved - options.step;
      const double down = evaluate(loss);
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), options.scale_floor});
      const double err = std::abs(analytic[i] - numeric) / scale;
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    entry.pass = entry.max_rel_error <= options.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor->clear_grad();
    params[i].tensor->set_requires_grad(previous[i]);
  }
  return report;
}

}  // namespace cte::num
