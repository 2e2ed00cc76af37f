#pragma once

// Central finite-difference check of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mspm/ops.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

struct GradCheckOptions {
  double step = 1e-3;
  double tol = 1e-3;
  // Denominator floor for the relative error, as a fraction of the largest
  // analytic gradient magnitude of the same input. Entries much smaller than
  // the input's dominant gradient are judged against that scale instead of
  // their own, where round-off in the loss would otherwise dominate.
  double relative_floor = 1e-2;
  // Floor as a fraction of the largest analytic gradient over all inputs.
  // Gradients that vanish in exact arithmetic (a bias followed by batch
  // normalization) come out of an f32 backward pass as round-off near
  // 1e-7 of that scale.
  double global_floor = 1e-3;
  // Absolute floor used when the whole gradient is (near) zero.
  double absolute_floor = 1e-6;
  // When x - h and x + h fall on different sides of a relu or hinge kink the
  // central difference is not a derivative. The step is then divided by 10
  // up to this many times; entries still straddling a kink are skipped.
  int max_step_reductions = 6;
  // Extra steps, each ten times smaller, tried for an entry that fails at
  // the nominal step. Only meaningful with a double-precision reference.
  int refinements = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t nonfinite = 0;
  std::size_t checked = 0;
  std::size_t reduced = 0;  // entries evaluated with a smaller step
  std::size_t skipped = 0;  // entries on a kink at every step tried
  std::size_t refined = 0;  // entries re-measured after failing at the step used
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const {
    for (const auto& e : entries) {
      if (e.nonfinite > 0 || !(e.max_rel_error < tol)) return false;
    }
    return true;
  }
};

namespace detail {

template <typename U>
std::pair<double, std::uint64_t> traced(const std::function<BasicTensor<U>()>& f) {
  BranchTrace trace;
  const double v = f().item();
  return {v, trace.signature()};
}

template <typename T>
void collect_analytic(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>>& inputs) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape tape;
  TapeScope scope(tape);
  BasicTensor<T> loss = f();
  backward(loss);
}

// Compares the analytic gradient of every input against central differences
// of `ref` taken on the matching entry of `probe`.
template <typename T, typename U>
GradCheckReport compare_with_differences(const std::vector<BasicTensor<T>>& inputs,
                                         const std::function<BasicTensor<U>()>& ref,
                                         std::vector<BasicTensor<U>>& probe, const GradCheckOptions& opt,
                                         const std::vector<std::string>& names) {
  GradCheckReport report;
  report.tol = opt.tol;
  NoGradScope no_grad;
  const std::uint64_t base = traced(ref).second;
  double global = 0.0;
  for (const auto& x : inputs) {
    for (auto g : x.grad()) global = std::max(global, std::fabs(static_cast<double>(g)));
  }
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    const auto& x = inputs[ii];
    auto& p = probe[ii];
    GradCheckEntry e;
    e.name = ii < names.size() ? names[ii] : "input" + std::to_string(ii);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    analytic.resize(static_cast<std::size_t>(x.numel()), 0.0);
    double scale = 0.0;
    for (double a : analytic) scale = std::max(scale, std::fabs(a));
    const double floor = std::max({opt.relative_floor * scale, opt.global_floor * global, opt.absolute_floor});
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      const U orig = p[k];
      const double a = analytic[k];
      // Central difference at step h; nullopt when x - h and x + h see a
      // different branch pattern than x.
      auto difference = [&](double h) -> std::optional<double> {
        const U hi = static_cast<U>(orig + h);
        const U lo = static_cast<U>(orig - h);
        p[k] = hi;
        const auto up = traced(ref);
        p[k] = lo;
        const auto down = traced(ref);
        p[k] = orig;
        if (up.second != base || down.second != base) return std::nullopt;
        // divide by the step actually taken after rounding
        return (up.first - down.first) / (static_cast<double>(hi) - lo);
      };
      auto relative = [&](double numeric) {
        return std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      };
      double h = opt.step;
      std::optional<double> numeric = difference(h);
      for (int r = 0; !numeric && r < opt.max_step_reductions; ++r) {
        h /= 10.0;
        numeric = difference(h);
      }
      if (h != opt.step) ++e.reduced;
      if (!numeric) {
        ++e.skipped;
        continue;
      }
      ++e.checked;
      if (!std::isfinite(*numeric) || !std::isfinite(a)) {
        ++e.nonfinite;
        continue;
      }
      // A failing entry is re-measured at smaller steps: truncation error
      // shrinks with h squared, a wrong gradient does not.
      for (int r = 0; relative(*numeric) >= opt.tol && r < opt.refinements; ++r) {
        h /= 10.0;
        const auto finer = difference(h);
        if (!finer || !std::isfinite(*finer)) break;
        numeric = finer;
        if (r == 0) ++e.refined;
      }
      const double abs_err = std::fabs(a - *numeric);
      const double rel = relative(*numeric);
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      if (rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = k;
      }
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace detail

// `f` must rebuild the scalar from the current values of `inputs` on every
// call. Gradients already held by the inputs are discarded. Differences are
// taken in the same precision as the analytic pass.
template <typename T>
GradCheckReport grad_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> inputs,
                           const GradCheckOptions& opt = {}, const std::vector<std::string>& names = {}) {
  detail::collect_analytic(f, inputs);
  return detail::compare_with_differences(inputs, f, inputs, opt, names);
}

// Mixed precision: the analytic gradients come from `f` on the f32 `inputs`;
// the differences come from `ref`, an f64 evaluation of the same function
// that reads `ref_inputs`. The f64 inputs are overwritten with the f32 values
// first, so both sides see the same point.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  const std::function<TensorD()>& ref, std::vector<TensorD> ref_inputs,
                                  const GradCheckOptions& opt = {}, const std::vector<std::string>& names = {}) {
  if (inputs.size() != ref_inputs.size()) throw InvalidArgument("grad_check: input lists differ in length");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != ref_inputs[i].shape()) {
      throw InvalidArgument("grad_check: reference input " + std::to_string(i) + " has shape " +
                            to_string(ref_inputs[i].shape()) + ", expected " + to_string(inputs[i].shape()));
    }
    std::copy(inputs[i].data().begin(), inputs[i].data().end(), ref_inputs[i].data().begin());
  }
  detail::collect_analytic(f, inputs);
  return detail::compare_with_differences(inputs, ref, ref_inputs, opt, names);
}

}  // namespace mspm
