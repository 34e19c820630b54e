#include "dain/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace dain::ad {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

// at a smooth point fd(h) and fd(h/2) agree to O(h^2); a larger gap means a kink inside the stencil
constexpr double kSmoothAgreement = 1e-6;

double evaluate(const ScalarProgram& f) {
  Tape tape(false);
  Var out = f(tape);
  if (out.value().numel() != 1) throw ShapeError("gradcheck: program must return a scalar");
  return out.value().item();
}

}  // namespace

GradcheckReport finite_difference_gradcheck(const ScalarProgram& f, std::span<Parameter* const> params,
                                            const GradcheckOptions& opts) {
  for (auto* p : params)
    if (p->value.dtype() != DType::f64) throw std::invalid_argument("gradcheck requires f64 parameters: " + p->name);

  const double f0 = evaluate(f);
  if (const double again = evaluate(f); again != f0)
    throw std::runtime_error("gradcheck: non-deterministic program (two forward passes disagree)");

  for (auto* p : params) p->zero_grad();
  {
    Tape tape(true);
    Var loss = f(tape);
    tape.backward(loss);
  }

  std::mt19937_64 rng(opts.seed);
  GradcheckReport report;
  for (auto* p : params) {
    TensorGradReport tr;
    tr.name = p->name;
    const std::size_t n = p->value.numel();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_elements_per_tensor && n > opts.max_elements_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_elements_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    const Tensor analytic = p->grad;
    double rel_sum = 0.0;
    for (std::size_t i : idx) {
      const double orig = p->value.at(i);
      auto central = [&](double step) {
        p->value.set(i, orig + step);
        const double fp = evaluate(f);
        p->value.set(i, orig - step);
        const double fm = evaluate(f);
        p->value.set(i, orig);
        return (fp - fm) / (2.0 * step);
      };
      const double g = analytic.at(i);
      const double fd = central(opts.h);
      double rel = relative_error(g, fd);
      if (rel > opts.tol && opts.skip_nonsmooth) {
        const double fd_half = central(opts.h / 2);
        if (relative_error(fd, fd_half) > kSmoothAgreement) {
          ++tr.skipped_nonsmooth;
          continue;
        }
      }
      ++tr.checked;
      rel_sum += rel;
      tr.max_rel = std::max(tr.max_rel, rel);
    }
    tr.mean_rel = tr.checked ? rel_sum / static_cast<double>(tr.checked) : 0.0;
    tr.passed = tr.max_rel <= opts.tol;
    report.max_rel = std::max(report.max_rel, tr.max_rel);
    report.checked += tr.checked;
    report.skipped_nonsmooth += tr.skipped_nonsmooth;
    report.passed = report.passed && tr.passed;
    report.tensors.push_back(std::move(tr));
  }
  return report;
}

}  // namespace dain::ad
