#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "imo/autodiff.hpp"
#include "imo/rng.hpp"
#include "imo/tensor.hpp"

namespace imo::test {

struct GradCheck {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

/// Compares autodiff gradients of `f` with central differences at step h.
/// A coordinate fails when |g - fd| > atol + rtol * max(|g|, |fd|).
/// `skip(input, index)` excludes coordinates (e.g. near surrogate seams).
inline GradCheck check_gradients(
    const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& f,
    std::vector<Tensor> inputs, double rtol = 1e-4, double atol = 1e-7, double h = 1e-5,
    const std::function<bool(std::size_t, std::size_t)>& skip = {}) {
  auto eval = [&](const std::vector<Tensor>& xs) {
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).value().item();
  };
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x));
  tape.backward(f(tape, leaves));

  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor g = tape.grad(leaves[i]);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      if (skip && skip(i, k)) continue;
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i].data[k] += h;
      minus[i].data[k] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      const double err = std::fabs(g.data[k] - fd);
      const double scale = std::max(std::fabs(g.data[k]), std::fabs(fd));
      out.max_abs_err = std::max(out.max_abs_err, err);
      if (scale > 0) out.max_rel_err = std::max(out.max_rel_err, err / scale);
      ++out.checked;
      if (err > atol + rtol * scale) ++out.failures;
    }
  }
  return out;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

/// Antiderivative of the long-tailed surrogate, G(0) = 0, odd.
inline double long_tailed_integral(double t) {
  const double a = std::fabs(t);
  double g;
  if (a <= 0.4) {
    g = 2 * a - 2 * a * a;
  } else if (a <= 1.0) {
    g = 0.48 + 0.4 * (a - 0.4);
  } else {
    g = 0.72;
  }
  return t < 0 ? -g : g;
}

}  // namespace imo::test
