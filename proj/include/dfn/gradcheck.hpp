#ifndef DFN_GRADCHECK_HPP_
#define DFN_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

// Central finite-difference verification of reverse-mode gradients, run in
// double precision. For every element of every input, compares the analytic
// gradient against (f(x+eps) - f(x-eps)) / (2 eps) and returns the maximum
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
template <typename F>
double grad_check(F&& f, std::vector<Tensor<double>> inputs, double eps) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  Tensor<double> loss = f(inputs);
  if (loss.numel() != 1)
    throw UsageError("grad_check: function must return a scalar");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  double max_rel = 0;
  NoGradGuard ng;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double>& data = inputs[i].data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + eps;
      const double fp = f(inputs).item();
      data[j] = orig - eps;
      const double fm = f(inputs).item();
      data[j] = orig;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[i][j];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

// Seeded input helpers.

inline Tensor<double> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                     double hi = 1.0) {
  std::vector<double> v(std::size_t(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Values with pairwise gaps well above the finite-difference step, so ops
// with argmax/kink discontinuities (max-pool, relu) stay locally smooth.
inline Tensor<double> separated_tensor(Shape shape, Rng& rng,
                                       double spacing = 1e-2) {
  const std::size_t n = std::size_t(shape_numel(shape));
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i)
    grid[i] = (double(i) - double(n) / 2) * spacing;
  for (std::size_t i = n; i > 1; --i)
    std::swap(grid[i - 1], grid[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
  return Tensor<double>(std::move(shape), std::move(grid));
}

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
};

// Finite-difference suite over every differentiable op and composite block.
std::vector<GradCheckResult> run_gradcheck_suite(double eps,
                                                 std::uint64_t seed,
                                                 const std::string& only = "");

}  // namespace dfn

#endif  // DFN_GRADCHECK_HPP_
