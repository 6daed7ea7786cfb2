#pragma once

#include <functional>

#include "moex/autodiff.hpp"

namespace moex {

using ScalarFn = std::function<Var<double>(Var<double>)>;

/// Central finite differences against tape gradients. Returns the max over
/// coordinates of |g - fd| / max(|g|, 1e-8). Throws NumericError if f is
/// non-finite at any perturbed point.
double finite_difference_check(const ScalarFn& f, const TensorD& point, double eps = 1e-5);

// Tape gradient of f at point.
TensorD tape_gradient(const ScalarFn& f, const TensorD& point);

}  // namespace moex
