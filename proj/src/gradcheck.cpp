#include "moex/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace moex {

namespace {

double evaluate(const ScalarFn& f, const TensorD& point) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  const double y = f(tape.leaf(point, false)).value().item();
  if (!std::isfinite(y)) throw NumericError("finite_difference_check: f is non-finite at a perturbed point");
  return y;
}

}  // namespace

TensorD tape_gradient(const ScalarFn& f, const TensorD& point) {
  Tape<double> tape;
  auto x = tape.leaf(point, true);
  auto y = f(x);
  tape.backward(y);
  return tape.grad(x);
}

double finite_difference_check(const ScalarFn& f, const TensorD& point, double eps) {
  if (!(eps > 0)) throw ConfigError("finite_difference_check: eps must be positive");
  const TensorD g = tape_gradient(f, point);
  double worst = 0;
  TensorD probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + eps;
    const double up = evaluate(f, probe);
    probe[i] = point[i] - eps;
    const double down = evaluate(f, probe);
    probe[i] = point[i];
    const double fd = (up - down) / (2 * eps);
    const double err = std::abs(g[i] - fd) / std::max(std::abs(g[i]), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace moex
