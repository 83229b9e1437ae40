#include "foal/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "foal/errors.hpp"

namespace foal {

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h) {
  for (auto& p : params) p.zero_grad();
  const Tensor loss = f();
  check_finite(loss, "grad_check objective");
  backward(loss);

  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double step = h * std::max(1.0, std::abs(original));
      values[i] = original + step;
      const double up = f().item();
      values[i] = original - step;
      const double down = f().item();
      values[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite objective while probing coordinate " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace foal
