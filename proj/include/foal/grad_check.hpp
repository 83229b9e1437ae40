#pragma once

#include <functional>
#include <vector>

#include "foal/tensor.hpp"

namespace foal {

// Compares the reverse-mode gradient of `f` with central differences,
// perturbing every coordinate of every parameter by h * max(1, |value|).
// Returns max |analytic - numeric| / max(1, |analytic|, |numeric|).
// `f` must be deterministic and rebuild its graph on every call.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5);

}  // namespace foal
