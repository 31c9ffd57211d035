#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "ringformer/errors.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

/// Central-difference estimate of df/dx, one element at a time.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                                     double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_gradient: step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = static_cast<T>(original + h);
    const double up = f(probe);
    probe[i] = static_cast<T>(original - h);
    const double down = f(probe);
    probe[i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_gradient: non-finite evaluation at element " + std::to_string(i));
    }
    // the representable step, which differs from 2h in single precision
    const double step = static_cast<double>(static_cast<T>(original + h)) - static_cast<double>(static_cast<T>(original - h));
    grad[i] = static_cast<T>((up - down) / step);
  }
  return grad;
}

/// max|a - b| / max(max|a|, max|b|, floor): infinity-norm relative error.
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  require_same_shape(a, b, "relative_error");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max({scale, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
  }
  return diff / scale;
}

}  // namespace ringformer
