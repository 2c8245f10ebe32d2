#pragma once

#include <cmath>
#include <string>

#include "exuseg/tensor.hpp"

namespace exuseg {

struct LossResult {
  real loss = 0;
  Tensor grad_logits;
};

// Mean softmax cross-entropy over the batch, computed as
// logsumexp(z) - z[true]. Gradient is (softmax - label) / N.
inline LossResult softmax_cross_entropy(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K]");
  require_same_shape(logits, labels, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  LossResult r{0, Tensor(logits.shape())};
  const real inv_n = 1 / static_cast<real>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const real* z = logits.ptr() + i * k;
    const real* y = labels.ptr() + i * k;
    std::size_t hot = k;
    for (std::size_t j = 0; j < k; ++j) {
      if (y[j] == 1) {
        if (hot != k) hot = k + 1;
        else hot = j;
      } else if (y[j] != 0) {
        hot = k + 1;
      }
    }
    if (hot >= k) throw Error("softmax_cross_entropy: label row " + std::to_string(i) + " is not one-hot");
    real zmax = z[0];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
    real se = 0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - zmax);
    const real lse = zmax + std::log(se);
    r.loss += (lse - z[hot]) * inv_n;
    for (std::size_t j = 0; j < k; ++j)
      r.grad_logits[i * k + j] = (std::exp(z[j] - lse) - y[j]) * inv_n;
  }
  if (!std::isfinite(r.loss)) throw NonFiniteError("softmax_cross_entropy: non-finite loss");
  require_finite(r.grad_logits, "softmax_cross_entropy");
  return r;
}

// Row-wise softmax probability of class `cls`.
inline real softmax_prob(const real* z, std::size_t k, std::size_t cls) {
  real zmax = z[0];
  for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
  real se = 0;
  for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - zmax);
  return std::exp(z[cls] - zmax) / se;
}

}  // namespace exuseg
