#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "exuseg/layers.hpp"

namespace exuseg {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

struct AdamState {
  AdamHyper hyper;
  std::uint64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(const std::vector<Param*>& params, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (const Param* p : params) {
      s.m.emplace_back(p->value.shape());
      s.v.emplace_back(p->value.shape());
    }
    return s;
  }
};

// One bias-corrected Adam update of every parameter from its current grad.
inline void adam_step(const std::vector<Param*>& params, AdamState& s) {
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw ShapeError("adam_step: optimizer state has " + std::to_string(s.m.size()) + " slots for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->grad.shape() != params[i]->value.shape() || s.m[i].shape() != params[i]->value.shape())
      throw ShapeError("adam_step: shape mismatch for parameter '" + params[i]->name + "'");
  }
  ++s.t;
  const double b1 = s.hyper.beta1, b2 = s.hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i]->value;
    const Tensor& g = params[i]->grad;
    Tensor& m = s.m[i];
    Tensor& v = s.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<real>(mj);
      v[j] = static_cast<real>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      p[j] -= static_cast<real>(s.hyper.lr * mhat / (std::sqrt(vhat) + s.hyper.eps));
    }
    require_finite(p, "adam_step");
  }
}

}  // namespace exuseg
