#pragma once

// Finite-difference verification of every analytic gradient in a model:
// each parameterised layer in isolation (parameters and input), then the
// whole network through the loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/log.hpp"
#include "exuseg/loss.hpp"
#include "exuseg/model.hpp"

namespace exuseg {

struct GradcheckOptions {
  real step = 1e-5;
  double layer_tolerance = 1e-6;
  double end_to_end_tolerance = 1e-4;
  // Denominator floors for relative error. Conv biases feeding batch norm
  // have an exactly zero end-to-end gradient, where the difference quotient
  // returns pure round-off.
  double layer_floor = 1e-8;
  double end_to_end_floor = 1e-5;
  std::size_t layer_batch = 2;
  // Spatial extent cap for layer-level inputs of conv and batch-norm layers.
  std::size_t layer_spatial = 8;
  std::size_t end_to_end_batch = 4;
  // Entries probed per tensor, sampled without replacement; 0 probes all.
  std::size_t max_probes = 64;
  std::uint64_t seed = 1;
  bool end_to_end = true;
  // Called on each analytic gradient before comparison (layer index, tensor
  // name, gradient). Lets tests corrupt a backward pass on purpose.
  std::function<void(std::size_t, const std::string&, Tensor&)> tamper;
};

struct LayerCheck {
  std::size_t index = 0;
  std::string kind;
  Shape input;  // includes the batch axis
  double worst = 0;
  std::string worst_tensor;
  std::size_t probes = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<LayerCheck> layers;
  bool end_to_end_run = false;
  double end_to_end_worst = 0;
  std::size_t end_to_end_worst_layer = 0;
  std::size_t end_to_end_probes = 0;
  std::size_t end_to_end_skipped = 0;
  bool end_to_end_passed = true;

  bool passed() const {
    return end_to_end_passed && std::all_of(layers.begin(), layers.end(), [](const LayerCheck& l) { return l.passed; });
  }
};

namespace detail {

inline std::vector<std::pair<std::string, Param*>> layer_params(Layer& l) {
  if (auto* c = std::get_if<Conv2d>(&l)) return {{"weight", &c->weight()}, {"bias", &c->bias()}};
  if (auto* b = std::get_if<BatchNorm2d>(&l)) return {{"gamma", &b->gamma()}, {"beta", &b->beta()}};
  if (auto* d = std::get_if<Dense>(&l)) return {{"weight", &d->weight()}, {"bias", &d->bias()}};
  return {};
}

inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_probes, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_probes == 0 || max_probes >= n) return idx;
  for (std::size_t i = 0; i < max_probes; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(max_probes);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double rel_err(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace detail

// Checks one layer against L = sum(forward(x) * r) for a fixed random r.
// The numeric derivative sums r * (y+ - y-) elementwise, so outputs the
// probe does not touch contribute exactly zero.
inline LayerCheck check_layer(Layer& layer, std::size_t index, const std::string& kind, const Shape& input,
                              const GradcheckOptions& opt, Rng rng) {
  LayerCheck out;
  out.index = index;
  out.kind = kind;
  out.input = input;
  auto forward = [&](const Tensor& x) {
    return std::visit(
        [&](auto& l) -> Tensor {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Dropout>) {
            Rng none(0);
            return l.forward(x, Mode::train, &none);
          } else {
            return l.forward(x, Mode::train);
          }
        },
        layer);
  };
  Rng data = rng.split("data");
  Tensor x = rng_uniform(data, input, -1, 1);
  const Tensor y0 = forward(x);
  const Tensor r = rng_uniform(data, y0.shape(), -1, 1);
  Tensor gx = std::visit([&](auto& l) -> Tensor { return l.backward(r); }, layer);

  auto params = detail::layer_params(layer);
  std::vector<std::pair<std::string, Tensor>> analytic;
  for (auto& [name, p] : params) analytic.emplace_back(name, p->grad);
  analytic.emplace_back("input", gx);
  if (opt.tamper)
    for (auto& [name, g] : analytic) opt.tamper(index, name, g);

  auto directional = [&](Tensor& v, std::size_t i) {
    const real orig = v[i];
    v[i] = orig + opt.step;
    const Tensor yp = forward(x);
    v[i] = orig - opt.step;
    const Tensor ym = forward(x);
    v[i] = orig;
    long double s = 0;
    for (std::size_t k = 0; k < yp.size(); ++k) s += static_cast<long double>(r[k]) * (yp[k] - ym[k]);
    return static_cast<double>(s / (2.0L * opt.step));
  };

  Rng pick = rng.split("probes");
  for (std::size_t t = 0; t < analytic.size(); ++t) {
    Tensor& target = t < params.size() ? params[t].second->value : x;
    for (std::size_t i : detail::probe_indices(target.size(), opt.max_probes, pick)) {
      const double e = detail::rel_err(analytic[t].second[i], directional(target, i), opt.layer_floor);
      if (e > out.worst || out.probes == 0) {
        out.worst = e;
        out.worst_tensor = analytic[t].first;
      }
      ++out.probes;
    }
  }
  out.passed = out.worst < opt.layer_tolerance;
  return out;
}

// Runs the layer-level checks on every parameterised layer of `model` (with
// its current parameters) and, optionally, the end-to-end loss check.
inline GradcheckReport gradcheck(Model& model, const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  const Rng root(opt.seed);
  const ModelConfig& cfg = model.config();
  const auto trace = cfg.shape_trace();
  Shape in = ModelConfig::input_shape();
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (cfg.layers[i].has_params()) {
      Shape batched{opt.layer_batch};
      batched.insert(batched.end(), in.begin(), in.end());
      if (batched.size() == 4 && opt.layer_spatial > 0) {
        batched[1] = std::min(batched[1], opt.layer_spatial);
        batched[2] = std::min(batched[2], opt.layer_spatial);
      }
      // Work on a copy so running statistics of the model are untouched.
      Layer copy = model.layer(i);
      rep.layers.push_back(check_layer(copy, i, kind_name(cfg.layers[i].kind), batched, opt,
                                       root.split("layer" + std::to_string(i))));
      log::debug("gradcheck layer ", i, " worst ", rep.layers.back().worst);
    }
    in = trace[i];
  }
  if (!opt.end_to_end) return rep;

  // End to end, on a copy of the model with a fixed dropout stream per evaluation.
  Model m = model;
  Rng data = root.split("end_to_end");
  const std::size_t n = opt.end_to_end_batch;
  const Tensor x = rng_uniform(data, {n, ModelConfig::kPatch, ModelConfig::kPatch, ModelConfig::kChannels}, 0, 1);
  Tensor y({n, ModelConfig::kClasses});
  for (std::size_t i = 0; i < n; ++i) y.at(i, data.below(ModelConfig::kClasses)) = 1;
  const Rng drop = root.split("dropout");
  auto loss = [&] {
    Rng d = drop;
    return softmax_cross_entropy(m.forward(x, Mode::train, &d), y);
  };
  const LossResult base = loss();
  const std::uint64_t sig = m.activation_signature();
  m.backward(base.grad_logits);

  std::vector<Param*> params = m.parameters();
  const std::vector<std::size_t> owner = m.parameter_layers();
  std::vector<Tensor> analytic;
  for (std::size_t k = 0; k < params.size(); ++k) {
    analytic.push_back(params[k]->grad);
    if (opt.tamper) opt.tamper(owner[k], params[k]->name, analytic.back());
  }
  rep.end_to_end_run = true;
  Rng pick = root.split("end_to_end_probes");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = params[k]->value;
    for (std::size_t i : detail::probe_indices(v.size(), opt.max_probes, pick)) {
      const real orig = v[i];
      v[i] = orig + opt.step;
      const double lp = loss().loss;
      const bool smooth_p = m.activation_signature() == sig;
      v[i] = orig - opt.step;
      const double lm = loss().loss;
      const bool smooth_m = m.activation_signature() == sig;
      v[i] = orig;
      if (!smooth_p || !smooth_m) {
        ++rep.end_to_end_skipped;
        continue;
      }
      const double e = detail::rel_err(analytic[k][i], (lp - lm) / (2 * opt.step), opt.end_to_end_floor);
      if (e > rep.end_to_end_worst) {
        rep.end_to_end_worst = e;
        rep.end_to_end_worst_layer = owner[k];
      }
      ++rep.end_to_end_probes;
    }
  }
  rep.end_to_end_passed = rep.end_to_end_probes > 0 && rep.end_to_end_worst < opt.end_to_end_tolerance;
  return rep;
}

inline nlohmann::json to_json_report(const GradcheckReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"index", l.index}, {"kind", l.kind}, {"input_shape", l.input}, {"worst_relative_error", l.worst},
                      {"worst_tensor", l.worst_tensor}, {"probes", l.probes}, {"passed", l.passed}});
  nlohmann::json j = {{"layers", layers}, {"passed", r.passed()}};
  if (r.end_to_end_run)
    j["end_to_end"] = {{"worst_relative_error", r.end_to_end_worst}, {"worst_layer", r.end_to_end_worst_layer},
                       {"probes", r.end_to_end_probes}, {"skipped_at_kinks", r.end_to_end_skipped},
                       {"passed", r.end_to_end_passed}};
  return j;
}

inline std::string format_report(const GradcheckReport& r, const GradcheckOptions& opt) {
  std::ostringstream os;
  os << "layer  kind          input shape          probes  worst rel. error  result\n";
  for (const auto& l : r.layers) {
    char line[160];
    std::snprintf(line, sizeof line, "%5zu  %-12s  %-19s  %6zu  %16.3e  %s%s\n", l.index, l.kind.c_str(),
                  shape_str(l.input).c_str(), l.probes, l.worst, l.passed ? "PASS" : "FAIL",
                  l.passed ? "" : (" (" + l.worst_tensor + ")").c_str());
    os << line;
  }
  os << "tolerance per layer: " << opt.layer_tolerance << '\n';
  if (r.end_to_end_run) {
    char line[200];
    std::snprintf(line, sizeof line,
                  "end-to-end: %zu probes (%zu skipped at kinks), worst %.3e at layer %zu, tolerance %.0e: %s\n",
                  r.end_to_end_probes, r.end_to_end_skipped, r.end_to_end_worst, r.end_to_end_worst_layer,
                  opt.end_to_end_tolerance, r.end_to_end_passed ? "PASS" : "FAIL");
    os << line;
  }
  os << (r.passed() ? "gradient check PASSED" : "gradient check FAILED") << '\n';
  return os.str();
}

}  // namespace exuseg
