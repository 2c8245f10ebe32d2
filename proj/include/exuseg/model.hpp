#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "exuseg/layers.hpp"
#include "exuseg/model_config.hpp"
#include "exuseg/rng.hpp"

namespace exuseg {

// Non-owning view of one persistent tensor of a model.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

class Model {
public:
  // Builds the layer stack with zeroed parameters; see init_model for the
  // randomized initialization.
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Shape cur = ModelConfig::input_shape();
    const auto trace = cfg_.shape_trace();
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const LayerSpec& s = cfg_.layers[i];
      switch (s.kind) {
        case LayerKind::conv2d: layers_.emplace_back(Conv2d(cur[2], s)); break;
        case LayerKind::batchnorm2d: layers_.emplace_back(BatchNorm2d(cur[2], s)); break;
        case LayerKind::relu: layers_.emplace_back(Relu()); break;
        case LayerKind::maxpool2d: layers_.emplace_back(MaxPool2d(s.pool)); break;
        case LayerKind::dropout: layers_.emplace_back(Dropout(s.dropout_p)); break;
        case LayerKind::flatten: layers_.emplace_back(Flatten()); break;
        case LayerKind::dense: layers_.emplace_back(Dense(cur[0], s.units)); break;
      }
      cur = trace[i];
    }
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }

  // `rng` drives dropout masks and is required in training mode.
  Tensor forward(const Tensor& batch, Mode mode, Rng* rng = nullptr) {
    const Shape want = ModelConfig::input_shape();
    if (batch.rank() != 4 || !std::equal(want.begin(), want.end(), batch.shape().begin() + 1))
      throw ShapeError("model input must be [N,32,32,3], got " + shape_str(batch.shape()));
    Tensor x = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      try {
        x = std::visit(
            [&](auto& l) -> Tensor {
              using L = std::decay_t<decltype(l)>;
              if constexpr (std::is_same_v<L, Dropout>)
                return l.forward(x, mode, rng);
              else
                return l.forward(x, mode);
            },
            layers_[i]);
        require_finite(x, "forward pass");
      } catch (const LayerError&) {
        throw;
      } catch (const std::exception& e) {
        throw LayerError(i, std::string(kind_name(cfg_.layers[i].kind)) + ": " + e.what());
      }
    }
    return x;
  }

  // Backpropagates d(loss)/d(logits); fills every Param::grad and returns the
  // gradient with respect to the input batch.
  Tensor backward(const Tensor& grad_logits) {
    Tensor g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      try {
        g = std::visit([&](auto& l) -> Tensor { return l.backward(g); }, layers_[i]);
      } catch (const std::exception& e) {
        throw LayerError(i, std::string(kind_name(cfg_.layers[i].kind)) + " backward: " + e.what());
      }
    }
    return g;
  }

  // Learnable parameters in layer order.
  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    for (auto& l : layers_) {
      if (auto* c = std::get_if<Conv2d>(&l)) {
        out.push_back(&c->weight());
        out.push_back(&c->bias());
      } else if (auto* b = std::get_if<BatchNorm2d>(&l)) {
        out.push_back(&b->gamma());
        out.push_back(&b->beta());
      } else if (auto* d = std::get_if<Dense>(&l)) {
        out.push_back(&d->weight());
        out.push_back(&d->bias());
      }
    }
    return out;
  }

  // Index of the layer owning each entry of parameters().
  std::vector<std::size_t> parameter_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i)
      if (cfg_.layers[i].has_params()) {
        out.push_back(i);
        out.push_back(i);
      }
    return out;
  }

  // Everything that persists in a checkpoint: parameters plus batch-norm
  // running statistics, named "<layer index>.<kind>.<field>".
  std::vector<NamedTensor> state_tensors() {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = std::to_string(i) + "." + kind_name(cfg_.layers[i].kind) + ".";
      if (auto* c = std::get_if<Conv2d>(&layers_[i])) {
        out.push_back({prefix + "weight", &c->weight().value});
        out.push_back({prefix + "bias", &c->bias().value});
      } else if (auto* b = std::get_if<BatchNorm2d>(&layers_[i])) {
        out.push_back({prefix + "gamma", &b->gamma().value});
        out.push_back({prefix + "beta", &b->beta().value});
        out.push_back({prefix + "running_mean", &b->running_mean()});
        out.push_back({prefix + "running_var", &b->running_var()});
      } else if (auto* d = std::get_if<Dense>(&layers_[i])) {
        out.push_back({prefix + "weight", &d->weight().value});
        out.push_back({prefix + "bias", &d->bias().value});
      }
    }
    return out;
  }

  bool any_cache() const {
    for (const auto& l : layers_)
      if (std::visit([](const auto& x) { return x.has_cache(); }, l)) return true;
    return false;
  }

  // Hash of the piecewise-linear branch taken by the last training-mode
  // forward (ReLU masks, pool argmaxes). Equal signatures mean the loss is
  // smooth between the two evaluations.
  std::uint64_t activation_signature() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 0x100000001B3ull;
    };
    for (const auto& l : layers_) {
      if (const auto* r = std::get_if<Relu>(&l); r && r->mask())
        for (auto m : *r->mask()) mix(m);
      if (const auto* p = std::get_if<MaxPool2d>(&l); p && p->argmax())
        for (auto a : *p->argmax()) mix(a);
    }
    return h;
  }

private:
  ModelConfig cfg_;
  std::vector<Layer> layers_;
};

// He initialization: conv and dense weights ~ N(0, sqrt(2 / fan_in)); biases
// and batch-norm shifts 0, scales 1, running mean 0 and variance 1. Each
// layer draws from its own child stream of `rng`.
inline Model init_model(const ModelConfig& cfg, const Rng& rng) {
  Model m(cfg);
  const Rng init = rng.split("init");
  for (std::size_t i = 0; i < m.layer_count(); ++i) {
    Rng stream = init.split("layer" + std::to_string(i));
    Layer& l = m.layer(i);
    if (auto* c = std::get_if<Conv2d>(&l)) {
      c->weight().value = rng_normal(stream, c->weight().value.shape(), 0.0,
                                     std::sqrt(2.0 / static_cast<double>(c->fan_in())));
    } else if (auto* d = std::get_if<Dense>(&l)) {
      d->weight().value = rng_normal(stream, d->weight().value.shape(), 0.0,
                                     std::sqrt(2.0 / static_cast<double>(d->fan_in())));
    }
  }
  return m;
}

}  // namespace exuseg
