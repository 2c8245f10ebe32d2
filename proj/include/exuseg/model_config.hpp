#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/error.hpp"
#include "exuseg/tensor.hpp"

namespace exuseg {

enum class LayerKind { conv2d, batchnorm2d, relu, maxpool2d, dropout, flatten, dense };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

inline LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::batchnorm2d, LayerKind::relu, LayerKind::maxpool2d,
                      LayerKind::dropout, LayerKind::flatten, LayerKind::dense})
    if (s == kind_name(k)) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}

// One entry of the layer stack. Only the fields relevant to `kind` are read.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 3;        // conv2d
  std::size_t stride = 1;        // conv2d
  std::size_t padding = 1;       // conv2d
  std::size_t pool = 2;          // maxpool2d window and stride
  double dropout_p = 0.0;        // dropout
  std::size_t units = 0;         // dense
  double eps = 1e-5;             // batchnorm2d
  double momentum = 0.9;         // batchnorm2d: running = momentum*running + (1-momentum)*batch

  static LayerSpec conv(std::size_t channels) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.out_channels = channels;
    return s;
  }
  static LayerSpec batchnorm() { return LayerSpec{.kind = LayerKind::batchnorm2d}; }
  static LayerSpec relu() { return LayerSpec{.kind = LayerKind::relu}; }
  static LayerSpec maxpool() { return LayerSpec{.kind = LayerKind::maxpool2d}; }
  static LayerSpec dropout(double p) { return LayerSpec{.kind = LayerKind::dropout, .dropout_p = p}; }
  static LayerSpec flatten() { return LayerSpec{.kind = LayerKind::flatten}; }
  static LayerSpec dense(std::size_t units) { return LayerSpec{.kind = LayerKind::dense, .units = units}; }

  bool has_params() const {
    return kind == LayerKind::conv2d || kind == LayerKind::batchnorm2d || kind == LayerKind::dense;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelConfig {
  static constexpr std::size_t kPatch = 32;
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kClasses = 2;
  static constexpr std::size_t kConvLayers = 8;

  std::vector<LayerSpec> layers;

  // conv(c0) conv(c1) pool conv(c2) conv(c3) pool conv(c4) conv(c5) pool conv(c6) conv(c7)
  // flatten dropout dense(2); every conv is followed by batch-norm then ReLU.
  static ModelConfig from_channels(const std::array<std::size_t, kConvLayers>& channels,
                                   double dropout_p = 0.5) {
    ModelConfig cfg;
    for (std::size_t i = 0; i < kConvLayers; ++i) {
      cfg.layers.push_back(LayerSpec::conv(channels[i]));
      cfg.layers.push_back(LayerSpec::batchnorm());
      cfg.layers.push_back(LayerSpec::relu());
      if (i == 1 || i == 3 || i == 5) cfg.layers.push_back(LayerSpec::maxpool());
    }
    cfg.layers.push_back(LayerSpec::flatten());
    cfg.layers.push_back(LayerSpec::dropout(dropout_p));
    cfg.layers.push_back(LayerSpec::dense(kClasses));
    return cfg;
  }

  static ModelConfig default_config() { return from_channels({32, 32, 64, 64, 128, 128, 128, 128}, 0.5); }

  static Shape input_shape() { return {kPatch, kPatch, kChannels}; }

  // Per-layer output shapes (batch axis omitted). Throws ConfigError on any
  // structural violation.
  std::vector<Shape> shape_trace() const {
    std::vector<Shape> trace;
    Shape cur = input_shape();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& s = layers[i];
      auto fail = [&](const std::string& msg) {
        throw ConfigError("layer " + std::to_string(i) + " (" + kind_name(s.kind) + "): " + msg +
                          ", input " + shape_str(cur));
      };
      switch (s.kind) {
        case LayerKind::conv2d: {
          if (cur.size() != 3) fail("expects an H x W x C feature map");
          if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) fail("channels, kernel and stride must be positive");
          if (cur[0] + 2 * s.padding < s.kernel || cur[1] + 2 * s.padding < s.kernel) fail("kernel larger than padded input");
          cur = {(cur[0] + 2 * s.padding - s.kernel) / s.stride + 1,
                 (cur[1] + 2 * s.padding - s.kernel) / s.stride + 1, s.out_channels};
          break;
        }
        case LayerKind::batchnorm2d:
          if (cur.size() != 3) fail("expects an H x W x C feature map");
          if (!(s.eps > 0) || !(s.momentum >= 0 && s.momentum < 1)) fail("eps must be > 0 and momentum in [0,1)");
          break;
        case LayerKind::relu:
          break;
        case LayerKind::maxpool2d:
          if (cur.size() != 3) fail("expects an H x W x C feature map");
          if (s.pool == 0 || cur[0] % s.pool != 0 || cur[1] % s.pool != 0) fail("spatial extent not divisible by pool size");
          cur = {cur[0] / s.pool, cur[1] / s.pool, cur[2]};
          break;
        case LayerKind::dropout:
          if (!(s.dropout_p >= 0.0 && s.dropout_p < 1.0)) fail("dropout probability must be in [0,1)");
          break;
        case LayerKind::flatten:
          cur = {shape_numel(cur)};
          break;
        case LayerKind::dense:
          if (cur.size() != 1) fail("expects a flattened input");
          if (s.units == 0) fail("units must be positive");
          cur = {s.units};
          break;
      }
      trace.push_back(cur);
    }
    return trace;
  }

  // Structural invariants of the exudate classifier: eight convolutions that
  // keep spatial size, a single 2x2 pool after conv 2, 4 and 6 only, and a
  // two-way output.
  void validate() const {
    const auto trace = shape_trace();
    if (trace.empty() || trace.back() != Shape{kClasses})
      throw ConfigError("model must end in a " + std::to_string(kClasses) + "-way output");
    if (layers.back().kind != LayerKind::dense) throw ConfigError("last layer must be dense");

    std::size_t convs = 0;
    std::size_t pools_since_conv = 0;
    Shape in = input_shape();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& s = layers[i];
      if (s.kind == LayerKind::conv2d) {
        if (convs > 0) {
          const bool want_pool = convs == 2 || convs == 4 || convs == 6;
          if (pools_since_conv != (want_pool ? 1u : 0u))
            throw ConfigError("conv " + std::to_string(convs) +
                              (want_pool ? " must be followed by exactly one maxpool"
                                         : " must not be followed by a maxpool"));
        }
        if (trace[i][0] != in[0] || trace[i][1] != in[1])
          throw ConfigError("conv layer " + std::to_string(i) + " changes spatial size");
        ++convs;
        pools_since_conv = 0;
      } else if (s.kind == LayerKind::maxpool2d) {
        if (s.pool != 2) throw ConfigError("maxpool must use a 2x2 window");
        ++pools_since_conv;
      }
      in = trace[i];
    }
    if (convs != kConvLayers)
      throw ConfigError("expected exactly " + std::to_string(kConvLayers) + " conv layers, found " +
                        std::to_string(convs));
    if (pools_since_conv != 0) throw ConfigError("no maxpool may follow the last conv layer");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"kind", kind_name(s.kind)}};
  switch (s.kind) {
    case LayerKind::conv2d:
      j["out_channels"] = s.out_channels;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["padding"] = s.padding;
      break;
    case LayerKind::batchnorm2d:
      j["eps"] = s.eps;
      j["momentum"] = s.momentum;
      break;
    case LayerKind::maxpool2d: j["pool"] = s.pool; break;
    case LayerKind::dropout: j["p"] = s.dropout_p; break;
    case LayerKind::dense: j["units"] = s.units; break;
    default: break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& s) {
  s = LayerSpec{};
  s.kind = parse_kind(j.at("kind").get<std::string>());
  s.out_channels = j.value("out_channels", s.out_channels);
  s.kernel = j.value("kernel", s.kernel);
  s.stride = j.value("stride", s.stride);
  s.padding = j.value("padding", s.padding);
  s.pool = j.value("pool", s.pool);
  s.dropout_p = j.value("p", s.dropout_p);
  s.units = j.value("units", s.units);
  s.eps = j.value("eps", s.eps);
  s.momentum = j.value("momentum", s.momentum);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) { j = nlohmann::json{{"layers", c.layers}}; }

// Accepts either an explicit {"layers": [...]} list or the shorthand
// {"conv_channels": [8 widths], "dropout": p}.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("layers")) {
    c.layers = j.at("layers").get<std::vector<LayerSpec>>();
  } else if (j.contains("conv_channels")) {
    const auto v = j.at("conv_channels").get<std::vector<std::size_t>>();
    if (v.size() != ModelConfig::kConvLayers)
      throw ConfigError("conv_channels must list exactly 8 widths");
    std::array<std::size_t, ModelConfig::kConvLayers> ch{};
    std::copy(v.begin(), v.end(), ch.begin());
    c = ModelConfig::from_channels(ch, j.value("dropout", 0.5));
  } else {
    c = ModelConfig::default_config();
  }
}

}  // namespace exuseg
