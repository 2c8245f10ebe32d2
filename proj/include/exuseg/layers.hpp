#pragma once

// Forward and backward passes of the classifier's layers. Activations are
// NHWC: [batch, rows, cols, channels].

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "exuseg/gemm.hpp"
#include "exuseg/model_config.hpp"
#include "exuseg/rng.hpp"
#include "exuseg/tensor.hpp"

namespace exuseg {

enum class Mode { train, infer };

// A learnable tensor and its gradient from the most recent backward pass.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

namespace detail {

inline void require_rank(const Tensor& x, std::size_t rank, const char* layer) {
  if (x.rank() != rank)
    throw ShapeError(std::string(layer) + " expects rank " + std::to_string(rank) + " input, got " +
                     shape_str(x.shape()));
}

}  // namespace detail

class Conv2d {
public:
  Conv2d(std::size_t in_channels, const LayerSpec& spec)
      : in_ch_(in_channels), out_ch_(spec.out_channels), k_(spec.kernel), stride_(spec.stride),
        pad_(spec.padding), weight_("weight", Tensor({k_, k_, in_ch_, out_ch_})),
        bias_("bias", Tensor({out_ch_})) {}

  std::size_t in_channels() const { return in_ch_; }
  std::size_t out_channels() const { return out_ch_; }
  std::size_t fan_in() const { return k_ * k_ * in_ch_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }
  bool has_cache() const { return cache_.has_value(); }

  Tensor forward(const Tensor& x, Mode mode) {
    detail::require_rank(x, 4, "conv2d");
    if (x.dim(3) != in_ch_)
      throw ShapeError("conv2d: input has " + std::to_string(x.dim(3)) + " channels, layer expects " +
                       std::to_string(in_ch_));
    const Geometry g = geometry(x.shape());
    Tensor out({g.n, g.ho, g.wo, out_ch_});
    std::vector<real> cols(g.rows_per_sample() * g.cols_width());
    for (std::size_t s = 0; s < g.n; ++s) {
      im2col(x, s, g, cols);
      real* o = out.ptr() + s * g.rows_per_sample() * out_ch_;
      gemm::nn(g.rows_per_sample(), out_ch_, g.cols_width(), cols.data(), weight_.value.ptr(), o);
      for (std::size_t r = 0; r < g.rows_per_sample(); ++r)
        for (std::size_t c = 0; c < out_ch_; ++c) o[r * out_ch_ + c] += bias_.value[c];
    }
    if (mode == Mode::train)
      cache_ = x;
    else
      cache_.reset();
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    if (!cache_) throw Error("conv2d backward called without a training-mode forward");
    const Tensor& x = *cache_;
    const Geometry g = geometry(x.shape());
    if (grad_out.shape() != Shape{g.n, g.ho, g.wo, out_ch_})
      throw ShapeError("conv2d backward: gradient shape " + shape_str(grad_out.shape()));
    weight_.grad = Tensor(weight_.value.shape());
    bias_.grad = Tensor(bias_.value.shape());
    Tensor grad_x(x.shape());
    std::vector<real> cols(g.rows_per_sample() * g.cols_width());
    std::vector<real> dcols(cols.size());
    for (std::size_t s = 0; s < g.n; ++s) {
      im2col(x, s, g, cols);
      const real* go = grad_out.ptr() + s * g.rows_per_sample() * out_ch_;
      gemm::tn_acc(g.rows_per_sample(), out_ch_, g.cols_width(), cols.data(), go, weight_.grad.ptr());
      for (std::size_t r = 0; r < g.rows_per_sample(); ++r)
        for (std::size_t c = 0; c < out_ch_; ++c) bias_.grad[c] += go[r * out_ch_ + c];
      gemm::nt(g.rows_per_sample(), out_ch_, g.cols_width(), go, weight_.value.ptr(), dcols.data());
      col2im(dcols, s, g, grad_x);
    }
    return grad_x;
  }

private:
  struct Geometry {
    std::size_t n, h, w, ho, wo, k, cin;
    std::size_t rows_per_sample() const { return ho * wo; }
    std::size_t cols_width() const { return k * k * cin; }
  };

  Geometry geometry(const Shape& s) const {
    if (s[1] + 2 * pad_ < k_ || s[2] + 2 * pad_ < k_) throw ShapeError("conv2d: kernel larger than padded input");
    return {s[0], s[1], s[2], (s[1] + 2 * pad_ - k_) / stride_ + 1, (s[2] + 2 * pad_ - k_) / stride_ + 1, k_, in_ch_};
  }

  // Row (oh, ow) of the patch matrix holds the receptive field in (kh, kw, ci) order.
  // Each kernel row is one contiguous span of the input, clipped at the borders.
  void im2col(const Tensor& x, std::size_t s, const Geometry& g, std::vector<real>& cols) const {
    const real* xs = x.ptr() + s * g.h * g.w * g.cin;
    real* dst = cols.data();
    const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
    const auto k = static_cast<std::ptrdiff_t>(g.k);
    for (std::size_t oh = 0; oh < g.ho; ++oh) {
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        const std::ptrdiff_t iw0 = static_cast<std::ptrdiff_t>(ow * stride_) - static_cast<std::ptrdiff_t>(pad_);
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -iw0), hi = std::min(k, w - iw0);
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride_ + kh) - static_cast<std::ptrdiff_t>(pad_);
          if (ih < 0 || ih >= h || lo >= hi) {
            std::fill_n(dst, g.k * g.cin, real{0});
          } else {
            const auto before = static_cast<std::size_t>(lo) * g.cin;
            const auto span = static_cast<std::size_t>(hi - lo) * g.cin;
            std::fill_n(dst, before, real{0});
            std::copy_n(xs + (static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw0 + lo)) * g.cin, span,
                        dst + before);
            std::fill_n(dst + before + span, g.k * g.cin - before - span, real{0});
          }
          dst += g.k * g.cin;
        }
      }
    }
  }

  void col2im(const std::vector<real>& dcols, std::size_t s, const Geometry& g, Tensor& grad_x) const {
    real* gx = grad_x.ptr() + s * g.h * g.w * g.cin;
    const real* src = dcols.data();
    for (std::size_t oh = 0; oh < g.ho; ++oh) {
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride_ + kh) - static_cast<std::ptrdiff_t>(pad_);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride_ + kw) - static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.h) || iw >= static_cast<std::ptrdiff_t>(g.w)) {
              src += g.cin;
              continue;
            }
            real* dst = gx + (static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw)) * g.cin;
            for (std::size_t c = 0; c < g.cin; ++c) dst[c] += *src++;
          }
        }
      }
    }
  }

  std::size_t in_ch_, out_ch_, k_, stride_, pad_;
  Param weight_;
  Param bias_;
  std::optional<Tensor> cache_;
};

// Per-channel normalization over batch and spatial axes.
class BatchNorm2d {
public:
  BatchNorm2d(std::size_t channels, const LayerSpec& spec)
      : channels_(channels), eps_(spec.eps), momentum_(spec.momentum),
        gamma_("gamma", Tensor::ones({channels})), beta_("beta", Tensor({channels})),
        running_mean_(Tensor({channels})), running_var_(Tensor::ones({channels})) {}

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const Param& gamma() const { return gamma_; }
  const Param& beta() const { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  bool has_cache() const { return cache_.has_value(); }

  Tensor forward(const Tensor& x, Mode mode) {
    detail::require_rank(x, 4, "batchnorm2d");
    if (x.dim(3) != channels_) throw ShapeError("batchnorm2d: channel mismatch");
    const std::size_t c = channels_;
    const std::size_t m = x.size() / c;
    Tensor out(x.shape());
    if (mode == Mode::infer) {
      cache_.reset();
      std::vector<real> a(c), b(c);
      for (std::size_t j = 0; j < c; ++j) {
        a[j] = gamma_.value[j] / std::sqrt(running_var_[j] + static_cast<real>(eps_));
        b[j] = beta_.value[j] - a[j] * running_mean_[j];
      }
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[j] * x[i * c + j] + b[j];
      return out;
    }
    if (m < 2) throw Error("batchnorm2d: training mode needs at least 2 values per channel");
    std::vector<real> mean(c, 0), var(c, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += x[i * c + j];
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<real>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const real d = x[i * c + j] - mean[j];
        var[j] += d * d;
      }
    Cache cache{Tensor(x.shape()), std::vector<real>(c)};
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<real>(m);
      cache.inv_std[j] = 1 / std::sqrt(var[j] + static_cast<real>(eps_));
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const real xhat = (x[i * c + j] - mean[j]) * cache.inv_std[j];
        cache.xhat[i * c + j] = xhat;
        out[i * c + j] = gamma_.value[j] * xhat + beta_.value[j];
      }
    const real mom = static_cast<real>(momentum_);
    for (std::size_t j = 0; j < c; ++j) {
      running_mean_[j] = mom * running_mean_[j] + (1 - mom) * mean[j];
      running_var_[j] = mom * running_var_[j] + (1 - mom) * var[j];
    }
    cache_ = std::move(cache);
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    if (!cache_) throw Error("batchnorm2d backward called without a training-mode forward");
    require_same_shape(grad_out, cache_->xhat, "batchnorm2d backward");
    const std::size_t c = channels_;
    const std::size_t m = grad_out.size() / c;
    const Tensor& xhat = cache_->xhat;
    gamma_.grad = Tensor({c});
    beta_.grad = Tensor({c});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const real g = grad_out[i * c + j];
        beta_.grad[j] += g;
        gamma_.grad[j] += g * xhat[i * c + j];
      }
    Tensor grad_x(grad_out.shape());
    const real inv_m = 1 / static_cast<real>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const real g = grad_out[i * c + j];
        grad_x[i * c + j] = gamma_.value[j] * cache_->inv_std[j] * inv_m *
                            (static_cast<real>(m) * g - beta_.grad[j] - xhat[i * c + j] * gamma_.grad[j]);
      }
    return grad_x;
  }

private:
  struct Cache {
    Tensor xhat;
    std::vector<real> inv_std;
  };

  std::size_t channels_;
  double eps_;
  double momentum_;
  Param gamma_;
  Param beta_;
  Tensor running_mean_;
  Tensor running_var_;
  std::optional<Cache> cache_;
};

class Relu {
public:
  bool has_cache() const { return mask_.has_value(); }
  const std::vector<std::uint8_t>* mask() const { return mask_ ? &*mask_ : nullptr; }

  Tensor forward(const Tensor& x, Mode mode) {
    Tensor out(x.shape());
    std::vector<std::uint8_t> mask(mode == Mode::train ? x.size() : 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const bool on = x[i] > 0;
      out[i] = on ? x[i] : real{0};
      if (mode == Mode::train) mask[i] = on;
    }
    if (mode == Mode::train)
      mask_ = std::move(mask);
    else
      mask_.reset();
    return out;
  }

  // Subgradient at 0 is taken as 0.
  Tensor backward(const Tensor& grad_out) const {
    if (!mask_) throw Error("relu backward called without a training-mode forward");
    if (grad_out.size() != mask_->size()) throw ShapeError("relu backward: gradient size mismatch");
    Tensor g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (*mask_)[i] ? grad_out[i] : real{0};
    return g;
  }

private:
  std::optional<std::vector<std::uint8_t>> mask_;
};

// Non-overlapping square max-pool. Ties go to the first element in row-major
// window order.
class MaxPool2d {
public:
  explicit MaxPool2d(std::size_t pool = 2) : pool_(pool) {}

  bool has_cache() const { return cache_.has_value(); }
  const std::vector<std::size_t>* argmax() const { return cache_ ? &cache_->argmax : nullptr; }

  Tensor forward(const Tensor& x, Mode mode) {
    detail::require_rank(x, 4, "maxpool2d");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h % pool_ != 0 || w % pool_ != 0)
      throw ShapeError("maxpool2d: spatial extent " + shape_str(x.shape()) + " not divisible by " +
                       std::to_string(pool_));
    const std::size_t ho = h / pool_, wo = w / pool_;
    Tensor out({n, ho, wo, c});
    std::vector<std::size_t> arg(out.size());
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j)
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::size_t best = ((s * h + i * pool_) * w + j * pool_) * c + ch;
            for (std::size_t di = 0; di < pool_; ++di)
              for (std::size_t dj = 0; dj < pool_; ++dj) {
                const std::size_t idx = ((s * h + i * pool_ + di) * w + j * pool_ + dj) * c + ch;
                if (x[idx] > x[best]) best = idx;
              }
            const std::size_t o = ((s * ho + i) * wo + j) * c + ch;
            out[o] = x[best];
            arg[o] = best;
          }
    if (mode == Mode::train)
      cache_ = Cache{x.shape(), std::move(arg)};
    else
      cache_.reset();
    return out;
  }

  Tensor backward(const Tensor& grad_out) const {
    if (!cache_) throw Error("maxpool2d backward called without a training-mode forward");
    if (grad_out.size() != cache_->argmax.size()) throw ShapeError("maxpool2d backward: gradient size mismatch");
    Tensor g(cache_->input_shape);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[cache_->argmax[o]] += grad_out[o];
    return g;
  }

private:
  struct Cache {
    Shape input_shape;
    std::vector<std::size_t> argmax;
  };
  std::size_t pool_;
  std::optional<Cache> cache_;
};

// Inverted dropout: survivors are scaled by 1/(1-p) in training mode;
// inference is the identity.
class Dropout {
public:
  explicit Dropout(double p) : p_(p) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0,1)");
  }

  double p() const { return p_; }
  bool has_cache() const { return mask_.has_value(); }

  Tensor forward(const Tensor& x, Mode mode, Rng* rng) {
    if (mode == Mode::infer) {
      mask_.reset();
      return x;
    }
    if (!rng) throw Error("dropout: training mode requires a random stream");
    const real keep_scale = static_cast<real>(1.0 / (1.0 - p_));
    std::vector<real> mask(x.size());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask[i] = rng->uniform01() < p_ ? real{0} : keep_scale;
      out[i] = x[i] * mask[i];
    }
    mask_ = std::move(mask);
    return out;
  }

  Tensor backward(const Tensor& grad_out) const {
    if (!mask_) throw Error("dropout backward called without a training-mode forward");
    if (grad_out.size() != mask_->size()) throw ShapeError("dropout backward: gradient size mismatch");
    Tensor g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * (*mask_)[i];
    return g;
  }

private:
  double p_;
  std::optional<std::vector<real>> mask_;
};

class Flatten {
public:
  bool has_cache() const { return input_shape_.has_value(); }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.rank() < 1) throw ShapeError("flatten: needs a batch axis");
    if (mode == Mode::train)
      input_shape_ = x.shape();
    else
      input_shape_.reset();
    return reshape(x, {x.dim(0), x.size() / std::max<std::size_t>(x.dim(0), 1)});
  }

  Tensor backward(const Tensor& grad_out) const {
    if (!input_shape_) throw Error("flatten backward called without a training-mode forward");
    return reshape(grad_out, *input_shape_);
  }

private:
  std::optional<Shape> input_shape_;
};

// Fully connected: y = x W + b with W of shape [in, out].
class Dense {
public:
  Dense(std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_("weight", Tensor({in, out})), bias_("bias", Tensor({out})) {}

  std::size_t fan_in() const { return in_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }
  bool has_cache() const { return cache_.has_value(); }

  Tensor forward(const Tensor& x, Mode mode) {
    detail::require_rank(x, 2, "dense");
    if (x.dim(1) != in_)
      throw ShapeError("dense: input width " + std::to_string(x.dim(1)) + ", layer expects " + std::to_string(in_));
    const std::size_t n = x.dim(0);
    Tensor out({n, out_});
    gemm::nn(n, out_, in_, x.ptr(), weight_.value.ptr(), out.ptr());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_; ++j) out[i * out_ + j] += bias_.value[j];
    if (mode == Mode::train)
      cache_ = x;
    else
      cache_.reset();
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    if (!cache_) throw Error("dense backward called without a training-mode forward");
    const std::size_t n = cache_->dim(0);
    if (grad_out.shape() != Shape{n, out_}) throw ShapeError("dense backward: gradient shape mismatch");
    weight_.grad = Tensor(weight_.value.shape());
    bias_.grad = Tensor(bias_.value.shape());
    gemm::tn_acc(n, out_, in_, cache_->ptr(), grad_out.ptr(), weight_.grad.ptr());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_; ++j) bias_.grad[j] += grad_out[i * out_ + j];
    Tensor grad_x({n, in_});
    gemm::nt(n, out_, in_, grad_out.ptr(), weight_.value.ptr(), grad_x.ptr());
    return grad_x;
  }

private:
  std::size_t in_, out_;
  Param weight_;
  Param bias_;
  std::optional<Tensor> cache_;
};

using Layer = std::variant<Conv2d, BatchNorm2d, Relu, MaxPool2d, Dropout, Flatten, Dense>;

}  // namespace exuseg
