#pragma once

// Sliding-window prediction over a 256x256 working image. Every centre's
// 32x32 patch is classified independently and the results are laid out in
// row-major centre order.

#include <filesystem>
#include <string>

#include "exuseg/dataset.hpp"
#include "exuseg/image_io.hpp"
#include "exuseg/loss.hpp"
#include "exuseg/model.hpp"

namespace exuseg {

enum class PredictMode { valid, padded };

inline const char* mode_name(PredictMode m) { return m == PredictMode::padded ? "padded" : "valid"; }

inline PredictMode parse_mode(const std::string& s) {
  if (s == "valid") return PredictMode::valid;
  if (s == "padded") return PredictMode::padded;
  throw ConfigError("unknown prediction mode '" + s + "' (expected valid or padded)");
}

struct PredictionMask {
  std::string id;
  PredictMode mode = PredictMode::valid;
  Tensor pixels;       // [E,E] in {0,1}; E = 224 (valid) or 256 (padded)
  Tensor probability;  // [E,E] exudate softmax output
  // Working-image coordinates of mask element (0,0).
  std::size_t origin_row = geom::kHalf;
  std::size_t origin_col = geom::kHalf;

  std::size_t extent() const { return pixels.dim(0); }
};

inline std::size_t mask_extent(PredictMode m) {
  return m == PredictMode::padded ? geom::kWorking : geom::kCentersPerAxis;
}

// Copies the 32x32 window whose top-left is (top, left) of a [H,W,3] image into dst.
inline void copy_window(const Tensor& img, std::size_t top, std::size_t left, real* dst) {
  const std::size_t w = img.dim(1);
  const std::size_t row = geom::kPatch * 3;
  for (std::size_t r = 0; r < geom::kPatch; ++r)
    std::copy_n(img.ptr() + ((top + r) * w + left) * 3, row, dst + r * row);
}

inline Tensor zero_pad(const Tensor& img, std::size_t pad) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor out({h + 2 * pad, w + 2 * pad, 3});
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(img.ptr() + r * w * 3, w * 3, out.ptr() + ((r + pad) * (w + 2 * pad) + pad) * 3);
  return out;
}

inline PredictionMask predict_image(const FundusImage& img, Model& model, PredictMode mode = PredictMode::valid,
                                    std::size_t batch = 512) {
  if (batch == 0) throw ConfigError("prediction batch size must be at least 1");
  if (img.pixels.rank() != 3 || img.height() != geom::kWorking || img.width() != geom::kWorking || img.pixels.dim(2) != 3)
    throw ShapeError("predict_image: '" + img.id + "' must be a 256x256x3 working image, got " +
                     shape_str(img.pixels.shape()));
  const Tensor source = mode == PredictMode::padded ? zero_pad(img.pixels, geom::kHalf) : img.pixels;
  const std::size_t e = mask_extent(mode);
  const std::size_t total = e * e;

  PredictionMask out;
  out.id = img.id;
  out.mode = mode;
  out.pixels = Tensor({e, e});
  out.probability = Tensor({e, e});
  if (mode == PredictMode::padded) out.origin_row = out.origin_col = 0;

  // Mask element k sits at window top-left (k / e, k % e) of `source`.
  for (std::size_t first = 0; first < total; first += batch) {
    const std::size_t n = std::min(batch, total - first);
    Tensor x({n, geom::kPatch, geom::kPatch, 3});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = first + i;
      copy_window(source, k / e, k % e, x.ptr() + i * geom::kPatchValues);
    }
    const Tensor logits = model.forward(x, Mode::infer);
    if (logits.rank() != 2 || logits.dim(0) != n || logits.dim(1) != 2)
      throw ShapeError("predict_image: model produced " + shape_str(logits.shape()) + ", expected [N,2]");
    for (std::size_t i = 0; i < n; ++i) {
      const real p = softmax_prob(logits.ptr() + 2 * i, 2, 1);
      out.probability[first + i] = p;
      out.pixels[first + i] = p > real{0.5} ? 1 : 0;
    }
  }
  return out;
}

// ---- output images -------------------------------------------------------------

inline Image8 mask_image(const PredictionMask& pm) {
  const std::size_t e = pm.extent();
  Image8 im(e, e, 1);
  for (std::size_t k = 0; k < e * e; ++k) im.pixels[k] = pm.pixels[k] == 1 ? 255 : 0;
  return im;
}

inline Image8 probability_image(const PredictionMask& pm) {
  const std::size_t e = pm.extent();
  Image8 im(e, e, 1);
  for (std::size_t k = 0; k < e * e; ++k)
    im.pixels[k] = static_cast<std::uint8_t>(std::lround(std::clamp<real>(pm.probability[k], 0, 1) * 255));
  return im;
}

// Exudate pixels painted over the region of the working image the mask covers.
inline Image8 overlay_image(const FundusImage& img, const PredictionMask& pm) {
  static constexpr std::uint8_t kHighlight[3] = {0, 255, 64};
  const std::size_t e = pm.extent();
  Image8 im(e, e, 3);
  for (std::size_t r = 0; r < e; ++r)
    for (std::size_t c = 0; c < e; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const real v = img.pixels.at(r + pm.origin_row, c + pm.origin_col, ch);
        im.at(r, c, ch) = pm.pixels.at(r, c) == 1 ? kHighlight[ch]
                                                  : static_cast<std::uint8_t>(std::lround(std::clamp<real>(v, 0, 1) * 255));
      }
  return im;
}

inline std::filesystem::path output_name(const std::filesystem::path& dir, const std::string& id, PredictMode mode,
                                         const char* what) {
  return dir / (id + "." + mode_name(mode) + "." + what + ".png");
}

inline void write_mask(const PredictionMask& pm, const std::filesystem::path& path) { write_png(path, mask_image(pm)); }

inline void write_probability(const PredictionMask& pm, const std::filesystem::path& path) {
  write_png(path, probability_image(pm));
}

inline void write_overlay(const FundusImage& img, const PredictionMask& pm, const std::filesystem::path& path) {
  write_png(path, overlay_image(img, pm));
}

// Reads a mask PNG written by write_mask (pixels above 127 are exudate).
inline Tensor read_mask_png(const std::filesystem::path& path) {
  const Image8 im = read_image(path);
  Tensor t({im.height, im.width});
  for (std::size_t r = 0; r < im.height; ++r)
    for (std::size_t c = 0; c < im.width; ++c) t.at(r, c) = im.at(r, c, 0) > 127 ? 1 : 0;
  return t;
}

}  // namespace exuseg
