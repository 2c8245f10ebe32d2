#pragma once

// Generated data for tests and demos: separable patch sets and small
// fundus-like images with known lesion masks.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

#include "exuseg/dataset.hpp"
#include "exuseg/image_io.hpp"

namespace exuseg::synth {

inline std::uint8_t u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

// Dark reddish noise; with `blob` a bright yellow disc covers the centre.
inline exuseg::PatchRecord patch(bool blob, exuseg::Rng& r, const std::string& source = "synthetic") {
  exuseg::PatchRecord p;
  p.label = blob ? exuseg::PatchClass::exudate : exuseg::PatchClass::background;
  p.source_id = source;
  p.center = {16, 16};
  const double cy = 16 + r.uniform(-2, 2), cx = 16 + r.uniform(-2, 2), rad = r.uniform(4, 7);
  std::size_t k = 0;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool in = blob && std::hypot(y - cy, x - cx) <= rad;
      const double n = r.uniform(-12, 12);
      p.pixels[k++] = u8((in ? 235 : 70) + n);
      p.pixels[k++] = u8((in ? 215 : 25) + n);
      p.pixels[k++] = u8((in ? 60 : 15) + n);
    }
  return p;
}

// `n` patches, alternating classes.
inline exuseg::PatchSet patches(std::size_t n, std::uint64_t seed) {
  exuseg::Rng r(seed);
  exuseg::PatchSet ps;
  for (std::size_t i = 0; i < n; ++i) ps.records.push_back(patch(i % 2 == 1, r));
  return ps;
}

struct Scene {
  exuseg::Image8 image;  // RGB
  exuseg::Image8 mask;   // gray, 0 or 255
};

// A dark retina-coloured image with a few bright yellow lesions and matching mask.
inline Scene scene(std::size_t size, std::uint64_t seed, std::size_t lesions = 6) {
  exuseg::Rng r(seed);
  Scene s{exuseg::Image8(size, size, 3), exuseg::Image8(size, size, 1)};
  struct Disc {
    double y, x, rad;
  };
  std::vector<Disc> discs;
  const double scale = static_cast<double>(size) / 256.0;
  for (std::size_t i = 0; i < lesions; ++i)
    discs.push_back({r.uniform(40, 216) * scale, r.uniform(40, 216) * scale, r.uniform(4, 9) * scale});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      bool in = false;
      for (const Disc& d : discs) in = in || std::hypot(y - d.y, x - d.x) <= d.rad;
      const double n = r.uniform(-10, 10);
      s.image.at(y, x, 0) = u8((in ? 235 : 80) + n);
      s.image.at(y, x, 1) = u8((in ? 215 : 30) + n);
      s.image.at(y, x, 2) = u8((in ? 60 : 15) + n);
      s.mask.at(y, x) = in ? 255 : 0;
    }
  return s;
}

// Writes <dir>/images/<id>.png, <dir>/masks/<id>.png and the train.txt /
// test.txt lists for `train` + `test` generated scenes.
inline void write_dataset(const std::filesystem::path& dir, std::size_t train, std::size_t test, std::size_t size,
                          std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::string train_list, test_list;
  for (std::size_t i = 0; i < train + test; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%02zu", i + 1);
    const Scene sc = scene(size, seed + i);
    write_png(dir / "images" / (std::string(id) + ".png"), sc.image);
    write_png(dir / "masks" / (std::string(id) + ".png"), sc.mask);
    (i < train ? train_list : test_list) += std::string(id) + "\n";
  }
  write_file(dir / "train.txt", std::vector<std::uint8_t>(train_list.begin(), train_list.end()));
  write_file(dir / "test.txt", std::vector<std::uint8_t>(test_list.begin(), test_list.end()));
}

}  // namespace exuseg::synth
