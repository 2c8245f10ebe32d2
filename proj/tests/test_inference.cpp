#include <gtest/gtest.h>

#include <filesystem>

#include "exuseg/inference.hpp"
#include "exuseg/synthetic.hpp"

using namespace exuseg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() { return ModelConfig::from_channels({2, 2, 3, 3, 4, 4, 4, 4}, 0.5); }
ModelConfig unit_config() { return ModelConfig::from_channels({1, 1, 1, 1, 1, 1, 1, 1}, 0.5); }

FundusImage scene_image(std::uint64_t seed) { return image_from_8bit("scene", synth::scene(256, seed).image); }

// A model whose logits ignore the input: dense weights zero, bias only.
Model constant_model(real background, real exudate) {
  Model m = init_model(unit_config(), Rng(1));
  auto params = m.parameters();
  Param* w = params[params.size() - 2];
  Param* b = params.back();
  w->value.fill(0);
  b->value[0] = background;
  b->value[1] = exudate;
  return m;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "exuseg_test_inference";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Predict, ValidModeCoversEveryCentre) {
  Model m = init_model(tiny_config(), Rng(2));
  const PredictionMask pm = predict_image(scene_image(1), m);
  EXPECT_EQ(pm.pixels.shape(), (Shape{224, 224}));
  EXPECT_EQ(pm.pixels.size(), 50176u);
  EXPECT_EQ(pm.origin_row, 16u);
  EXPECT_EQ(pm.origin_col, 16u);
  for (std::size_t k = 0; k < pm.pixels.size(); ++k)
    EXPECT_EQ(pm.pixels[k], pm.probability[k] > 0.5 ? 1 : 0);
}

TEST(Predict, MatchesSinglePatchOracle) {
  Model m = init_model(tiny_config(), Rng(3));
  const FundusImage img = scene_image(2);
  const PredictionMask pm = predict_image(img, m, PredictMode::valid, 333);
  Rng r(4);
  for (int trial = 0; trial < 100; ++trial) {
    // Flat index k maps to (k div 224, k mod 224).
    const std::size_t k = r.below(50176), i = k / 224, j = k % 224;
    const PatchRecord rec{crop_patch(img, {i + 16, j + 16}), PatchClass::background, "x", {i + 16, j + 16}};
    const Tensor logits = m.forward(reshape(rec.tensor(), {1, 32, 32, 3}), Mode::infer);
    const real z0 = logits[0], z1 = logits[1];
    const real p = 1 / (1 + std::exp(z0 - z1));
    EXPECT_NEAR(pm.probability[k], p, 1e-12) << i << "," << j;
    EXPECT_EQ(pm.pixels[k], z1 > z0 ? 1 : 0) << i << "," << j;
  }
}

TEST(Predict, BatchSizeDoesNotChangeResults) {
  Model m = init_model(tiny_config(), Rng(5));
  const FundusImage img = scene_image(3);
  const PredictionMask a = predict_image(img, m, PredictMode::valid, 1);
  const PredictionMask b = predict_image(img, m, PredictMode::valid, 512);
  EXPECT_TRUE(a.probability == b.probability);
  EXPECT_TRUE(a.pixels == b.pixels);
}

TEST(Predict, ConstantModelGivesConstantMask) {
  Model yes = constant_model(0, 1);
  const PredictionMask pm = predict_image(scene_image(4), yes);
  EXPECT_TRUE(pm.pixels == Tensor::ones({224, 224}));
  Model no = constant_model(1, 0);
  EXPECT_TRUE(predict_image(scene_image(4), no).pixels == Tensor({224, 224}));
  Model tie = constant_model(0.5, 0.5);
  EXPECT_TRUE(predict_image(scene_image(4), tie).pixels == Tensor({224, 224}));
}

TEST(Predict, PaddedInteriorMatchesValid) {
  Image8 raw = synth::scene(256, 5).image;
  for (std::size_t y = 0; y < 256; ++y)
    for (std::size_t x = 0; x < 256; ++x)
      if (y < 16 || x < 16 || y >= 240 || x >= 240)
        for (std::size_t ch = 0; ch < 3; ++ch) raw.at(y, x, ch) = 0;
  const FundusImage img = image_from_8bit("bordered", raw);
  Model m = init_model(tiny_config(), Rng(6));
  const PredictionMask valid = predict_image(img, m, PredictMode::valid);
  const PredictionMask padded = predict_image(img, m, PredictMode::padded);
  ASSERT_EQ(padded.pixels.shape(), (Shape{256, 256}));
  EXPECT_EQ(padded.origin_row, 0u);
  for (std::size_t i = 0; i < 224; ++i)
    for (std::size_t j = 0; j < 224; ++j) {
      EXPECT_EQ(padded.probability.at(i + 16, j + 16), valid.probability.at(i, j));
      EXPECT_EQ(padded.pixels.at(i + 16, j + 16), valid.pixels.at(i, j));
    }
}

TEST(Predict, RejectsBadInputs) {
  Model m = init_model(tiny_config(), Rng(7));
  const FundusImage small = image_from_8bit("s", synth::scene(64, 1).image);
  EXPECT_THROW(predict_image(small, m), ShapeError);
  EXPECT_THROW(predict_image(scene_image(1), m, PredictMode::valid, 0), ConfigError);
  EXPECT_THROW(parse_mode("full"), ConfigError);
  EXPECT_EQ(parse_mode("padded"), PredictMode::padded);
}

// ---- output files --------------------------------------------------------------

TEST(Output, MaskPngRoundTrip) {
  Model m = init_model(unit_config(), Rng(9));
  const FundusImage img = scene_image(6);
  PredictionMask pm = predict_image(img, m);
  for (std::size_t k = 0; k < pm.pixels.size(); k += 7) pm.pixels[k] = 1 - pm.pixels[k];
  const fs::path p = output_name(scratch("out"), img.id, pm.mode, "mask");
  EXPECT_EQ(p.filename(), "scene.valid.mask.png");
  write_mask(pm, p);
  EXPECT_TRUE(read_mask_png(p) == pm.pixels);
  const Image8 raw = read_image(p);
  for (std::size_t k = 0; k < pm.pixels.size(); ++k) EXPECT_EQ(raw.pixels[k], pm.pixels[k] == 1 ? 255 : 0);
}

TEST(Output, ZeroMaskIsBlackAndOverlayKeepsImage) {
  Model m = constant_model(1, 0);
  const FundusImage img = scene_image(7);
  const PredictionMask pm = predict_image(img, m);
  const Image8 mask = mask_image(pm);
  EXPECT_TRUE(std::all_of(mask.pixels.begin(), mask.pixels.end(), [](std::uint8_t v) { return v == 0; }));
  const Image8 over = overlay_image(img, pm);
  EXPECT_EQ(over.width, 224u);
  EXPECT_EQ(over.at(0, 0, 1), crop_patch(img, {32, 32})[1]);

  Model all = constant_model(0, 1);
  const Image8 lit = overlay_image(img, predict_image(img, all));
  EXPECT_EQ(lit.at(5, 5, 1), 255);
  write_overlay(img, pm, scratch("overlay.png"));
  write_probability(pm, scratch("prob.png"));
  EXPECT_EQ(read_image(scratch("prob.png")).width, 224u);
}
