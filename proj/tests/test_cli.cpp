#include <gtest/gtest.h>

#include <sstream>

#include "exuseg/commands.hpp"
#include "exuseg/synthetic.hpp"

using namespace exuseg;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("exuseg_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<std::uint8_t> bytes(const fs::path& p) { return read_file(p); }

std::size_t lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string s; std::getline(in, s);) ++n;
  return n;
}

// Tiny network and a schedule of 2 shards x 40 patches, 2 epochs, 1 streak.
RunConfig desk(const fs::path& data, const fs::path& out, std::vector<std::string> extra = {}) {
  nlohmann::json j = {{"paths",
                       {{"images", (data / "images").string()},
                        {"masks", (data / "masks").string()},
                        {"train_list", (data / "train.txt").string()},
                        {"test_list", (data / "test.txt").string()},
                        {"output", out.string()}}},
                      {"extraction", {{"per_class", 20}, {"seed", 7}}},
                      {"model", {{"conv_channels", {2, 2, 3, 3, 4, 4, 4, 4}}}},
                      {"schedule",
                       {{"shard_count", 2},
                        {"shard_size", 40},
                        {"epochs_per_shard", 2},
                        {"streaks", 1},
                        {"batch_size", 10},
                        {"seed", 3},
                        {"eval_batch", 40}}},
                      {"optimizer", {{"lr", 1e-3}}}};
  return parse_config(j, extra);
}

struct Pipeline : ::testing::Test {
  fs::path root, data;
  void SetUp() override {
    root = scratch(::testing::UnitTest::GetInstance()->current_test_info()->name());
    data = root / "data";
    synth::write_dataset(data, 2, 1, 256, 11);
  }
};

}  // namespace

// ---- configuration -------------------------------------------------------------------

TEST(Config, OverridesParseJsonValues) {
  nlohmann::json doc = {{"schedule", {{"streaks", 3}}}};
  apply_override(doc, "schedule.streaks=1");
  apply_override(doc, "paths.output=some/dir");
  apply_override(doc, "model.conv_channels=[1,1,1,1,1,1,1,1]");
  apply_override(doc, "schedule.interleaved=true");
  EXPECT_EQ(doc["schedule"]["streaks"], 1);
  EXPECT_EQ(doc["paths"]["output"], "some/dir");
  EXPECT_EQ(doc["model"]["conv_channels"].size(), 8u);
  EXPECT_EQ(doc["schedule"]["interleaved"], true);
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a..b=1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "schedule.streaks.x=1"), ConfigError);
}

TEST(Config, DefaultsAreTheFullSchedule) {
  const RunConfig c = parse_config(nlohmann::json::object());
  EXPECT_EQ(c.schedule, TrainSchedule::full_scale());
  EXPECT_EQ(c.schedule.patches_needed(), 200000u);
  EXPECT_EQ(c.schedule.streaks * c.schedule.epochs_per_shard, 1500u);
  EXPECT_EQ(c.extraction.per_class, 2500u);
  EXPECT_EQ(c.model.layers.size(), ModelConfig::default_config().layers.size());
  EXPECT_EQ(c.inference.mode, PredictMode::valid);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config({{"shedule", {}}}), ConfigError);
  EXPECT_THROW(parse_config({{"schedule", {{"epochs", 3}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"inference", {{"mode", "same"}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"schedule", {{"shard_size", 45}, {"batch_size", 10}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"schedule", {{"streaks", "three"}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"optimizer", {{"lr", 0}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"model", {{"conv_channels", {1, 2}}}}}), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  const RunConfig a = parse_config(nlohmann::json::object(), {"schedule.shard_size=100", "schedule.batch_size=20",
                                                              "inference.mode=padded", "paths.mask_suffix=_EX"});
  const nlohmann::json j = a;
  const RunConfig b = parse_config(j);
  EXPECT_EQ(nlohmann::json(b), j);
  EXPECT_EQ(b.inference.mode, PredictMode::padded);
  EXPECT_EQ(b.paths.mask_suffix, "_EX");
}

TEST(Config, ShippedConfigsParse) {
  const fs::path dir = fs::path(EXUSEG_SOURCE_DIR) / "configs";
  const RunConfig full = load_config(dir / "full.json");
  EXPECT_EQ(full.schedule, TrainSchedule::full_scale());
  const RunConfig d = load_config(dir / "desk.json");
  EXPECT_LT(d.schedule.patches_needed(), full.schedule.patches_needed());
}

// ---- prepare -------------------------------------------------------------------------

TEST_F(Pipeline, PrepareWritesBothArchives) {
  const RunConfig c = desk(data, root / "run");
  std::ostringstream out;
  ASSERT_EQ(cmd_prepare(c, out), 0);
  const PatchSet train = load_patchset(c.paths.train_archive());
  const PatchSet test = load_patchset(c.paths.test_archive());
  EXPECT_EQ(train.size(), 2u * 2 * 20);
  EXPECT_EQ(test.size(), 1u * 2 * 20);
  EXPECT_EQ(train.class_counts()[1], 40u);
  EXPECT_EQ(train.provenance.at("records"), 80);
  EXPECT_TRUE(fs::exists(c.paths.output / "prepare.json"));
  EXPECT_NE(out.str().find("40 exudate"), std::string::npos);
}

TEST_F(Pipeline, PrepareIsByteIdenticalOnRerun) {
  const RunConfig a = desk(data, root / "a");
  const RunConfig b = desk(data, root / "b");
  std::ostringstream out;
  cmd_prepare(a, out);
  cmd_prepare(b, out);
  EXPECT_EQ(bytes(a.paths.train_archive()), bytes(b.paths.train_archive()));
  EXPECT_EQ(bytes(a.paths.test_archive()), bytes(b.paths.test_archive()));
  const RunConfig other = desk(data, root / "c", {"extraction.seed=8"});
  cmd_prepare(other, out);
  EXPECT_NE(bytes(a.paths.train_archive()), bytes(other.paths.train_archive()));
}

TEST_F(Pipeline, PrepareRejectsEmptyListWithoutWriting) {
  write_file(data / "empty.txt", {});
  const RunConfig c = desk(data, root / "run", {"paths.train_list=" + (data / "empty.txt").string()});
  std::ostringstream out;
  EXPECT_THROW(cmd_prepare(c, out), ConfigError);
  EXPECT_FALSE(fs::exists(c.paths.train_archive()));
}

TEST_F(Pipeline, PrepareListsEveryUnpairableStem) {
  const std::string list = "scene_01\nmissing_a\n\n# comment\nmissing_b\n";
  write_file(data / "bad.txt", std::vector<std::uint8_t>(list.begin(), list.end()));
  const RunConfig c = desk(data, root / "run", {"paths.train_list=" + (data / "bad.txt").string()});
  std::ostringstream out;
  try {
    cmd_prepare(c, out);
    FAIL() << "expected an IoError";
  } catch (const IoError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("missing_a"), std::string::npos);
    EXPECT_NE(m.find("missing_b"), std::string::npos);
    EXPECT_EQ(m.find("'scene_01'"), std::string::npos);
  }
}

// ---- train ---------------------------------------------------------------------------

TEST_F(Pipeline, TrainWritesLoadableCheckpointAndCsv) {
  const RunConfig c = desk(data, root / "run");
  std::ostringstream out;
  cmd_prepare(c, out);
  ASSERT_EQ(cmd_train(c, {}, out), 0);
  const Checkpoint ck = load_checkpoint(c.paths.checkpoint());
  EXPECT_TRUE(ck.complete());
  EXPECT_EQ(ck.history.size(), 4u);
  EXPECT_EQ(lines(c.paths.metrics_csv()), 1u + 4u);
  std::ifstream csv(c.paths.metrics_csv());
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,streak,shard,epoch,loss,train_accuracy");
}

TEST_F(Pipeline, TrainResumeMatchesUninterruptedRun) {
  const RunConfig whole = desk(data, root / "whole");
  const RunConfig parts = desk(data, root / "parts");
  std::ostringstream out;
  cmd_prepare(whole, out);
  cmd_prepare(parts, out);
  ASSERT_EQ(cmd_train(whole, {}, out), 0);

  TrainOptions first;
  first.max_epochs = 1;
  ASSERT_EQ(cmd_train(parts, first, out), 0);
  EXPECT_FALSE(load_checkpoint(parts.paths.checkpoint()).complete());
  TrainOptions rest;
  rest.resume = true;
  ASSERT_EQ(cmd_train(parts, rest, out), 0);
  EXPECT_EQ(bytes(whole.paths.checkpoint()), bytes(parts.paths.checkpoint()));
  EXPECT_EQ(bytes(whole.paths.metrics_csv()), bytes(parts.paths.metrics_csv()));
}

TEST_F(Pipeline, TrainPlanOnlyAcceptsFullSchedule) {
  const RunConfig c = parse_config(nlohmann::json::object());
  std::ostringstream out;
  TrainOptions o;
  o.plan_only = true;
  EXPECT_EQ(cmd_train(c, o, out), 0);
  EXPECT_NE(out.str().find("1500 epochs per shard"), std::string::npos);
  EXPECT_NE(out.str().find("patches required: 200000"), std::string::npos);
}

TEST_F(Pipeline, TrainNeedsAnArchive) {
  const RunConfig c = desk(data, root / "run");
  std::ostringstream out;
  EXPECT_THROW(cmd_train(c, {}, out), IoError);
}

// ---- predict / evaluate ------------------------------------------------------------

TEST_F(Pipeline, PredictWritesMasksOfModeExtent) {
  const RunConfig c = desk(data, root / "run", {"model.conv_channels=[1,1,1,1,1,1,1,1]", "schedule.epochs_per_shard=1"});
  std::ostringstream out;
  cmd_prepare(c, out);
  cmd_train(c, {}, out);

  ASSERT_EQ(cmd_predict(c, {}, out), 0);
  const Image8 valid = read_image(output_name(c.paths.predictions(), "scene_03", PredictMode::valid, "mask"));
  EXPECT_EQ(valid.height, 224u);
  EXPECT_EQ(valid.width, 224u);
  EXPECT_TRUE(fs::exists(output_name(c.paths.predictions(), "scene_03", PredictMode::valid, "overlay")));
  EXPECT_TRUE(fs::exists(output_name(c.paths.predictions(), "scene_03", PredictMode::valid, "prob")));

  RunConfig padded = c;
  padded.inference.mode = PredictMode::padded;
  PredictOptions one;
  one.images = {data / "images" / "scene_01.png"};
  ASSERT_EQ(cmd_predict(padded, one, out), 0);
  const Image8 p = read_image(output_name(c.paths.predictions(), "scene_01", PredictMode::padded, "mask"));
  EXPECT_EQ(p.height, 256u);

  PredictOptions missing;
  missing.checkpoint = root / "nope.exsg";
  EXPECT_THROW(cmd_predict(c, missing, out), IoError);
}

TEST_F(Pipeline, EvaluatePerfectPredictions) {
  const RunConfig c = desk(data, root / "run");
  // Predictions equal to the cropped ground truth.
  for (const char* id : {"scene_01", "scene_02"}) {
    PredictionMask pm;
    pm.id = id;
    pm.pixels = truth_for(load_mask(data / "masks" / (std::string(id) + ".png")), PredictMode::valid);
    write_mask(pm, output_name(c.paths.predictions(), id, PredictMode::valid, "mask"));
  }
  std::ostringstream out;
  ASSERT_EQ(cmd_evaluate(c, {}, out), 0);
  const auto j = nlohmann::json::parse(read_file(c.paths.output / "evaluation.json"));
  ASSERT_EQ(j.at("images").size(), 2u);
  for (const auto& r : j.at("images")) EXPECT_EQ(r.at("accuracy"), 1.0);
  EXPECT_EQ(j.at("aggregate").at("accuracy"), 1.0);
  EXPECT_EQ(j.at("aggregate").at("total"), 2 * 224 * 224);
}

TEST_F(Pipeline, EvaluateFixtureMatrixPrintsTableFigures) {
  const RunConfig c = desk(data, root / "run");
  const std::string fixture = R"({"table": [[95862, 1665], [1651, 1174]]})";
  write_file(root / "m.json", std::vector<std::uint8_t>(fixture.begin(), fixture.end()));
  EvaluateOptions o;
  o.matrices = root / "m.json";
  std::ostringstream out;
  ASSERT_EQ(cmd_evaluate(c, o, out), 0);
  for (const char* v : {"0.96696", "0.98307", "0.41353", "100352"}) EXPECT_NE(out.str().find(v), std::string::npos) << v;
}

TEST_F(Pipeline, EvaluateReportsMismatchAndKeepsValidPairs) {
  const RunConfig c = desk(data, root / "run");
  PredictionMask good;
  good.pixels = truth_for(load_mask(data / "masks" / "scene_01.png"), PredictMode::valid);
  write_mask(good, output_name(c.paths.predictions(), "scene_01", PredictMode::valid, "mask"));
  PredictionMask wrong;
  wrong.pixels = Tensor({100, 100});
  write_mask(wrong, output_name(c.paths.predictions(), "scene_02", PredictMode::valid, "mask"));
  write_mask(good, output_name(c.paths.predictions(), "orphan", PredictMode::valid, "mask"));

  std::ostringstream out;
  EXPECT_EQ(cmd_evaluate(c, {}, out), 1);
  const auto j = nlohmann::json::parse(read_file(c.paths.output / "evaluation.json"));
  ASSERT_EQ(j.at("images").size(), 1u);
  EXPECT_EQ(j.at("images")[0].at("id"), "scene_01");
  ASSERT_EQ(j.at("errors").size(), 2u);
  EXPECT_NE(out.str().find("scene_02"), std::string::npos);
  EXPECT_NE(out.str().find("orphan"), std::string::npos);
}

// ---- gradcheck -----------------------------------------------------------------------

TEST(GradcheckCommand, TinyModelPassesAndListsLayers) {
  const RunConfig c =
      parse_config(nlohmann::json::object(), {"model.conv_channels=[2,2,3,3,4,4,4,4]", "gradcheck.max_probes=8"});
  std::ostringstream out;
  GradcheckCommandOptions o;
  o.model_seed = 1;
  EXPECT_EQ(cmd_gradcheck(c, o, out), 0);
  EXPECT_NE(out.str().find("gradient check PASSED"), std::string::npos);
  o.json = true;
  std::ostringstream js;
  cmd_gradcheck(c, o, js);
  EXPECT_EQ(nlohmann::json::parse(js.str()).at("layers").size(), 17u);
}
