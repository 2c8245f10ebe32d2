#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "exuseg/training.hpp"
#include "oracles.hpp"
#include "exuseg/synthetic.hpp"

using namespace exuseg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() { return ModelConfig::from_channels({2, 2, 3, 3, 4, 4, 4, 4}, 0.5); }

TrainSchedule small_schedule() {
  TrainSchedule s;
  s.shard_count = 2;
  s.shard_size = 20;
  s.epochs_per_shard = 2;
  s.streaks = 2;
  s.batch_size = 10;
  s.eval_batch = 16;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "exuseg_test_training";
  fs::create_directories(dir);
  return dir / name;
}

void expect_same_state(Model& a, Model& b) {
  auto sa = a.state_tensors();
  auto sb = b.state_tensors();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].name, sb[i].name);
    EXPECT_TRUE(*sa[i].tensor == *sb[i].tensor) << sa[i].name;
  }
}

}  // namespace

// ---- loss --------------------------------------------------------------------

TEST(Loss, UniformLogitsGiveLn2) {
  const auto r = softmax_cross_entropy(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {1, 0}));
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(r.grad_logits[0], -0.5, 1e-12);
  EXPECT_NEAR(r.grad_logits[1], 0.5, 1e-12);
}

TEST(Loss, LargeLogitsStayFinite) {
  const auto r = softmax_cross_entropy(Tensor({1, 2}, {1000, 0}), Tensor({1, 2}, {1, 0}));
  EXPECT_NEAR(r.loss, 0, 1e-12);
  const auto w = softmax_cross_entropy(Tensor({1, 2}, {1000, 0}), Tensor({1, 2}, {0, 1}));
  EXPECT_NEAR(w.loss, 1000, 1e-9);
  EXPECT_TRUE(w.grad_logits.all_finite());
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng r(11);
  Tensor z = rng_normal(r, {4, 2}, 0, 2);
  Tensor y({4, 2});
  for (std::size_t i = 0; i < 4; ++i) y.at(i, r.below(2)) = 1;
  const Tensor g = softmax_cross_entropy(z, y).grad_logits;
  const Tensor n = oracle::numeric_gradient(z, [&] {
    long double loss = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const long double a = z.at(i, 0), b = z.at(i, 1);
      const long double lse = std::max(a, b) + std::log(std::exp(a - std::max(a, b)) + std::exp(b - std::max(a, b)));
      loss += lse - (y.at(i, 0) == 1 ? a : b);
    }
    return loss / 4;
  });
  EXPECT_LT(oracle::max_rel_err(g, n), 1e-8);
}

TEST(Loss, RejectsMalformedLabels) {
  const Tensor z({2, 2});
  EXPECT_THROW(softmax_cross_entropy(z, Tensor({2, 2}, {1, 0, 1, 1})), Error);
  EXPECT_THROW(softmax_cross_entropy(z, Tensor({2, 2}, {1, 0, 0, 0})), Error);
  EXPECT_THROW(softmax_cross_entropy(z, Tensor({2, 2}, {1, 0, 0.5, 0.5})), Error);
  EXPECT_THROW(softmax_cross_entropy(z, Tensor({1, 2}, {1, 0})), ShapeError);
}

TEST(Loss, PropertyFiniteAndNonNegative) {
  Rng r(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + r.below(8);
    Tensor z = rng_normal(r, {n, 2}, 0, 300);
    Tensor y({n, 2});
    for (std::size_t i = 0; i < n; ++i) y.at(i, r.below(2)) = 1;
    const auto res = softmax_cross_entropy(z, y);
    EXPECT_TRUE(std::isfinite(res.loss));
    EXPECT_GE(res.loss, 0);
  }
}

// ---- adam --------------------------------------------------------------------

TEST(Adam, ZeroGradientIsExactIdentity) {
  Param p("w", Tensor({3}, {1.5, -2, 0.25}));
  const Tensor before = p.value;
  AdamState s = AdamState::for_params({&p});
  for (int i = 0; i < 1000; ++i) adam_step({&p}, s);
  EXPECT_TRUE(p.value == before);
  EXPECT_EQ(s.t, 1000u);
}

TEST(Adam, FirstStepClosedForm) {
  Param p("w", Tensor({1}, {1.0}));
  p.grad[0] = 0.5;
  AdamState s = AdamState::for_params({&p});
  adam_step({&p}, s);
  // t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.value[0], 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[0], 0.9999, 1e-10);
  EXPECT_EQ(s.t, 1u);
  EXPECT_GE(s.v[0][0], 0);
}

TEST(Adam, ConstantGradientUpdateTendsToLrSign) {
  for (double g : {0.5, -3.0, 1e-3}) {
    Param p("w", Tensor({1}, {0.0}));
    p.grad[0] = g;
    AdamState s = AdamState::for_params({&p});
    double prev = 0, step = 0;
    for (int i = 0; i < 10000; ++i) {
      adam_step({&p}, s);
      step = p.value[0] - prev;
      prev = p.value[0];
    }
    EXPECT_NEAR(step, -1e-4 * (g > 0 ? 1 : -1), 1e-4 * 1e-3) << g;
  }
}

TEST(Adam, ShapeMismatch) {
  Param p("w", Tensor({2}));
  p.grad = Tensor({3});
  AdamState s = AdamState::for_params({&p});
  EXPECT_THROW(adam_step({&p}, s), ShapeError);
  Param q("q", Tensor({2}));
  EXPECT_THROW(adam_step({&p, &q}, s), ShapeError);
}

// ---- schedule ------------------------------------------------------------------

TEST(Schedule, FullScaleDefaultsAndValidation) {
  const TrainSchedule p = TrainSchedule::full_scale();
  EXPECT_EQ(p.patches_needed(), 200000u);
  EXPECT_EQ(p.batches_per_epoch(), 800u);
  EXPECT_EQ(p.streaks * p.epochs_per_shard, 1500u);
  EXPECT_NO_THROW(p.validate());
  TrainSchedule bad = p;
  bad.batch_size = 300;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = p;
  bad.streaks = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Schedule, PlanOrderSequentialAndInterleaved) {
  TrainSchedule s = small_schedule();
  const auto seq = schedule_plan(s);
  ASSERT_EQ(seq.size(), 8u);
  EXPECT_EQ(seq[0], (ScheduleStep{0, 0, 0}));
  EXPECT_EQ(seq[1], (ScheduleStep{0, 0, 1}));
  EXPECT_EQ(seq[2], (ScheduleStep{0, 1, 0}));
  EXPECT_EQ(seq[4], (ScheduleStep{1, 0, 0}));
  s.interleaved = true;
  const auto il = schedule_plan(s);
  EXPECT_EQ(il[1], (ScheduleStep{0, 1, 0}));
  EXPECT_EQ(il[2], (ScheduleStep{0, 0, 1}));
}

TEST(Schedule, JsonRoundTrip) {
  TrainSchedule s = small_schedule();
  s.seed = 77;
  s.interleaved = true;
  const nlohmann::json j = s;
  EXPECT_EQ(j.get<TrainSchedule>(), s);
}

// ---- trainer -------------------------------------------------------------------

TEST(Trainer, ShardsAreDisjointContiguousSlices) {
  const PatchSet data = synth::patches(45, 1);
  Trainer t(data, tiny_config(), small_schedule(), Rng(2));
  std::set<std::size_t> seen;
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(t.shard_indices(k).size(), 20u);
    for (std::size_t i : t.shard_indices(k)) EXPECT_TRUE(seen.insert(i).second);
  }
}

TEST(Trainer, InsufficientPatchesRejected) {
  const PatchSet data = synth::patches(39, 1);
  EXPECT_THROW(Trainer(data, tiny_config(), small_schedule(), Rng(2)), ConfigError);
}

TEST(Trainer, DeterministicLossCurve) {
  const PatchSet data = synth::patches(40, 3);
  const Checkpoint a = train(data, tiny_config(), small_schedule(), Rng(4));
  const Checkpoint b = train(data, tiny_config(), small_schedule(), Rng(4));
  ASSERT_EQ(a.history.size(), 8u);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  const Checkpoint c = train(data, tiny_config(), small_schedule(), Rng(5));
  EXPECT_NE(a.history, c.history);
  for (const auto& m : a.history) {
    EXPECT_TRUE(std::isfinite(m.loss));
    EXPECT_GE(m.train_accuracy, 0);
    EXPECT_LE(m.train_accuracy, 1);
  }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const PatchSet data = synth::patches(40, 6);
  const Checkpoint full = train(data, tiny_config(), small_schedule(), Rng(7));

  Trainer first(data, tiny_config(), small_schedule(), Rng(7));
  for (int i = 0; i < 3; ++i) first.run_epoch();
  const fs::path p = scratch("mid.exsg");
  save_checkpoint(first.checkpoint(), p);

  const Checkpoint mid = load_checkpoint(p);
  EXPECT_EQ(mid.next_step, 3u);
  EXPECT_EQ(mid.position, (ScheduleStep{0, 1, 1}));
  Trainer second(data, mid);
  const Checkpoint resumed = train(second);
  EXPECT_EQ(resumed.history, full.history);
  EXPECT_EQ(encode_checkpoint(resumed), encode_checkpoint(full));
}

TEST(Trainer, EarlyStopCallbackAndCompletion) {
  const PatchSet data = synth::patches(40, 8);
  Trainer t(data, tiny_config(), small_schedule(), Rng(9));
  std::size_t calls = 0;
  const Checkpoint ck = train(t, [&](const EpochMetrics&, Trainer&) { return ++calls < 2; });
  EXPECT_EQ(calls, 2u);
  EXPECT_FALSE(ck.complete());
  const Checkpoint rest = train(t);
  EXPECT_TRUE(rest.complete());
  EXPECT_THROW(t.run_epoch(), Error);
}

TEST(Trainer, DivergenceReportsBatch) {
  const PatchSet data = synth::patches(40, 10);
  Trainer t(data, tiny_config(), small_schedule(), Rng(11));
  for (Param* p : t.model().parameters())
    if (p->name == "weight") p->value.fill(std::numeric_limits<real>::infinity());
  try {
    t.run_epoch();
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.batch(), 0u);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

// ---- checkpoint ------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  const PatchSet data = synth::patches(40, 12);
  Trainer t(data, tiny_config(), small_schedule(), Rng(13));
  t.run_epoch();
  const Checkpoint ck = t.checkpoint();
  const fs::path p = scratch("rt.exsg");
  save_checkpoint(ck, p);
  const Checkpoint back = load_checkpoint(p);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_TRUE(back.tensors[i].second == ck.tensors[i].second);
  }
  EXPECT_EQ(back.adam_t, ck.adam_t);
  EXPECT_EQ(back.rng, ck.rng);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.history, ck.history);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  Model m = back.model();
  expect_same_state(m, t.model());
}

TEST(Checkpoint, RunningStatsArePersisted) {
  const PatchSet data = synth::patches(40, 14);
  Trainer t(data, tiny_config(), small_schedule(), Rng(15));
  t.run_epoch();
  const Checkpoint ck = t.checkpoint();
  bool found = false;
  for (const auto& [name, tensor] : ck.tensors)
    if (name.find("running_var") != std::string::npos) {
      found = true;
      EXPECT_FALSE(tensor == Tensor::ones(tensor.shape())) << name;
    }
  EXPECT_TRUE(found);
}

TEST(Checkpoint, TruncatedFutureAndCorrupted) {
  const PatchSet data = synth::patches(40, 16);
  Trainer t(data, tiny_config(), small_schedule(), Rng(17));
  const auto bytes = encode_checkpoint(t.checkpoint());
  for (std::size_t keep : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    auto cut = bytes;
    cut.resize(keep);
    EXPECT_THROW(decode_checkpoint(cut, "mem"), CorruptionError) << keep;
  }
  auto future = bytes;
  future[4] = 2;
  EXPECT_THROW(decode_checkpoint(future, "mem"), VersionError);
  auto flipped = bytes;
  flipped[bytes.size() - 40] ^= 1;
  EXPECT_THROW(decode_checkpoint(flipped, "mem"), CorruptionError);
  EXPECT_THROW(load_checkpoint(scratch("missing.exsg")), IoError);
}

TEST(Checkpoint, ResumeRejectsOtherArchive) {
  const PatchSet data = synth::patches(40, 18);
  Trainer t(data, tiny_config(), small_schedule(), Rng(19));
  const Checkpoint ck = t.checkpoint();
  const PatchSet bigger = synth::patches(41, 18);
  EXPECT_THROW(Trainer(bigger, ck), ConfigError);
}
