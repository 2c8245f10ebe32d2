#pragma once

// Mini-batch training over the shard/streak schedule: the patch set is split
// into equal shards after one seeded shuffle; a streak trains every shard in
// turn for `epochs_per_shard` passes each. Training is single-threaded and
// bit-reproducible given (seed, data, schedule).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/adam.hpp"
#include "exuseg/container.hpp"
#include "exuseg/dataset.hpp"
#include "exuseg/log.hpp"
#include "exuseg/loss.hpp"
#include "exuseg/model.hpp"

namespace exuseg {

struct TrainSchedule {
  std::size_t shard_count = 5;
  std::size_t shard_size = 40000;
  std::size_t epochs_per_shard = 500;
  std::size_t streaks = 3;
  std::size_t batch_size = 50;
  std::uint64_t seed = 0;
  // Visit shards round-robin per epoch instead of finishing one shard first.
  bool interleaved = false;
  // Shard-epochs between periodic checkpoints; 0 keeps only the final one.
  std::size_t checkpoint_every = 1;
  std::size_t eval_batch = 500;

  static TrainSchedule full_scale() { return {}; }

  void validate() const {
    if (shard_count == 0 || shard_size == 0 || epochs_per_shard == 0 || streaks == 0 || batch_size == 0 || eval_batch == 0)
      throw ConfigError("schedule: all counts must be positive");
    if (shard_size % batch_size != 0)
      throw ConfigError("schedule: shard_size " + std::to_string(shard_size) + " is not divisible by batch_size " +
                        std::to_string(batch_size));
  }

  std::size_t patches_needed() const { return shard_count * shard_size; }
  std::size_t batches_per_epoch() const { return shard_size / batch_size; }
  std::size_t total_shard_epochs() const { return streaks * shard_count * epochs_per_shard; }

  std::string describe() const {
    std::ostringstream os;
    os << streaks << " streak(s) x " << shard_count << " shard(s) of " << shard_size << " patches x " << epochs_per_shard
       << " epoch(s) per shard = " << streaks * epochs_per_shard << " epochs per shard, " << total_shard_epochs()
       << " shard-epochs, " << batches_per_epoch() << " mini-batches of " << batch_size << " per shard-epoch"
       << (interleaved ? " (interleaved)" : " (sequential shards)");
    return os.str();
  }

  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"shard_count", s.shard_count},           {"shard_size", s.shard_size},
       {"epochs_per_shard", s.epochs_per_shard}, {"streaks", s.streaks},
       {"batch_size", s.batch_size},             {"seed", s.seed},
       {"interleaved", s.interleaved},           {"checkpoint_every", s.checkpoint_every},
       {"eval_batch", s.eval_batch}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  s = TrainSchedule{};
  s.shard_count = j.value("shard_count", s.shard_count);
  s.shard_size = j.value("shard_size", s.shard_size);
  s.epochs_per_shard = j.value("epochs_per_shard", s.epochs_per_shard);
  s.streaks = j.value("streaks", s.streaks);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.seed = j.value("seed", s.seed);
  s.interleaved = j.value("interleaved", s.interleaved);
  s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  s.eval_batch = j.value("eval_batch", s.eval_batch);
}

struct ScheduleStep {
  std::size_t streak = 0;
  std::size_t shard = 0;
  std::size_t epoch = 0;
  friend bool operator==(const ScheduleStep&, const ScheduleStep&) = default;
};

// Order in which shard-epochs are run.
inline std::vector<ScheduleStep> schedule_plan(const TrainSchedule& s) {
  std::vector<ScheduleStep> plan;
  plan.reserve(s.total_shard_epochs());
  for (std::size_t st = 0; st < s.streaks; ++st) {
    if (s.interleaved) {
      for (std::size_t e = 0; e < s.epochs_per_shard; ++e)
        for (std::size_t k = 0; k < s.shard_count; ++k) plan.push_back({st, k, e});
    } else {
      for (std::size_t k = 0; k < s.shard_count; ++k)
        for (std::size_t e = 0; e < s.epochs_per_shard; ++e) plan.push_back({st, k, e});
    }
  }
  return plan;
}

struct EpochMetrics {
  std::size_t step = 0;  // position in the plan, 0-based
  std::size_t streak = 0;
  std::size_t shard = 0;
  std::size_t epoch = 0;
  double loss = 0;            // mean mini-batch loss over the epoch
  double train_accuracy = 0;  // current shard, inference mode, after the epoch

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = {{"step", m.step}, {"streak", m.streak}, {"shard", m.shard}, {"epoch", m.epoch},
       {"loss", m.loss}, {"train_accuracy", m.train_accuracy}};
}

inline void from_json(const nlohmann::json& j, EpochMetrics& m) {
  m.step = j.at("step").get<std::size_t>();
  m.streak = j.at("streak").get<std::size_t>();
  m.shard = j.at("shard").get<std::size_t>();
  m.epoch = j.at("epoch").get<std::size_t>();
  m.loss = j.at("loss").get<double>();
  m.train_accuracy = j.at("train_accuracy").get<double>();
}

// Raised when a mini-batch produces a non-finite loss or activation.
class DivergenceError : public Error {
public:
  DivergenceError(ScheduleStep at, std::size_t batch, const std::string& why)
      : Error("training diverged at streak " + std::to_string(at.streak) + ", shard " + std::to_string(at.shard) +
              ", epoch " + std::to_string(at.epoch) + ", batch " + std::to_string(batch) + ": " + why),
        batch_(batch) {}
  std::size_t batch() const { return batch_; }

private:
  std::size_t batch_;
};

// ---- checkpoint ----------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  TrainSchedule schedule;
  std::vector<std::pair<std::string, Tensor>> tensors;  // model state, layer order
  AdamHyper adam_hyper;
  std::uint64_t adam_t = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  // Next shard-epoch to run; equals the plan length once training is done.
  std::size_t next_step = 0;
  ScheduleStep position;
  std::size_t position_batch = 0;
  Rng rng;
  std::size_t patch_count = 0;
  std::vector<EpochMetrics> history;

  bool complete() const { return next_step >= schedule.total_shard_epochs(); }

  // Rebuilds the model with these weights and running statistics.
  Model model() const {
    Model m(config);
    auto dst = m.state_tensors();
    if (dst.size() != tensors.size()) throw FormatError("checkpoint tensor count does not match model config");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].name != tensors[i].first || dst[i].tensor->shape() != tensors[i].second.shape())
        throw FormatError("checkpoint tensor '" + tensors[i].first + "' does not match model slot '" + dst[i].name + "'");
      *dst[i].tensor = tensors[i].second;
    }
    return m;
  }

  AdamState adam() const { return AdamState{adam_hyper, adam_t, adam_m, adam_v}; }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json index = nlohmann::json::array();
  ByteWriter w;
  std::uint64_t offset = 0;
  auto put = [&](const std::string& name, const Tensor& t) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    for (real v : t.data()) w.f64(static_cast<double>(v));
    offset += t.size() * 8;
  };
  for (const auto& [name, t] : ck.tensors) put(name, t);
  for (std::size_t i = 0; i < ck.adam_m.size(); ++i) put("adam.m." + std::to_string(i), ck.adam_m[i]);
  for (std::size_t i = 0; i < ck.adam_v.size(); ++i) put("adam.v." + std::to_string(i), ck.adam_v[i]);

  Container c;
  c.magic = "EXSG";
  c.version = ck.version;
  c.manifest = {
      {"format", "EXSG"},
      {"version", ck.version},
      {"dtype", "f64le"},
      {"model_config", ck.config},
      {"schedule", ck.schedule},
      {"adam", {{"lr", ck.adam_hyper.lr}, {"beta1", ck.adam_hyper.beta1}, {"beta2", ck.adam_hyper.beta2},
                {"eps", ck.adam_hyper.eps}, {"t", ck.adam_t}, {"slots", ck.adam_m.size()}}},
      {"position", {{"next_step", ck.next_step}, {"streak", ck.position.streak}, {"shard", ck.position.shard},
                    {"epoch", ck.position.epoch}, {"batch", ck.position_batch}, {"complete", ck.complete()}}},
      {"rng", {{"seed", ck.rng.seed()}, {"stream", ck.rng.stream()}, {"counter", ck.rng.counter()}}},
      {"patch_count", ck.patch_count},
      {"history", ck.history},
      {"tensors", index}};
  c.payload = w.take();
  return encode_container(c);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  const Container c = decode_container(bytes, "EXSG", kCheckpointVersion, origin);
  Checkpoint ck;
  try {
    const auto& m = c.manifest;
    ck.version = c.version;
    ck.config = m.at("model_config").get<ModelConfig>();
    ck.schedule = m.at("schedule").get<TrainSchedule>();
    const auto& a = m.at("adam");
    ck.adam_hyper = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                     a.at("eps").get<double>()};
    ck.adam_t = a.at("t").get<std::uint64_t>();
    const auto slots = a.at("slots").get<std::size_t>();
    const auto& p = m.at("position");
    ck.next_step = p.at("next_step").get<std::size_t>();
    ck.position = {p.at("streak").get<std::size_t>(), p.at("shard").get<std::size_t>(), p.at("epoch").get<std::size_t>()};
    ck.position_batch = p.at("batch").get<std::size_t>();
    const auto& r = m.at("rng");
    ck.rng = Rng(r.at("seed").get<std::uint64_t>(), r.at("stream").get<std::uint64_t>(), r.at("counter").get<std::uint64_t>());
    ck.patch_count = m.at("patch_count").get<std::size_t>();
    ck.history = m.at("history").get<std::vector<EpochMetrics>>();

    ByteReader payload(c.payload.data(), c.payload.size());
    std::vector<std::pair<std::string, Tensor>> all;
    for (const auto& e : m.at("tensors")) {
      Tensor t(e.at("shape").get<Shape>());
      if (e.at("count").get<std::size_t>() != t.size()) throw CorruptionError(origin + ": tensor count mismatch");
      for (real& v : t.data()) v = static_cast<real>(payload.f64());
      all.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    if (payload.remaining() != 0) throw CorruptionError(origin + ": trailing payload bytes");
    if (all.size() < 2 * slots) throw CorruptionError(origin + ": missing optimizer tensors");
    const std::size_t model_count = all.size() - 2 * slots;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (i < model_count)
        ck.tensors.push_back(std::move(all[i]));
      else if (i < model_count + slots)
        ck.adam_m.push_back(std::move(all[i].second));
      else
        ck.adam_v.push_back(std::move(all[i].second));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(origin + ": malformed manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(origin + ": invalid model config: " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// ---- batching helpers ------------------------------------------------------------

// Stacks records[idx[first..last)] into a [N,32,32,3] batch and [N,2] labels.
inline std::pair<Tensor, Tensor> make_batch(const PatchSet& data, const std::vector<std::size_t>& idx, std::size_t first,
                                            std::size_t last) {
  const std::size_t n = last - first;
  Tensor x({n, geom::kPatch, geom::kPatch, 3});
  Tensor y({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const PatchRecord& r = data.records[idx[first + i]];
    real* dst = x.ptr() + i * geom::kPatchValues;
    for (std::size_t k = 0; k < geom::kPatchValues; ++k) dst[k] = static_cast<real>(r.pixels[k]) / real{255};
    const auto oh = r.one_hot();
    y[i * 2] = oh[0];
    y[i * 2 + 1] = oh[1];
  }
  return {std::move(x), std::move(y)};
}

// Exudate is predicted iff its softmax probability exceeds 0.5; ties go to
// background.
inline bool predicts_exudate(const real* logits) { return softmax_prob(logits, 2, 1) > real{0.5}; }

// Fraction of `idx` classified correctly in inference mode.
inline double accuracy(Model& model, const PatchSet& data, const std::vector<std::size_t>& idx, std::size_t batch) {
  if (idx.empty()) return 0;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < idx.size(); first += batch) {
    const std::size_t last = std::min(idx.size(), first + batch);
    const auto [x, y] = make_batch(data, idx, first, last);
    const Tensor logits = model.forward(x, Mode::infer);
    for (std::size_t i = 0; i < last - first; ++i)
      correct += predicts_exudate(logits.ptr() + 2 * i) == (y[2 * i + 1] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// ---- trainer -----------------------------------------------------------------------

class Trainer {
public:
  Trainer(const PatchSet& data, const ModelConfig& cfg, const TrainSchedule& sched, const Rng& rng, AdamHyper hyper = {})
      : data_(&data), sched_(sched), rng_(rng), model_(init_model(cfg, rng)) {
    sched_.validate();
    adam_ = AdamState::for_params(model_.parameters(), hyper);
    setup();
  }

  // Continues from a checkpoint; `data` must be the patch set it was trained on.
  Trainer(const PatchSet& data, const Checkpoint& ck)
      : data_(&data), sched_(ck.schedule), rng_(ck.rng), model_(ck.model()), adam_(ck.adam()), next_(ck.next_step),
        history_(ck.history) {
    sched_.validate();
    if (ck.patch_count != data.size())
      throw ConfigError("checkpoint was trained on " + std::to_string(ck.patch_count) + " patches, archive has " +
                        std::to_string(data.size()));
    if (ck.position_batch != 0) throw FormatError("mid-epoch checkpoints are not supported");
    setup();
  }

  const TrainSchedule& schedule() const { return sched_; }
  const std::vector<ScheduleStep>& plan() const { return plan_; }
  std::size_t next_step() const { return next_; }
  bool done() const { return next_ >= plan_.size(); }
  Model& model() { return model_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const std::vector<std::size_t>& shard_indices(std::size_t k) const { return shards_.at(k); }

  // Runs the next shard-epoch of the plan.
  EpochMetrics run_epoch() {
    if (done()) throw Error("training schedule already complete");
    const ScheduleStep at = plan_[next_];
    std::vector<std::size_t> order = shards_[at.shard];
    shuffle(order, rng_.split(step_label("shuffle", at)));

    const std::size_t nb = sched_.batches_per_epoch();
    double loss_sum = 0;
    std::vector<Param*> params = model_.parameters();
    for (std::size_t b = 0; b < nb; ++b) {
      const auto [x, y] = make_batch(*data_, order, b * sched_.batch_size, (b + 1) * sched_.batch_size);
      Rng dropout = rng_.split(step_label("dropout", at) + "/" + std::to_string(b));
      try {
        const Tensor logits = model_.forward(x, Mode::train, &dropout);
        const LossResult lr = softmax_cross_entropy(logits, y);
        model_.backward(lr.grad_logits);
        adam_step(params, adam_);
        loss_sum += lr.loss;
      } catch (const NonFiniteError& e) {
        throw DivergenceError(at, b, e.what());
      } catch (const LayerError& e) {
        if (std::string(e.what()).find("non-finite") != std::string::npos) throw DivergenceError(at, b, e.what());
        throw;
      }
    }
    EpochMetrics m{next_, at.streak, at.shard, at.epoch, loss_sum / static_cast<double>(nb),
                   accuracy(model_, *data_, shards_[at.shard], sched_.eval_batch)};
    history_.push_back(m);
    ++next_;
    log::debug("streak ", at.streak, " shard ", at.shard, " epoch ", at.epoch, " loss ", m.loss, " acc ",
               m.train_accuracy);
    return m;
  }

  Checkpoint checkpoint() {
    Checkpoint ck;
    ck.config = model_.config();
    ck.schedule = sched_;
    for (const auto& nt : model_.state_tensors()) ck.tensors.emplace_back(nt.name, *nt.tensor);
    ck.adam_hyper = adam_.hyper;
    ck.adam_t = adam_.t;
    ck.adam_m = adam_.m;
    ck.adam_v = adam_.v;
    ck.next_step = next_;
    ck.position = done() ? ScheduleStep{sched_.streaks, 0, 0} : plan_[next_];
    ck.rng = rng_;
    ck.patch_count = data_->size();
    ck.history = history_;
    return ck;
  }

private:
  static std::string step_label(const char* what, ScheduleStep s) {
    return std::string(what) + "/" + std::to_string(s.streak) + "/" + std::to_string(s.shard) + "/" + std::to_string(s.epoch);
  }

  static void shuffle(std::vector<std::size_t>& v, Rng r) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(r.below(i))]);
  }

  void setup() {
    if (data_->size() < sched_.patches_needed())
      throw ConfigError("schedule needs " + std::to_string(sched_.patches_needed()) + " patches (" +
                        std::to_string(sched_.shard_count) + " x " + std::to_string(sched_.shard_size) +
                        ") but the archive has " + std::to_string(data_->size()) +
                        "; scale shard_size/shard_count down explicitly");
    plan_ = schedule_plan(sched_);
    if (next_ > plan_.size()) throw FormatError("checkpoint position beyond the end of the schedule");
    std::vector<std::size_t> all(data_->size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    shuffle(all, rng_.split("shards"));
    if (all.size() > sched_.patches_needed())
      log::info("using ", sched_.patches_needed(), " of ", all.size(), " patches (", all.size() - sched_.patches_needed(),
                " left out by the schedule)");
    shards_.clear();
    for (std::size_t k = 0; k < sched_.shard_count; ++k)
      shards_.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(k * sched_.shard_size),
                           all.begin() + static_cast<std::ptrdiff_t>((k + 1) * sched_.shard_size));
  }

  const PatchSet* data_;
  TrainSchedule sched_;
  Rng rng_;
  Model model_;
  AdamState adam_;
  std::size_t next_ = 0;
  std::vector<EpochMetrics> history_;
  std::vector<ScheduleStep> plan_;
  std::vector<std::vector<std::size_t>> shards_;
};

// Runs the whole remaining schedule. `on_epoch` sees every epoch's metrics and
// may stop training early by returning false.
inline Checkpoint train(Trainer& trainer, const std::function<bool(const EpochMetrics&, Trainer&)>& on_epoch = {}) {
  while (!trainer.done()) {
    const EpochMetrics m = trainer.run_epoch();
    if (on_epoch && !on_epoch(m, trainer)) break;
  }
  return trainer.checkpoint();
}

inline Checkpoint train(const PatchSet& data, const ModelConfig& cfg, const TrainSchedule& sched, const Rng& rng,
                        const std::function<bool(const EpochMetrics&, Trainer&)>& on_epoch = {}) {
  Trainer t(data, cfg, sched, rng);
  return train(t, on_epoch);
}

}  // namespace exuseg
