#pragma once

// The five pipeline commands. Each returns a process exit code and writes its
// human-readable output to `out`; diagnostics go through log.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/config.hpp"
#include "exuseg/metrics.hpp"

namespace exuseg {

inline void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---- prepare ---------------------------------------------------------------------

inline PatchSet build_patchset(const RunConfig& cfg, const std::vector<ImagePair>& pairs, const std::string& split) {
  const Rng root = Rng(cfg.extraction.seed).split(split);
  PatchSet all;
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& p : pairs) {
    const FundusImage original = load_image(p.image);
    GroundTruthMask mask = load_mask(p.mask);
    check_pair(original, mask);
    FundusImage img = resize_to_working(original);
    mask = resize_mask(mask);
    img.id = mask.id = p.id;
    PatchSet ps = extract_balanced(img, mask, cfg.extraction.per_class, root.split(p.id));
    const auto n = ps.class_counts();
    sources.push_back({{"id", p.id},
                       {"image", p.image.filename().string()},
                       {"mask", p.mask.filename().string()},
                       {"original_size", {img.original_height, img.original_width}},
                       {"background", n[0]},
                       {"exudate", n[1]}});
    all.append(std::move(ps));
  }
  const auto n = all.class_counts();
  all.provenance = {{"split", split},
                    {"per_class", cfg.extraction.per_class},
                    {"seed", cfg.extraction.seed},
                    {"working_size", geom::kWorking},
                    {"patch_size", geom::kPatch},
                    {"records", all.size()},
                    {"background", n[0]},
                    {"exudate", n[1]},
                    {"sources", sources}};
  return all;
}

inline int cmd_prepare(const RunConfig& cfg, std::ostream& out) {
  struct Split {
    const char* name;
    fs::path list;
    fs::path archive;
  };
  const std::vector<Split> splits = {{"train", cfg.paths.train_list, cfg.paths.train_archive()},
                                     {"test", cfg.paths.test_list, cfg.paths.test_archive()}};
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& s : splits) {
    if (s.list.empty()) throw ConfigError(std::string("paths.") + s.name + "_list is not set");
    const auto pairs = resolve_pairs(cfg.paths, s.list);
    const PatchSet ps = build_patchset(cfg, pairs, s.name);
    if (ps.size() == 0) throw Error(std::string(s.name) + " split produced no patches");
    save_patchset(ps, s.archive);
    const auto n = ps.class_counts();
    out << s.name << ": " << pairs.size() << " image(s) -> " << ps.size() << " patches (" << n[0] << " background, "
        << n[1] << " exudate) -> " << s.archive.string() << '\n';
    for (const auto& w : ps.warnings) out << "  warning: " << w.message() << '\n';
    nlohmann::json p = ps.provenance;
    p["archive"] = s.archive.filename().string();
    p["warnings"] = ps.warnings;
    summary[s.name] = p;
  }
  write_text(cfg.paths.output / "prepare.json", summary.dump(2) + "\n");
  return 0;
}

// ---- train -----------------------------------------------------------------------

struct TrainOptions {
  bool resume = false;
  // Stop after this many shard-epochs in this invocation (0 = run to the end).
  std::size_t max_epochs = 0;
  bool plan_only = false;
};

inline std::string csv_header() { return "step,streak,shard,epoch,loss,train_accuracy\n"; }

inline std::string csv_row(const EpochMetrics& m) {
  char line[160];
  std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%.17g,%.17g\n", m.step, m.streak, m.shard, m.epoch, m.loss,
                m.train_accuracy);
  return line;
}

inline int cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out) {
  out << "schedule: " << cfg.schedule.describe() << '\n';
  out << "patches required: " << cfg.schedule.patches_needed() << '\n';
  if (opt.plan_only) return 0;

  const PatchSet data = load_patchset(cfg.paths.train_archive());
  std::unique_ptr<Trainer> trainer;
  if (opt.resume && fs::exists(cfg.paths.checkpoint())) {
    const Checkpoint ck = load_checkpoint(cfg.paths.checkpoint());
    if (!(ck.schedule == cfg.schedule))
      log::warn("checkpoint schedule differs from the config; continuing with the checkpoint's");
    trainer = std::make_unique<Trainer>(data, ck);
    out << "resuming at shard-epoch " << ck.next_step << " of " << ck.schedule.total_shard_epochs() << '\n';
  } else {
    if (opt.resume) log::warn("no checkpoint at '", cfg.paths.checkpoint().string(), "'; starting fresh");
    trainer = std::make_unique<Trainer>(data, cfg.model, cfg.schedule, Rng(cfg.schedule.seed), cfg.optimizer);
  }

  // The CSV always mirrors the history carried by the latest checkpoint.
  std::string csv = csv_header();
  for (const auto& m : trainer->history()) csv += csv_row(m);
  write_text(cfg.paths.metrics_csv(), csv);
  std::ofstream csv_out(cfg.paths.metrics_csv(), std::ios::app);

  const TrainSchedule& sched = trainer->schedule();
  std::size_t ran = 0;
  try {
    train(*trainer, [&](const EpochMetrics& m, Trainer& t) {
      csv_out << csv_row(m) << std::flush;
      ++ran;
      log::info("shard-epoch ", m.step + 1, "/", sched.total_shard_epochs(), " streak ", m.streak, " shard ", m.shard,
                " epoch ", m.epoch, ": loss ", m.loss, ", accuracy ", m.train_accuracy);
      if (t.done() || (sched.checkpoint_every > 0 && t.next_step() % sched.checkpoint_every == 0))
        save_checkpoint(t.checkpoint(), cfg.paths.checkpoint());
      return opt.max_epochs == 0 || ran < opt.max_epochs;
    });
  } catch (const DivergenceError& e) {
    log::error(e.what());
    out << "training diverged; last good checkpoint kept at " << cfg.paths.checkpoint().string() << '\n';
    return 3;
  }
  save_checkpoint(trainer->checkpoint(), cfg.paths.checkpoint());
  out << "ran " << ran << " shard-epoch(s); " << trainer->next_step() << " of " << sched.total_shard_epochs()
      << " complete\n";
  if (!trainer->history().empty()) {
    const auto& last = trainer->history().back();
    out << "last epoch: loss " << last.loss << ", training accuracy " << last.train_accuracy << '\n';
  }
  out << "checkpoint: " << cfg.paths.checkpoint().string() << '\n';
  return 0;
}

// ---- predict ---------------------------------------------------------------------

struct PredictOptions {
  fs::path checkpoint;               // defaults to the run's checkpoint
  std::vector<fs::path> images;      // defaults to the test list
  fs::path output_dir;               // defaults to <output>/predictions
};

inline int cmd_predict(const RunConfig& cfg, const PredictOptions& opt, std::ostream& out) {
  const fs::path ck_path = opt.checkpoint.empty() ? cfg.paths.checkpoint() : opt.checkpoint;
  const Checkpoint ck = load_checkpoint(ck_path);
  if (!ck.complete())
    log::warn("checkpoint '", ck_path.string(), "' is mid-schedule (", ck.next_step, "/",
              ck.schedule.total_shard_epochs(), " shard-epochs)");
  Model model = ck.model();

  std::vector<std::pair<std::string, fs::path>> inputs;
  if (opt.images.empty()) {
    if (cfg.paths.test_list.empty()) throw ConfigError("no images given and paths.test_list is not set");
    for (const auto& s : read_list(cfg.paths.test_list)) inputs.emplace_back(s, find_image_file(cfg.paths.images, s));
  } else {
    for (const auto& p : opt.images) inputs.emplace_back(p.stem().string(), p);
  }
  if (inputs.empty()) throw ConfigError("no images to predict");

  const fs::path dir = opt.output_dir.empty() ? cfg.paths.predictions() : opt.output_dir;
  const PredictMode mode = cfg.inference.mode;
  for (const auto& [id, path] : inputs) {
    FundusImage img = resize_to_working(load_image(path));
    img.id = id;
    const PredictionMask pm = predict_image(img, model, mode, cfg.inference.batch);
    write_mask(pm, output_name(dir, id, mode, "mask"));
    if (cfg.inference.probabilities) write_probability(pm, output_name(dir, id, mode, "prob"));
    if (cfg.inference.overlays) write_overlay(img, pm, output_name(dir, id, mode, "overlay"));
    out << id << ": " << pm.extent() << "x" << pm.extent() << " " << mode_name(mode) << " mask, "
        << static_cast<std::size_t>(sum(pm.pixels)) << " exudate pixel(s) -> "
        << output_name(dir, id, mode, "mask").string() << '\n';
  }
  return 0;
}

// ---- evaluate --------------------------------------------------------------------

struct EvaluateOptions {
  fs::path predictions;  // defaults to <output>/predictions
  fs::path truth;        // defaults to paths.masks
  fs::path matrices;     // JSON of ready-made confusion matrices; skips mask reading
};

struct Evaluation {
  std::vector<EvalReport> reports;
  std::vector<std::string> errors;
};

// Pairs every `<id>.<mode>.mask.png` in `pred_dir` with the ground truth for
// `<id>`. Failures are collected per file and the remaining pairs evaluated.
inline Evaluation evaluate_directory(const RunConfig& cfg, const fs::path& pred_dir, const fs::path& truth_dir) {
  if (!fs::is_directory(pred_dir)) throw IoError("prediction directory '" + pred_dir.string() + "' does not exist");
  const std::string suffix = std::string(".") + mode_name(cfg.inference.mode) + ".mask.png";
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no '*" + suffix + "' files in '" + pred_dir.string() + "'");

  Evaluation ev;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const std::string id = name.substr(0, name.size() - suffix.size());
    try {
      const Tensor pred = read_mask_png(f);
      const GroundTruthMask truth = load_mask(find_image_file(truth_dir, id + cfg.paths.mask_suffix));
      const Tensor t = truth_for(truth, cfg.inference.mode);
      if (pred.shape() != t.shape())
        throw ShapeError("prediction is " + shape_str(pred.shape()) + " but " + mode_name(cfg.inference.mode) +
                         "-mode ground truth is " + shape_str(t.shape()));
      ev.reports.push_back(report(confusion(pred, t), id));
    } catch (const Error& e) {
      ev.errors.push_back(name + ": " + e.what());
    }
  }
  return ev;
}

// Accepts {"id": matrix, ...} or [{"id": ..., "matrix": ...}, ...], where a
// matrix is either JSON form understood by ConfusionMatrix.
inline Evaluation evaluate_matrices(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open matrices file '" + path.string() + "'");
  const nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError("'" + path.string() + "' is not valid JSON");
  Evaluation ev;
  auto add = [&](const std::string& id, const nlohmann::json& m) {
    try {
      ev.reports.push_back(report(m.get<ConfusionMatrix>(), id));
    } catch (const std::exception& e) {
      ev.errors.push_back(id + ": " + e.what());
    }
  };
  if (j.is_array()) {
    for (const auto& e : j) add(e.value("id", std::string("?")), e.at("matrix"));
  } else if (j.is_object()) {
    for (const auto& [id, m] : j.items()) add(id, m);
  } else {
    throw FormatError("'" + path.string() + "' must hold an object or an array of matrices");
  }
  return ev;
}

inline int cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opt, std::ostream& out) {
  const Evaluation ev = opt.matrices.empty()
                            ? evaluate_directory(cfg, opt.predictions.empty() ? cfg.paths.predictions() : opt.predictions,
                                                 opt.truth.empty() ? cfg.paths.masks : opt.truth)
                            : evaluate_matrices(opt.matrices);

  std::ostringstream text;
  nlohmann::json j = {{"mode", mode_name(cfg.inference.mode)}, {"images", nlohmann::json::array()},
                      {"errors", ev.errors}};
  if (cfg.metrics.per_image)
    for (const auto& r : ev.reports) text << format_table(r) << '\n';
  for (const auto& r : ev.reports) j["images"].push_back(to_json_report(r));
  if (!ev.reports.empty()) {
    const Aggregate a = aggregate(ev.reports);
    if (ev.reports.size() > 1 || !cfg.metrics.per_image) text << format_table(a.pooled) << '\n';
    if (ev.reports.size() > 1) text << "mean per-image accuracy              " << format_ratio(a.macro_accuracy) << '\n';
    j["aggregate"] = to_json_report(a.pooled);
    j["aggregate"]["images"] = a.images;
    j["aggregate"]["macro_accuracy"] = optional_json(a.macro_accuracy);
  }
  if (!ev.errors.empty()) {
    text << ev.errors.size() << " file(s) could not be evaluated:\n";
    for (const auto& e : ev.errors) text << "  " << e << '\n';
  }
  out << text.str();
  write_text(cfg.paths.output / "evaluation.json", j.dump(2) + "\n");
  write_text(cfg.paths.output / "evaluation.txt", text.str());
  return ev.errors.empty() && !ev.reports.empty() ? 0 : 1;
}

// ---- gradcheck -------------------------------------------------------------------

struct GradcheckCommandOptions {
  std::uint64_t model_seed = 0;
  bool json = false;
};

inline int cmd_gradcheck(const RunConfig& cfg, const GradcheckCommandOptions& opt, std::ostream& out) {
#ifdef EXUSEG_FLOAT32
  log::warn("gradient checks are meant for 64-bit builds; tolerances will not hold in float32");
#endif
  Model m = init_model(cfg.model, Rng(opt.model_seed));
  const GradcheckReport r = gradcheck(m, cfg.gradcheck);
  if (opt.json)
    out << to_json_report(r).dump(2) << '\n';
  else
    out << format_report(r, cfg.gradcheck);
  return r.passed() ? 0 : 1;
}

}  // namespace exuseg
