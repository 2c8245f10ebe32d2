#pragma once

// The single JSON run configuration shared by every command, with dotted-path
// overrides applied before parsing.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/adam.hpp"
#include "exuseg/gradcheck.hpp"
#include "exuseg/inference.hpp"
#include "exuseg/training.hpp"

namespace exuseg {

namespace fs = std::filesystem;

struct PathConfig {
  fs::path images;      // directory of fundus images
  fs::path masks;       // directory of ground-truth masks
  fs::path train_list;  // one image stem per line
  fs::path test_list;
  fs::path output = "run";
  std::string mask_suffix;  // mask file name = stem + suffix + extension

  fs::path train_archive() const { return output / "train.exps"; }
  fs::path test_archive() const { return output / "test.exps"; }
  fs::path checkpoint() const { return output / "checkpoint.exsg"; }
  fs::path metrics_csv() const { return output / "metrics.csv"; }
  fs::path predictions() const { return output / "predictions"; }
};

struct ExtractionConfig {
  std::size_t per_class = 2500;
  std::uint64_t seed = 0;
};

struct InferenceConfig {
  PredictMode mode = PredictMode::valid;
  std::size_t batch = 512;
  bool overlays = true;
  bool probabilities = true;
};

struct MetricsConfig {
  bool per_image = true;  // include per-image tables in the text report
};

struct RunConfig {
  PathConfig paths;
  ExtractionConfig extraction;
  ModelConfig model = ModelConfig::default_config();
  TrainSchedule schedule;
  AdamHyper optimizer;
  InferenceConfig inference;
  MetricsConfig metrics;
  GradcheckOptions gradcheck;

  void validate() const {
    model.shape_trace();
    schedule.validate();
    if (inference.batch == 0) throw ConfigError("inference.batch must be positive");
    if (!(optimizer.lr > 0) || !(optimizer.eps > 0) || optimizer.beta1 < 0 || optimizer.beta1 >= 1 ||
        optimizer.beta2 < 0 || optimizer.beta2 >= 1)
      throw ConfigError("optimizer: need lr > 0, eps > 0 and betas in [0, 1)");
    if (!(gradcheck.step > 0)) throw ConfigError("gradcheck.step must be positive");
  }
};

// ---- json ----------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"paths",
        {{"images", c.paths.images.string()},
         {"masks", c.paths.masks.string()},
         {"train_list", c.paths.train_list.string()},
         {"test_list", c.paths.test_list.string()},
         {"output", c.paths.output.string()},
         {"mask_suffix", c.paths.mask_suffix}}},
       {"extraction", {{"per_class", c.extraction.per_class}, {"seed", c.extraction.seed}}},
       {"model", c.model},
       {"schedule", c.schedule},
       {"optimizer",
        {{"lr", c.optimizer.lr}, {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
       {"inference",
        {{"mode", mode_name(c.inference.mode)},
         {"batch", c.inference.batch},
         {"overlays", c.inference.overlays},
         {"probabilities", c.inference.probabilities}}},
       {"metrics", {{"per_image", c.metrics.per_image}}},
       {"gradcheck",
        {{"step", c.gradcheck.step},
         {"layer_tolerance", c.gradcheck.layer_tolerance},
         {"end_to_end_tolerance", c.gradcheck.end_to_end_tolerance},
         {"end_to_end_batch", c.gradcheck.end_to_end_batch},
         {"max_probes", c.gradcheck.max_probes},
         {"seed", c.gradcheck.seed},
         {"end_to_end", c.gradcheck.end_to_end}}}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_path(const nlohmann::json& j, const char* key, fs::path& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  using detail::read;
  detail::reject_unknown(j, "",
                         {"paths", "extraction", "model", "schedule", "optimizer", "inference", "metrics", "gradcheck",
                          "description"});
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown(p, "paths", {"images", "masks", "train_list", "test_list", "output", "mask_suffix"});
    detail::read_path(p, "images", c.paths.images);
    detail::read_path(p, "masks", c.paths.masks);
    detail::read_path(p, "train_list", c.paths.train_list);
    detail::read_path(p, "test_list", c.paths.test_list);
    detail::read_path(p, "output", c.paths.output);
    read(p, "mask_suffix", c.paths.mask_suffix);
  }
  if (j.contains("extraction")) {
    const auto& e = j.at("extraction");
    detail::reject_unknown(e, "extraction", {"per_class", "seed"});
    read(e, "per_class", c.extraction.per_class);
    read(e, "seed", c.extraction.seed);
  }
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("schedule")) {
    detail::reject_unknown(j.at("schedule"), "schedule",
                           {"shard_count", "shard_size", "epochs_per_shard", "streaks", "batch_size", "seed",
                            "interleaved", "checkpoint_every", "eval_batch"});
    c.schedule = j.at("schedule").get<TrainSchedule>();
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
    read(o, "lr", c.optimizer.lr);
    read(o, "beta1", c.optimizer.beta1);
    read(o, "beta2", c.optimizer.beta2);
    read(o, "eps", c.optimizer.eps);
  }
  if (j.contains("inference")) {
    const auto& i = j.at("inference");
    detail::reject_unknown(i, "inference", {"mode", "batch", "overlays", "probabilities"});
    if (i.contains("mode")) c.inference.mode = parse_mode(i.at("mode").get<std::string>());
    read(i, "batch", c.inference.batch);
    read(i, "overlays", c.inference.overlays);
    read(i, "probabilities", c.inference.probabilities);
  }
  if (j.contains("metrics")) {
    detail::reject_unknown(j.at("metrics"), "metrics", {"per_image"});
    read(j.at("metrics"), "per_image", c.metrics.per_image);
  }
  if (j.contains("gradcheck")) {
    const auto& g = j.at("gradcheck");
    detail::reject_unknown(g, "gradcheck",
                           {"step", "layer_tolerance", "end_to_end_tolerance", "end_to_end_batch", "max_probes", "seed",
                            "end_to_end"});
    read(g, "step", c.gradcheck.step);
    read(g, "layer_tolerance", c.gradcheck.layer_tolerance);
    read(g, "end_to_end_tolerance", c.gradcheck.end_to_end_tolerance);
    read(g, "end_to_end_batch", c.gradcheck.end_to_end_batch);
    read(g, "max_probes", c.gradcheck.max_probes);
    read(g, "seed", c.gradcheck.seed);
    read(g, "end_to_end", c.gradcheck.end_to_end);
  }
}

// ---- overrides -------------------------------------------------------------------

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
// it is valid JSON (numbers, booleans, arrays, quoted strings) and taken as a
// plain string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) throw ConfigError("override key '" + key + "': '" + part + "' is inside a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline RunConfig parse_config(nlohmann::json doc, const std::vector<std::string>& overrides = {}) {
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c;
  try {
    c = doc.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false, true);
  if (doc.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
  return parse_config(std::move(doc), overrides);
}

// ---- image / mask pairing -------------------------------------------------------------

inline const std::vector<std::string>& image_extensions() {
  static const std::vector<std::string> ext = {".png", ".ppm", ".pgm", ".pnm", ".PNG"};
  return ext;
}

// Finds `<dir>/<name><ext>` for a supported extension.
inline fs::path find_image_file(const fs::path& dir, const std::string& name) {
  for (const auto& e : image_extensions()) {
    const fs::path p = dir / (name + e);
    if (fs::is_regular_file(p)) return p;
  }
  throw IoError("no image file named '" + name + "' (png/ppm/pgm/pnm) in '" + dir.string() + "'");
}

inline std::vector<std::string> read_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open image list '" + path.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

struct ImagePair {
  std::string id;
  fs::path image;
  fs::path mask;
};

// Resolves every stem of a list to an image and its mask. Collects all
// failures before throwing.
inline std::vector<ImagePair> resolve_pairs(const PathConfig& p, const fs::path& list) {
  const auto stems = read_list(list);
  if (stems.empty()) throw ConfigError("image list '" + list.string() + "' is empty");
  std::vector<ImagePair> out;
  std::string problems;
  for (const auto& s : stems) {
    try {
      out.push_back({s, find_image_file(p.images, s), find_image_file(p.masks, s + p.mask_suffix)});
    } catch (const IoError& e) {
      problems += std::string("\n  ") + e.what();
    }
  }
  if (!problems.empty()) throw IoError("unpairable entries in '" + list.string() + "':" + problems);
  return out;
}

}  // namespace exuseg
