#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "exuseg/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string mode;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("-s,--set", c.overrides, "Override a config value, e.g. schedule.epochs_per_shard=2")
      ->take_all()
      ->allow_extra_args(false);
  sub->add_option("--seed", c.seed, "Seed for extraction, training and the gradient check");
  sub->add_option("--mode", c.mode, "Inference mode")->check(CLI::IsMember({"valid", "padded"}));
}

exuseg::RunConfig resolve(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed) {
    const std::string s = std::to_string(*c.seed);
    ov.insert(ov.end(), {"extraction.seed=" + s, "schedule.seed=" + s, "gradcheck.seed=" + s});
  }
  if (!c.mode.empty()) ov.push_back("inference.mode=" + c.mode);
  return c.config.empty() ? exuseg::parse_config(nlohmann::json::object(), ov) : exuseg::load_config(c.config, ov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hard-exudate segmentation with a patch-classifying CNN"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "exuseg 1.0");

  Common common;
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the fully resolved configuration and exit");

  auto* prepare = app.add_subcommand("prepare", "Extract balanced patch archives from the train and test lists");
  add_common(prepare, common);

  exuseg::TrainOptions topt;
  auto* train = app.add_subcommand("train", "Train on the train archive; writes checkpoint and metrics CSV");
  add_common(train, common);
  train->add_flag("--resume", topt.resume, "Continue from the run's checkpoint if present");
  train->add_option("--max-epochs", topt.max_epochs, "Stop after N shard-epochs in this invocation");
  train->add_flag("--plan", topt.plan_only, "Validate the configuration, print the schedule and exit");

  exuseg::PredictOptions popt;
  std::vector<std::string> images;
  std::string pck, pout;
  auto* predict = app.add_subcommand("predict", "Segment images with a trained checkpoint");
  add_common(predict, common);
  predict->add_option("--checkpoint", pck, "Checkpoint file (default <output>/checkpoint.exsg)");
  predict->add_option("-o,--out", pout, "Output directory (default <output>/predictions)");
  predict->add_option("images", images, "Images to segment (default: the test list)");

  std::string epred, etruth, ematrices;
  auto* evaluate = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  add_common(evaluate, common);
  evaluate->add_option("--pred", epred, "Directory of predicted masks (default <output>/predictions)");
  evaluate->add_option("--truth", etruth, "Directory of ground-truth masks (default paths.masks)");
  evaluate->add_option("--matrices", ematrices, "JSON file of confusion matrices to report instead of masks")
      ->check(CLI::ExistingFile);

  exuseg::GradcheckCommandOptions gopt;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  add_common(grad, common);
  grad->add_option("--model-seed", gopt.model_seed, "Seed for the randomly initialised model");
  grad->add_flag("--json", gopt.json, "Print the report as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    const exuseg::RunConfig cfg = resolve(common);
    if (print_config) {
      std::cout << nlohmann::json(cfg).dump(2) << '\n';
      return 0;
    }
    if (prepare->parsed()) return exuseg::cmd_prepare(cfg, std::cout);
    if (train->parsed()) return exuseg::cmd_train(cfg, topt, std::cout);
    if (predict->parsed()) {
      popt.checkpoint = pck;
      popt.output_dir = pout;
      popt.images.assign(images.begin(), images.end());
      return exuseg::cmd_predict(cfg, popt, std::cout);
    }
    if (evaluate->parsed()) {
      return exuseg::cmd_evaluate(cfg, {epred, etruth, ematrices}, std::cout);
    }
    if (grad->parsed()) return exuseg::cmd_gradcheck(cfg, gopt, std::cout);
  } catch (const exuseg::ConfigError& e) {
    exuseg::log::error("configuration: ", e.what());
    return 2;
  } catch (const std::exception& e) {
    exuseg::log::error(e.what());
    return 1;
  }
  return 0;
}
