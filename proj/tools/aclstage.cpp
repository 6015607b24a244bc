// Command-line front end: phantom generation, splitting, training, inference,
// evaluation and saliency over one output directory.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aclstage/nn/memory.hpp"
#include "aclstage/pipeline.hpp"

namespace {

using namespace aclstage;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string backbone;
  std::string threshold;
  std::string precision;
  std::string roi_source;
};

std::array<double, 3> parse_thresholds(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("--threshold: '" + item + "' is not a number");
    values.push_back(v);
  }
  if (values.size() == 1) return {values[0], values[0], values[0]};
  if (values.size() == 3) return {values[0], values[1], values[2]};
  throw std::invalid_argument("--threshold takes one value or three comma-separated values (R,FT,PT)");
}

// Defaults, then the environment, then the config file, then flags.
RunConfig resolve(const GlobalFlags& g) {
  RunConfig c;
  if (const char* env = std::getenv("ACLSTAGE_OUT"); env && *env) c.out = env;
  if (!g.config.empty()) c = load_run_config(g.config, c);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out = g.out;
  if (!g.backbone.empty()) c.backbones = parse_backbones(g.backbone);
  if (!g.threshold.empty()) c.thresholds = parse_thresholds(g.threshold);
  if (g.precision == "train32") c.precision = Precision::Train32;
  if (g.precision == "verify64") c.precision = Precision::Verify64;
  if (g.roi_source == "segmentation") c.roi_source = RoiSource::Segmentation;
  if (g.roi_source == "truth") c.roi_source = RoiSource::Truth;
  return c;
}

void print(const std::string& line) { std::cout << line << '\n' << std::flush; }

std::vector<Stage> stages_from(const std::string& text) {
  if (text == "all") return {kStages.begin(), kStages.end()};
  return {parse_stage(text)};
}

void train_stages(const RunConfig& c, const std::vector<Stage>& stages) {
  for (Backbone b : c.backbones) {
    for (Stage s : stages) run_train_stage(c, b, s, print);
  }
}

}  // namespace

int main(int argc, char** argv) {
  nn::retain_freed_memory();

  CLI::App app{"ACL tear staging on knee MRI volumes: phantoms, segmentation, cascade staging, statistics"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "JSON run configuration; flags override its values");
  app.add_option("--seed", g.seed, "Run seed; every nested seed derives from it");
  app.add_option("--out", g.out, "Output root (default: $ACLSTAGE_OUT, else aclstage_out)");
  app.add_option("--backbone", g.backbone, "Stage classifier backbone")->check(CLI::IsMember({"3d", "2d", "both"}));
  app.add_option("--threshold", g.threshold, "Stage thresholds: one value, or R,FT,PT");
  app.add_option("--precision", g.precision, "train32, or verify64 to gradient-check in 64-bit before training")
      ->check(CLI::IsMember({"train32", "verify64"}));
  app.add_option("--roi-source", g.roi_source, "Where inference takes the ACL box from")
      ->check(CLI::IsMember({"segmentation", "truth"}));

  auto* gen = app.add_subcommand("phantom-gen", "Write a synthetic cohort of KVOL volumes, masks and a manifest");
  std::optional<std::size_t> count;
  gen->add_option("--count", count, "Number of studies");

  app.add_subcommand("split", "Patient-disjoint stratified train/validation/test split");

  auto* seg = app.add_subcommand("train-seg", "Train the two-stage V-Net segmentation cascade");
  std::optional<std::size_t> seg_epochs, seg_studies;
  seg->add_option("--epochs", seg_epochs, "Epochs per cascade stage");
  seg->add_option("--studies", seg_studies, "Training studies used (0 = all)");

  auto* stage = app.add_subcommand("train-stage", "Train stage classifiers on ground-truth ROIs");
  std::string stage_name = "all";
  std::optional<std::size_t> stage_epochs;
  stage->add_option("--stage", stage_name, "R, FT, PT or all")->check(CLI::IsMember({"R", "FT", "PT", "all"}));
  stage->add_option("--epochs", stage_epochs, "Epochs for the selected stages");

  app.add_subcommand("infer", "Segment, localize and stage the test split");
  app.add_subcommand("eval", "Write the per-grade report with P values, kappa and confusion matrices");
  app.add_subcommand("saliency", "Write gradient saliency maps for the test split");
  app.add_subcommand("pipeline", "Run every step in order");

  // Global flags may follow the subcommand.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig c = resolve(g);
    if (count) c.cohort.study_count = *count;
    if (seg_epochs) c.segmentation.train.epochs = *seg_epochs;
    if (seg_studies) c.segmentation.train_studies = *seg_studies;
    const auto stages = stages_from(stage_name);
    if (stage_epochs) {
      for (Stage s : stages) c.stages[static_cast<int>(s)].epochs = *stage_epochs;
    }
    c.validate();

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "phantom-gen") {
      run_phantom_gen(c, print);
    } else if (cmd == "split") {
      run_split(c, print);
    } else if (cmd == "train-seg") {
      run_train_seg(c, print);
    } else if (cmd == "train-stage") {
      train_stages(c, stages);
    } else if (cmd == "infer") {
      run_infer(c, print);
    } else if (cmd == "eval") {
      std::cout << run_eval(c, print);
    } else if (cmd == "saliency") {
      for (Backbone b : c.backbones) run_saliency(c, b, print);
    } else if (cmd == "pipeline") {
      run_phantom_gen(c, print);
      run_split(c, print);
      if (c.roi_source == RoiSource::Segmentation) run_train_seg(c, print);
      train_stages(c, stages);
      run_infer(c, print);
      std::cout << run_eval(c, print);
      for (Backbone b : c.backbones) run_saliency(c, b, print);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
