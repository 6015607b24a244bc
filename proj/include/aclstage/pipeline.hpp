#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aclstage/nn/gradcheck.hpp"
#include "aclstage/phantom.hpp"
#include "aclstage/segloc.hpp"
#include "aclstage/stager.hpp"
#include "aclstage/stats.hpp"

namespace aclstage {

// An upstream artifact a subcommand depends on is absent.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { Train32, Verify64 };
enum class RoiSource { Segmentation, Truth };

struct SegmentationSettings {
  Dims3 grid{48, 48, 32};
  std::size_t base_channels = 4;
  // Training-split studies used to fit the cascade, in manifest order; 0
  // uses all of them.
  std::size_t train_studies = 30;
  SegTrainConfig train{30, 2e-3};
};

struct StageSettings {
  std::size_t epochs = 40;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  bool augment = true;
};

struct RunConfig {
  std::uint64_t seed = 1;
  CohortSpec cohort{};
  SplitConfig split{};
  SegmentationSettings segmentation{};
  std::array<StageSettings, 3> stages{};  // indexed by Stage
  Dims3 roi = kPhantomRoiDims;
  std::vector<Backbone> backbones{Backbone::ThreeD};
  std::array<double, 3> thresholds{0.5, 0.5, 0.5};
  RoiSource roi_source = RoiSource::Segmentation;
  Precision precision = Precision::Train32;
  std::filesystem::path out = "aclstage_out";

  void validate() const;
};

// Nested seeds are derived from the run seed so one number fixes a run.
std::uint64_t cohort_seed(const RunConfig& c);
std::uint64_t split_seed(const RunConfig& c);
std::uint64_t segmentation_seed(const RunConfig& c);
std::uint64_t stage_seed(const RunConfig& c, Backbone b, Stage s);

CohortSpec effective_cohort(const RunConfig& c);
SplitConfig effective_split(const RunConfig& c);
SegTrainConfig effective_seg_train(const RunConfig& c);
StageConfig effective_stage(const RunConfig& c, Stage s);

// JSON text; unknown keys are rejected so typos do not pass silently.
// Keys absent from the text keep the values of `base`.
RunConfig parse_run_config(const std::string& json_text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});
std::string dump_run_config(const RunConfig& c);

std::vector<Backbone> parse_backbones(std::string_view text);  // "3d", "2d", "both"

// Artifact locations under the output root.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path manifest() const { return data() / "manifest.csv"; }
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path split() const { return root / "split.csv"; }
  std::filesystem::path split_summary() const { return root / "split_summary.txt"; }
  std::filesystem::path segmentation_dir() const { return root / "segmentation"; }
  std::filesystem::path segmentation_weights(int stage) const;  // 1 or 2
  std::filesystem::path segmentation_loss(int stage) const;
  std::filesystem::path stage_dir(Backbone b) const;
  std::filesystem::path stage_weights(Backbone b, Stage s) const;
  std::filesystem::path stage_loss(Backbone b, Stage s) const;
  std::filesystem::path stage_validation_loss(Backbone b, Stage s) const;
  std::filesystem::path boxes() const { return root / "boxes.csv"; }
  std::filesystem::path decisions(Backbone b) const;
  std::filesystem::path report() const { return root / "report.txt"; }
  std::filesystem::path saliency_dir(Backbone b) const;
};

using Logger = std::function<void(const std::string&)>;

std::vector<StudyRecord> run_phantom_gen(const RunConfig& c, const Logger& log = {});
SplitAssignment run_split(const RunConfig& c, const Logger& log = {});

struct SegTrainSummary {
  std::size_t studies = 0;
  CascadeTrainReport losses;
};
SegTrainSummary run_train_seg(const RunConfig& c, const Logger& log = {});

StageTrainResult run_train_stage(const RunConfig& c, Backbone b, Stage s, const Logger& log = {});

struct InferSummary {
  std::size_t studies = 0;
  std::size_t localization_fallbacks = 0;  // segmentation gave no usable box
  std::optional<LocalizationSummary> localization;  // predicted vs ground-truth boxes
  std::vector<double> dice;  // 11-class mean foreground Dice per study with a mask
  std::optional<double> mean_dice;
};
InferSummary run_infer(const RunConfig& c, const Logger& log = {});

std::string run_eval(const RunConfig& c, const Logger& log = {});

struct SaliencySummary {
  std::size_t maps = 0;
  std::size_t degenerate = 0;
};
SaliencySummary run_saliency(const RunConfig& c, Backbone b, const Logger& log = {});

// 64-bit finite-difference check of a stage network of the configured
// architecture and ROI dims, on one input and with parameters moved off the
// ReLU kinks.
nn::GradCheckReport verify_stage_gradients(Backbone b, const Dims3& roi, std::uint64_t seed,
                                           std::size_t elements_per_leaf = 4);

// Studies of one split, in manifest order.
std::vector<StudyRecord> split_studies(const std::vector<StudyRecord>& all, const std::map<std::string, Split>& split,
                                       Split which);

// ROI from the ground-truth mask of a study.
Volume3D truth_roi(const StudyRecord& r, const Dims3& roi);

// Saliency fraction inside a binary region of the same grid.
double mass_fraction(const Volume3D& saliency, const std::vector<std::uint8_t>& region);

// 26-neighbourhood dilation of a binary grid, `radius` times.
std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& binary, const Dims3& dims, int radius);

}  // namespace aclstage
