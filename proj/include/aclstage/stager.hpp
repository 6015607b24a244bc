#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "aclstage/nn/adam.hpp"
#include "aclstage/nn/ops.hpp"
#include "aclstage/nn/parameters.hpp"
#include "aclstage/volume.hpp"

namespace aclstage {

class CompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Backbone { ThreeD, TwoD };

std::string_view backbone_name(Backbone b);  // "3d" / "2d"
Backbone parse_backbone(std::string_view text);

// A binary stage network: [1, d, h, w] input -> [1] logit.
template <typename T>
class StageNet {
 public:
  virtual ~StageNet() = default;
  virtual nn::Var<T> forward(nn::Tape<T>& tape, const nn::Var<T>& input) const = 0;
  virtual nn::ParameterSet<T>& parameters() = 0;
  virtual const nn::ParameterSet<T>& parameters() const = 0;
  virtual Dims3 input_dims() const = 0;
};

struct Classifier3DSpec {
  Dims3 input{24, 20, 12};
  // Output channels of the six convolutions; the second joins the first
  // through a channel concatenation.
  std::array<std::size_t, 6> channels{8, 16, 24, 32, 32, 48};
  bool skip = true;
  // Max pooling (window 2 on every axis whose extent is >= 2) after the
  // 1-based layers listed here.
  std::array<bool, 6> pool_after{false, true, true, true, false, false};
  std::size_t dense_width = 64;

  void validate() const;
};

template <typename T>
class Classifier3D final : public StageNet<T> {
 public:
  Classifier3D(const Classifier3DSpec& spec, std::uint64_t seed);

  nn::Var<T> forward(nn::Tape<T>& tape, const nn::Var<T>& input) const override;
  nn::ParameterSet<T>& parameters() override { return params_; }
  const nn::ParameterSet<T>& parameters() const override { return params_; }
  Dims3 input_dims() const override { return spec_.input; }
  const Classifier3DSpec& spec() const noexcept { return spec_; }
  std::size_t flat_features() const noexcept { return flat_; }

 private:
  Classifier3DSpec spec_;
  nn::ParameterSet<T> params_;
  std::vector<std::pair<nn::Var<T>, nn::Var<T>>> convs_;
  std::vector<std::pair<nn::Var<T>, nn::Var<T>>> dense_;
  std::vector<std::vector<std::size_t>> pools_;  // empty = no pooling after that layer
  std::size_t flat_ = 0;
};

struct Classifier2DSpec {
  Dims3 input{24, 20, 12};  // slices are taken along the width (sagittal) axis
  std::array<std::size_t, 4> channels{8, 16, 32, 32};
  // 2x2 pooling after the 1-based conv layers listed here.
  std::array<bool, 4> pool_after{true, true, true, false};

  void validate() const;
};

// Shared-weight slice encoder, per-slice global max pooling, max over
// slices, then a dense layer to one logit.
template <typename T>
class Classifier2D final : public StageNet<T> {
 public:
  Classifier2D(const Classifier2DSpec& spec, std::uint64_t seed);

  nn::Var<T> forward(nn::Tape<T>& tape, const nn::Var<T>& input) const override;
  nn::ParameterSet<T>& parameters() override { return params_; }
  const nn::ParameterSet<T>& parameters() const override { return params_; }
  Dims3 input_dims() const override { return spec_.input; }

  // Encoder output for one slice [1, d, h] -> [channels.back()].
  nn::Var<T> encode_slice(nn::Tape<T>& tape, const nn::Var<T>& slice) const;
  nn::Var<T> head(nn::Tape<T>& tape, const nn::Var<T>& pooled) const;

 private:
  Classifier2DSpec spec_;
  nn::ParameterSet<T> params_;
  std::vector<std::pair<nn::Var<T>, nn::Var<T>>> convs_;
  std::vector<std::vector<std::size_t>> pools_;
  std::vector<std::size_t> final_extent_;
  nn::Var<T> dense_w_, dense_b_;
};

std::unique_ptr<StageNet<float>> make_stage_net(Backbone backbone, const Dims3& roi, std::uint64_t seed);

// Z-scored network input [1, d, h, w].
template <typename T>
nn::Tensor<T> classifier_input(const Volume3D& roi);

// sigmoid(logit) for one ROI.
double stage_probability(const StageNet<float>& net, const Volume3D& roi);

enum class Stage { Reconstructed = 0, FullTear = 1, PartialTear = 2 };
inline constexpr std::array<Stage, 3> kStages{Stage::Reconstructed, Stage::FullTear, Stage::PartialTear};

std::string_view stage_abbrev(Stage s);  // "R", "FT", "PT"
Stage parse_stage(std::string_view text);
Grade stage_positive(Stage s);
// Whether a study of `g` belongs to the stage's training population.
bool stage_admits(Stage s, Grade g);

struct StageConfig {
  Stage stage = Stage::Reconstructed;
  std::size_t epochs = 100;
  double learning_rate = 1e-5;
  std::size_t batch_size = 8;
  double threshold = 0.5;
  bool augment = true;
  std::uint64_t seed = 1;

  void validate() const;
};

struct AugmentParams {
  std::array<int, 3> shift{0, 0, 0};
  double zoom = 1.0;
};

// Zoom about the center (trilinear), then integer translation; exposed
// samples take the volume minimum. Never rotates.
Volume3D apply_augmentation(const Volume3D& vol, const AugmentParams& params);
AugmentParams draw_augmentation(const Dims3& dims, std::mt19937_64& rng);
Volume3D augment_classification(const Volume3D& vol, std::uint64_t seed);

struct StageSample {
  std::string study_id;
  Volume3D roi;
  Grade grade = Grade::Intact;
};

// w_c = N / (2 N_c) over the stage population.
std::array<double, 2> stage_class_weights(Stage stage, const std::vector<StageSample>& samples);

struct StageTrainResult {
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  std::size_t best_epoch = 0;  // 0 = initialization kept
};

using StageEpochCallback = std::function<void(std::size_t epoch, double train_loss, double validation_loss)>;

// Filters both sets to the stage population, trains with weighted CE, and
// restores the weights of the epoch with the lowest validation loss (the
// last epoch when no validation set is given).
StageTrainResult train_stage(StageNet<float>& net, const std::vector<StageSample>& train,
                             const std::vector<StageSample>& validation, const StageConfig& config,
                             const StageEpochCallback& on_epoch = {});

struct CascadeDecision {
  std::optional<double> p_r;
  std::optional<double> p_ft;
  std::optional<double> p_pt;
  Grade grade = Grade::Intact;
};

using StageScorer = std::function<double(const Volume3D&)>;

// Most severe stage first; the first stage at or above its threshold
// assigns the grade and later stages are not evaluated.
CascadeDecision cascade_infer(const std::array<StageScorer, 3>& scorers, const Volume3D& roi,
                              const std::array<double, 3>& thresholds = {0.5, 0.5, 0.5});

struct Saliency {
  Volume3D map;
  bool degenerate = false;  // all-zero gradient field
};

// |d logit / d input| max-normalized to [0, 1].
Saliency saliency_map(const StageNet<float>& net, const Volume3D& roi);

// Stage whose model made the final call: the firing stage, or the partial
// tear stage for intact predictions.
Stage deciding_stage(const CascadeDecision& d);

struct DecisionRecord {
  std::string study_id;
  CascadeDecision decision;
  Grade truth = Grade::Intact;
};

void write_decisions(const std::filesystem::path& path, const std::vector<DecisionRecord>& records);
std::vector<DecisionRecord> read_decisions(const std::filesystem::path& path);

}  // namespace aclstage
