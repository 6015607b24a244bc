#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "aclstage/nn/adam.hpp"
#include "aclstage/nn/ops.hpp"
#include "aclstage/nn/parameters.hpp"
#include "aclstage/volume.hpp"

namespace aclstage {

class LocalizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VNetSpec {
  std::size_t levels = 4;
  std::size_t base_channels = 4;
  std::size_t in_channels = 1;
  std::size_t classes = 5;
  Dims3 input{32, 32, 16};

  void validate() const;
};

// Encoder: 3^3 input conv, then per level a 2^3 stride-2 down-convolution
// (doubling channels) and a 3^3 conv. Decoder: per level a 2^3 stride-2
// up-convolution (halving channels), concatenation with the matching
// encoder output and a 3^3 conv. A 1^3 conv and a channel softmax close it.
// No residual connections.
template <typename T>
class VNet {
 public:
  VNet(const VNetSpec& spec, std::uint64_t seed);

  const VNetSpec& spec() const noexcept { return spec_; }
  nn::ParameterSet<T>& parameters() noexcept { return params_; }
  const nn::ParameterSet<T>& parameters() const noexcept { return params_; }

  // input: [in_channels, d, h, w] -> per-voxel class probabilities
  // [classes, d, h, w].
  nn::Var<T> forward(nn::Tape<T>& tape, const nn::Var<T>& input) const;

  // Channel plan c_l = base * 2^l.
  std::size_t channels(std::size_t level) const { return spec_.base_channels << level; }

 private:
  struct Conv {
    nn::Var<T> kernel;
    nn::Var<T> bias;
  };

  Conv add_conv(const std::string& name, nn::Shape kernel_shape, std::size_t fan_in, std::size_t out,
                std::mt19937_64& rng);

  VNetSpec spec_;
  nn::ParameterSet<T> params_;
  Conv input_;
  std::vector<Conv> down_, encode_, up_, decode_;
  Conv output_;
};

struct SegTrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-5;
  std::size_t batch_size = 1;
  double rotation_degrees = 5.0;  // uniform in [-r, +r] about the medial-lateral axis
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  double max_class_weight = 10.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// One training example at network resolution.
struct SegSample {
  nn::Tensor<float> input;           // [c, d, h, w]
  std::vector<std::uint8_t> labels;  // d*h*w target classes
  // Label grid driving the input when the input is itself a one-hot map
  // (stage 2); rotation is applied to it and the one-hot rebuilt.
  std::vector<std::uint8_t> input_labels;
};

// Inverse-frequency voxel weights, normalized to mean 1 over classes that
// occur and capped at `cap`; absent classes get weight 0.
std::vector<double> inverse_frequency_weights(const std::vector<SegSample>& samples, std::size_t classes,
                                              double cap);

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Weighted CE + Dice training with Adam. Returns per-epoch mean loss.
std::vector<double> train_vnet(VNet<float>& net, const std::vector<SegSample>& samples, const SegTrainConfig& config,
                               const EpochCallback& on_epoch = {});

// Rotation in the superior-inferior / anterior-posterior plane about the
// grid center; bilinear for intensities, nearest for labels. Samples
// falling outside take the edge value (intensities) or background (labels).
nn::Tensor<float> rotate_channels(const nn::Tensor<float>& x, double degrees);
std::vector<std::uint8_t> rotate_labels(const std::vector<std::uint8_t>& labels, const Dims3& dims, double degrees);

// Z-scored image resized to the network grid: [1, d, h, w].
nn::Tensor<float> image_input(const Volume3D& canonical, const Dims3& grid);
nn::Tensor<float> one_hot(const std::vector<std::uint8_t>& labels, const Dims3& dims, std::size_t classes);
std::vector<std::uint8_t> argmax_channels(const nn::Tensor<float>& probs);

// Trilinear upsampling of each class probability channel followed by argmax.
std::vector<std::uint8_t> upsample_argmax(const nn::Tensor<float>& probs, const Dims3& target);

struct SegmentationCascade {
  VNet<float> stage1;  // image -> 5 classes
  VNet<float> stage2;  // 5-class one-hot -> 11 classes

  SegmentationCascade(std::size_t base_channels, Dims3 grid, std::uint64_t seed);
};

struct CascadeTrainReport {
  std::vector<double> stage1_loss;
  std::vector<double> stage2_loss;
};

struct LabeledStudy {
  Volume3D image;
  SegMask mask;  // 11-class, same frame as the image
};

// Stage 1 learns image -> coarsened 5-class mask; stage 2 learns the
// ground-truth 5-class map -> 11-class mask. Left knees are mirrored into
// the right-knee frame first.
CascadeTrainReport train_segmentation(SegmentationCascade& cascade, const std::vector<LabeledStudy>& data,
                                      const SegTrainConfig& config, const EpochCallback& stage1_epoch = {},
                                      const EpochCallback& stage2_epoch = {});

struct SegmentationResult {
  SegMask coarse;  // 5-class, input resolution and frame
  SegMask fine;    // 11-class, input resolution and frame
};

SegmentationResult segment(const SegmentationCascade& cascade, const Volume3D& image);

// Mean Dice over foreground classes present in either mask.
double mean_foreground_dice(const SegMask& pred, const SegMask& truth);

// The six anatomical rules. Left knees use the mirrored medial-lateral
// reading so the box covers the same anatomy.
BoundingBox derive_acl_bbox(const SegMask& mask11, Side side);

inline constexpr Dims3 kClinicalRoiDims{98, 82, 47};
inline constexpr Dims3 kPhantomRoiDims{24, 20, 12};

// Crop to the derived box, resize, and mirror left knees into the right
// orientation.
Volume3D localize_acl(const Volume3D& vol, const SegMask& mask11, const Dims3& target = kPhantomRoiDims);
// The same crop, resize and mirror for an already derived box.
Volume3D localize_box(const Volume3D& vol, const BoundingBox& box, const Dims3& target = kPhantomRoiDims);

struct LocalizationSummary {
  std::vector<double> ious;
  double mean = 0.0;
  double sd = 0.0;  // sample sd, 0 for a single pair

  std::string format() const;  // "0.89 ± 0.06"
};

LocalizationSummary evaluate_localization(const std::vector<BoundingBox>& predicted,
                                          const std::vector<BoundingBox>& reference);

struct BoxRecord {
  std::string study_id;
  BoundingBox box;
};

void write_boxes(const std::filesystem::path& path, const std::vector<BoxRecord>& boxes);
std::vector<BoxRecord> read_boxes(const std::filesystem::path& path);

}  // namespace aclstage
