#include "aclstage/segloc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace aclstage {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void VNetSpec::validate() const {
  if (levels == 0) throw std::invalid_argument("V-Net needs at least one level");
  if (base_channels == 0 || in_channels == 0) throw std::invalid_argument("V-Net channel counts must be >= 1");
  if (classes != 5 && classes != 11) throw std::invalid_argument("V-Net output classes must be 5 or 11");
  const std::size_t f = std::size_t{1} << levels;
  for (auto [extent, name] : {std::pair{input.depth, "depth"}, {input.height, "height"}, {input.width, "width"}}) {
    if (extent % f != 0) {
      throw nn::ShapeError(std::string("V-Net input ") + name + " " + std::to_string(extent) +
                           " is not divisible by 2^" + std::to_string(levels));
    }
  }
}

template <typename T>
typename VNet<T>::Conv VNet<T>::add_conv(const std::string& name, Shape kernel_shape, std::size_t fan_in,
                                         std::size_t out, std::mt19937_64& rng) {
  Conv c;
  c.kernel = params_.add(name + ".w", nn::he_uniform<T>(std::move(kernel_shape), fan_in, rng));
  c.bias = params_.add(name + ".b", Tensor<T>(Shape{out}));
  return c;
}

template <typename T>
VNet<T>::VNet(const VNetSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t b = spec_.base_channels;
  input_ = add_conv("in", {b, spec_.in_channels, 3, 3, 3}, spec_.in_channels * 27, b, rng);
  for (std::size_t l = 1; l <= spec_.levels; ++l) {
    const std::size_t lo = channels(l - 1), hi = channels(l);
    const std::string tag = std::to_string(l);
    down_.push_back(add_conv("down" + tag, {hi, lo, 2, 2, 2}, lo * 8, hi, rng));
    encode_.push_back(add_conv("enc" + tag, {hi, hi, 3, 3, 3}, hi * 27, hi, rng));
  }
  for (std::size_t l = spec_.levels; l >= 1; --l) {
    const std::size_t lo = channels(l - 1), hi = channels(l);
    const std::string tag = std::to_string(l);
    up_.push_back(add_conv("up" + tag, {hi, lo, 2, 2, 2}, hi, lo, rng));
    decode_.push_back(add_conv("dec" + tag, {lo, 2 * lo, 3, 3, 3}, 2 * lo * 27, lo, rng));
  }
  output_ = add_conv("out", {spec_.classes, b, 1, 1, 1}, b, spec_.classes, rng);
}

template <typename T>
Var<T> VNet<T>::forward(Tape<T>& tape, const Var<T>& input) const {
  const Shape expect{spec_.in_channels, spec_.input.depth, spec_.input.height, spec_.input.width};
  if (input->shape() != expect) {
    throw nn::ShapeError("V-Net input " + nn::to_string(input->shape()) + " does not match " + nn::to_string(expect));
  }
  nn::Conv3dGeometry same;
  same.pad = {1, 1, 1};
  nn::Conv3dGeometry halve;
  halve.stride = {2, 2, 2};

  std::vector<Var<T>> skips;
  skips.push_back(nn::relu(tape, nn::conv3d(tape, input, input_.kernel, input_.bias, same)));
  for (std::size_t l = 0; l < spec_.levels; ++l) {
    auto t = nn::relu(tape, nn::conv3d(tape, skips.back(), down_[l].kernel, down_[l].bias, halve));
    skips.push_back(nn::relu(tape, nn::conv3d(tape, t, encode_[l].kernel, encode_[l].bias, same)));
  }
  Var<T> y = skips.back();
  for (std::size_t i = 0; i < spec_.levels; ++i) {
    const std::size_t l = spec_.levels - i;  // level being left
    auto u = nn::relu(tape, nn::conv_transpose3d(tape, y, up_[i].kernel, up_[i].bias, {2, 2, 2}));
    auto c = nn::concat_channels(tape, u, skips[l - 1]);
    y = nn::relu(tape, nn::conv3d(tape, c, decode_[i].kernel, decode_[i].bias, same));
  }
  auto logits = nn::conv3d(tape, y, output_.kernel, output_.bias, nn::Conv3dGeometry{});
  return nn::softmax(tape, logits);
}

template class VNet<float>;
template class VNet<double>;

void SegTrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(rotation_degrees >= 0.0)) throw std::invalid_argument("rotation range must be symmetric, |r| >= 0");
  if (!(ce_weight >= 0.0) || !(dice_weight >= 0.0) || ce_weight + dice_weight <= 0.0) {
    throw std::invalid_argument("loss mix weights must be nonnegative and not both zero");
  }
}

std::vector<double> inverse_frequency_weights(const std::vector<SegSample>& samples, std::size_t classes,
                                              double cap) {
  std::vector<double> counts(classes, 0.0);
  double total = 0.0;
  for (const auto& s : samples) {
    for (auto l : s.labels) {
      if (l >= classes) throw std::out_of_range("label " + std::to_string(l) + " outside class range");
      counts[l] += 1.0;
      total += 1.0;
    }
  }
  std::vector<double> w(classes, 0.0);
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] > 0) {
      w[c] = total / counts[c];
      ++present;
    }
  }
  if (present == 0) return std::vector<double>(classes, 1.0);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(present);
  for (auto& x : w) x = std::min(x / mean, cap);
  return w;
}

nn::Tensor<float> rotate_channels(const nn::Tensor<float>& x, double degrees) {
  if (x.rank() != 4) throw nn::ShapeError("rotate_channels expects [c, d, h, w]");
  if (degrees == 0.0) return x;
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cd = (static_cast<double>(D) - 1) / 2, ch = (static_cast<double>(H) - 1) / 2;
  Tensor<float> out(x.shape());
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t h = 0; h < H; ++h) {
      const double rd = static_cast<double>(d) - cd, rh = static_cast<double>(h) - ch;
      const double sd = std::clamp(cs * rd + sn * rh + cd, 0.0, static_cast<double>(D - 1));
      const double sh = std::clamp(-sn * rd + cs * rh + ch, 0.0, static_cast<double>(H - 1));
      const auto d0 = static_cast<std::size_t>(sd), h0 = static_cast<std::size_t>(sh);
      const std::size_t d1 = std::min(d0 + 1, D - 1), h1 = std::min(h0 + 1, H - 1);
      const double td = sd - static_cast<double>(d0), th = sh - static_cast<double>(h0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = x.values().data() + c * D * H * W;
        float* dst = out.values().data() + ((c * D + d) * H + h) * W;
        for (std::size_t w = 0; w < W; ++w) {
          const double v = (1 - td) * ((1 - th) * src[(d0 * H + h0) * W + w] + th * src[(d0 * H + h1) * W + w]) +
                           td * ((1 - th) * src[(d1 * H + h0) * W + w] + th * src[(d1 * H + h1) * W + w]);
          dst[w] = static_cast<float>(v);
        }
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> rotate_labels(const std::vector<std::uint8_t>& labels, const Dims3& dims, double degrees) {
  if (labels.size() != dims.voxels()) throw nn::ShapeError("rotate_labels: size does not match dims");
  if (degrees == 0.0) return labels;
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cd = (static_cast<double>(dims.depth) - 1) / 2, ch = (static_cast<double>(dims.height) - 1) / 2;
  std::vector<std::uint8_t> out(labels.size(), 0);
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      const double rd = static_cast<double>(d) - cd, rh = static_cast<double>(h) - ch;
      const long sd = std::lround(cs * rd + sn * rh + cd);
      const long sh = std::lround(-sn * rd + cs * rh + ch);
      if (sd < 0 || sh < 0 || sd >= static_cast<long>(dims.depth) || sh >= static_cast<long>(dims.height)) continue;
      const std::size_t src = (static_cast<std::size_t>(sd) * dims.height + static_cast<std::size_t>(sh)) * dims.width;
      std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(src), dims.width,
                  out.begin() + static_cast<std::ptrdiff_t>((d * dims.height + h) * dims.width));
    }
  }
  return out;
}

nn::Tensor<float> image_input(const Volume3D& canonical, const Dims3& grid) {
  const Volume3D r = resize_trilinear(canonical, grid);
  double mean = 0.0;
  for (float v : r.data()) mean += v;
  mean /= static_cast<double>(r.data().size());
  double var = 0.0;
  for (float v : r.data()) var += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(r.data().size())), 1e-6);
  Tensor<float> t(Shape{1, grid.depth, grid.height, grid.width});
  for (std::size_t i = 0; i < r.data().size(); ++i) t[i] = static_cast<float>((r.data()[i] - mean) / sd);
  return t;
}

nn::Tensor<float> one_hot(const std::vector<std::uint8_t>& labels, const Dims3& dims, std::size_t classes) {
  if (labels.size() != dims.voxels()) throw nn::ShapeError("one_hot: size does not match dims");
  Tensor<float> t(Shape{classes, dims.depth, dims.height, dims.width});
  const std::size_t n = dims.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= classes) throw std::out_of_range("one_hot: label outside class range");
    t[labels[i] * n + i] = 1.0f;
  }
  return t;
}

std::vector<std::uint8_t> argmax_channels(const nn::Tensor<float>& probs) {
  const std::size_t K = probs.dim(0), n = probs.size() / K;
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    float best = probs[i];
    for (std::size_t c = 1; c < K; ++c) {
      if (probs[c * n + i] > best) {
        best = probs[c * n + i];
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> upsample_argmax(const nn::Tensor<float>& probs, const Dims3& target) {
  if (probs.rank() != 4) throw nn::ShapeError("upsample_argmax expects [k, d, h, w]");
  const std::size_t K = probs.dim(0);
  const Dims3 grid{probs.dim(1), probs.dim(2), probs.dim(3)};
  const std::size_t n = grid.voxels();
  std::vector<std::uint8_t> out(target.voxels(), 0);
  std::vector<float> best(target.voxels(), -1.0f);
  for (std::size_t c = 0; c < K; ++c) {
    std::vector<float> channel(probs.values().begin() + static_cast<std::ptrdiff_t>(c * n),
                               probs.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * n));
    const Volume3D up = resize_trilinear(Volume3D(grid, std::move(channel)), target);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (up.data()[i] > best[i]) {
        best[i] = up.data()[i];
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

std::vector<double> train_vnet(VNet<float>& net, const std::vector<SegSample>& samples, const SegTrainConfig& config,
                               const EpochCallback& on_epoch) {
  config.validate();
  if (samples.empty()) throw std::invalid_argument("segmentation training set is empty");
  const auto& spec = net.spec();
  const Dims3 grid = spec.input;
  const auto weights = inverse_frequency_weights(samples, spec.classes, config.max_class_weight);
  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  nn::Adam<float> adam(adam_cfg);
  auto& params = net.parameters();
  params.zero_grad();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> angle(-config.rotation_degrees, config.rotation_degrees);
  const float inv_batch = 1.0f / static_cast<float>(config.batch_size);

  std::vector<double> history;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t in_batch = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const SegSample& s = samples[order[k]];
      const double deg = config.rotation_degrees > 0 ? angle(rng) : 0.0;
      Tensor<float> input = s.input_labels.empty()
                                ? rotate_channels(s.input, deg)
                                : one_hot(rotate_labels(s.input_labels, grid, deg), grid, spec.in_channels);
      const auto target = rotate_labels(s.labels, grid, deg);

      Tape<float> tape;
      auto x = nn::make_leaf(std::move(input));
      auto probs = net.forward(tape, x);
      auto loss = nn::add(tape,
                          nn::scale(tape, nn::voxel_weighted_cross_entropy(tape, probs, target, weights),
                                    static_cast<float>(config.ce_weight)),
                          nn::scale(tape, nn::dice_loss(tape, probs, target), static_cast<float>(config.dice_weight)));
      const double value = loss->value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("segmentation loss is not finite at epoch " + std::to_string(epoch));
      }
      total += value;
      std::vector<float> seed{inv_batch};
      tape.backward(loss, seed);
      if (++in_batch == config.batch_size || k + 1 == order.size()) {
        adam.step(params);
        params.zero_grad();
        in_batch = 0;
      }
    }
    const double mean = total / static_cast<double>(samples.size());
    history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return history;
}

SegmentationCascade::SegmentationCascade(std::size_t base_channels, Dims3 grid, std::uint64_t seed)
    : stage1(VNetSpec{4, base_channels, 1, 5, grid}, seed), stage2(VNetSpec{4, base_channels, 5, 11, grid}, seed + 1) {}

namespace {

std::vector<std::uint8_t> coarsen_labels(const std::vector<std::uint8_t>& labels11) {
  std::vector<std::uint8_t> out(labels11.size());
  std::transform(labels11.begin(), labels11.end(), out.begin(), coarsen_label);
  return out;
}

}  // namespace

CascadeTrainReport train_segmentation(SegmentationCascade& cascade, const std::vector<LabeledStudy>& data,
                                      const SegTrainConfig& config, const EpochCallback& stage1_epoch,
                                      const EpochCallback& stage2_epoch) {
  if (data.empty()) throw std::invalid_argument("segmentation training set is empty");
  const Dims3 grid = cascade.stage1.spec().input;
  std::vector<SegSample> s1, s2;
  for (const auto& st : data) {
    if (st.image.dims() != st.mask.dims()) throw std::invalid_argument("image and mask dims differ");
    if (st.mask.schema() != LabelSchema::ElevenClass) throw std::invalid_argument("training masks must be 11-class");
    const bool left = st.image.side() == Side::Left;
    const Volume3D img = left ? mirror_axial(st.image) : st.image;
    const SegMask m11 = resize_nearest(left ? mirror_axial(st.mask) : st.mask, grid);
    const std::vector<std::uint8_t> fine(m11.labels().begin(), m11.labels().end());
    const auto coarse = coarsen_labels(fine);
    s1.push_back(SegSample{image_input(img, grid), coarse, {}});
    s2.push_back(SegSample{one_hot(coarse, grid, 5), fine, coarse});
  }
  CascadeTrainReport report;
  report.stage1_loss = train_vnet(cascade.stage1, s1, config, stage1_epoch);
  SegTrainConfig c2 = config;
  c2.seed = config.seed + 1;
  report.stage2_loss = train_vnet(cascade.stage2, s2, c2, stage2_epoch);
  return report;
}

SegmentationResult segment(const SegmentationCascade& cascade, const Volume3D& image) {
  const Dims3 grid = cascade.stage1.spec().input;
  const bool left = image.side() == Side::Left;
  const Volume3D canonical = left ? mirror_axial(image) : image;

  Tape<float> tape;
  auto p1 = cascade.stage1.forward(tape, nn::make_leaf(image_input(canonical, grid)));
  const auto coarse_grid = argmax_channels(p1->tensor);
  auto p2 = cascade.stage2.forward(tape, nn::make_leaf(one_hot(coarse_grid, grid, 5)));

  SegMask coarse(image.dims(), LabelSchema::FiveClass, upsample_argmax(p1->tensor, image.dims()));
  SegMask fine(image.dims(), LabelSchema::ElevenClass, upsample_argmax(p2->tensor, image.dims()));
  if (left) return {mirror_axial(coarse), mirror_axial(fine)};
  return {std::move(coarse), std::move(fine)};
}

double mean_foreground_dice(const SegMask& pred, const SegMask& truth) {
  if (pred.dims() != truth.dims() || pred.schema() != truth.schema()) {
    throw std::invalid_argument("Dice needs masks with equal dims and schema");
  }
  const auto K = static_cast<std::size_t>(class_count(truth.schema()));
  std::vector<double> inter(K, 0), sp(K, 0), st(K, 0);
  for (std::size_t i = 0; i < truth.labels().size(); ++i) {
    const auto p = pred.labels()[i], t = truth.labels()[i];
    sp[p] += 1;
    st[t] += 1;
    if (p == t) inter[t] += 1;
  }
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t c = 1; c < K; ++c) {
    if (sp[c] + st[c] == 0) continue;
    sum += 2 * inter[c] / (sp[c] + st[c]);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 1.0;
}

BoundingBox derive_acl_bbox(const SegMask& mask11, Side side) {
  if (mask11.schema() != LabelSchema::ElevenClass) throw std::invalid_argument("ACL localization needs an 11-class mask");
  constexpr auto kMax = std::numeric_limits<std::int64_t>::max();
  constexpr auto kMin = std::numeric_limits<std::int64_t>::min();
  std::array<std::array<std::int64_t, 3>, 11> lo, hi;
  for (auto& a : lo) a.fill(kMax);
  for (auto& a : hi) a.fill(kMin);
  const auto& dims = mask11.dims();
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        const auto l = mask11.at(d, h, w);
        const std::int64_t p[3] = {static_cast<std::int64_t>(d), static_cast<std::int64_t>(h),
                                   static_cast<std::int64_t>(w)};
        for (int a = 0; a < 3; ++a) {
          lo[l][a] = std::min(lo[l][a], p[a]);
          hi[l][a] = std::max(hi[l][a], p[a]);
        }
      }
    }
  }
  auto require = [&](std::uint8_t label) {
    if (lo[label][0] == kMax) {
      throw LocalizationError("cannot localize the ACL: compartment '" +
                              std::string(label_name(LabelSchema::ElevenClass, label)) + "' (label " +
                              std::to_string(label) + ") is empty");
    }
  };
  require(labels11::kMedialFemoralCondyle);
  require(labels11::kLateralFemoralCondyle);
  if (lo[labels11::kMedialTibialCartilage][0] == kMax && lo[labels11::kLateralTibialCartilage][0] == kMax) {
    throw LocalizationError("cannot localize the ACL: tibial cartilage (labels 4 and 5) is empty");
  }
  auto union_min = [&](std::uint8_t a, std::uint8_t b, int axis) { return std::min(lo[a][axis], lo[b][axis]); };
  auto union_max = [&](std::uint8_t a, std::uint8_t b, int axis) { return std::max(hi[a][axis], hi[b][axis]); };
  using namespace labels11;

  BoundingBox box;
  box[Axis::Depth] = {union_min(kMedialFemoralCondyle, kLateralFemoralCondyle, 0),
                      union_max(kMedialTibialCartilage, kLateralTibialCartilage, 0) + 1};
  box[Axis::Height] = {union_min(kMedialTibialCartilage, kLateralTibialCartilage, 1),
                       union_max(kMedialFemoralCondyle, kLateralFemoralCondyle, 1) + 1};
  if (side == Side::Left) {
    box[Axis::Width] = {hi[kLateralFemoralCondyle][2], hi[kMedialFemoralCondyle][2] + 1};
  } else {
    box[Axis::Width] = {lo[kMedialFemoralCondyle][2], lo[kLateralFemoralCondyle][2] + 1};
  }
  for (int a = 0; a < 3; ++a) {
    if (box.axes[a].extent() <= 0) {
      throw LocalizationError("derived ACL box is empty along the " + std::string(axis_name(static_cast<Axis>(a))) +
                              " axis: " + to_string(box));
    }
  }
  return box;
}

Volume3D localize_acl(const Volume3D& vol, const SegMask& mask11, const Dims3& target) {
  if (vol.dims() != mask11.dims()) throw std::invalid_argument("volume and mask dims differ");
  return localize_box(vol, derive_acl_bbox(mask11, vol.side()), target);
}

Volume3D localize_box(const Volume3D& vol, const BoundingBox& box, const Dims3& target) {
  validate_box(box, vol.dims());
  Volume3D roi = resize_trilinear(crop(vol, box), target);
  return vol.side() == Side::Left ? mirror_axial(roi) : roi;
}

std::string LocalizationSummary::format() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f \xC2\xB1 %.2f", mean, sd);
  return buf;
}

LocalizationSummary evaluate_localization(const std::vector<BoundingBox>& predicted,
                                          const std::vector<BoundingBox>& reference) {
  if (predicted.size() != reference.size()) {
    throw std::invalid_argument("box lists differ in length (" + std::to_string(predicted.size()) + " vs " +
                                std::to_string(reference.size()) + ")");
  }
  if (predicted.empty()) throw std::invalid_argument("localization evaluation needs at least one pair");
  LocalizationSummary s;
  for (std::size_t i = 0; i < predicted.size(); ++i) s.ious.push_back(iou(predicted[i], reference[i]));
  const double n = static_cast<double>(s.ious.size());
  s.mean = std::accumulate(s.ious.begin(), s.ious.end(), 0.0) / n;
  if (s.ious.size() > 1) {
    double ss = 0;
    for (double x : s.ious) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / (n - 1));
  }
  return s;
}

void write_boxes(const std::filesystem::path& path, const std::vector<BoxRecord>& boxes) {
  std::ostringstream os;
  os << "study_id,d_lo,d_hi,h_lo,h_hi,w_lo,w_hi\n";
  for (const auto& b : boxes) {
    os << b.study_id;
    for (const auto& iv : b.box.axes) os << ',' << iv.lo << ',' << iv.hi;
    os << '\n';
  }
  const std::string text = os.str();
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                       text.size()));
}

std::vector<BoxRecord> read_boxes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open box file " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<BoxRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    BoxRecord r;
    std::getline(ss, r.study_id, ',');
    std::string cell;
    for (auto& iv : r.box.axes) {
      if (!std::getline(ss, cell, ',')) throw FormatError("box file " + path.string() + ": short line");
      iv.lo = std::stoll(cell);
      if (!std::getline(ss, cell, ',')) throw FormatError("box file " + path.string() + ": short line");
      iv.hi = std::stoll(cell);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace aclstage
