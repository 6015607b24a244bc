#include "aclstage/stager.hpp"

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

std::string_view backbone_name(Backbone b) { return b == Backbone::ThreeD ? "3d" : "2d"; }

Backbone parse_backbone(std::string_view text) {
  if (text == "3d" || text == "3D") return Backbone::ThreeD;
  if (text == "2d" || text == "2D") return Backbone::TwoD;
  throw std::invalid_argument("unknown backbone '" + std::string(text) + "' (expected 3d or 2d)");
}

namespace {

std::vector<std::size_t> pool_window(const std::vector<std::size_t>& spatial) {
  std::vector<std::size_t> w;
  for (auto e : spatial) w.push_back(e >= 2 ? 2 : 1);
  return w;
}

void apply_window(std::vector<std::size_t>& spatial, const std::vector<std::size_t>& window) {
  for (std::size_t a = 0; a < spatial.size(); ++a) spatial[a] /= window[a];
}

}  // namespace

void Classifier3DSpec::validate() const {
  if (input.voxels() == 0) throw std::invalid_argument("classifier input dims must be positive");
  for (auto c : channels) {
    if (c == 0) throw std::invalid_argument("classifier channel counts must be >= 1");
  }
  if (dense_width == 0) throw std::invalid_argument("classifier dense width must be >= 1");
}

template <typename T>
Classifier3D<T>::Classifier3D(const Classifier3DSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> spatial{spec_.input.depth, spec_.input.height, spec_.input.width};
  std::size_t in = 1;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t out = spec_.channels[i];
    const std::string tag = "conv" + std::to_string(i + 1);
    auto k = params_.add(tag + ".w", nn::he_uniform<T>(Shape{out, in, 3, 3, 3}, in * 27, rng));
    auto b = params_.add(tag + ".b", Tensor<T>(Shape{out}));
    convs_.emplace_back(k, b);
    in = out;
    if (i == 1 && spec_.skip) in += spec_.channels[0];
    if (spec_.pool_after[i]) {
      auto w = pool_window(spatial);
      apply_window(spatial, w);
      pools_.push_back(w);
    } else {
      pools_.emplace_back();
    }
  }
  flat_ = in * spatial[0] * spatial[1] * spatial[2];
  auto w1 = params_.add("dense1.w", nn::he_uniform<T>(Shape{spec_.dense_width, flat_}, flat_, rng));
  auto b1 = params_.add("dense1.b", Tensor<T>(Shape{spec_.dense_width}));
  auto w2 = params_.add("dense2.w", nn::he_uniform<T>(Shape{1, spec_.dense_width}, spec_.dense_width, rng));
  auto b2 = params_.add("dense2.b", Tensor<T>(Shape{1}));
  dense_.emplace_back(w1, b1);
  dense_.emplace_back(w2, b2);
}

template <typename T>
Var<T> Classifier3D<T>::forward(Tape<T>& tape, const Var<T>& input) const {
  const Shape expect{1, spec_.input.depth, spec_.input.height, spec_.input.width};
  if (input->shape() != expect) {
    throw nn::ShapeError("3D classifier input " + nn::to_string(input->shape()) + " does not match " +
                         nn::to_string(expect));
  }
  nn::Conv3dGeometry same;
  same.pad = {1, 1, 1};
  Var<T> first;
  Var<T> y = input;
  for (std::size_t i = 0; i < 6; ++i) {
    y = nn::relu(tape, nn::conv3d(tape, y, convs_[i].first, convs_[i].second, same));
    if (i == 0) first = y;
    if (i == 1 && spec_.skip) y = nn::concat_channels(tape, y, first);
    if (!pools_[i].empty()) y = nn::max_pool(tape, y, pools_[i]);
  }
  auto h = nn::relu(tape, nn::dense(tape, nn::flatten(tape, y), dense_[0].first, dense_[0].second));
  return nn::dense(tape, h, dense_[1].first, dense_[1].second);
}

void Classifier2DSpec::validate() const {
  if (input.voxels() == 0) throw std::invalid_argument("classifier input dims must be positive");
  for (auto c : channels) {
    if (c == 0) throw std::invalid_argument("classifier channel counts must be >= 1");
  }
}

template <typename T>
Classifier2D<T>::Classifier2D(const Classifier2DSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> spatial{spec_.input.depth, spec_.input.height};
  std::size_t in = 1;
  for (std::size_t i = 0; i < spec_.channels.size(); ++i) {
    const std::size_t out = spec_.channels[i];
    const std::string tag = "slice_conv" + std::to_string(i + 1);
    auto k = params_.add(tag + ".w", nn::he_uniform<T>(Shape{out, in, 3, 3}, in * 9, rng));
    auto b = params_.add(tag + ".b", Tensor<T>(Shape{out}));
    convs_.emplace_back(k, b);
    in = out;
    if (spec_.pool_after[i]) {
      auto w = pool_window(spatial);
      apply_window(spatial, w);
      pools_.push_back(w);
    } else {
      pools_.emplace_back();
    }
  }
  final_extent_ = spatial;
  dense_w_ = params_.add("head.w", nn::he_uniform<T>(Shape{1, in}, in, rng));
  dense_b_ = params_.add("head.b", Tensor<T>(Shape{1}));
}

template <typename T>
Var<T> Classifier2D<T>::encode_slice(Tape<T>& tape, const Var<T>& slice) const {
  nn::Conv2dGeometry same;
  same.pad = {1, 1};
  Var<T> y = slice;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    y = nn::relu(tape, nn::conv2d(tape, y, convs_[i].first, convs_[i].second, same));
    if (!pools_[i].empty()) y = nn::max_pool(tape, y, pools_[i]);
  }
  return nn::flatten(tape, nn::max_pool(tape, y, final_extent_));
}

template <typename T>
Var<T> Classifier2D<T>::head(Tape<T>& tape, const Var<T>& pooled) const {
  return nn::dense(tape, pooled, dense_w_, dense_b_);
}

template <typename T>
Var<T> Classifier2D<T>::forward(Tape<T>& tape, const Var<T>& input) const {
  const Shape expect{1, spec_.input.depth, spec_.input.height, spec_.input.width};
  if (input->shape() != expect) {
    throw nn::ShapeError("2D classifier input " + nn::to_string(input->shape()) + " does not match " +
                         nn::to_string(expect));
  }
  std::vector<Var<T>> features;
  for (std::size_t w = 0; w < spec_.input.width; ++w) {
    features.push_back(encode_slice(tape, nn::select_slice(tape, input, w)));
  }
  return head(tape, nn::cross_slice_max(tape, nn::stack(tape, features)));
}

template class Classifier3D<float>;
template class Classifier3D<double>;
template class Classifier2D<float>;
template class Classifier2D<double>;

std::unique_ptr<StageNet<float>> make_stage_net(Backbone backbone, const Dims3& roi, std::uint64_t seed) {
  if (backbone == Backbone::ThreeD) {
    Classifier3DSpec spec;
    spec.input = roi;
    return std::make_unique<Classifier3D<float>>(spec, seed);
  }
  Classifier2DSpec spec;
  spec.input = roi;
  return std::make_unique<Classifier2D<float>>(spec, seed);
}

template <typename T>
nn::Tensor<T> classifier_input(const Volume3D& roi) {
  const auto v = roi.data();
  double mean = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(v.size())), 1e-6);
  const auto& d = roi.dims();
  Tensor<T> t(Shape{1, d.depth, d.height, d.width});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>((v[i] - mean) / sd);
  return t;
}

template nn::Tensor<float> classifier_input<float>(const Volume3D&);
template nn::Tensor<double> classifier_input<double>(const Volume3D&);

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double stage_probability(const StageNet<float>& net, const Volume3D& roi) {
  Tape<float> tape;
  auto logit = net.forward(tape, nn::make_leaf(classifier_input<float>(roi)));
  return sigmoid(static_cast<double>(logit->value()[0]));
}

std::string_view stage_abbrev(Stage s) {
  switch (s) {
    case Stage::Reconstructed: return "R";
    case Stage::FullTear: return "FT";
    case Stage::PartialTear: return "PT";
  }
  return "?";
}

Stage parse_stage(std::string_view text) {
  if (text == "R") return Stage::Reconstructed;
  if (text == "FT") return Stage::FullTear;
  if (text == "PT") return Stage::PartialTear;
  throw std::invalid_argument("unknown stage '" + std::string(text) + "' (expected R, FT or PT)");
}

Grade stage_positive(Stage s) {
  switch (s) {
    case Stage::Reconstructed: return Grade::Reconstructed;
    case Stage::FullTear: return Grade::FullTear;
    case Stage::PartialTear: return Grade::PartialTear;
  }
  return Grade::Intact;
}

bool stage_admits(Stage s, Grade g) { return static_cast<int>(g) <= static_cast<int>(stage_positive(s)); }

void StageConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("decision threshold must lie in (0, 1)");
}

namespace {

float sample_trilinear(const Volume3D& v, double z, double y, double x) {
  const auto& d = v.dims();
  auto split = [](double p, std::size_t n, std::size_t& i0, std::size_t& i1) {
    if (n == 1) {
      i0 = i1 = 0;
      return 0.0;
    }
    auto f = static_cast<std::size_t>(std::floor(p));
    if (f >= n - 1) f = n - 2;
    i0 = f;
    i1 = f + 1;
    return p - static_cast<double>(f);
  };
  std::size_t z0, z1, y0, y1, x0, x1;
  const double tz = split(z, d.depth, z0, z1), ty = split(y, d.height, y0, y1), tx = split(x, d.width, x0, x1);
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), tx);
  const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), tx);
  const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), tx);
  const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), tx);
  return static_cast<float>(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
}

}  // namespace

Volume3D apply_augmentation(const Volume3D& vol, const AugmentParams& params) {
  if (!(params.zoom > 0.0)) throw std::invalid_argument("zoom factor must be > 0");
  const auto& d = vol.dims();
  const float fill = vol.min_value();
  Volume3D zoomed = vol;
  if (params.zoom != 1.0) {
    const double cz = (static_cast<double>(d.depth) - 1) / 2, cy = (static_cast<double>(d.height) - 1) / 2,
                 cx = (static_cast<double>(d.width) - 1) / 2;
    const double inv = 1.0 / params.zoom;
    const double eps = 1e-9;
    for (std::size_t z = 0; z < d.depth; ++z) {
      for (std::size_t y = 0; y < d.height; ++y) {
        for (std::size_t x = 0; x < d.width; ++x) {
          const double sz = cz + (static_cast<double>(z) - cz) * inv;
          const double sy = cy + (static_cast<double>(y) - cy) * inv;
          const double sx = cx + (static_cast<double>(x) - cx) * inv;
          const bool outside = sz < -eps || sy < -eps || sx < -eps || sz > static_cast<double>(d.depth - 1) + eps ||
                               sy > static_cast<double>(d.height - 1) + eps ||
                               sx > static_cast<double>(d.width - 1) + eps;
          zoomed.at(z, y, x) = outside ? fill
                                       : sample_trilinear(vol, std::clamp(sz, 0.0, static_cast<double>(d.depth - 1)),
                                                          std::clamp(sy, 0.0, static_cast<double>(d.height - 1)),
                                                          std::clamp(sx, 0.0, static_cast<double>(d.width - 1)));
        }
      }
    }
  }
  if (params.shift == std::array<int, 3>{0, 0, 0}) return zoomed;
  Volume3D out(d, fill, vol.side());
  const auto D = static_cast<long>(d.depth), H = static_cast<long>(d.height), W = static_cast<long>(d.width);
  for (long z = 0; z < D; ++z) {
    const long sz = z - params.shift[0];
    if (sz < 0 || sz >= D) continue;
    for (long y = 0; y < H; ++y) {
      const long sy = y - params.shift[1];
      if (sy < 0 || sy >= H) continue;
      for (long x = 0; x < W; ++x) {
        const long sx = x - params.shift[2];
        if (sx < 0 || sx >= W) continue;
        out.at(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            zoomed.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

AugmentParams draw_augmentation(const Dims3& dims, std::mt19937_64& rng) {
  AugmentParams p;
  const std::size_t extents[3] = {dims.depth, dims.height, dims.width};
  for (int a = 0; a < 3; ++a) {
    const int m = static_cast<int>(std::floor(0.1 * static_cast<double>(extents[a])));
    p.shift[a] = std::uniform_int_distribution<int>(-m, m)(rng);
  }
  p.zoom = std::uniform_real_distribution<double>(0.9, 1.1)(rng);
  return p;
}

Volume3D augment_classification(const Volume3D& vol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return apply_augmentation(vol, draw_augmentation(vol.dims(), rng));
}

std::array<double, 2> stage_class_weights(Stage stage, const std::vector<StageSample>& samples) {
  double n = 0, pos = 0;
  for (const auto& s : samples) {
    if (!stage_admits(stage, s.grade)) continue;
    n += 1;
    if (s.grade == stage_positive(stage)) pos += 1;
  }
  const double neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw CompositionError("stage " + std::string(stage_abbrev(stage)) + ": the training population needs both " +
                           "classes (positives " + std::to_string(static_cast<int>(pos)) + ", negatives " +
                           std::to_string(static_cast<int>(neg)) + ")");
  }
  return {n / (2 * neg), n / (2 * pos)};
}

namespace {

double sample_loss(Tape<float>& tape, const StageNet<float>& net, const Tensor<float>& input, std::size_t target,
                   const std::vector<double>& weights, Var<float>* loss_out) {
  auto logit = net.forward(tape, nn::make_leaf(input));
  auto loss = nn::weighted_cross_entropy(tape, nn::binary_probabilities(tape, logit), target, weights);
  if (loss_out) *loss_out = loss;
  return loss->value()[0];
}

}  // namespace

StageTrainResult train_stage(StageNet<float>& net, const std::vector<StageSample>& train,
                             const std::vector<StageSample>& validation, const StageConfig& config,
                             const StageEpochCallback& on_epoch) {
  config.validate();
  const Stage stage = config.stage;
  std::vector<const StageSample*> pop, val;
  for (const auto& s : train) {
    if (stage_admits(stage, s.grade)) pop.push_back(&s);
  }
  for (const auto& s : validation) {
    if (stage_admits(stage, s.grade)) val.push_back(&s);
  }
  const auto cw = stage_class_weights(stage, train);
  const std::vector<double> weights{cw[0], cw[1]};
  const Grade positive = stage_positive(stage);
  auto target_of = [&](const StageSample& s) -> std::size_t { return s.grade == positive ? 1 : 0; };

  std::vector<Tensor<float>> val_inputs;
  for (const auto* s : val) val_inputs.push_back(classifier_input<float>(s->roi));
  std::vector<Tensor<float>> plain;
  if (!config.augment) {
    for (const auto* s : pop) plain.push_back(classifier_input<float>(s->roi));
  }

  nn::AdamConfig ac;
  ac.learning_rate = config.learning_rate;
  nn::Adam<float> adam(ac);
  auto& params = net.parameters();
  params.zero_grad();
  std::mt19937_64 rng(config.seed);
  const float inv_batch = 1.0f / static_cast<float>(config.batch_size);

  StageTrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_params;
  std::vector<std::size_t> order(pop.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const StageSample& s = *pop[order[k]];
        Tensor<float> input = config.augment
                                  ? classifier_input<float>(apply_augmentation(s.roi, draw_augmentation(s.roi.dims(), rng)))
                                  : plain[order[k]];
        Tape<float> tape;
        Var<float> loss;
        const double v = sample_loss(tape, net, input, target_of(s), weights, &loss);
        if (!std::isfinite(v)) {
          throw std::runtime_error("stage " + std::string(stage_abbrev(stage)) + ": loss is not finite at epoch " +
                                   std::to_string(epoch));
        }
        total += v;
        std::vector<float> seed{inv_batch};
        tape.backward(loss, seed);
      }
      adam.step(params);
      params.zero_grad();
    }
    const double train_mean = total / static_cast<double>(pop.size());
    double val_mean = std::numeric_limits<double>::quiet_NaN();
    if (!val.empty()) {
      double vt = 0;
      for (std::size_t i = 0; i < val.size(); ++i) {
        Tape<float> tape;
        vt += sample_loss(tape, net, val_inputs[i], target_of(*val[i]), weights, nullptr);
      }
      val_mean = vt / static_cast<double>(val.size());
    }
    result.train_loss.push_back(train_mean);
    result.validation_loss.push_back(val_mean);
    const double score = val.empty() ? -static_cast<double>(epoch) : val_mean;
    if (score < best) {
      best = score;
      best_params = params.snapshot();
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(epoch, train_mean, val_mean);
  }
  if (!best_params.empty()) params.restore(best_params);
  return result;
}

CascadeDecision cascade_infer(const std::array<StageScorer, 3>& scorers, const Volume3D& roi,
                              const std::array<double, 3>& thresholds) {
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("cascade thresholds must lie in (0, 1)");
  }
  CascadeDecision d;
  d.p_r = scorers[0](roi);
  if (*d.p_r >= thresholds[0]) {
    d.grade = Grade::Reconstructed;
    return d;
  }
  d.p_ft = scorers[1](roi);
  if (*d.p_ft >= thresholds[1]) {
    d.grade = Grade::FullTear;
    return d;
  }
  d.p_pt = scorers[2](roi);
  d.grade = *d.p_pt >= thresholds[2] ? Grade::PartialTear : Grade::Intact;
  return d;
}

Stage deciding_stage(const CascadeDecision& d) {
  switch (d.grade) {
    case Grade::Reconstructed: return Stage::Reconstructed;
    case Grade::FullTear: return Stage::FullTear;
    default: return Stage::PartialTear;
  }
}

Saliency saliency_map(const StageNet<float>& net, const Volume3D& roi) {
  Tape<float> tape;
  auto x = nn::make_leaf(classifier_input<float>(roi));
  auto logit = net.forward(tape, x);
  tape.backward(logit);
  Saliency s{Volume3D(roi.dims(), 0.0f, roi.side()), false};
  float peak = 0.0f;
  for (float g : x->grad()) {
    if (std::isfinite(g)) peak = std::max(peak, std::abs(g));
  }
  if (!(peak > 0.0f)) {
    s.degenerate = true;
    return s;
  }
  const auto g = x->grad();
  for (std::size_t i = 0; i < g.size(); ++i) s.map.data()[i] = std::isfinite(g[i]) ? std::abs(g[i]) / peak : 0.0f;
  return s;
}

void write_decisions(const std::filesystem::path& path, const std::vector<DecisionRecord>& records) {
  std::ostringstream os;
  os << "study_id,p_R,p_FT,p_PT,predicted,truth\n";
  char buf[32];
  auto prob = [&](const std::optional<double>& p) {
    if (!p) return std::string();
    std::snprintf(buf, sizeof buf, "%.6f", *p);
    return std::string(buf);
  };
  for (const auto& r : records) {
    os << r.study_id << ',' << prob(r.decision.p_r) << ',' << prob(r.decision.p_ft) << ',' << prob(r.decision.p_pt)
       << ',' << static_cast<int>(r.decision.grade) << ',' << static_cast<int>(r.truth) << '\n';
  }
  const std::string text = os.str();
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                       text.size()));
}

std::vector<DecisionRecord> read_decisions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open decision file " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<DecisionRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) {
      throw FormatError("decision file " + path.string() + " line " + std::to_string(line_no) + ": expected 6 fields");
    }
    DecisionRecord r;
    r.study_id = f[0];
    auto prob = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    r.decision.p_r = prob(f[1]);
    r.decision.p_ft = prob(f[2]);
    r.decision.p_pt = prob(f[3]);
    r.decision.grade = grade_from_int(std::stoi(f[4]));
    r.truth = grade_from_int(std::stoi(f[5]));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace aclstage
