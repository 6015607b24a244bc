#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "aclstage/nn/gradcheck.hpp"
#include "aclstage/phantom.hpp"
#include "aclstage/segloc.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace aclstage;
using aclstage::testing::scan_oracle;
using aclstage::testing::random_tensor;

namespace {

std::size_t vnet_param_oracle(const VNetSpec& s) {
  auto conv = [](std::size_t out, std::size_t in, std::size_t taps) { return out * in * taps + out; };
  std::size_t n = conv(s.base_channels, s.in_channels, 27);
  for (std::size_t l = 1; l <= s.levels; ++l) {
    const std::size_t lo = s.base_channels << (l - 1), hi = s.base_channels << l;
    n += conv(hi, lo, 8) + conv(hi, hi, 27);    // encoder
    n += conv(lo, hi, 8) + conv(lo, 2 * lo, 27);  // decoder
  }
  return n + conv(s.classes, s.base_channels, 1);
}

PhantomStudy phantom(std::uint64_t seed, Grade g, Side side, double noise = 0.04) {
  PhantomSpec s;
  s.seed = seed;
  s.noise_sd = noise;
  Demographics m;
  m.side = side;
  return generate_study(s, g, m);
}

}  // namespace

TEST_CASE("V-Net output shape, probabilities and parameter count") {
  VNetSpec spec;
  spec.levels = 2;
  spec.base_channels = 3;
  spec.classes = 11;
  spec.in_channels = 5;
  spec.input = {8, 4, 8};
  VNet<float> net(spec, 1);
  CHECK(net.parameters().scalar_count() == vnet_param_oracle(spec));
  CHECK(net.channels(2) == 12);
  std::mt19937_64 rng(2);
  nn::Tape<float> tape;
  const auto xd = random_tensor(nn::Shape{5, 8, 4, 8}, rng);
  nn::Tensor<float> xf(xd.shape());
  for (std::size_t i = 0; i < xd.size(); ++i) xf[i] = static_cast<float>(xd[i]);
  auto out = net.forward(tape, nn::make_leaf(xf));
  REQUIRE(out->shape() == nn::Shape{11, 8, 4, 8});
  const std::size_t vox = 8 * 4 * 8;
  for (std::size_t v = 0; v < vox; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < 11; ++c) {
      const float p = out->value()[c * vox + v];
      REQUIRE(p >= 0.0f);
      s += p;
    }
    REQUIRE(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(vnet_param_oracle(VNetSpec{}) == VNet<float>(VNetSpec{}, 1).parameters().scalar_count());
}

TEST_CASE("V-Net spec validation") {
  VNetSpec s;
  s.input = {32, 30, 16};
  CHECK_THROWS_AS(VNet<float>(s, 1), nn::ShapeError);
  s = VNetSpec{};
  s.classes = 4;
  CHECK_THROWS_AS(VNet<float>(s, 1), std::invalid_argument);
  s = VNetSpec{};
  s.levels = 0;
  CHECK_THROWS_AS(VNet<float>(s, 1), std::invalid_argument);
}

TEST_CASE("V-Net passes the finite-difference check") {
  VNetSpec spec;
  spec.levels = 2;
  spec.base_channels = 2;
  spec.input = {4, 4, 4};
  VNet<double> net(spec, 3);
  std::mt19937_64 rng(4);
  // positive biases keep the toy network off the ReLU kinks
  for (auto& e : net.parameters().entries()) {
    const bool bias = e.var->shape().size() == 1;
    for (auto& v : e.var->tensor.values()) {
      v = bias ? std::uniform_real_distribution<double>(0.05, 0.3)(rng)
               : std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
    }
  }
  auto x = nn::make_leaf(random_tensor(nn::Shape{1, 4, 4, 4}, rng));
  std::vector<std::uint8_t> labels(64);
  for (auto& l : labels) l = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 4)(rng));
  auto leaves = net.parameters().entries();
  leaves.push_back({"input", x});
  nn::GradCheckOptions opts;
  opts.max_elements_per_leaf = 40;
  auto rep = nn::finite_diff_check(
      [&](nn::Tape<double>& t) {
        auto p = net.forward(t, x);
        return nn::add(t, nn::voxel_weighted_cross_entropy(t, p, labels, {0.5, 1, 2, 1, 3}), nn::dice_loss(t, p, labels));
      },
      leaves, opts);
  INFO(rep.worst_leaf, "[", rep.worst_index, "] analytic ", rep.analytic_at_worst, " numeric ", rep.numeric_at_worst);
  CHECK(rep.max_relative_error < 1e-4);
}

TEST_CASE("rotation, one-hot and argmax helpers") {
  const Dims3 d{6, 5, 3};
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> labels(d.voxels());
  for (auto& l : labels) l = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 4)(rng));
  const auto oh = one_hot(labels, d, 5);
  CHECK(oh.shape() == nn::Shape{5, 6, 5, 3});
  CHECK(argmax_channels(oh) == labels);
  CHECK(rotate_labels(labels, d, 0.0) == labels);
  const auto r0 = rotate_channels(oh, 0.0);
  CHECK(std::equal(r0.values().begin(), r0.values().end(), oh.values().begin()));
  CHECK(upsample_argmax(oh, d) == labels);

  // a quarter turn in a square plane maps the grid onto itself
  const Dims3 sq{5, 5, 2};
  std::vector<std::uint8_t> single(sq.voxels(), 0);
  single[(0 * 5 + 2) * 2 + 1] = 3;
  const auto turned = rotate_labels(single, sq, 90.0);
  CHECK(std::count(turned.begin(), turned.end(), 3) == 1);
  CHECK(rotate_labels(turned, sq, -90.0) == single);

  // constant channels stay constant under any rotation (edges clamp)
  nn::Tensor<float> flat(nn::Shape{2, 6, 5, 3});
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = i < flat.size() / 2 ? 0.25f : 0.75f;
  const auto rf = rotate_channels(flat, 4.0);
  for (std::size_t i = 0; i < rf.size(); ++i) REQUIRE(std::abs(rf[i] - flat[i]) < 1e-6f);
}

TEST_CASE("inverse frequency weights") {
  SegSample s;
  s.labels = {0, 0, 0, 0, 0, 0, 1, 1, 2};
  auto w = inverse_frequency_weights({s}, 5, 100.0);
  CHECK(w[3] == 0.0);
  CHECK(w[4] == 0.0);
  CHECK((w[0] + w[1] + w[2]) / 3 == doctest::Approx(1.0));
  CHECK(w[1] / w[0] == doctest::Approx(3.0));
  CHECK(w[2] / w[0] == doctest::Approx(6.0));
  auto capped = inverse_frequency_weights({s}, 5, 1.5);
  for (double x : capped) CHECK(x <= 1.5);
}

TEST_CASE("derived box equals the slice-scan oracle on random phantom masks") {
  std::mt19937_64 rng(77);
  int compared = 0;
  for (int i = 0; i < 200; ++i) {
    const Grade g = static_cast<Grade>(i % kGradeCount);
    const Side side = i % 3 == 0 ? Side::Left : Side::Right;
    auto st = phantom(1000 + i, g, side);
    SegMask m = st.mask;
    if (i % 2) {
      // scattered stray labels exercise the rules off the nominal anatomy
      for (int k = 0; k < 20; ++k) {
        std::size_t idx = std::uniform_int_distribution<std::size_t>(0, m.labels().size() - 1)(rng);
        m.labels()[idx] = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 10)(rng));
      }
    }
    const auto expect = scan_oracle(m, side);
    const bool empty = std::any_of(expect.axes.begin(), expect.axes.end(), [](const Interval& a) { return a.extent() <= 0; });
    if (empty) {
      // stray labels can order the rules into an empty box
      REQUIRE_THROWS_AS(derive_acl_bbox(m, side), LocalizationError);
      continue;
    }
    REQUIRE(derive_acl_bbox(m, side) == expect);
    ++compared;
  }
  CHECK(compared >= 150);
}

TEST_CASE("derived box on singleton compartments and left mirror") {
  SegMask m({10, 10, 10}, LabelSchema::ElevenClass);
  m.at(2, 7, 1) = labels11::kMedialFemoralCondyle;
  m.at(3, 8, 6) = labels11::kLateralFemoralCondyle;
  m.at(6, 3, 2) = labels11::kMedialTibialCartilage;
  m.at(7, 4, 5) = labels11::kLateralTibialCartilage;
  auto box = derive_acl_bbox(m, Side::Right);
  CHECK(box[Axis::Depth] == Interval{2, 8});
  CHECK(box[Axis::Height] == Interval{3, 9});
  CHECK(box[Axis::Width] == Interval{1, 7});

  const auto left = derive_acl_bbox(mirror_axial(m), Side::Left);
  CHECK(left == mirror_axial(box, m.dims()));
}

TEST_CASE("missing compartments name the label") {
  auto st = phantom(3, Grade::Intact, Side::Right);
  SegMask m = st.mask;
  for (auto& l : m.labels()) {
    if (l == labels11::kLateralFemoralCondyle) l = 0;
  }
  try {
    derive_acl_bbox(m, Side::Right);
    FAIL("expected LocalizationError");
  } catch (const LocalizationError& e) {
    CHECK(std::string(e.what()).find("label 3") != std::string::npos);
  }
  m = st.mask;
  for (auto& l : m.labels()) {
    if (l == 4 || l == 5) l = 0;
  }
  CHECK_THROWS_AS(derive_acl_bbox(m, Side::Right), LocalizationError);
  CHECK_THROWS_AS(derive_acl_bbox(coarsen(st.mask), Side::Right), std::invalid_argument);
}

TEST_CASE("the derived box encloses the ligament band on phantoms") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    for (int g = 0; g < kGradeCount; ++g) {
      const Side side = seed % 2 ? Side::Left : Side::Right;
      auto st = phantom(seed, static_cast<Grade>(g), side);
      const auto box = derive_acl_bbox(st.mask, side);
      const Dims3 d = st.mask.dims();
      std::size_t inside = 0, total = 0;
      for (std::size_t z = 0; z < d.depth; ++z) {
        for (std::size_t y = 0; y < d.height; ++y) {
          for (std::size_t x = 0; x < d.width; ++x) {
            if (!st.band[st.mask.index(z, y, x)]) continue;
            ++total;
            inside += box.contains(z, y, x);
          }
        }
      }
      REQUIRE(total > 0);
      CHECK(inside == total);
    }
  }
}

TEST_CASE("localization contracts") {
  auto st = phantom(8, Grade::FullTear, Side::Right);
  const auto box = derive_acl_bbox(st.mask, Side::Right);

  SUBCASE("identity at the box dims") {
    CHECK(localize_acl(st.image, st.mask, box.extents()) == crop(st.image, box));
  }
  SUBCASE("constant preservation") {
    Volume3D c(st.image.dims(), 0.375f, Side::Right);
    const auto roi = localize_acl(c, st.mask);
    for (float v : roi.data()) REQUIRE(v == 0.375f);
  }
  SUBCASE("left twins localize to the right ROI") {
    auto twin = phantom(8, Grade::FullTear, Side::Left);
    const auto r = localize_acl(st.image, st.mask);
    const auto l = localize_acl(twin.image, twin.mask);
    CHECK(l.side() == Side::Right);  // mirrored into the right orientation
    REQUIRE(l.dims() == kPhantomRoiDims);
    for (std::size_t i = 0; i < r.data().size(); ++i) REQUIRE(std::abs(r.data()[i] - l.data()[i]) < 1e-5f);
  }
  SUBCASE("mirroring is an involution") {
    const auto roi = localize_acl(st.image, st.mask);
    CHECK(mirror_axial(mirror_axial(roi)) == roi);
  }
  SUBCASE("mismatched dims") {
    Volume3D small({8, 8, 8}, 0.0f, Side::Right);
    CHECK_THROWS_AS(localize_acl(small, st.mask), std::invalid_argument);
  }
}

TEST_CASE("localization summary") {
  BoundingBox a;
  a.axes = {Interval{0, 2}, Interval{0, 2}, Interval{0, 2}};
  BoundingBox far;
  far.axes = {Interval{5, 7}, Interval{5, 7}, Interval{5, 7}};
  auto s = evaluate_localization({a, a}, {a, far});
  CHECK(s.mean == doctest::Approx(0.5));
  CHECK(s.sd == doctest::Approx(std::sqrt(0.5)));
  CHECK(s.format() == "0.50 \xC2\xB1 0.71");
  CHECK(evaluate_localization({a}, {a}).format() == "1.00 \xC2\xB1 0.00");
  CHECK_THROWS_AS(evaluate_localization({a}, {}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_localization({}, {}), std::invalid_argument);
}

TEST_CASE("mean foreground Dice") {
  SegMask a({2, 2, 2}, LabelSchema::FiveClass, {0, 1, 1, 2, 2, 0, 0, 0});
  CHECK(mean_foreground_dice(a, a) == 1.0);
  SegMask b({2, 2, 2}, LabelSchema::FiveClass, {0, 1, 0, 2, 3, 0, 0, 0});
  // class 1: 2*1/3, class 2: 2*1/3, class 3: 0
  CHECK(mean_foreground_dice(b, a) == doctest::Approx((2.0 / 3 + 2.0 / 3 + 0) / 3));
}

TEST_CASE("V-Net training: memorizes one study, zero epochs is a no-op, deterministic") {
  auto st = phantom(4, Grade::Intact, Side::Right);
  const Dims3 grid{16, 16, 8};
  SegMask m = resize_nearest(coarsen(st.mask), grid);
  SegSample s{image_input(st.image, grid), std::vector<std::uint8_t>(m.labels().begin(), m.labels().end()), {}};
  VNetSpec spec;
  spec.levels = 3;
  spec.input = grid;
  SegTrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.rotation_degrees = 0;

  cfg.epochs = 0;
  VNet<float> idle(spec, 2);
  const auto before = idle.parameters().snapshot();
  CHECK(train_vnet(idle, {s}, cfg).empty());
  CHECK(idle.parameters().snapshot() == before);

  cfg.epochs = 300;
  VNet<float> net(spec, 2);
  std::size_t calls = 0;
  auto losses = train_vnet(net, {s}, cfg, [&](std::size_t, double) { ++calls; });
  CHECK(calls == 300);
  CHECK(losses.back() < losses.front());
  nn::Tape<float> tape;
  auto p = net.forward(tape, nn::make_leaf(s.input));
  SegMask pred(grid, LabelSchema::FiveClass, argmax_channels(p->tensor));
  CHECK(mean_foreground_dice(pred, m) >= 0.9);

  cfg.epochs = 3;
  cfg.rotation_degrees = 5;
  VNet<float> a(spec, 7), b(spec, 7);
  CHECK(train_vnet(a, {s, s}, cfg) == train_vnet(b, {s, s}, cfg));
  CHECK(a.parameters().snapshot() == b.parameters().snapshot());
}

TEST_CASE("segmentation cascade returns masks in the input frame") {
  std::vector<LabeledStudy> data;
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    auto st = phantom(seed, Grade::Intact, seed == 1 ? Side::Left : Side::Right);
    data.push_back({st.image, st.mask});
  }
  SegmentationCascade cascade(2, {16, 16, 16}, 3);
  SegTrainConfig cfg;
  cfg.epochs = 1;
  auto rep = train_segmentation(cascade, data, cfg);
  CHECK(rep.stage1_loss.size() == 1);
  CHECK(rep.stage2_loss.size() == 1);
  auto left = segment(cascade, data[0].image);
  CHECK(left.fine.dims() == data[0].image.dims());
  CHECK(left.fine.schema() == LabelSchema::ElevenClass);
  CHECK(left.coarse.schema() == LabelSchema::FiveClass);
  // a left image is processed in the right frame and mapped back
  Volume3D flipped = mirror_axial(data[0].image);
  Volume3D as_right(flipped.dims(), 0.0f, Side::Right);
  std::copy(flipped.data().begin(), flipped.data().end(), as_right.data().begin());
  CHECK(mirror_axial(segment(cascade, as_right).fine) == left.fine);
}

TEST_CASE("box records round trip") {
  const auto path = std::filesystem::temp_directory_path() / "aclstage_test_boxes.csv";
  BoundingBox b;
  b.axes = {Interval{1, 5}, Interval{2, 9}, Interval{0, 3}};
  write_boxes(path, {{"S0001", b}, {"S0002", BoundingBox::full({4, 4, 4})}});
  auto back = read_boxes(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].study_id == "S0001");
  CHECK(back[0].box == b);
  CHECK(back[1].box == BoundingBox::full({4, 4, 4}));
  std::filesystem::remove(path);
}
