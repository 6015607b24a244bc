#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "aclstage/phantom.hpp"
#include "doctest.h"

using namespace aclstage;

namespace {

PhantomSpec noiseless(std::uint64_t seed = 3) {
  PhantomSpec s;
  s.noise_sd = 0;
  s.bias_amplitude = 0;
  s.seed = seed;
  return s;
}

Demographics meta(Side side) {
  Demographics m;
  m.side = side;
  return m;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  PhantomSpec s;
  s.seed = 11;
  auto a = generate_study(s, Grade::FullTear, meta(Side::Right));
  auto b = generate_study(s, Grade::FullTear, meta(Side::Right));
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(a.band == b.band);
  s.seed = 12;
  auto c = generate_study(s, Grade::FullTear, meta(Side::Right));
  CHECK_FALSE(a.image == c.image);
}

TEST_CASE("noiseless intact band carries the nominal intensity") {
  auto st = generate_study(noiseless(), Grade::Intact, meta(Side::Right));
  std::size_t n = 0;
  for (std::size_t i = 0; i < st.band.size(); ++i) {
    if (!st.band[i]) continue;
    ++n;
    REQUIRE(st.image.data()[i] == intensity::kBand);
  }
  CHECK(n > 20);
}

TEST_CASE("every compartment is present and the band avoids labeled tissue") {
  for (int g = 0; g < kGradeCount; ++g) {
    for (Side side : {Side::Right, Side::Left}) {
      for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        PhantomSpec s;
        s.seed = seed;
        auto st = generate_study(s, static_cast<Grade>(g), meta(side));
        const auto hist = st.mask.class_histogram();
        for (std::uint8_t l = 0; l < 11; ++l) REQUIRE(hist[l] > 0);
        for (std::size_t i = 0; i < st.band.size(); ++i) {
          if (st.band[i]) REQUIRE(st.mask.labels()[i] == labels11::kBackground);
        }
        CHECK(st.image.side() == side);
      }
    }
  }
}

TEST_CASE("band connectivity encodes tears") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (Side side : {Side::Right, Side::Left}) {
      auto intact = generate_study(noiseless(seed), Grade::Intact, meta(side));
      CHECK(count_components(intact.band, intact.mask.dims()) == 1);
      auto partial = generate_study(noiseless(seed), Grade::PartialTear, meta(side));
      CHECK(count_components(partial.band, partial.mask.dims()) == 1);
      auto full = generate_study(noiseless(seed), Grade::FullTear, meta(side));
      CHECK(count_components(full.band, full.mask.dims()) >= 2);
    }
  }
}

TEST_CASE("grade is recoverable from noiseless geometry by rule") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    for (int g = 0; g < kGradeCount; ++g) {
      const Side side = seed % 2 ? Side::Left : Side::Right;
      auto st = generate_study(noiseless(seed), static_cast<Grade>(g), meta(side));
      REQUIRE(detect_grade_noiseless(st.image, st.mask, st.band) == static_cast<Grade>(g));
    }
  }
}

TEST_CASE("left knees are mirror images of their right twins") {
  auto r = generate_study(noiseless(5), Grade::Reconstructed, meta(Side::Right));
  auto l = generate_study(noiseless(5), Grade::Reconstructed, meta(Side::Left));
  CHECK(mirror_axial(l.image) == r.image);
  CHECK(mirror_axial(l.mask) == r.mask);
}

TEST_CASE("spec validation and geometry errors") {
  PhantomSpec s;
  s.noise_sd = -1;
  CHECK_THROWS_AS(generate_study(s, Grade::Intact, meta(Side::Right)), std::invalid_argument);
  s = PhantomSpec{};
  s.band_radius = 0.5;
  CHECK_THROWS_AS(generate_study(s, Grade::Intact, meta(Side::Right)), std::invalid_argument);
  s = PhantomSpec{};
  s.gap_length = 100;
  CHECK_THROWS_AS(generate_study(s, Grade::FullTear, meta(Side::Right)), std::invalid_argument);
  s = PhantomSpec{};
  s.dims = {16, 16, 8};
  CHECK_THROWS_AS(generate_study(s, Grade::Intact, meta(Side::Right)), GeometryError);
}

TEST_CASE("largest-remainder apportionment") {
  const auto c = apportion(862, {0.814, 0.014, 0.060, 0.111});
  CHECK(c == std::array<std::size_t, 4>{702, 12, 52, 96});
  CHECK(apportion(17, {1, 0, 0, 0}) == std::array<std::size_t, 4>{17, 0, 0, 0});
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    std::array<double, 4> p;
    for (auto& x : p) x = std::uniform_real_distribution<double>(0, 1)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 2000)(rng);
    const auto a = apportion(n, p);
    REQUIRE(std::accumulate(a.begin(), a.end(), std::size_t{0}) == n);
    const double total = p[0] + p[1] + p[2] + p[3];
    for (int g = 0; g < 4; ++g) REQUIRE(std::abs(static_cast<double>(a[g]) - n * p[g] / total) < 1.0);
  }
}

TEST_CASE("cohort planning") {
  CohortSpec spec;
  spec.study_count = 862;
  auto plan = plan_cohort(spec);
  std::array<std::size_t, 4> counts{};
  for (auto g : plan.grades) ++counts[static_cast<int>(g)];
  CHECK(counts == std::array<std::size_t, 4>{702, 12, 52, 96});
  std::set<std::string> patients;
  for (std::size_t i = 0; i < plan.meta.size(); ++i) {
    patients.insert(plan.meta[i].patient_id);
    CHECK(plan.meta[i].side == (i % 2 == 0 ? Side::Right : Side::Left));
  }
  CHECK(patients.size() == 862);

  spec.proportions = {1, 0, 0, 0};
  spec.study_count = 9;
  for (auto g : plan_cohort(spec).grades) CHECK(g == Grade::Intact);

  spec = CohortSpec{};
  spec.study_count = 1000;
  spec.seed = 21;
  plan = plan_cohort(spec);
  double mean = 0;
  for (const auto& m : plan.meta) mean += m.age;
  mean /= 1000.0;
  CHECK(std::abs(mean - spec.age_mean) < 3.0 * spec.age_sd / std::sqrt(1000.0));

  spec.study_count = 10;
  spec.studies_per_patient = 2;
  plan = plan_cohort(spec);
  CHECK(plan.meta[0].patient_id == plan.meta[1].patient_id);
  CHECK(plan.meta[0].age == plan.meta[1].age);
  CHECK(plan.meta[1].patient_id != plan.meta[2].patient_id);
}

TEST_CASE("cohort files and manifest round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "aclstage_test_phantom";
  std::filesystem::remove_all(dir);
  CohortSpec spec;
  spec.study_count = 6;
  spec.seed = 9;
  const auto written = write_cohort(spec, dir / "a");
  const auto back = read_manifest(dir / "a" / "manifest.csv");
  REQUIRE(back.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(back[i].study_id == written[i].study_id);
    CHECK(back[i].grade == written[i].grade);
    CHECK(back[i].side == written[i].side);
    auto vol = read_kvol_volume(back[i].volume_path, back[i].side);
    auto again = generate_cohort_study(spec, plan_cohort(spec), i);
    CHECK(vol == again.image);
    CHECK(read_kvol_mask(*back[i].mask_path) == again.mask);
  }
  write_cohort(spec, dir / "b");
  CHECK(read_file_bytes(dir / "a" / "manifest.csv") == read_file_bytes(dir / "b" / "manifest.csv"));
  CHECK(read_file_bytes(dir / "a" / "volumes" / "S0003.kvol") == read_file_bytes(dir / "b" / "volumes" / "S0003.kvol"));

  spec.study_count = 0;
  CHECK(write_cohort(spec, dir / "empty").empty());
  CHECK(read_manifest(dir / "empty" / "manifest.csv").empty());
  std::filesystem::remove_all(dir);
}
