#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "aclstage/stats.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace aclstage;
using namespace aclstage::testing;

namespace {

ConfusionMatrix random_matrix(std::mt19937_64& rng, int max_count) {
  ConfusionMatrix m;
  std::uniform_int_distribution<int> c(0, max_count);
  for (auto& row : m.counts) {
    for (auto& x : row) x = static_cast<std::size_t>(c(rng));
  }
  if (m.total() == 0) m.counts[0][0] = 1;
  return m;
}

// Two-sided t tail by composite Simpson over [0, |t|].
double t_oracle(double t, double df) {
  const double x1 = std::abs(t);
  const int steps = 200000;
  const double h = x1 / steps;
  const double log_c = std::lgamma((df + 1) / 2) - std::lgamma(df / 2) - 0.5 * std::log(df * M_PI);
  auto f = [&](double x) { return std::exp(log_c - (df + 1) / 2 * std::log1p(x * x / df)); };
  double s = f(0) + f(x1);
  for (int i = 1; i < steps; ++i) s += f(i * h) * (i % 2 ? 4 : 2);
  return 1.0 - 2.0 * s * h / 3.0;
}

std::vector<Grade> grades(std::initializer_list<int> v) {
  std::vector<Grade> out;
  for (int g : v) out.push_back(static_cast<Grade>(g));
  return out;
}

StudyRecord record(const std::string& study, const std::string& patient, Grade g, double age = 40, char sex = 'F',
                   double bmi = 24) {
  StudyRecord r;
  r.study_id = study;
  r.patient_id = patient;
  r.grade = g;
  r.age = age;
  r.sex = sex;
  r.bmi = bmi;
  r.volume_path = "volumes/" + study + ".bin";
  return r;
}

std::vector<StudyRecord> random_cohort(std::size_t patients, std::mt19937_64& rng, std::size_t max_studies = 2) {
  std::vector<StudyRecord> out;
  std::discrete_distribution<int> grade({0.814, 0.014, 0.060, 0.111});
  std::normal_distribution<double> age(47, 14), bmi(24.6, 3.6);
  std::uniform_int_distribution<std::size_t> studies(1, max_studies);
  for (std::size_t p = 0; p < patients; ++p) {
    const double a = age(rng), b = bmi(rng);
    const char sex = std::bernoulli_distribution(0.54)(rng) ? 'F' : 'M';
    const std::size_t k = studies(rng);
    for (std::size_t s = 0; s < k; ++s) {
      out.push_back(record("S" + std::to_string(out.size()), "P" + std::to_string(p),
                           static_cast<Grade>(grade(rng)), a, sex, b));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("confusion tallies every pair once") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> g(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Grade> p, t;
    for (int i = 0; i < 40; ++i) {
      p.push_back(static_cast<Grade>(g(rng)));
      t.push_back(static_cast<Grade>(g(rng)));
    }
    const auto m = confusion(p, t);
    CHECK(m.total() == 40);
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) {
        std::size_t n = 0;
        for (int i = 0; i < 40; ++i) n += t[i] == static_cast<Grade>(a) && p[i] == static_cast<Grade>(b);
        CHECK(m.counts[a][b] == n);
      }
    }
  }
  CHECK_THROWS_AS(confusion(grades({0}), grades({0, 1})), std::invalid_argument);
  CHECK_THROWS_AS(confusion({}, {}), std::invalid_argument);
}

TEST_CASE("ratio formatting and reported counts") {
  CHECK(Ratio{180, 203}.format() == "89 (180/203)");
  CHECK(Ratio{45, 51}.format() == "88 (45/51)");
  CHECK(Ratio{233, 254}.format() == "92 (233/254)");
  CHECK(std::abs(*Ratio{180, 203}.value() - 0.887) < 5e-4);
  CHECK(std::abs(*Ratio{45, 51}.value() - 0.882) < 5e-4);
  CHECK(std::abs(*Ratio{233, 254}.value() - 0.917) < 5e-4);
  CHECK_FALSE(Ratio{0, 0}.value().has_value());
  CHECK(Ratio{0, 0}.format() == "n/a (0/0)");
}

TEST_CASE("sensitivity and specificity are one-vs-rest") {
  const auto m = confusion(grades({0, 0, 1, 2, 2, 3}), grades({0, 1, 1, 2, 3, 3}));
  const auto s = sens_spec(m, Grade::PartialTear);
  CHECK(s.sensitivity.numerator == 1);
  CHECK(s.sensitivity.denominator == 2);
  CHECK(s.specificity.numerator == 4);
  CHECK(s.specificity.denominator == 4);
  const auto empty = sens_spec(confusion(grades({0, 0}), grades({0, 0})), Grade::FullTear);
  CHECK_FALSE(empty.sensitivity.defined());
  CHECK(overall_accuracy(m).numerator == 4);
}

TEST_CASE("weighted kappa matches the disagreement-form oracle") {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = random_matrix(rng, trial % 2 ? 5 : 40);
    const auto k = linear_weighted_kappa(m);
    if (!k) continue;
    CHECK(std::abs(*k - kappa_oracle(m)) < 1e-12);
    ++checked;
  }
  CHECK(checked > 450);
}

TEST_CASE("weighted kappa boundary cases") {
  ConfusionMatrix all_wrong;
  all_wrong.counts[0][3] = 5;
  // expected and observed weighted agreement are both zero
  CHECK(*linear_weighted_kappa(all_wrong) == doctest::Approx(0.0));

  ConfusionMatrix one_class;
  one_class.counts[1][1] = 4;
  CHECK_FALSE(linear_weighted_kappa(one_class).has_value());

  ConfusionMatrix opposite;
  opposite.counts[0][3] = 5;
  opposite.counts[3][0] = 5;
  CHECK(*linear_weighted_kappa(opposite) == doctest::Approx(-1.0));

  ConfusionMatrix diag;
  diag.counts[0][0] = 7;
  diag.counts[2][2] = 3;
  CHECK(*linear_weighted_kappa(diag) == doctest::Approx(1.0).epsilon(1e-12));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_matrix(rng, 10);
    ConfusionMatrix scaled = m;
    for (auto& row : scaled.counts) {
      for (auto& x : row) x *= 3;
    }
    const auto a = linear_weighted_kappa(m), b = linear_weighted_kappa(scaled);
    REQUIRE(a.has_value() == b.has_value());
    if (a) CHECK(std::abs(*a - *b) < 1e-12);
  }
  CHECK_THROWS_AS(linear_weighted_kappa(ConfusionMatrix{}), std::invalid_argument);
}

TEST_CASE("exact McNemar matches the integer binomial oracle") {
  CHECK(mcnemar_exact(0, 0) == 1.0);
  CHECK(mcnemar_exact(3, 0) == doctest::Approx(0.25));
  CHECK(mcnemar_exact(8, 0) == doctest::Approx(2 * std::pow(0.5, 8)));
  for (std::size_t a = 0; a <= 30; ++a) {
    CHECK(mcnemar_exact(a, a) == 1.0);
    for (std::size_t b = 0; b + a <= 40; ++b) {
      CHECK(std::abs(mcnemar_exact(a, b) - binomial_oracle(a, b)) < 1e-12);
      CHECK(mcnemar_exact(a, b) == doctest::Approx(mcnemar_exact(b, a)).epsilon(1e-14));
      if (a + 1 + b <= 40 && a >= b) CHECK(mcnemar_exact(a + 1, b) <= mcnemar_exact(a, b) + 1e-15);
    }
  }
}

TEST_CASE("asymptotic McNemar") {
  const auto r = mcnemar_asymptotic(15, 5);
  CHECK(r.statistic == doctest::Approx(5.0));
  CHECK(r.p == doctest::Approx(0.025347).epsilon(1e-4));
  CHECK(mcnemar_asymptotic(0, 0).p == 1.0);
}

TEST_CASE("Fisher exact test matches enumeration with integer binomials") {
  CHECK(fisher_exact_2x2({2, 0, 0, 2}) == doctest::Approx(1.0 / 3.0));
  CHECK(fisher_exact_2x2({0, 0, 3, 4}) == 1.0);
  CHECK(fisher_exact_2x2({3, 1, 1, 3}) == doctest::Approx(0.4857142857));
  CHECK_THROWS_AS(fisher_exact_2x2({0, 0, 0, 0}), std::invalid_argument);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> c(0, 12);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<std::size_t, 4> t{c(rng), c(rng), c(rng), c(rng)};
    if (t[0] + t[1] + t[2] + t[3] == 0) t[0] = 1;
    CHECK(std::abs(fisher_exact_2x2(t) - fisher_oracle(t[0], t[1], t[2], t[3])) < 1e-12);
  }
}

TEST_CASE("paired comparison picks the exact test below twenty discordant pairs") {
  std::vector<Grade> truth(20, Grade::Intact), a(20, Grade::Intact), b(20, Grade::Intact);
  for (int i = 0; i < 8; ++i) b[i] = Grade::FullTear;
  const auto c = compare_models(a, b, truth);
  CHECK(c.exact);
  CHECK(c.outcomes.a_only == 8);
  CHECK(c.outcomes.b_only == 0);
  CHECK(c.outcomes.both_correct == 12);
  CHECK(c.p == doctest::Approx(2 * std::pow(0.5, 8)));

  PairedOutcomes many{10, 15, 5, 0};
  const auto big = compare_paired(many);
  CHECK_FALSE(big.exact);
  CHECK(*big.statistic == doctest::Approx(5.0));
}

TEST_CASE("P value formatting") {
  CHECK(format_p(0.27) == "P = .27");
  CHECK(format_p(0.004) == "P = .004");
  CHECK(format_p(0.0004) == "P < .001");
  CHECK(format_p(0.999) == "P > .99");
  CHECK(format_p(0.05) == "P = .05");
  CHECK_THROWS(format_p(1.5));
}

TEST_CASE("t distribution tail matches Simpson quadrature") {
  for (double df : {1.5, 3.0, 7.3, 30.0, 120.0}) {
    for (double t : {0.0, 0.3, 1.0, 2.1, 4.0}) {
      CHECK(std::abs(student_t_two_sided_p(t, df) - t_oracle(t, df)) < 1e-8);
      CHECK(student_t_two_sided_p(-t, df) == doctest::Approx(student_t_two_sided_p(t, df)));
    }
  }
}

TEST_CASE("Welch t-test") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10, 12};
  const auto r = welch_t(a, b);
  // means 3 and 7, variances 2.5 and 14
  const double sa = 2.5 / 5, sb = 14.0 / 6;
  CHECK(r.t == doctest::Approx(-4.0 / std::sqrt(sa + sb)));
  CHECK(r.df == doctest::Approx((sa + sb) * (sa + sb) / (sa * sa / 4 + sb * sb / 5)));
  CHECK(std::abs(r.p - t_oracle(r.t, r.df)) < 1e-8);

  const auto same = welch_t(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == doctest::Approx(1.0));

  const std::vector<double> flat{3, 3, 3}, flat2{4, 4, 4};
  CHECK_THROWS_AS(welch_t(flat, flat2), UndefinedInputError);
  CHECK(std::isfinite(welch_t(flat, flat2, 1e-6).p));
  CHECK_THROWS_AS(welch_t({1.0}, a), UndefinedInputError);
}

TEST_CASE("two-proportion z-test") {
  CHECK(two_proportion_z(5, 10, 5, 10) == doctest::Approx(1.0));
  CHECK(two_proportion_z(0, 10, 0, 12) == 1.0);
  // pooled .55, se = sqrt(.55 * .45 * .1)
  CHECK(two_proportion_z(8, 20, 14, 20) == doctest::Approx(std::erfc(0.3 / std::sqrt(0.02475) / std::sqrt(2.0))));
}

TEST_CASE("split names round trip") {
  for (Split s : {Split::Train, Split::Validation, Split::Test}) CHECK(parse_split(split_name(s)) == s);
  CHECK_THROWS(parse_split("dev"));
}

TEST_CASE("ten single-study patients split seven, one, two") {
  std::vector<StudyRecord> studies;
  for (int i = 0; i < 10; ++i) studies.push_back(record("S" + std::to_string(i), "P" + std::to_string(i), Grade::Intact, 30 + i));
  const auto s = stratified_split(studies);
  CHECK(s.summaries[0].studies == 7);
  CHECK(s.summaries[1].studies == 1);
  CHECK(s.summaries[2].studies == 2);
  CHECK(s.realized[0] == doctest::Approx(0.7));
}

TEST_CASE("split keeps patients whole and partitions studies") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto studies = random_cohort(60, rng, 3);
    SplitConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto s = stratified_split(studies, cfg);
    REQUIRE(s.by_study.size() == studies.size());
    std::map<std::string, Split> patient_split;
    std::size_t total = 0;
    for (const auto& r : studies) {
      const Split sp = s.of(r.study_id);
      auto [it, fresh] = patient_split.emplace(r.patient_id, sp);
      CHECK(it->second == sp);
    }
    for (const auto& sum : s.summaries) total += sum.studies;
    CHECK(total == studies.size());
    CHECK(s.order.size() == studies.size());
  }
}

TEST_CASE("a patient with several grades is stratified by the most severe") {
  std::vector<StudyRecord> studies;
  for (int i = 0; i < 10; ++i) studies.push_back(record("S" + std::to_string(i), "P" + std::to_string(i), Grade::Intact));
  studies.push_back(record("A1", "PX", Grade::Intact));
  studies.push_back(record("A2", "PX", Grade::Reconstructed));
  studies.push_back(record("B1", "PY", Grade::Reconstructed));
  const auto s = stratified_split(studies);
  CHECK(s.of("A1") == s.of("A2"));
  // PX and PY form the reconstructed stratum and are split between sets
  CHECK(s.warnings.empty());
}

TEST_CASE("a single-patient stratum goes to training with a warning") {
  std::vector<StudyRecord> studies;
  for (int i = 0; i < 10; ++i) studies.push_back(record("S" + std::to_string(i), "P" + std::to_string(i), Grade::Intact));
  studies.push_back(record("T1", "PT", Grade::PartialTear));
  const auto s = stratified_split(studies);
  CHECK(s.of("T1") == Split::Train);
  REQUIRE(s.warnings.size() == 1);
  CHECK(s.warnings[0].find("PT") != std::string::npos);
  CHECK(s.summaries[2].grades[1] == 0);
}

TEST_CASE("split is deterministic in its seed") {
  std::mt19937_64 rng(29);
  const auto studies = random_cohort(80, rng);
  SplitConfig cfg;
  cfg.seed = 9;
  CHECK(stratified_split(studies, cfg).by_study == stratified_split(studies, cfg).by_study);
  std::vector<StudyRecord> dup = studies;
  dup.push_back(studies[0]);
  CHECK_THROWS_AS(stratified_split(dup), std::invalid_argument);
}

TEST_CASE("demographics balance on 224-patient cohorts") {
  std::size_t balanced = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const auto studies = random_cohort(224, rng);
    SplitConfig cfg;
    cfg.seed = seed;
    const auto s = stratified_split(studies, cfg);
    REQUIRE(s.balance.size() == 9);
    bool ok = true;
    for (const auto& t : s.balance) ok = ok && t.p > 0.05;
    balanced += ok;
  }
  CHECK(balanced >= 95);
}

TEST_CASE("split file round trip") {
  std::mt19937_64 rng(31);
  const auto studies = random_cohort(30, rng);
  const auto s = stratified_split(studies);
  const auto path = std::filesystem::temp_directory_path() / "aclstage_split_test.csv";
  write_split(path, s, studies);
  CHECK(read_split(path) == s.by_study);
  std::filesystem::remove(path);
}

TEST_CASE("report lists both models and the paired test") {
  const auto truth = grades({0, 0, 1, 2, 3, 3, 0, 2});
  const auto a = grades({0, 0, 1, 2, 3, 3, 0, 2});
  const auto b = grades({0, 1, 1, 2, 3, 0, 0, 0});
  const auto text = format_report({{"3D", a}, {"2D", b}}, truth);
  CHECK(text.find("100 (2/2)") != std::string::npos);
  CHECK(text.find("Overall accuracy") != std::string::npos);
  CHECK(text.find("Weighted kappa") != std::string::npos);
  CHECK(text.find("P = .25") != std::string::npos);
  CHECK(text.find("Confusion matrix, 2D") != std::string::npos);
}
