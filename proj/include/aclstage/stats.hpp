#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aclstage/volume.hpp"

namespace aclstage {

// 4x4 counts, rows = truth grade, columns = predicted grade.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kGradeCount>, kGradeCount> counts{};

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t at(Grade truth, Grade predicted) const {
    return counts[static_cast<int>(truth)][static_cast<int>(predicted)];
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(const std::vector<Grade>& predicted, const std::vector<Grade>& truth);

// A count ratio; a zero denominator leaves the metric undefined.
struct Ratio {
  std::size_t numerator = 0;
  std::size_t denominator = 0;

  bool defined() const noexcept { return denominator > 0; }
  std::optional<double> value() const;
  // "89 (180/203)", or "n/a (0/0)" when undefined.
  std::string format() const;
};

struct SensSpec {
  Ratio sensitivity;
  Ratio specificity;
};

// One-vs-rest for `grade`.
SensSpec sens_spec(const ConfusionMatrix& m, Grade grade);
Ratio overall_accuracy(const ConfusionMatrix& m);

// Linear weights w_ij = 1 - |i-j|/3; nullopt when the expected weighted
// agreement is 1 (degenerate marginals). Throws on an empty matrix.
std::optional<double> linear_weighted_kappa(const ConfusionMatrix& m);

// Two-sided exact binomial test on discordant counts, doubled tail capped at
// 1; p = 1 when both are zero.
double mcnemar_exact(std::size_t a_only, std::size_t b_only);

struct ChiSquareResult {
  double statistic = 0.0;
  double p = 1.0;
};

// (a-b)^2/(a+b) on one degree of freedom, no continuity correction.
ChiSquareResult mcnemar_asymptotic(std::size_t a_only, std::size_t b_only);

// Two-sided hypergeometric test: the sum of the probabilities of all tables
// with the observed margins that are no more likely than the observed one.
double fisher_exact_2x2(const std::array<std::size_t, 4>& table);  // {a, b, c, d} = [[a, b], [c, d]]

struct PairedOutcomes {
  std::size_t both_correct = 0;
  std::size_t a_only = 0;
  std::size_t b_only = 0;
  std::size_t both_wrong = 0;

  std::size_t total() const noexcept { return both_correct + a_only + b_only + both_wrong; }
  std::size_t discordant() const noexcept { return a_only + b_only; }
};

PairedOutcomes pair_outcomes(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b);

inline constexpr std::size_t kExactTestBelow = 20;

struct ModelComparison {
  PairedOutcomes outcomes;
  bool exact = true;
  std::optional<double> statistic;  // chi-square, asymptotic test only
  double p = 1.0;
};

// Exact McNemar when fewer than 20 pairs disagree, asymptotic otherwise.
ModelComparison compare_paired(const PairedOutcomes& outcomes);
ModelComparison compare_models(const std::vector<Grade>& a, const std::vector<Grade>& b,
                               const std::vector<Grade>& truth);

// "P = .27", "P = .004", "P < .001", "P > .99".
std::string format_p(double p);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Welch's unequal-variance t-test with Satterthwaite df. Sample variances
// below `variance_floor` are raised to it; throws UndefinedInputError when
// a sample has fewer than two values or both variances are zero.
WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b, double variance_floor = 0.0);

// Two-sided p of Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

// Pooled two-proportion z-test; p = 1 when the pooled proportion is 0 or 1.
double two_proportion_z(std::size_t x1, std::size_t n1, std::size_t x2, std::size_t n2);

enum class Split { Train = 0, Validation = 1, Test = 2 };
inline constexpr int kSplitCount = 3;

std::string_view split_name(Split s);  // "train", "validation", "test"
Split parse_split(std::string_view text);

struct SplitSummary {
  std::size_t patients = 0;
  std::size_t studies = 0;
  std::array<std::size_t, kGradeCount> grades{};
  double age_mean = 0.0, age_sd = 0.0;
  double bmi_mean = 0.0, bmi_sd = 0.0;
  double female_fraction = 0.0;
};

struct BalanceTest {
  std::string variable;  // "age", "bmi", "sex"
  Split a = Split::Train;
  Split b = Split::Validation;
  double p = 1.0;
};

struct SplitConfig {
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
  std::uint64_t seed = 1;
  // Redraws until every balance test has p > alpha; keeps the draw with the
  // largest minimum p when none does.
  std::size_t max_attempts = 50;
  double alpha = 0.05;
};

struct SplitAssignment {
  std::map<std::string, Split> by_study;
  std::vector<std::string> order;  // input order of study IDs
  std::array<double, 3> realized{};
  std::array<SplitSummary, 3> summaries{};
  std::vector<BalanceTest> balance;
  std::vector<std::string> warnings;
  std::size_t attempts = 0;

  Split of(const std::string& study_id) const;
};

// Patients are stratified by their most severe grade; within a stratum
// shuffled patients go to the split furthest below its largest-remainder
// study target, so every study of a patient shares one split.
SplitAssignment stratified_split(const std::vector<StudyRecord>& studies, const SplitConfig& config = {});

void write_split(const std::filesystem::path& path, const SplitAssignment& split,
                 const std::vector<StudyRecord>& studies);
// study_id -> split
std::map<std::string, Split> read_split(const std::filesystem::path& path);

struct ModelEvaluation {
  std::string name;  // "3D", "2D"
  std::vector<Grade> predicted;
};

// Text report: per-grade sensitivity/specificity as "pct (x/y)" with paired
// P values between the first two models, overall accuracy, linear-weighted
// kappa and confusion matrices.
std::string format_report(const std::vector<ModelEvaluation>& models, const std::vector<Grade>& truth);

}  // namespace aclstage
