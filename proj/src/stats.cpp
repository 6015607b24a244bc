#include "aclstage/stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "aclstage/phantom.hpp"

namespace aclstage {

std::size_t ConfusionMatrix::total() const {
  std::size_t n = 0;
  for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return n;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t n = 0;
  for (int g = 0; g < kGradeCount; ++g) n += counts[g][g];
  return n;
}

ConfusionMatrix confusion(const std::vector<Grade>& predicted, const std::vector<Grade>& truth) {
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(truth.size()) + " truths");
  }
  if (truth.empty()) throw std::invalid_argument("confusion: no studies");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truth.size(); ++i) ++m.counts[static_cast<int>(truth[i])][static_cast<int>(predicted[i])];
  return m;
}

std::optional<double> Ratio::value() const {
  if (!defined()) return std::nullopt;
  return static_cast<double>(numerator) / static_cast<double>(denominator);
}

std::string Ratio::format() const {
  char buf[64];
  if (!defined()) {
    std::snprintf(buf, sizeof buf, "n/a (%zu/%zu)", numerator, denominator);
  } else {
    std::snprintf(buf, sizeof buf, "%.0f (%zu/%zu)", 100.0 * *value(), numerator, denominator);
  }
  return buf;
}

SensSpec sens_spec(const ConfusionMatrix& m, Grade grade) {
  const int g = static_cast<int>(grade);
  if (g < 0 || g >= kGradeCount) throw std::invalid_argument("grade out of range");
  SensSpec r;
  for (int t = 0; t < kGradeCount; ++t) {
    for (int p = 0; p < kGradeCount; ++p) {
      const std::size_t c = m.counts[t][p];
      if (t == g) {
        r.sensitivity.denominator += c;
        if (p == g) r.sensitivity.numerator += c;
      } else {
        r.specificity.denominator += c;
        if (p != g) r.specificity.numerator += c;
      }
    }
  }
  return r;
}

Ratio overall_accuracy(const ConfusionMatrix& m) {
  if (m.total() == 0) throw std::invalid_argument("accuracy of an empty confusion matrix");
  return Ratio{m.trace(), m.total()};
}

std::optional<double> linear_weighted_kappa(const ConfusionMatrix& m) {
  const double n = static_cast<double>(m.total());
  if (n == 0) throw std::invalid_argument("kappa of an empty confusion matrix");
  std::array<double, kGradeCount> rows{}, cols{};
  for (int i = 0; i < kGradeCount; ++i) {
    for (int j = 0; j < kGradeCount; ++j) {
      rows[i] += static_cast<double>(m.counts[i][j]) / n;
      cols[j] += static_cast<double>(m.counts[i][j]) / n;
    }
  }
  double po = 0, pe = 0;
  for (int i = 0; i < kGradeCount; ++i) {
    for (int j = 0; j < kGradeCount; ++j) {
      const double w = 1.0 - std::abs(i - j) / static_cast<double>(kGradeCount - 1);
      po += w * static_cast<double>(m.counts[i][j]) / n;
      pe += w * rows[i] * cols[j];
    }
  }
  if (std::abs(1.0 - pe) < 1e-12) return std::nullopt;
  return (po - pe) / (1.0 - pe);
}

namespace {

double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
         std::lgamma(static_cast<double>(n - k) + 1);
}

}  // namespace

double mcnemar_exact(std::size_t a_only, std::size_t b_only) {
  const std::size_t n = a_only + b_only;
  if (n == 0) return 1.0;
  const std::size_t lo = std::min(a_only, b_only);
  double tail = 0;
  for (std::size_t i = 0; i <= lo; ++i) tail += std::exp(log_choose(n, i) - static_cast<double>(n) * std::log(2.0));
  return std::min(1.0, 2.0 * tail);
}

ChiSquareResult mcnemar_asymptotic(std::size_t a_only, std::size_t b_only) {
  const double n = static_cast<double>(a_only + b_only);
  if (n == 0) return {0.0, 1.0};
  const double d = static_cast<double>(a_only) - static_cast<double>(b_only);
  ChiSquareResult r;
  r.statistic = d * d / n;
  r.p = std::erfc(std::sqrt(r.statistic / 2.0));
  return r;
}

double fisher_exact_2x2(const std::array<std::size_t, 4>& t) {
  const std::size_t r1 = t[0] + t[1], r2 = t[2] + t[3], c1 = t[0] + t[2], n = r1 + r2;
  if (n == 0) throw std::invalid_argument("Fisher exact test on an empty table");
  const std::size_t lo = c1 > r2 ? c1 - r2 : 0;
  const std::size_t hi = std::min(r1, c1);
  auto log_p = [&](std::size_t a) { return log_choose(r1, a) + log_choose(r2, c1 - a) - log_choose(n, c1); };
  const double observed = log_p(t[0]);
  // relative slack so tables tied with the observed one in exact arithmetic
  // are not lost to rounding
  const double cutoff = observed + 1e-7;
  double p = 0;
  for (std::size_t a = lo; a <= hi; ++a) {
    const double lp = log_p(a);
    if (lp <= cutoff) p += std::exp(lp);
  }
  return std::min(1.0, p);
}

PairedOutcomes pair_outcomes(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b) {
  if (correct_a.size() != correct_b.size()) throw std::invalid_argument("paired outcomes differ in length");
  PairedOutcomes o;
  for (std::size_t i = 0; i < correct_a.size(); ++i) {
    if (correct_a[i] && correct_b[i]) {
      ++o.both_correct;
    } else if (correct_a[i]) {
      ++o.a_only;
    } else if (correct_b[i]) {
      ++o.b_only;
    } else {
      ++o.both_wrong;
    }
  }
  return o;
}

ModelComparison compare_paired(const PairedOutcomes& outcomes) {
  ModelComparison c;
  c.outcomes = outcomes;
  if (outcomes.discordant() < kExactTestBelow) {
    c.exact = true;
    c.p = mcnemar_exact(outcomes.a_only, outcomes.b_only);
  } else {
    c.exact = false;
    const auto chi = mcnemar_asymptotic(outcomes.a_only, outcomes.b_only);
    c.statistic = chi.statistic;
    c.p = chi.p;
  }
  return c;
}

ModelComparison compare_models(const std::vector<Grade>& a, const std::vector<Grade>& b,
                               const std::vector<Grade>& truth) {
  if (a.size() != truth.size() || b.size() != truth.size()) {
    throw std::invalid_argument("model comparison needs decisions on the same studies");
  }
  std::vector<bool> ca(truth.size()), cb(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ca[i] = a[i] == truth[i];
    cb[i] = b[i] == truth[i];
  }
  return compare_paired(pair_outcomes(ca, cb));
}

std::string format_p(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p value outside [0, 1]");
  if (p < 0.001) return "P < .001";
  char buf[32];
  if (p < 0.01) {
    std::snprintf(buf, sizeof buf, "%.3f", p);
  } else if (p >= 0.995) {
    return "P > .99";
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", p);
  }
  std::string s(buf);
  return "P = " + s.substr(s.find('.'));
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw std::invalid_argument("t distribution needs df > 0");
  if (std::isinf(t)) return 0.0;
  return boost::math::ibeta(df / 2.0, 0.5, df / (df + t * t));
}

namespace {

void mean_var(const std::vector<double>& x, double& mean, double& var) {
  mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  var = ss / static_cast<double>(x.size() - 1);
}

}  // namespace

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b, double variance_floor) {
  if (a.size() < 2 || b.size() < 2) throw UndefinedInputError("Welch t-test needs at least two values per sample");
  double ma, va, mb, vb;
  mean_var(a, ma, va);
  mean_var(b, mb, vb);
  va = std::max(va, variance_floor);
  vb = std::max(vb, variance_floor);
  if (va == 0 && vb == 0) throw UndefinedInputError("Welch t-test: both samples have zero variance");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

double two_proportion_z(std::size_t x1, std::size_t n1, std::size_t x2, std::size_t n2) {
  if (n1 == 0 || n2 == 0) throw UndefinedInputError("two-proportion test needs nonempty groups");
  const double p1 = static_cast<double>(x1) / static_cast<double>(n1);
  const double p2 = static_cast<double>(x2) / static_cast<double>(n2);
  const double pooled = static_cast<double>(x1 + x2) / static_cast<double>(n1 + n2);
  const double se = std::sqrt(pooled * (1 - pooled) * (1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2)));
  if (se == 0) return 1.0;
  return std::erfc(std::abs(p1 - p2) / se / std::sqrt(2.0));
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "validation") return Split::Validation;
  if (text == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(text) + "'");
}

Split SplitAssignment::of(const std::string& study_id) const {
  auto it = by_study.find(study_id);
  if (it == by_study.end()) throw std::out_of_range("study " + study_id + " is not in the split");
  return it->second;
}

namespace {

std::array<std::size_t, 3> largest_remainder3(std::size_t n, const std::array<double, 3>& ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::array<std::size_t, 3> c{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = static_cast<double>(n) * ratios[s] / total;
    c[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(c[s]);
    assigned += c[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++c[order[k % 3]];
  return c;
}

struct Patient {
  std::string id;
  std::vector<std::size_t> studies;  // indices into the input
  Grade stratum = Grade::Intact;
  double age = 0, bmi = 0;
  bool female = false;
};

struct Draw {
  std::vector<Split> patient_split;
  std::vector<BalanceTest> balance;
  double min_p = 1.0;
};

}  // namespace

SplitAssignment stratified_split(const std::vector<StudyRecord>& studies, const SplitConfig& config) {
  for (double r : config.ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be nonnegative");
  }
  if (!(config.ratios[0] + config.ratios[1] + config.ratios[2] > 0)) {
    throw std::invalid_argument("split ratios must sum to a positive value");
  }
  std::vector<Patient> patients;
  std::map<std::string, std::size_t> index;
  std::set<std::string> seen_studies;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto& s = studies[i];
    if (!seen_studies.insert(s.study_id).second) throw std::invalid_argument("duplicate study ID " + s.study_id);
    auto [it, fresh] = index.emplace(s.patient_id, patients.size());
    if (fresh) {
      Patient p;
      p.id = s.patient_id;
      p.age = s.age;
      p.bmi = s.bmi;
      p.female = s.sex == 'F';
      patients.push_back(p);
    }
    Patient& p = patients[it->second];
    p.studies.push_back(i);
    p.stratum = std::max(p.stratum, s.grade, [](Grade a, Grade b) { return static_cast<int>(a) < static_cast<int>(b); });
  }

  SplitAssignment out;
  std::array<std::vector<std::size_t>, kGradeCount> strata;
  for (std::size_t i = 0; i < patients.size(); ++i) strata[static_cast<int>(patients[i].stratum)].push_back(i);
  for (int g = 0; g < kGradeCount; ++g) {
    if (strata[g].size() == 1) {
      out.warnings.push_back("grade " + std::to_string(g) + " is held by a single patient (" + patients[strata[g][0]].id +
                             "); it cannot be stratified and goes to training");
    }
  }

  auto draw = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Draw d;
    d.patient_split.assign(patients.size(), Split::Train);
    for (int g = 0; g < kGradeCount; ++g) {
      auto members = strata[g];
      if (members.size() < 2) continue;
      std::shuffle(members.begin(), members.end(), rng);
      std::size_t n_studies = 0;
      for (auto p : members) n_studies += patients[p].studies.size();
      const auto target = largest_remainder3(n_studies, config.ratios);
      std::array<double, 3> filled{};
      for (auto p : members) {
        int best = 0;
        double best_deficit = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < 3; ++s) {
          const double deficit = static_cast<double>(target[s]) - filled[s];
          if (deficit > best_deficit) {
            best_deficit = deficit;
            best = s;
          }
        }
        d.patient_split[p] = static_cast<Split>(best);
        filled[best] += static_cast<double>(patients[p].studies.size());
      }
    }
    std::array<std::vector<double>, 3> age, bmi;
    std::array<std::size_t, 3> female{}, count{};
    for (std::size_t p = 0; p < patients.size(); ++p) {
      const int s = static_cast<int>(d.patient_split[p]);
      age[s].push_back(patients[p].age);
      bmi[s].push_back(patients[p].bmi);
      female[s] += patients[p].female;
      ++count[s];
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        const Split sa = static_cast<Split>(a), sb = static_cast<Split>(b);
        auto welch_p = [&](const std::vector<double>& x, const std::vector<double>& y) -> std::optional<double> {
          try {
            return welch_t(x, y).p;
          } catch (const UndefinedInputError&) {
            return std::nullopt;
          }
        };
        if (auto p = welch_p(age[a], age[b])) d.balance.push_back({"age", sa, sb, *p});
        if (auto p = welch_p(bmi[a], bmi[b])) d.balance.push_back({"bmi", sa, sb, *p});
        if (count[a] > 0 && count[b] > 0) {
          d.balance.push_back({"sex", sa, sb, two_proportion_z(female[a], count[a], female[b], count[b])});
        }
      }
    }
    for (const auto& t : d.balance) d.min_p = std::min(d.min_p, t.p);
    return d;
  };

  Draw best;
  best.min_p = -1;
  const std::size_t attempts = std::max<std::size_t>(1, config.max_attempts);
  for (std::size_t k = 0; k < attempts; ++k) {
    Draw d = draw(derive_seed(config.seed, k));
    out.attempts = k + 1;
    const bool accept = d.min_p > config.alpha;
    if (d.min_p > best.min_p) best = std::move(d);
    if (accept) break;
  }

  std::array<std::size_t, 3> per_split{};
  for (std::size_t i = 0; i < studies.size(); ++i) out.order.push_back(studies[i].study_id);
  for (std::size_t p = 0; p < patients.size(); ++p) {
    const Split s = best.patient_split[p];
    auto& sum = out.summaries[static_cast<int>(s)];
    ++sum.patients;
    for (auto i : patients[p].studies) {
      out.by_study[studies[i].study_id] = s;
      ++per_split[static_cast<int>(s)];
      ++sum.studies;
      ++sum.grades[static_cast<int>(studies[i].grade)];
    }
  }
  for (int s = 0; s < 3; ++s) {
    std::vector<double> age, bmi;
    std::size_t female = 0;
    for (std::size_t p = 0; p < patients.size(); ++p) {
      if (static_cast<int>(best.patient_split[p]) != s) continue;
      age.push_back(patients[p].age);
      bmi.push_back(patients[p].bmi);
      female += patients[p].female;
    }
    auto& sum = out.summaries[s];
    if (!age.empty()) {
      double v;
      if (age.size() > 1) {
        mean_var(age, sum.age_mean, v);
        sum.age_sd = std::sqrt(v);
        mean_var(bmi, sum.bmi_mean, v);
        sum.bmi_sd = std::sqrt(v);
      } else {
        sum.age_mean = age[0];
        sum.bmi_mean = bmi[0];
      }
      sum.female_fraction = static_cast<double>(female) / static_cast<double>(age.size());
    }
    out.realized[s] = studies.empty() ? 0.0 : static_cast<double>(per_split[s]) / static_cast<double>(studies.size());
  }
  out.balance = std::move(best.balance);
  return out;
}

void write_split(const std::filesystem::path& path, const SplitAssignment& split,
                 const std::vector<StudyRecord>& studies) {
  std::ostringstream os;
  os << "study_id,patient_id,grade,split\n";
  for (const auto& s : studies) {
    os << s.study_id << ',' << s.patient_id << ',' << static_cast<int>(s.grade) << ',' << split_name(split.of(s.study_id))
       << '\n';
  }
  const std::string text = os.str();
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::map<std::string, Split> read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open split file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "study_id,patient_id,grade,split") throw FormatError("split file " + path.string() + ": bad header");
  std::map<std::string, Split> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) {
      throw FormatError("split file " + path.string() + " line " + std::to_string(line_no) + ": expected 4 fields");
    }
    try {
      out[f[0]] = parse_split(f[3]);
    } catch (const std::invalid_argument& e) {
      throw FormatError("split file " + path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string pad(std::string s, std::size_t width) {
  // the plus-minus sign and similar are multi-byte; pad by code points
  std::size_t cps = 0;
  for (unsigned char c : s) cps += (c & 0xC0) != 0x80;
  if (cps < width) s.append(width - cps, ' ');
  return s;
}

}  // namespace

std::string format_report(const std::vector<ModelEvaluation>& models, const std::vector<Grade>& truth) {
  if (models.empty()) throw std::invalid_argument("report needs at least one model");
  std::vector<ConfusionMatrix> cms;
  for (const auto& m : models) cms.push_back(confusion(m.predicted, truth));
  const bool paired = models.size() >= 2;
  std::ostringstream os;
  std::string header = pad("Grade", 18);
  for (const auto& m : models) header += pad(m.name + " sensitivity", 22) + pad(m.name + " specificity", 22);
  if (paired) header += pad("P (sens)", 12) + "P (spec)";
  os << header << '\n';
  for (int g = 0; g < kGradeCount; ++g) {
    const Grade grade = static_cast<Grade>(g);
    std::string row = pad(std::string(grade_name(grade)), 18);
    for (const auto& cm : cms) {
      const auto ss = sens_spec(cm, grade);
      row += pad(ss.sensitivity.format(), 22) + pad(ss.specificity.format(), 22);
    }
    if (paired) {
      std::vector<bool> sa, sb, pa, pb;
      for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool a_hit = models[0].predicted[i] == grade, b_hit = models[1].predicted[i] == grade;
        if (truth[i] == grade) {
          sa.push_back(a_hit);
          sb.push_back(b_hit);
        } else {
          pa.push_back(!a_hit);
          pb.push_back(!b_hit);
        }
      }
      row += pad(sa.empty() ? "n/a" : format_p(compare_paired(pair_outcomes(sa, sb)).p), 12);
      row += pa.empty() ? "n/a" : format_p(compare_paired(pair_outcomes(pa, pb)).p);
    }
    os << row << '\n';
  }
  std::string acc = pad("Overall accuracy", 18);
  for (const auto& cm : cms) acc += pad(overall_accuracy(cm).format(), 44);
  if (paired) {
    const auto cmp = compare_models(models[0].predicted, models[1].predicted, truth);
    acc += format_p(cmp.p);
    acc += cmp.exact ? " (exact McNemar" : " (McNemar chi-square";
    acc += ", discordant " + std::to_string(cmp.outcomes.a_only) + "/" + std::to_string(cmp.outcomes.b_only) + ")";
  }
  os << acc << '\n';
  std::string kap = pad("Weighted kappa", 18);
  for (const auto& cm : cms) {
    const auto k = linear_weighted_kappa(cm);
    char buf[32];
    if (k) {
      std::snprintf(buf, sizeof buf, "%.2f", *k);
    } else {
      std::snprintf(buf, sizeof buf, "n/a");
    }
    kap += pad(buf, 44);
  }
  os << kap << "\n";
  for (std::size_t k = 0; k < models.size(); ++k) {
    os << "\nConfusion matrix, " << models[k].name << " (rows truth, columns predicted)\n";
    os << pad("", 18);
    for (int p = 0; p < kGradeCount; ++p) os << pad(std::string(grade_abbrev(static_cast<Grade>(p))), 8);
    os << '\n';
    for (int t = 0; t < kGradeCount; ++t) {
      os << pad(std::string(grade_name(static_cast<Grade>(t))), 18);
      for (int p = 0; p < kGradeCount; ++p) os << pad(std::to_string(cms[k].counts[t][p]), 8);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace aclstage
