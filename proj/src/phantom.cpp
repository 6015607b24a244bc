#include "aclstage/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace aclstage {

namespace {

struct Ellipsoid {
  Point3 c;
  Point3 r;

  double rho2(double d, double h, double w) const {
    const double a = (d - c.d) / r.d, b = (h - c.h) / r.h, e = (w - c.w) / r.w;
    return a * a + b * b + e * e;
  }
  bool inside(double d, double h, double w) const { return rho2(d, h, w) <= 1.0; }
};

struct Segment {
  Point3 a;
  Point3 b;

  double length() const { return std::sqrt(sq(b.d - a.d) + sq(b.h - a.h) + sq(b.w - a.w)); }

  // Distance from p to the segment and the (unclamped) projection of p
  // onto the axis, measured in voxels from `a`.
  std::pair<double, double> distance_and_projection(double d, double h, double w) const {
    const double L = length();
    const double ud = (b.d - a.d) / L, uh = (b.h - a.h) / L, uw = (b.w - a.w) / L;
    const double s = (d - a.d) * ud + (h - a.h) * uh + (w - a.w) * uw;
    const double t = std::clamp(s, 0.0, L);
    const double dist = std::sqrt(sq(d - a.d - t * ud) + sq(h - a.h - t * uh) + sq(w - a.w - t * uw));
    return {dist, s};
  }

  Point3 at(double s) const {
    const double L = length();
    return {a.d + (b.d - a.d) * s / L, a.h + (b.h - a.h) * s / L, a.w + (b.w - a.w) * s / L};
  }

  static double sq(double x) { return x * x; }
};

Segment extend(const Point3& from, Point3 dir, double length) {
  const double n = std::sqrt(dir.d * dir.d + dir.h * dir.h + dir.w * dir.w);
  return {from, {from.d + dir.d / n * length, from.h + dir.h / n * length, from.w + dir.w / n * length}};
}

// Everything about one study's anatomy in the right-knee frame.
struct Anatomy {
  Ellipsoid medial_condyle;
  Ellipsoid lateral_condyle;
  Ellipsoid patella;
  double joint = 0;       // first tibial cartilage slice
  double plateau_h = 0, plateau_w = 0, plateau_rh = 0, plateau_rw = 0;
  double spine_half = 2.5;
  double cartilage = 2.0;  // condylar cartilage shell thickness
  Segment acl;
};

Anatomy build_anatomy(const PhantomSpec& spec, Grade grade, std::mt19937_64& rng) {
  const double D = static_cast<double>(spec.dims.depth);
  const double H = static_cast<double>(spec.dims.height);
  const double W = static_cast<double>(spec.dims.width);
  std::uniform_int_distribution<int> shift(-spec.jitter, spec.jitter);
  const double od = shift(rng), oh = shift(rng), ow = spec.jitter > 0 ? std::clamp(shift(rng), -1, 1) : 0;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double s = 1.0 + 0.04 * unit(rng);

  Anatomy a;
  a.joint = std::round(0.52 * D) + od;
  const double rd = 0.16 * D * s, rh = 0.28 * H * s, rw = 0.16 * W;
  const double dc = a.joint - rd - 0.6;
  const double hc = 0.55 * H + oh;
  a.medial_condyle = {{dc, hc, 0.27 * W + ow}, {rd, rh, rw}};
  a.lateral_condyle = {{dc, hc, 0.73 * W + ow}, {rd, rh, rw}};
  a.patella = {{0.3 * D + od, 0.1 * H + oh, 0.5 * W + ow}, {0.12 * D, 0.07 * H, 0.2 * W}};
  a.plateau_h = 0.52 * H + oh;
  a.plateau_w = 0.5 * W + ow;
  a.plateau_rh = 0.32 * H;
  a.plateau_rw = 0.44 * W;

  const double notch_lateral = a.lateral_condyle.c.w - rw;
  const double jd = 0.7 * unit(rng), jh = 0.7 * unit(rng);
  if (grade == Grade::Reconstructed) {
    // Grafts run steeper than the native ligament.
    a.acl.a = {dc - 0.45 * rd + jd, hc + 0.45 * rh + jh, notch_lateral - 1.4};
    a.acl.b = {a.joint + 1.5, a.plateau_h - 0.1 * a.plateau_rh, a.plateau_w - 0.3};
  } else {
    a.acl.a = {dc - 0.15 * rd + jd, hc + 0.62 * rh + jh, notch_lateral - spec.band_radius};
    a.acl.b = {a.joint + 1.5, a.plateau_h - 0.2 * a.plateau_rh + 0.5 * jh, a.plateau_w - 0.3};
  }
  return a;
}

struct Rendered {
  Volume3D image;
  SegMask mask;
  std::vector<std::uint8_t> band;
};

Rendered render(const PhantomSpec& spec, Grade grade, const Anatomy& a, std::mt19937_64& rng) {
  const Dims3 dims = spec.dims;
  Rendered out{Volume3D(dims, intensity::kBackground, Side::Right), SegMask(dims, LabelSchema::ElevenClass),
               std::vector<std::uint8_t>(dims.voxels(), 0)};
  auto& img = out.image;
  auto& mask = out.mask;

  const Ellipsoid medial_inner{a.medial_condyle.c,
                               {a.medial_condyle.r.d - a.cartilage, a.medial_condyle.r.h - a.cartilage,
                                a.medial_condyle.r.w - a.cartilage}};
  const Ellipsoid lateral_inner{a.lateral_condyle.c,
                                {a.lateral_condyle.r.d - a.cartilage, a.lateral_condyle.r.h - a.cartilage,
                                 a.lateral_condyle.r.w - a.cartilage}};
  const auto joint = static_cast<std::int64_t>(a.joint);

  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        const double z = static_cast<double>(d), y = static_cast<double>(h), x = static_cast<double>(w);
        const auto di = static_cast<std::int64_t>(d);
        const std::size_t i = mask.index(d, h, w);
        float v = intensity::kBackground;
        std::uint8_t label = labels11::kBackground;

        const double ph = (y - a.plateau_h) / a.plateau_rh, pw = (x - a.plateau_w) / a.plateau_rw;
        const double rho = std::sqrt(ph * ph + pw * pw);
        const bool spine = std::abs(x - a.plateau_w) < a.spine_half;

        if (a.patella.inside(z, y, x)) {
          if (y > a.patella.c.h + 0.2 * a.patella.r.h) {
            label = labels11::kPatellarCartilage;
            v = intensity::kCartilage;
          } else {
            v = intensity::kBone;
          }
        } else if (a.medial_condyle.inside(z, y, x)) {
          label = labels11::kMedialFemoralCondyle;
          v = medial_inner.inside(z, y, x) ? intensity::kBone : intensity::kCartilage;
        } else if (a.lateral_condyle.inside(z, y, x)) {
          label = labels11::kLateralFemoralCondyle;
          v = lateral_inner.inside(z, y, x) ? intensity::kBone : intensity::kCartilage;
        } else if (rho <= 1.0 && di >= joint + 3 && di < static_cast<std::int64_t>(dims.depth) - 2) {
          label = labels11::kTibia;
          v = intensity::kBone;
        } else if (rho <= 1.0 && di >= joint && di < joint + 3 && !spine) {
          label = x < a.plateau_w ? labels11::kMedialTibialCartilage : labels11::kLateralTibialCartilage;
          v = intensity::kCartilage;
        } else if (rho <= 1.0 && rho >= 0.55 && di >= joint - 3 && di < joint && !spine &&
                   std::abs(y - a.plateau_h) > 0.35 * a.plateau_rh) {
          // Wedge: thicker towards the periphery.
          const double height = 3.0 * (rho - 0.55) / 0.45;
          if (static_cast<double>(joint - di) <= height + 0.5) {
            const bool medial = x < a.plateau_w;
            const bool anterior = y < a.plateau_h;
            label = medial ? (anterior ? labels11::kMedialAnteriorHorn : labels11::kMedialPosteriorHorn)
                           : (anterior ? labels11::kLateralAnteriorHorn : labels11::kLateralPosteriorHorn);
            v = intensity::kMeniscus;
          }
        }
        mask.labels()[i] = label;
        img.data()[i] = v;
      }
    }
  }

  // Ligament band (or graft), carved only through unlabeled tissue.
  const double L = a.acl.length();
  double gap_lo = 0, gap_hi = 0;
  Point3 defect{};
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (grade == Grade::FullTear) {
    gap_lo = (0.35 + 0.2 * u01(rng)) * (L - spec.gap_length);
    gap_lo = std::max(gap_lo, 0.3 * L - 0.5 * spec.gap_length);
    gap_hi = gap_lo + spec.gap_length;
  } else if (grade == Grade::PartialTear) {
    defect = a.acl.at((0.4 + 0.2 * u01(rng)) * L);
  }
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        const std::size_t i = mask.index(d, h, w);
        if (mask.labels()[i] != labels11::kBackground || a.patella.inside(d, h, w)) continue;
        const auto [dist, s] = a.acl.distance_and_projection(d, h, w);
        if (dist > spec.band_radius) continue;
        if (grade == Grade::FullTear && s >= gap_lo && s < gap_hi) continue;
        out.band[i] = 1;
        float v = intensity::kBand;
        if (grade == Grade::PartialTear) {
          const double r2 = Segment::sq(d - defect.d) + Segment::sq(h - defect.h) + Segment::sq(w - defect.w);
          if (r2 <= spec.defect_radius * spec.defect_radius) v = intensity::kDefect;
        }
        img.data()[i] = v;
      }
    }
  }

  if (grade == Grade::Reconstructed) {
    const Point3 dir{a.acl.b.d - a.acl.a.d, a.acl.b.h - a.acl.a.h, a.acl.b.w - a.acl.a.w};
    const Segment tibial = extend(a.acl.b, dir, 11.0);
    // aimed at the posterior-superior bone of the lateral condyle so the
    // tunnel always enters it
    const Ellipsoid& lc = a.lateral_condyle;
    const Point3 aim{lc.c.d - 0.3 * lc.r.d, lc.c.h + 0.3 * lc.r.h, lc.c.w};
    const Segment femoral = extend(a.acl.a, {aim.d - a.acl.a.d, aim.h - a.acl.a.h, aim.w - a.acl.a.w}, 9.0);
    std::size_t tunnel_voxels[2] = {0, 0};
    for (std::size_t d = 0; d < dims.depth; ++d) {
      for (std::size_t h = 0; h < dims.height; ++h) {
        for (std::size_t w = 0; w < dims.width; ++w) {
          const std::size_t i = mask.index(d, h, w);
          const auto label = mask.labels()[i];
          if (label == labels11::kLateralFemoralCondyle &&
              femoral.distance_and_projection(d, h, w).first <= spec.tunnel_radius) {
            img.data()[i] = intensity::kTunnel;
            ++tunnel_voxels[0];
          } else if (label == labels11::kTibia &&
                     tibial.distance_and_projection(d, h, w).first <= spec.tunnel_radius) {
            img.data()[i] = intensity::kTunnel;
            ++tunnel_voxels[1];
          }
        }
      }
    }
    for (int t = 0; t < 2; ++t) {
      if (tunnel_voxels[t] == 0) {
        throw GeometryError("phantom dims " + to_string(dims) + " too small to place the " +
                            (t == 0 ? "femoral" : "tibial") + " graft tunnel");
      }
    }
  }
  return out;
}

void apply_bias_and_noise(const PhantomSpec& spec, Volume3D& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  double c[4];
  for (auto& x : c) x = coef(rng);
  const double norm = std::abs(c[0]) + std::abs(c[1]) + std::abs(c[2]) + std::abs(c[3]);
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto& dims = img.dims();
  auto centered = [](std::size_t i, std::size_t n) {
    return n > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0 : 0.0;
  };
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        const double z = centered(d, dims.depth), y = centered(h, dims.height), x = centered(w, dims.width);
        double bias = 1.0;
        if (spec.bias_amplitude > 0 && norm > 0) {
          bias += spec.bias_amplitude * (c[0] * z + c[1] * y + c[2] * x + c[3] * z * y) / norm;
        }
        double v = img.at(d, h, w) * bias;
        if (spec.noise_sd > 0) v += spec.noise_sd * noise(rng);
        img.at(d, h, w) = static_cast<float>(v);
      }
    }
  }
}

std::vector<std::uint8_t> mirror_binary(const std::vector<std::uint8_t>& v, const Dims3& dims) {
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t d = 0; d < dims.depth; ++d)
    for (std::size_t h = 0; h < dims.height; ++h)
      for (std::size_t w = 0; w < dims.width; ++w) {
        const std::size_t row = (d * dims.height + h) * dims.width;
        out[row + dims.width - 1 - w] = v[row + w];
      }
  return out;
}

std::string format_id(char prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%04zu", prefix, n);
  return buf;
}

}  // namespace

void PhantomSpec::validate() const {
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("phantom noise sd must be >= 0");
  if (!(bias_amplitude >= 0.0 && bias_amplitude < 1.0)) {
    throw std::invalid_argument("phantom bias amplitude must lie in [0, 1)");
  }
  if (!(band_radius >= 1.0) || !(defect_radius >= 1.0) || !(tunnel_radius >= 1.0) || !(gap_length >= 1.0)) {
    throw std::invalid_argument("phantom radii and gap length must be >= 1 voxel");
  }
  if (jitter < 0) throw std::invalid_argument("phantom jitter must be >= 0");
  if (dims.depth < 24 || dims.height < 24 || dims.width < 16) {
    throw GeometryError("phantom dims " + to_string(dims) + " too small to contain all compartments");
  }
}

PhantomStudy generate_study(const PhantomSpec& spec, Grade grade, const Demographics& meta) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Anatomy anatomy = build_anatomy(spec, grade, rng);
  if (spec.gap_length >= anatomy.acl.length()) {
    throw std::invalid_argument("gap length must be shorter than the ligament band");
  }
  Rendered r = render(spec, grade, anatomy, rng);

  const auto hist = r.mask.class_histogram();
  for (std::uint8_t l = 0; l < 11; ++l) {
    if (hist[l] == 0) {
      throw GeometryError("phantom dims " + to_string(spec.dims) + " leave compartment '" +
                          std::string(label_name(LabelSchema::ElevenClass, l)) + "' empty");
    }
  }
  if (std::none_of(r.band.begin(), r.band.end(), [](auto b) { return b != 0; })) {
    throw GeometryError("phantom dims " + to_string(spec.dims) + " leave no room for the ligament band");
  }
  apply_bias_and_noise(spec, r.image, rng);

  PhantomStudy study;
  study.femoral_end = anatomy.acl.a;
  study.tibial_end = anatomy.acl.b;
  if (meta.side == Side::Left) {
    study.image = mirror_axial(r.image);
    study.mask = mirror_axial(r.mask);
    study.band = mirror_binary(r.band, spec.dims);
    const double wmax = static_cast<double>(spec.dims.width - 1);
    study.femoral_end.w = wmax - study.femoral_end.w;
    study.tibial_end.w = wmax - study.tibial_end.w;
  } else {
    study.image = std::move(r.image);
    study.mask = std::move(r.mask);
    study.band = std::move(r.band);
    study.image.set_side(meta.side);
  }
  study.record = StudyRecord{meta.study_id, meta.patient_id, meta.side, meta.age, meta.sex, meta.bmi, grade, "",
                             std::nullopt};
  return study;
}

std::size_t count_components(const std::vector<std::uint8_t>& binary, const Dims3& dims) {
  if (binary.size() != dims.voxels()) throw std::invalid_argument("binary grid size does not match dims");
  std::vector<std::uint8_t> seen(binary.size(), 0);
  std::vector<std::size_t> stack;
  std::size_t components = 0;
  const std::size_t plane = dims.height * dims.width;
  for (std::size_t start = 0; start < binary.size(); ++start) {
    if (!binary[start] || seen[start]) continue;
    ++components;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t d = i / plane, h = (i / dims.width) % dims.height, w = i % dims.width;
      auto visit = [&](std::size_t j) {
        if (binary[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (d > 0) visit(i - plane);
      if (d + 1 < dims.depth) visit(i + plane);
      if (h > 0) visit(i - dims.width);
      if (h + 1 < dims.height) visit(i + dims.width);
      if (w > 0) visit(i - 1);
      if (w + 1 < dims.width) visit(i + 1);
    }
  }
  return components;
}

Grade detect_grade_noiseless(const Volume3D& image, const SegMask& mask, const std::vector<std::uint8_t>& band) {
  if (image.dims() != mask.dims() || band.size() != mask.dims().voxels()) {
    throw std::invalid_argument("image, mask and band must share dims");
  }
  const float tunnel_cut = 0.5f * (intensity::kTunnel + intensity::kBone);
  for (std::size_t i = 0; i < band.size(); ++i) {
    const auto l = mask.labels()[i];
    const bool bone = l == labels11::kMedialFemoralCondyle || l == labels11::kLateralFemoralCondyle ||
                      l == labels11::kTibia;
    if (bone && image.data()[i] < tunnel_cut) return Grade::Reconstructed;
  }
  if (count_components(band, mask.dims()) >= 2) return Grade::FullTear;
  const float defect_cut = 0.5f * (intensity::kBand + intensity::kDefect);
  for (std::size_t i = 0; i < band.size(); ++i) {
    if (band[i] && image.data()[i] > defect_cut) return Grade::PartialTear;
  }
  return Grade::Intact;
}

void CohortSpec::validate() const {
  if (study_count > 0 && study_count < static_cast<std::size_t>(kGradeCount)) {
    throw std::invalid_argument("a cohort needs at least 4 studies (or 0 for an empty manifest)");
  }
  double sum = 0;
  for (double p : proportions) {
    if (!(p >= 0.0)) throw std::invalid_argument("grade proportions must be nonnegative");
    sum += p;
  }
  if (!(sum > 0.0)) throw std::invalid_argument("grade proportions must not all be zero");
  if (!(age_sd >= 0.0) || !(bmi_sd >= 0.0)) throw std::invalid_argument("demographic sds must be >= 0");
  if (!(female_fraction >= 0.0 && female_fraction <= 1.0)) {
    throw std::invalid_argument("female fraction must lie in [0, 1]");
  }
  if (studies_per_patient == 0) throw std::invalid_argument("studies per patient must be >= 1");
  phantom.validate();
}

std::array<std::size_t, kGradeCount> apportion(std::size_t n, const std::array<double, kGradeCount>& proportions) {
  const double total = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("proportions must sum to a positive value");
  std::array<std::size_t, kGradeCount> counts{};
  std::array<double, kGradeCount> remainder{};
  std::size_t assigned = 0;
  for (int g = 0; g < kGradeCount; ++g) {
    const double exact = static_cast<double>(n) * proportions[g] / total;
    counts[g] = static_cast<std::size_t>(std::floor(exact));
    remainder[g] = exact - std::floor(exact);
    assigned += counts[g];
  }
  std::array<int, kGradeCount> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % kGradeCount]];
  return counts;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

CohortPlan plan_cohort(const CohortSpec& spec) {
  spec.validate();
  CohortPlan plan;
  const std::size_t n = spec.study_count;
  const auto counts = apportion(n, spec.proportions);
  for (int g = 0; g < kGradeCount; ++g) plan.grades.insert(plan.grades.end(), counts[g], static_cast<Grade>(g));
  std::mt19937_64 rng(derive_seed(spec.seed, 0xC0407));
  std::shuffle(plan.grades.begin(), plan.grades.end(), rng);

  const std::size_t patients = (n + spec.studies_per_patient - 1) / spec.studies_per_patient;
  std::normal_distribution<double> age(spec.age_mean, spec.age_sd);
  std::normal_distribution<double> bmi(spec.bmi_mean, spec.bmi_sd);
  std::bernoulli_distribution female(spec.female_fraction);
  std::vector<Demographics> people(patients);
  for (std::size_t p = 0; p < patients; ++p) {
    people[p].patient_id = format_id('P', p);
    people[p].age = std::clamp(age(rng), 18.0, 90.0);
    people[p].bmi = std::clamp(bmi(rng), 15.0, 45.0);
    people[p].sex = female(rng) ? 'F' : 'M';
  }
  for (std::size_t i = 0; i < n; ++i) {
    Demographics m = people[i / spec.studies_per_patient];
    m.study_id = format_id('S', i);
    m.side = i % 2 == 0 ? Side::Right : Side::Left;
    plan.meta.push_back(m);
    plan.seeds.push_back(derive_seed(spec.seed, i));
  }
  return plan;
}

PhantomStudy generate_cohort_study(const CohortSpec& spec, const CohortPlan& plan, std::size_t index) {
  PhantomSpec ps = spec.phantom;
  ps.seed = plan.seeds.at(index);
  return generate_study(ps, plan.grades.at(index), plan.meta.at(index));
}

std::vector<StudyRecord> write_cohort(const CohortSpec& spec, const std::filesystem::path& dir) {
  const CohortPlan plan = plan_cohort(spec);
  std::filesystem::create_directories(dir);
  std::vector<StudyRecord> records;
  for (std::size_t i = 0; i < plan.grades.size(); ++i) {
    PhantomStudy s = generate_cohort_study(spec, plan, i);
    const std::string vol = "volumes/" + s.record.study_id + ".kvol";
    const std::string msk = "masks/" + s.record.study_id + ".kvol";
    write_kvol(dir / vol, s.image);
    write_kvol(dir / msk, s.mask);
    s.record.volume_path = vol;
    s.record.mask_path = msk;
    records.push_back(s.record);
  }
  write_manifest(dir / "manifest.csv", records);
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<StudyRecord>& records) {
  std::ostringstream os;
  os << kManifestHeader << '\n';
  char num[64];
  for (const auto& r : records) {
    os << r.study_id << ',' << r.patient_id << ',' << side_name(r.side) << ',';
    std::snprintf(num, sizeof num, "%.2f", r.age);
    os << num << ',' << r.sex << ',';
    std::snprintf(num, sizeof num, "%.2f", r.bmi);
    os << num << ',' << static_cast<int>(r.grade) << ',' << r.volume_path << ',' << r.mask_path.value_or("") << '\n';
  }
  const std::string text = os.str();
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                       text.size()));
}

std::vector<StudyRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw FormatError("manifest " + path.string() + ": missing or unexpected header");
  }
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_relative() ? (base / fp).string() : fp.string();
  };
  std::vector<StudyRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) {
      throw FormatError("manifest " + path.string() + " line " + std::to_string(line_no) + ": expected 9 fields");
    }
    StudyRecord r;
    try {
      r.study_id = f[0];
      r.patient_id = f[1];
      r.side = parse_side(f[2]);
      r.age = std::stod(f[3]);
      r.sex = f[4].size() == 1 ? f[4][0] : '?';
      r.bmi = std::stod(f[5]);
      r.grade = grade_from_int(std::stoi(f[6]));
      r.volume_path = resolve(f[7]);
      if (!f[8].empty()) r.mask_path = resolve(f[8]);
      r.validate();
    } catch (const std::exception& e) {
      throw FormatError("manifest " + path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace aclstage
