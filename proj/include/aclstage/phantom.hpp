#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "aclstage/volume.hpp"

namespace aclstage {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhantomSpec {
  Dims3 dims{48, 48, 32};
  double noise_sd = 0.04;
  double bias_amplitude = 0.08;
  double band_radius = 1.6;
  double gap_length = 6.0;       // full tear
  double defect_radius = 1.6;    // partial tear
  double tunnel_radius = 1.5;    // reconstructed
  // Per-study anatomical jitter (integer translation, voxels); 0 gives the
  // canonical phantom.
  int jitter = 2;
  std::uint64_t seed = 1;

  void validate() const;
};

// Nominal intensities before bias and noise.
namespace intensity {
inline constexpr float kBackground = 0.35f;
inline constexpr float kBone = 0.22f;
inline constexpr float kCartilage = 0.62f;
inline constexpr float kMeniscus = 0.08f;
inline constexpr float kBand = 0.85f;
inline constexpr float kDefect = 1.35f;
inline constexpr float kTunnel = 0.02f;
}  // namespace intensity

struct Demographics {
  std::string study_id = "S0000";
  std::string patient_id = "P0000";
  Side side = Side::Right;
  double age = 47.0;
  char sex = 'F';
  double bmi = 24.6;
};

struct Point3 {
  double d = 0, h = 0, w = 0;
};

struct PhantomStudy {
  Volume3D image;
  SegMask mask;          // 11-class
  std::vector<std::uint8_t> band;  // 1 where the ACL band (or graft) is
  StudyRecord record;
  Point3 femoral_end;    // in the stored (possibly mirrored) frame
  Point3 tibial_end;
};

// Deterministic in (spec, grade, meta). Left knees are generated in the
// right-knee frame and mirrored.
PhantomStudy generate_study(const PhantomSpec& spec, Grade grade, const Demographics& meta);

// Grade recovered from a noiseless, bias-free image and its band mask:
// tunnel voids -> reconstructed, a split band -> full tear, a hyperintense
// focus -> partial tear, otherwise intact.
Grade detect_grade_noiseless(const Volume3D& image, const SegMask& mask, const std::vector<std::uint8_t>& band);

// 6-connected components of a binary grid.
std::size_t count_components(const std::vector<std::uint8_t>& binary, const Dims3& dims);

struct CohortSpec {
  std::size_t study_count = 400;
  std::array<double, kGradeCount> proportions{0.814, 0.014, 0.060, 0.111};
  double age_mean = 47.0;
  double age_sd = 14.0;
  double bmi_mean = 24.6;
  double bmi_sd = 3.6;
  double female_fraction = 0.54;
  std::size_t studies_per_patient = 1;
  std::uint64_t seed = 1;
  PhantomSpec phantom{};

  void validate() const;
};

// Largest-remainder apportionment of n over (renormalized) proportions;
// ties in the remainder go to the lower grade.
std::array<std::size_t, kGradeCount> apportion(std::size_t n, const std::array<double, kGradeCount>& proportions);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

struct CohortPlan {
  std::vector<Demographics> meta;
  std::vector<Grade> grades;
  std::vector<std::uint64_t> seeds;
};

// Assigns grades, patients, sides and demographics without rendering.
CohortPlan plan_cohort(const CohortSpec& spec);

PhantomStudy generate_cohort_study(const CohortSpec& spec, const CohortPlan& plan, std::size_t index);

// Renders every study into `dir` (volumes/, masks/) and writes manifest.csv.
// Returns the records in manifest order.
std::vector<StudyRecord> write_cohort(const CohortSpec& spec, const std::filesystem::path& dir);

inline constexpr const char* kManifestHeader = "study_id,patient_id,side,age,sex,bmi,grade,volume_path,mask_path";

void write_manifest(const std::filesystem::path& path, const std::vector<StudyRecord>& records);
std::vector<StudyRecord> read_manifest(const std::filesystem::path& path);

}  // namespace aclstage
