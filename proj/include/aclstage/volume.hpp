#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace aclstage {

// Array axes for right knees: depth = superior->inferior,
// height = anterior->posterior, width = medial->lateral.
enum class Axis : int { Depth = 0, Height = 1, Width = 2 };

std::string_view axis_name(Axis axis);

enum class Side : std::uint8_t { NotApplicable = 0, Left = 1, Right = 2 };

std::string_view side_name(Side side);
Side parse_side(std::string_view text);

enum class Grade : int { Intact = 0, PartialTear = 1, FullTear = 2, Reconstructed = 3 };

inline constexpr int kGradeCount = 4;

std::string_view grade_name(Grade grade);
std::string_view grade_abbrev(Grade grade);
Grade grade_from_int(int value);

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class UndefinedInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims3 {
  std::size_t depth = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t voxels() const noexcept { return depth * height * width; }
  std::size_t operator[](Axis axis) const noexcept;
  bool operator==(const Dims3&) const = default;
};

std::string to_string(const Dims3& dims);

class Volume3D {
 public:
  Volume3D() = default;
  explicit Volume3D(Dims3 dims, float fill = 0.0f, Side side = Side::NotApplicable);
  Volume3D(Dims3 dims, std::vector<float> data, Side side = Side::NotApplicable);

  const Dims3& dims() const noexcept { return dims_; }
  Side side() const noexcept { return side_; }
  void set_side(Side side) noexcept { side_ = side; }

  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const noexcept {
    return (d * dims_.height + h) * dims_.width + w;
  }
  float& at(std::size_t d, std::size_t h, std::size_t w) noexcept { return data_[index(d, h, w)]; }
  float at(std::size_t d, std::size_t h, std::size_t w) const noexcept { return data_[index(d, h, w)]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  float min_value() const;
  float max_value() const;

  bool operator==(const Volume3D&) const = default;

 private:
  Dims3 dims_{};
  std::vector<float> data_ = std::vector<float>(1, 0.0f);
  Side side_ = Side::NotApplicable;
};

enum class LabelSchema : std::uint8_t { FiveClass = 5, ElevenClass = 11 };

int class_count(LabelSchema schema);

namespace labels5 {
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kPatellarCartilage = 1;
inline constexpr std::uint8_t kFemur = 2;
inline constexpr std::uint8_t kTibia = 3;
inline constexpr std::uint8_t kMeniscus = 4;
}  // namespace labels5

namespace labels11 {
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kPatellarCartilage = 1;
inline constexpr std::uint8_t kMedialFemoralCondyle = 2;
inline constexpr std::uint8_t kLateralFemoralCondyle = 3;
inline constexpr std::uint8_t kMedialTibialCartilage = 4;
inline constexpr std::uint8_t kLateralTibialCartilage = 5;
inline constexpr std::uint8_t kTibia = 6;
inline constexpr std::uint8_t kMedialAnteriorHorn = 7;
inline constexpr std::uint8_t kMedialPosteriorHorn = 8;
inline constexpr std::uint8_t kLateralAnteriorHorn = 9;
inline constexpr std::uint8_t kLateralPosteriorHorn = 10;
}  // namespace labels11

std::string_view label_name(LabelSchema schema, std::uint8_t label);

// 11-class -> 5-class: condyles to femur; tibial cartilage and tibia to tibia;
// the four horns to meniscus.
std::uint8_t coarsen_label(std::uint8_t label11);

class SegMask {
 public:
  SegMask() = default;
  SegMask(Dims3 dims, LabelSchema schema);
  SegMask(Dims3 dims, LabelSchema schema, std::vector<std::uint8_t> labels);

  const Dims3& dims() const noexcept { return dims_; }
  LabelSchema schema() const noexcept { return schema_; }

  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const noexcept {
    return (d * dims_.height + h) * dims_.width + w;
  }
  std::uint8_t& at(std::size_t d, std::size_t h, std::size_t w) noexcept { return labels_[index(d, h, w)]; }
  std::uint8_t at(std::size_t d, std::size_t h, std::size_t w) const noexcept { return labels_[index(d, h, w)]; }

  std::span<std::uint8_t> labels() noexcept { return labels_; }
  std::span<std::uint8_t> data() noexcept { return labels_; }
  std::span<const std::uint8_t> data() const noexcept { return labels_; }
  std::span<const std::uint8_t> labels() const noexcept { return labels_; }

  std::vector<std::size_t> class_histogram() const;

  // Throws std::invalid_argument if any label is outside the schema.
  void validate() const;

  bool operator==(const SegMask&) const = default;

 private:
  Dims3 dims_{};
  LabelSchema schema_ = LabelSchema::FiveClass;
  std::vector<std::uint8_t> labels_ = std::vector<std::uint8_t>(1, 0);
};

SegMask coarsen(const SegMask& mask11);

// Half-open voxel interval [lo, hi).
struct Interval {
  std::int64_t lo = 0;
  std::int64_t hi = 0;

  std::int64_t extent() const noexcept { return hi - lo; }
  bool operator==(const Interval&) const = default;
};

struct BoundingBox {
  std::array<Interval, 3> axes{};  // indexed by Axis

  const Interval& operator[](Axis axis) const noexcept { return axes[static_cast<int>(axis)]; }
  Interval& operator[](Axis axis) noexcept { return axes[static_cast<int>(axis)]; }

  static BoundingBox full(const Dims3& dims);

  Dims3 extents() const;
  std::size_t voxels() const;
  bool contains(std::size_t d, std::size_t h, std::size_t w) const noexcept;

  bool operator==(const BoundingBox&) const = default;
};

std::string to_string(const BoundingBox& box);

// Throws BoundsError naming the first axis that is empty or leaves `dims`.
void validate_box(const BoundingBox& box, const Dims3& dims);

Volume3D crop(const Volume3D& vol, const BoundingBox& box);
SegMask crop(const SegMask& mask, const BoundingBox& box);

// Writes `patch` into `target` at the box origin; the inverse of crop.
void paste(Volume3D& target, const Volume3D& patch, const BoundingBox& box);

// Corner-aligned trilinear resampling. A source axis of length 1 is sampled
// at index 0 (nearest); a target axis of length 1 samples the source center.
Volume3D resize_trilinear(const Volume3D& vol, const Dims3& target);

// Corner-aligned nearest-neighbour resampling for label grids.
SegMask resize_nearest(const SegMask& mask, const Dims3& target);

// Flips the medial-lateral (width) axis and toggles Left/Right.
Volume3D mirror_axial(const Volume3D& vol);
SegMask mirror_axial(const SegMask& mask);
BoundingBox mirror_axial(const BoundingBox& box, const Dims3& dims);

double iou(const BoundingBox& a, const BoundingBox& b);
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

struct StudyRecord {
  std::string study_id;
  std::string patient_id;
  Side side = Side::Right;
  double age = 0.0;
  char sex = 'F';
  double bmi = 0.0;
  Grade grade = Grade::Intact;
  std::string volume_path;
  std::optional<std::string> mask_path;

  void validate() const;
};

// KVOL container: "KVOL", u32 version, u32 d/h/w, u8 dtype
// (1 = float32, 2 = uint8 label), masks add a u8 schema byte, then voxels.
inline constexpr std::uint32_t kKvolVersion = 1;

std::vector<std::uint8_t> encode_kvol(const Volume3D& vol);
std::vector<std::uint8_t> encode_kvol(const SegMask& mask);
Volume3D decode_kvol_volume(std::span<const std::uint8_t> bytes, Side side = Side::NotApplicable);
SegMask decode_kvol_mask(std::span<const std::uint8_t> bytes);

void write_kvol(const std::filesystem::path& path, const Volume3D& vol);
void write_kvol(const std::filesystem::path& path, const SegMask& mask);
Volume3D read_kvol_volume(const std::filesystem::path& path, Side side = Side::NotApplicable);
SegMask read_kvol_mask(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace aclstage
