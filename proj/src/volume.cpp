#include "aclstage/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace aclstage {

std::string_view axis_name(Axis axis) {
  switch (axis) {
    case Axis::Depth: return "superior-inferior (depth)";
    case Axis::Height: return "anterior-posterior (height)";
    case Axis::Width: return "medial-lateral (width)";
  }
  return "?";
}

std::string_view side_name(Side side) {
  switch (side) {
    case Side::Left: return "L";
    case Side::Right: return "R";
    case Side::NotApplicable: return "NA";
  }
  return "NA";
}

Side parse_side(std::string_view text) {
  if (text == "L" || text == "Left" || text == "left") return Side::Left;
  if (text == "R" || text == "Right" || text == "right") return Side::Right;
  if (text == "NA" || text.empty()) return Side::NotApplicable;
  throw std::invalid_argument("unknown side '" + std::string(text) + "'");
}

std::string_view grade_name(Grade grade) {
  switch (grade) {
    case Grade::Intact: return "Intact";
    case Grade::PartialTear: return "Partial Tear";
    case Grade::FullTear: return "Full Tear";
    case Grade::Reconstructed: return "Reconstructed";
  }
  return "?";
}

std::string_view grade_abbrev(Grade grade) {
  switch (grade) {
    case Grade::Intact: return "I";
    case Grade::PartialTear: return "PT";
    case Grade::FullTear: return "FT";
    case Grade::Reconstructed: return "R";
  }
  return "?";
}

Grade grade_from_int(int value) {
  if (value < 0 || value >= kGradeCount) {
    throw std::invalid_argument("grade must be in 0..3, got " + std::to_string(value));
  }
  return static_cast<Grade>(value);
}

std::size_t Dims3::operator[](Axis axis) const noexcept {
  switch (axis) {
    case Axis::Depth: return depth;
    case Axis::Height: return height;
    case Axis::Width: return width;
  }
  return 0;
}

std::string to_string(const Dims3& dims) {
  std::ostringstream os;
  os << dims.depth << "x" << dims.height << "x" << dims.width;
  return os.str();
}

namespace {

void require_positive(const Dims3& dims) {
  if (dims.depth == 0 || dims.height == 0 || dims.width == 0) {
    throw std::invalid_argument("volume dims must be >= 1, got " + to_string(dims));
  }
}

}  // namespace

Volume3D::Volume3D(Dims3 dims, float fill, Side side)
    : dims_(dims), data_(dims.voxels(), fill), side_(side) {
  require_positive(dims);
  if (!std::isfinite(fill)) throw std::invalid_argument("volume fill must be finite");
}

Volume3D::Volume3D(Dims3 dims, std::vector<float> data, Side side)
    : dims_(dims), data_(std::move(data)), side_(side) {
  require_positive(dims);
  if (data_.size() != dims_.voxels()) {
    throw std::invalid_argument("volume data length " + std::to_string(data_.size()) +
                                " does not match dims " + to_string(dims_));
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw std::invalid_argument("volume data must be finite");
  }
}

float Volume3D::min_value() const { return *std::min_element(data_.begin(), data_.end()); }
float Volume3D::max_value() const { return *std::max_element(data_.begin(), data_.end()); }

int class_count(LabelSchema schema) { return static_cast<int>(schema); }

std::string_view label_name(LabelSchema schema, std::uint8_t label) {
  static constexpr std::string_view kFive[] = {"background", "patellar cartilage", "femur", "tibia",
                                               "meniscus"};
  static constexpr std::string_view kEleven[] = {"background",
                                                 "patellar cartilage",
                                                 "medial femoral condyle",
                                                 "lateral femoral condyle",
                                                 "medial tibial cartilage",
                                                 "lateral tibial cartilage",
                                                 "tibia",
                                                 "medial anterior horn",
                                                 "medial posterior horn",
                                                 "lateral anterior horn",
                                                 "lateral posterior horn"};
  if (label >= class_count(schema)) return "invalid";
  return schema == LabelSchema::FiveClass ? kFive[label] : kEleven[label];
}

std::uint8_t coarsen_label(std::uint8_t label11) {
  static constexpr std::uint8_t kMap[11] = {0, 1, 2, 2, 3, 3, 3, 4, 4, 4, 4};
  if (label11 >= 11) throw std::invalid_argument("label outside 11-class schema");
  return kMap[label11];
}

SegMask::SegMask(Dims3 dims, LabelSchema schema)
    : dims_(dims), schema_(schema), labels_(dims.voxels(), 0) {
  require_positive(dims);
}

SegMask::SegMask(Dims3 dims, LabelSchema schema, std::vector<std::uint8_t> labels)
    : dims_(dims), schema_(schema), labels_(std::move(labels)) {
  require_positive(dims);
  if (labels_.size() != dims_.voxels()) {
    throw std::invalid_argument("mask label count does not match dims " + to_string(dims_));
  }
  validate();
}

std::vector<std::size_t> SegMask::class_histogram() const {
  std::vector<std::size_t> counts(class_count(schema_), 0);
  for (auto l : labels_) ++counts[l];
  return counts;
}

void SegMask::validate() const {
  const int k = class_count(schema_);
  for (auto l : labels_) {
    if (l >= k) {
      throw std::invalid_argument("label " + std::to_string(l) + " outside " + std::to_string(k) +
                                  "-class schema");
    }
  }
}

SegMask coarsen(const SegMask& mask11) {
  if (mask11.schema() != LabelSchema::ElevenClass) {
    throw std::invalid_argument("coarsen expects an 11-class mask");
  }
  SegMask out(mask11.dims(), LabelSchema::FiveClass);
  auto src = mask11.labels();
  auto dst = out.labels();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = coarsen_label(src[i]);
  return out;
}

BoundingBox BoundingBox::full(const Dims3& dims) {
  BoundingBox box;
  box.axes = {Interval{0, static_cast<std::int64_t>(dims.depth)},
              Interval{0, static_cast<std::int64_t>(dims.height)},
              Interval{0, static_cast<std::int64_t>(dims.width)}};
  return box;
}

Dims3 BoundingBox::extents() const {
  return Dims3{static_cast<std::size_t>(axes[0].extent()), static_cast<std::size_t>(axes[1].extent()),
               static_cast<std::size_t>(axes[2].extent())};
}

std::size_t BoundingBox::voxels() const {
  for (const auto& a : axes) {
    if (a.extent() <= 0) return 0;
  }
  return extents().voxels();
}

bool BoundingBox::contains(std::size_t d, std::size_t h, std::size_t w) const noexcept {
  auto in = [](const Interval& iv, std::size_t x) {
    const auto v = static_cast<std::int64_t>(x);
    return v >= iv.lo && v < iv.hi;
  };
  return in(axes[0], d) && in(axes[1], h) && in(axes[2], w);
}

std::string to_string(const BoundingBox& box) {
  std::ostringstream os;
  os << "[" << box.axes[0].lo << "," << box.axes[0].hi << ")x[" << box.axes[1].lo << ","
     << box.axes[1].hi << ")x[" << box.axes[2].lo << "," << box.axes[2].hi << ")";
  return os.str();
}

void validate_box(const BoundingBox& box, const Dims3& dims) {
  for (int a = 0; a < 3; ++a) {
    const auto axis = static_cast<Axis>(a);
    const Interval& iv = box.axes[a];
    const auto limit = static_cast<std::int64_t>(dims[axis]);
    if (iv.lo < 0 || iv.hi > limit || iv.lo >= iv.hi) {
      std::ostringstream os;
      os << "bounding box out of range on axis " << axis_name(axis) << ": [" << iv.lo << ", " << iv.hi
         << ") within extent " << limit;
      throw BoundsError(os.str());
    }
  }
}

namespace {

template <typename Grid, typename Make>
auto crop_grid(const Grid& src, const BoundingBox& box, Make make) {
  validate_box(box, src.dims());
  const Dims3 out_dims = box.extents();
  auto out = make(out_dims);
  const auto d0 = static_cast<std::size_t>(box.axes[0].lo);
  const auto h0 = static_cast<std::size_t>(box.axes[1].lo);
  const auto w0 = static_cast<std::size_t>(box.axes[2].lo);
  for (std::size_t d = 0; d < out_dims.depth; ++d) {
    for (std::size_t h = 0; h < out_dims.height; ++h) {
      const auto* row = src.data().data() + src.index(d + d0, h + h0, w0);
      std::copy(row, row + out_dims.width, &out.at(d, h, 0));
    }
  }
  return out;
}

}  // namespace

Volume3D crop(const Volume3D& vol, const BoundingBox& box) {
  return crop_grid(vol, box, [&](const Dims3& d) { return Volume3D(d, 0.0f, vol.side()); });
}

SegMask crop(const SegMask& mask, const BoundingBox& box) {
  return crop_grid(mask, box, [&](const Dims3& d) { return SegMask(d, mask.schema()); });
}

void paste(Volume3D& target, const Volume3D& patch, const BoundingBox& box) {
  validate_box(box, target.dims());
  if (!(box.extents() == patch.dims())) {
    throw BoundsError("patch dims " + to_string(patch.dims()) + " differ from box extents " +
                      to_string(box.extents()));
  }
  const auto d0 = static_cast<std::size_t>(box.axes[0].lo);
  const auto h0 = static_cast<std::size_t>(box.axes[1].lo);
  const auto w0 = static_cast<std::size_t>(box.axes[2].lo);
  const Dims3& pd = patch.dims();
  for (std::size_t d = 0; d < pd.depth; ++d) {
    for (std::size_t h = 0; h < pd.height; ++h) {
      const float* row = patch.data().data() + patch.index(d, h, 0);
      std::copy(row, row + pd.width, &target.at(d + d0, h + h0, w0));
    }
  }
}

namespace {

// Source sample for output index i along an axis: integer base plus the
// fractional weight of base + 1. Computed from integers so that endpoints map
// exactly onto source endpoints.
struct Sample {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Sample> axis_samples(std::size_t src, std::size_t dst) {
  std::vector<Sample> out(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    if (src == 1) {
      out[i] = {0, 0, 0.0};
      continue;
    }
    if (dst == 1) {
      const std::size_t num = src - 1;
      out[i] = {num / 2, std::min(num / 2 + 1, src - 1), (num % 2) ? 0.5 : 0.0};
      continue;
    }
    const std::size_t num = i * (src - 1);
    const std::size_t den = dst - 1;
    const std::size_t base = num / den;
    const std::size_t rem = num % den;
    out[i] = {base, std::min(base + 1, src - 1), static_cast<double>(rem) / static_cast<double>(den)};
  }
  return out;
}

std::size_t nearest_index(std::size_t i, std::size_t src, std::size_t dst) {
  if (src == 1) return 0;
  if (dst == 1) return (src - 1) / 2;
  // round(i * (src-1) / (dst-1)) with ties up, in integers.
  const std::size_t num = 2 * i * (src - 1) + (dst - 1);
  return std::min(num / (2 * (dst - 1)), src - 1);
}

}  // namespace

Volume3D resize_trilinear(const Volume3D& vol, const Dims3& target) {
  require_positive(target);
  const Dims3& sd = vol.dims();
  if (sd == target) return vol;
  const auto sz = axis_samples(sd.depth, target.depth);
  const auto sy = axis_samples(sd.height, target.height);
  const auto sx = axis_samples(sd.width, target.width);
  Volume3D out(target, 0.0f, vol.side());
  const float lo_clamp = vol.min_value();
  const float hi_clamp = vol.max_value();
  for (std::size_t d = 0; d < target.depth; ++d) {
    const Sample& z = sz[d];
    for (std::size_t h = 0; h < target.height; ++h) {
      const Sample& y = sy[h];
      for (std::size_t w = 0; w < target.width; ++w) {
        const Sample& x = sx[w];
        auto lerp_x = [&](std::size_t zz, std::size_t yy) {
          const double a = vol.at(zz, yy, x.lo);
          const double b = vol.at(zz, yy, x.hi);
          return a + (b - a) * x.frac;
        };
        const double c00 = lerp_x(z.lo, y.lo);
        const double c01 = lerp_x(z.lo, y.hi);
        const double c10 = lerp_x(z.hi, y.lo);
        const double c11 = lerp_x(z.hi, y.hi);
        const double c0 = c00 + (c01 - c00) * y.frac;
        const double c1 = c10 + (c11 - c10) * y.frac;
        const double v = c0 + (c1 - c0) * z.frac;
        out.at(d, h, w) = std::clamp(static_cast<float>(v), lo_clamp, hi_clamp);
      }
    }
  }
  return out;
}

SegMask resize_nearest(const SegMask& mask, const Dims3& target) {
  require_positive(target);
  const Dims3& sd = mask.dims();
  if (sd == target) return mask;
  SegMask out(target, mask.schema());
  for (std::size_t d = 0; d < target.depth; ++d) {
    const std::size_t z = nearest_index(d, sd.depth, target.depth);
    for (std::size_t h = 0; h < target.height; ++h) {
      const std::size_t y = nearest_index(h, sd.height, target.height);
      for (std::size_t w = 0; w < target.width; ++w) {
        out.at(d, h, w) = mask.at(z, y, nearest_index(w, sd.width, target.width));
      }
    }
  }
  return out;
}

namespace {

Side toggled(Side side) {
  switch (side) {
    case Side::Left: return Side::Right;
    case Side::Right: return Side::Left;
    case Side::NotApplicable: return Side::NotApplicable;
  }
  return side;
}

template <typename Grid>
void flip_width(Grid& grid) {
  const Dims3& d = grid.dims();
  for (std::size_t z = 0; z < d.depth; ++z) {
    for (std::size_t y = 0; y < d.height; ++y) {
      auto* row = &grid.at(z, y, 0);
      std::reverse(row, row + d.width);
    }
  }
}

}  // namespace

Volume3D mirror_axial(const Volume3D& vol) {
  Volume3D out = vol;
  flip_width(out);
  out.set_side(toggled(vol.side()));
  return out;
}

SegMask mirror_axial(const SegMask& mask) {
  SegMask out = mask;
  flip_width(out);
  return out;
}

BoundingBox mirror_axial(const BoundingBox& box, const Dims3& dims) {
  BoundingBox out = box;
  const auto w = static_cast<std::int64_t>(dims.width);
  out.axes[2] = Interval{w - box.axes[2].hi, w - box.axes[2].lo};
  return out;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const std::size_t va = a.voxels();
  const std::size_t vb = b.voxels();
  if (va == 0 && vb == 0) throw UndefinedInputError("IoU of two empty regions is undefined");
  std::size_t inter = 1;
  for (int i = 0; i < 3; ++i) {
    const auto lo = std::max(a.axes[i].lo, b.axes[i].lo);
    const auto hi = std::min(a.axes[i].hi, b.axes[i].hi);
    if (hi <= lo) {
      inter = 0;
      break;
    }
    inter *= static_cast<std::size_t>(hi - lo);
  }
  return static_cast<double>(inter) / static_cast<double>(va + vb - inter);
}

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("IoU operands differ in size");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0;
    const bool y = b[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  if (uni == 0) throw UndefinedInputError("IoU of two empty masks is undefined");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void StudyRecord::validate() const {
  if (patient_id.empty()) throw std::invalid_argument("study " + study_id + ": empty patient id");
  if (!(age > 0.0)) throw std::invalid_argument("study " + study_id + ": age must be positive");
  if (!(bmi > 0.0)) throw std::invalid_argument("study " + study_id + ": bmi must be positive");
  if (sex != 'F' && sex != 'M') throw std::invalid_argument("study " + study_id + ": sex must be F or M");
}

// ---------------------------------------------------------------------------
// KVOL
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint8_t kDtypeFloat = 1;
constexpr std::uint8_t kDtypeLabel = 2;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("KVOL: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

std::vector<std::uint8_t> kvol_header(const Dims3& dims, std::uint8_t dtype) {
  std::vector<std::uint8_t> out = {'K', 'V', 'O', 'L'};
  put_u32(out, kKvolVersion);
  put_u32(out, static_cast<std::uint32_t>(dims.depth));
  put_u32(out, static_cast<std::uint32_t>(dims.height));
  put_u32(out, static_cast<std::uint32_t>(dims.width));
  out.push_back(dtype);
  return out;
}

struct KvolHeader {
  Dims3 dims;
  std::uint8_t dtype;
  std::size_t offset;
};

KvolHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 21 || std::memcmp(bytes.data(), "KVOL", 4) != 0) {
    throw FormatError("KVOL: bad magic");
  }
  std::size_t pos = 4;
  const auto version = get_u32(bytes, pos);
  if (version != kKvolVersion) {
    throw FormatError("KVOL: unsupported version " + std::to_string(version));
  }
  KvolHeader h;
  h.dims.depth = get_u32(bytes, pos);
  h.dims.height = get_u32(bytes, pos);
  h.dims.width = get_u32(bytes, pos);
  h.dtype = bytes[pos++];
  h.offset = pos;
  if (h.dims.voxels() == 0) throw FormatError("KVOL: zero dimension");
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_kvol(const Volume3D& vol) {
  auto out = kvol_header(vol.dims(), kDtypeFloat);
  out.reserve(out.size() + 4 * vol.data().size());
  for (float v : vol.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

std::vector<std::uint8_t> encode_kvol(const SegMask& mask) {
  auto out = kvol_header(mask.dims(), kDtypeLabel);
  out.push_back(static_cast<std::uint8_t>(mask.schema()));
  out.insert(out.end(), mask.labels().begin(), mask.labels().end());
  return out;
}

Volume3D decode_kvol_volume(std::span<const std::uint8_t> bytes, Side side) {
  const KvolHeader h = parse_header(bytes);
  if (h.dtype != kDtypeFloat) throw FormatError("KVOL: expected float32 volume");
  const std::size_t n = h.dims.voxels();
  if (bytes.size() != h.offset + 4 * n) throw FormatError("KVOL: payload size mismatch");
  std::vector<float> data(n);
  std::size_t pos = h.offset;
  for (auto& v : data) v = std::bit_cast<float>(get_u32(bytes, pos));
  return Volume3D(h.dims, std::move(data), side);
}

SegMask decode_kvol_mask(std::span<const std::uint8_t> bytes) {
  const KvolHeader h = parse_header(bytes);
  if (h.dtype != kDtypeLabel) throw FormatError("KVOL: expected uint8 label mask");
  if (bytes.size() < h.offset + 1) throw FormatError("KVOL: missing schema byte");
  const std::uint8_t schema = bytes[h.offset];
  if (schema != 5 && schema != 11) throw FormatError("KVOL: unknown schema " + std::to_string(schema));
  const std::size_t n = h.dims.voxels();
  if (bytes.size() != h.offset + 1 + n) throw FormatError("KVOL: payload size mismatch");
  std::vector<std::uint8_t> labels(bytes.begin() + static_cast<std::ptrdiff_t>(h.offset + 1), bytes.end());
  return SegMask(h.dims, static_cast<LabelSchema>(schema), std::move(labels));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_kvol(const std::filesystem::path& path, const Volume3D& vol) {
  write_file_bytes(path, encode_kvol(vol));
}

void write_kvol(const std::filesystem::path& path, const SegMask& mask) {
  write_file_bytes(path, encode_kvol(mask));
}

Volume3D read_kvol_volume(const std::filesystem::path& path, Side side) {
  return decode_kvol_volume(read_file_bytes(path), side);
}

SegMask read_kvol_mask(const std::filesystem::path& path) {
  return decode_kvol_mask(read_file_bytes(path));
}

}  // namespace aclstage
