#include "aclstage/nn/kwts.hpp"

#include <bit>
#include <cstring>

#include "aclstage/volume.hpp"

namespace aclstage::nn {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("KWTS: truncated file");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_kwts(const std::vector<WeightsEntry>& entries) {
  std::vector<std::uint8_t> out = {'K', 'W', 'T', 'S'};
  put_u32(out, kKwtsVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (shape_size(e.shape) != e.values.size()) throw ShapeError("KWTS entry " + e.name + " has inconsistent shape");
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto x : e.shape) put_u32(out, static_cast<std::uint32_t>(x));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<WeightsEntry> decode_kwts(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "KWTS", 4) != 0) throw FormatError("KWTS: bad magic");
  Reader r(bytes.subspan(4));
  const auto version = r.u32();
  if (version != kKwtsVersion) {
    throw WeightsVersionError("KWTS: unsupported version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<WeightsEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightsEntry e;
    e.name = r.text(r.u32());
    const auto rank = r.u32();
    for (std::uint32_t a = 0; a < rank; ++a) e.shape.push_back(r.u32());
    e.values.resize(shape_size(e.shape));
    for (auto& v : e.values) v = std::bit_cast<float>(r.u32());
    out.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("KWTS: trailing bytes");
  return out;
}

template <typename T>
std::vector<WeightsEntry> export_weights(const ParameterSet<T>& params) {
  std::vector<WeightsEntry> out;
  for (const auto& p : params.entries()) {
    WeightsEntry e{p.name, p.var->shape(), {}};
    e.values.reserve(p.var->tensor.size());
    for (auto v : p.var->value()) e.values.push_back(static_cast<float>(v));
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void import_weights(const std::vector<WeightsEntry>& entries, ParameterSet<T>& params) {
  const auto& target = params.entries();
  if (entries.size() != target.size()) {
    throw WeightsVersionError("weights hold " + std::to_string(entries.size()) + " tensors, model expects " +
                              std::to_string(target.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != target[i].name || entries[i].shape != target[i].var->shape()) {
      throw WeightsVersionError("weights tensor " + entries[i].name + " " + to_string(entries[i].shape) +
                                " does not match model tensor " + target[i].name + " " +
                                to_string(target[i].var->shape()));
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = target[i].var->value();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(entries[i].values[j]);
    target[i].var->tensor.zero_grad();
  }
}

template <typename T>
void save_weights(const std::filesystem::path& path, const ParameterSet<T>& params) {
  write_file_bytes(path, encode_kwts(export_weights(params)));
}

template <typename T>
void load_weights(const std::filesystem::path& path, ParameterSet<T>& params) {
  import_weights(decode_kwts(read_file_bytes(path)), params);
}

template std::vector<WeightsEntry> export_weights(const ParameterSet<float>&);
template std::vector<WeightsEntry> export_weights(const ParameterSet<double>&);
template void import_weights(const std::vector<WeightsEntry>&, ParameterSet<float>&);
template void import_weights(const std::vector<WeightsEntry>&, ParameterSet<double>&);
template void save_weights(const std::filesystem::path&, const ParameterSet<float>&);
template void save_weights(const std::filesystem::path&, const ParameterSet<double>&);
template void load_weights(const std::filesystem::path&, ParameterSet<float>&);
template void load_weights(const std::filesystem::path&, ParameterSet<double>&);

}  // namespace aclstage::nn
