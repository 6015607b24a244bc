#include "aclstage/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <map>
#include <random>
#include <sstream>

#include "aclstage/nn/kwts.hpp"
#include "json.hpp"

namespace aclstage {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration ----

void RunConfig::validate() const {
  effective_cohort(*this).validate();
  for (double r : split.ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be nonnegative");
  }
  if (!(split.ratios[0] + split.ratios[1] + split.ratios[2] > 0.0)) {
    throw std::invalid_argument("split ratios must not all be zero");
  }
  if (!(split.alpha > 0.0 && split.alpha < 1.0)) throw std::invalid_argument("split alpha must lie in (0, 1)");
  effective_seg_train(*this).validate();
  VNetSpec{4, segmentation.base_channels, 1, 5, segmentation.grid}.validate();
  for (Stage s : kStages) effective_stage(*this, s).validate();
  Classifier3DSpec s3;
  s3.input = roi;
  s3.validate();
  Classifier2DSpec s2;
  s2.input = roi;
  s2.validate();
  if (backbones.empty()) throw std::invalid_argument("at least one backbone is required");
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("thresholds must lie in (0, 1)");
  }
  if (out.empty()) throw std::invalid_argument("output directory must not be empty");
}

std::uint64_t cohort_seed(const RunConfig& c) { return derive_seed(c.seed, 1); }
std::uint64_t split_seed(const RunConfig& c) { return derive_seed(c.seed, 2); }
std::uint64_t segmentation_seed(const RunConfig& c) { return derive_seed(c.seed, 3); }
std::uint64_t stage_seed(const RunConfig& c, Backbone b, Stage s) {
  return derive_seed(c.seed, 10 + 3 * static_cast<std::uint64_t>(b) + static_cast<std::uint64_t>(s));
}

CohortSpec effective_cohort(const RunConfig& c) {
  CohortSpec s = c.cohort;
  s.seed = cohort_seed(c);
  return s;
}

SplitConfig effective_split(const RunConfig& c) {
  SplitConfig s = c.split;
  s.seed = split_seed(c);
  return s;
}

SegTrainConfig effective_seg_train(const RunConfig& c) {
  SegTrainConfig s = c.segmentation.train;
  s.seed = segmentation_seed(c);
  return s;
}

StageConfig effective_stage(const RunConfig& c, Stage stage) {
  const auto& st = c.stages[static_cast<int>(stage)];
  StageConfig s;
  s.stage = stage;
  s.epochs = st.epochs;
  s.learning_rate = st.learning_rate;
  s.batch_size = st.batch_size;
  s.augment = st.augment;
  s.threshold = c.thresholds[static_cast<int>(stage)];
  // one seed per stage and backbone is applied by the caller
  return s;
}

std::vector<Backbone> parse_backbones(std::string_view text) {
  if (text == "both") return {Backbone::ThreeD, Backbone::TwoD};
  return {parse_backbone(text)};
}

namespace {

std::string backbones_text(const std::vector<Backbone>& b) {
  if (b.size() == 2) return "both";
  return std::string(backbone_name(b.at(0)));
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw FormatError("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError("config: " + where + "." + key + ": " + e.what());
  }
}

void read_dims(const json& j, const char* key, Dims3& dst, const std::string& where) {
  if (!j.contains(key)) return;
  std::array<std::size_t, 3> a{};
  read(j, key, a, where);
  dst = {a[0], a[1], a[2]};
}

json dims_json(const Dims3& d) { return json::array({d.depth, d.height, d.width}); }

void read_phantom(const json& j, PhantomSpec& p) {
  const std::string w = "cohort.phantom";
  check_keys(j, {"dims", "noise_sd", "bias_amplitude", "band_radius", "gap_length", "defect_radius", "tunnel_radius",
                 "jitter"},
             w);
  read_dims(j, "dims", p.dims, w);
  read(j, "noise_sd", p.noise_sd, w);
  read(j, "bias_amplitude", p.bias_amplitude, w);
  read(j, "band_radius", p.band_radius, w);
  read(j, "gap_length", p.gap_length, w);
  read(j, "defect_radius", p.defect_radius, w);
  read(j, "tunnel_radius", p.tunnel_radius, w);
  read(j, "jitter", p.jitter, w);
}

void read_cohort(const json& j, CohortSpec& c) {
  const std::string w = "cohort";
  check_keys(j, {"count", "proportions", "age_mean", "age_sd", "bmi_mean", "bmi_sd", "female_fraction",
                 "studies_per_patient", "phantom"},
             w);
  read(j, "count", c.study_count, w);
  read(j, "proportions", c.proportions, w);
  read(j, "age_mean", c.age_mean, w);
  read(j, "age_sd", c.age_sd, w);
  read(j, "bmi_mean", c.bmi_mean, w);
  read(j, "bmi_sd", c.bmi_sd, w);
  read(j, "female_fraction", c.female_fraction, w);
  read(j, "studies_per_patient", c.studies_per_patient, w);
  if (j.contains("phantom")) read_phantom(j.at("phantom"), c.phantom);
}

void read_segmentation(const json& j, SegmentationSettings& s) {
  const std::string w = "segmentation";
  check_keys(j, {"grid", "base_channels", "train_studies", "epochs", "learning_rate", "batch_size",
                 "rotation_degrees", "ce_weight", "dice_weight", "max_class_weight"},
             w);
  read_dims(j, "grid", s.grid, w);
  read(j, "base_channels", s.base_channels, w);
  read(j, "train_studies", s.train_studies, w);
  read(j, "epochs", s.train.epochs, w);
  read(j, "learning_rate", s.train.learning_rate, w);
  read(j, "batch_size", s.train.batch_size, w);
  read(j, "rotation_degrees", s.train.rotation_degrees, w);
  read(j, "ce_weight", s.train.ce_weight, w);
  read(j, "dice_weight", s.train.dice_weight, w);
  read(j, "max_class_weight", s.train.max_class_weight, w);
}

void read_stage(const json& j, StageSettings& s, const std::string& w) {
  check_keys(j, {"epochs", "learning_rate", "batch_size", "augment"}, w);
  read(j, "epochs", s.epochs, w);
  read(j, "learning_rate", s.learning_rate, w);
  read(j, "batch_size", s.batch_size, w);
  read(j, "augment", s.augment, w);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "out", "backbone", "thresholds", "precision", "roi_source", "roi", "cohort", "split",
                 "segmentation", "stages"},
             "config");
  RunConfig c = base;
  read(j, "seed", c.seed, "config");
  if (j.contains("out")) {
    std::string out;
    read(j, "out", out, "config");
    c.out = out;
  }
  try {
    if (j.contains("backbone")) c.backbones = parse_backbones(j.at("backbone").get<std::string>());
    if (j.contains("precision")) {
      const auto p = j.at("precision").get<std::string>();
      if (p == "train32") {
        c.precision = Precision::Train32;
      } else if (p == "verify64") {
        c.precision = Precision::Verify64;
      } else {
        throw FormatError("config: precision must be train32 or verify64, not '" + p + "'");
      }
    }
    if (j.contains("roi_source")) {
      const auto r = j.at("roi_source").get<std::string>();
      if (r == "segmentation") {
        c.roi_source = RoiSource::Segmentation;
      } else if (r == "truth") {
        c.roi_source = RoiSource::Truth;
      } else {
        throw FormatError("config: roi_source must be segmentation or truth, not '" + r + "'");
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  read(j, "thresholds", c.thresholds, "config");
  read_dims(j, "roi", c.roi, "config");
  if (j.contains("cohort")) read_cohort(j.at("cohort"), c.cohort);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    check_keys(s, {"ratios", "max_attempts", "alpha"}, "split");
    read(s, "ratios", c.split.ratios, "split");
    read(s, "max_attempts", c.split.max_attempts, "split");
    read(s, "alpha", c.split.alpha, "split");
  }
  if (j.contains("segmentation")) read_segmentation(j.at("segmentation"), c.segmentation);
  if (j.contains("stages")) {
    const auto& s = j.at("stages");
    check_keys(s, {"R", "FT", "PT"}, "stages");
    for (Stage st : kStages) {
      const std::string key(stage_abbrev(st));
      if (s.contains(key)) read_stage(s.at(key), c.stages[static_cast<int>(st)], "stages." + key);
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, const RunConfig& base) {
  if (!fs::exists(path)) throw MissingArtifactError("config file " + path.string() + " does not exist");
  const auto bytes = read_file_bytes(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()), base);
}

std::string dump_run_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["backbone"] = backbones_text(c.backbones);
  j["thresholds"] = c.thresholds;
  j["precision"] = c.precision == Precision::Train32 ? "train32" : "verify64";
  j["roi_source"] = c.roi_source == RoiSource::Segmentation ? "segmentation" : "truth";
  j["roi"] = dims_json(c.roi);
  const auto& p = c.cohort.phantom;
  j["cohort"] = {{"count", c.cohort.study_count},
                 {"proportions", c.cohort.proportions},
                 {"age_mean", c.cohort.age_mean},
                 {"age_sd", c.cohort.age_sd},
                 {"bmi_mean", c.cohort.bmi_mean},
                 {"bmi_sd", c.cohort.bmi_sd},
                 {"female_fraction", c.cohort.female_fraction},
                 {"studies_per_patient", c.cohort.studies_per_patient},
                 {"phantom",
                  {{"dims", dims_json(p.dims)},
                   {"noise_sd", p.noise_sd},
                   {"bias_amplitude", p.bias_amplitude},
                   {"band_radius", p.band_radius},
                   {"gap_length", p.gap_length},
                   {"defect_radius", p.defect_radius},
                   {"tunnel_radius", p.tunnel_radius},
                   {"jitter", p.jitter}}}};
  j["split"] = {{"ratios", c.split.ratios}, {"max_attempts", c.split.max_attempts}, {"alpha", c.split.alpha}};
  const auto& s = c.segmentation;
  j["segmentation"] = {{"grid", dims_json(s.grid)},
                       {"base_channels", s.base_channels},
                       {"train_studies", s.train_studies},
                       {"epochs", s.train.epochs},
                       {"learning_rate", s.train.learning_rate},
                       {"batch_size", s.train.batch_size},
                       {"rotation_degrees", s.train.rotation_degrees},
                       {"ce_weight", s.train.ce_weight},
                       {"dice_weight", s.train.dice_weight},
                       {"max_class_weight", s.train.max_class_weight}};
  for (Stage st : kStages) {
    const auto& x = c.stages[static_cast<int>(st)];
    j["stages"][std::string(stage_abbrev(st))] = {{"epochs", x.epochs},
                                                  {"learning_rate", x.learning_rate},
                                                  {"batch_size", x.batch_size},
                                                  {"augment", x.augment}};
  }
  return j.dump(2) + "\n";
}

// ---- layout ----

fs::path RunLayout::segmentation_weights(int stage) const {
  return segmentation_dir() / ("stage" + std::to_string(stage) + ".kwts");
}
fs::path RunLayout::segmentation_loss(int stage) const {
  return segmentation_dir() / ("stage" + std::to_string(stage) + "_loss.log");
}
fs::path RunLayout::stage_dir(Backbone b) const { return root / ("stages_" + std::string(backbone_name(b))); }
fs::path RunLayout::stage_weights(Backbone b, Stage s) const {
  return stage_dir(b) / (std::string(stage_abbrev(s)) + ".kwts");
}
fs::path RunLayout::stage_loss(Backbone b, Stage s) const {
  return stage_dir(b) / (std::string(stage_abbrev(s)) + "_loss.log");
}
fs::path RunLayout::stage_validation_loss(Backbone b, Stage s) const {
  return stage_dir(b) / (std::string(stage_abbrev(s)) + "_validation_loss.log");
}
fs::path RunLayout::decisions(Backbone b) const {
  return root / ("decisions_" + std::string(backbone_name(b)) + ".csv");
}
fs::path RunLayout::saliency_dir(Backbone b) const { return root / ("saliency_" + std::string(backbone_name(b))); }

// ---- helpers ----

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw MissingArtifactError("missing " + p.string() + "; run `aclstage " + producer + "` first");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void record_config(const RunConfig& c) {
  write_text(RunLayout{c.out}.config(), dump_run_config(c));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Per-epoch loss lines, written as training proceeds; a rerun starts the
// file afresh.
class LossLog {
 public:
  explicit LossLog(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write loss log " + path.string());
  }
  void add(std::size_t epoch, double loss) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu %.8g\n", epoch, loss);
    out_ << buf;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::vector<StudyRecord> load_manifest(const RunLayout& L) {
  require(L.manifest(), "phantom-gen");
  return read_manifest(L.manifest());
}

std::map<std::string, Split> load_split(const RunLayout& L) {
  require(L.split(), "split");
  return read_split(L.split());
}

SegMask load_mask(const StudyRecord& r) {
  if (!r.mask_path || r.mask_path->empty()) {
    throw MissingArtifactError("study " + r.study_id + " has no ground-truth mask in the manifest");
  }
  require(*r.mask_path, "phantom-gen");
  return read_kvol_mask(*r.mask_path);
}

Volume3D load_volume(const StudyRecord& r) {
  require(r.volume_path, "phantom-gen");
  return read_kvol_volume(r.volume_path, r.side);
}

struct StageModels {
  std::array<std::unique_ptr<StageNet<float>>, 3> nets;
};

StageModels load_stage_models(const RunConfig& c, Backbone b) {
  const RunLayout L{c.out};
  StageModels m;
  for (Stage s : kStages) {
    const auto path = L.stage_weights(b, s);
    require(path, "train-stage --backbone " + std::string(backbone_name(b)) + " --stage " + std::string(stage_abbrev(s)));
    auto net = make_stage_net(b, c.roi, stage_seed(c, b, s));
    nn::load_weights(path, net->parameters());
    m.nets[static_cast<int>(s)] = std::move(net);
  }
  return m;
}

std::array<StageScorer, 3> scorers(const StageModels& m) {
  std::array<StageScorer, 3> out;
  for (int i = 0; i < 3; ++i) {
    const StageNet<float>* net = m.nets[i].get();
    out[i] = [net](const Volume3D& roi) { return stage_probability(*net, roi); };
  }
  return out;
}

}  // namespace

std::vector<StudyRecord> split_studies(const std::vector<StudyRecord>& all, const std::map<std::string, Split>& split,
                                       Split which) {
  std::vector<StudyRecord> out;
  for (const auto& r : all) {
    auto it = split.find(r.study_id);
    if (it == split.end()) throw FormatError("study " + r.study_id + " is missing from the split file");
    if (it->second == which) out.push_back(r);
  }
  return out;
}

Volume3D truth_roi(const StudyRecord& r, const Dims3& roi) { return localize_acl(load_volume(r), load_mask(r), roi); }

double mass_fraction(const Volume3D& saliency, const std::vector<std::uint8_t>& region) {
  if (region.size() != saliency.data().size()) throw std::invalid_argument("saliency and region sizes differ");
  double inside = 0, total = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    total += saliency.data()[i];
    if (region[i]) inside += saliency.data()[i];
  }
  if (!(total > 0)) throw UndefinedInputError("saliency map has no mass");
  return inside / total;
}

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& binary, const Dims3& d, int radius) {
  if (binary.size() != d.voxels()) throw std::invalid_argument("dilate: grid size mismatch");
  std::vector<std::uint8_t> cur = binary;
  for (int r = 0; r < radius; ++r) {
    std::vector<std::uint8_t> next = cur;
    for (std::size_t z = 0; z < d.depth; ++z) {
      for (std::size_t y = 0; y < d.height; ++y) {
        for (std::size_t x = 0; x < d.width; ++x) {
          if (!cur[(z * d.height + y) * d.width + x]) continue;
          for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
              for (int dx = -1; dx <= 1; ++dx) {
                const auto zz = static_cast<std::ptrdiff_t>(z) + dz, yy = static_cast<std::ptrdiff_t>(y) + dy,
                           xx = static_cast<std::ptrdiff_t>(x) + dx;
                if (zz < 0 || yy < 0 || xx < 0 || zz >= static_cast<std::ptrdiff_t>(d.depth) ||
                    yy >= static_cast<std::ptrdiff_t>(d.height) || xx >= static_cast<std::ptrdiff_t>(d.width)) {
                  continue;
                }
                next[(static_cast<std::size_t>(zz) * d.height + static_cast<std::size_t>(yy)) * d.width +
                     static_cast<std::size_t>(xx)] = 1;
              }
            }
          }
        }
      }
    }
    cur.swap(next);
  }
  return cur;
}

// ---- subcommands ----

std::vector<StudyRecord> run_phantom_gen(const RunConfig& c, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  // stale studies from an earlier, larger cohort would survive otherwise
  fs::remove_all(L.data() / "volumes");
  fs::remove_all(L.data() / "masks");
  auto records = write_cohort(effective_cohort(c), L.data());
  record_config(c);
  if (read_manifest(L.manifest()).size() != records.size()) {
    throw std::runtime_error("manifest " + L.manifest().string() + " does not read back");
  }
  std::array<std::size_t, kGradeCount> counts{};
  for (const auto& r : records) ++counts[static_cast<int>(r.grade)];
  say(log, "wrote " + std::to_string(records.size()) + " studies to " + L.data().string() + " (intact " +
               std::to_string(counts[0]) + ", partial tear " + std::to_string(counts[1]) + ", full tear " +
               std::to_string(counts[2]) + ", reconstructed " + std::to_string(counts[3]) + ")");
  return records;
}

SplitAssignment run_split(const RunConfig& c, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  const auto records = load_manifest(L);
  auto split = stratified_split(records, effective_split(c));
  write_split(L.split(), split, records);
  if (read_split(L.split()) != split.by_study) throw std::runtime_error("split file does not read back");

  std::ostringstream os;
  os << "split       patients  studies  intact  partial  full  recon  ratio  age             bmi             female\n";
  for (int s = 0; s < kSplitCount; ++s) {
    const auto& m = split.summaries[s];
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-10s %9zu %8zu %7zu %8zu %5zu %6zu  %.3f  %5.1f \xC2\xB1 %4.1f    %5.1f \xC2\xB1 %4.1f    %.2f\n",
                  std::string(split_name(static_cast<Split>(s))).c_str(), m.patients, m.studies,
                  m.grades[0], m.grades[1], m.grades[2], m.grades[3], split.realized[s], m.age_mean, m.age_sd,
                  m.bmi_mean, m.bmi_sd, m.female_fraction);
    os << buf;
  }
  os << "\nbalance tests (" << split.attempts << " draw" << (split.attempts == 1 ? "" : "s") << ")\n";
  for (const auto& t : split.balance) {
    os << t.variable << ' ' << split_name(t.a) << " vs " << split_name(t.b) << ": " << format_p(t.p) << '\n';
  }
  for (const auto& w : split.warnings) os << "warning: " << w << '\n';
  write_text(L.split_summary(), os.str());
  record_config(c);
  for (const auto& w : split.warnings) say(log, "warning: " + w);
  say(log, "split " + std::to_string(records.size()) + " studies: train " + std::to_string(split.summaries[0].studies) +
               ", validation " + std::to_string(split.summaries[1].studies) + ", test " +
               std::to_string(split.summaries[2].studies));
  return split;
}

SegTrainSummary run_train_seg(const RunConfig& c, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  const auto records = load_manifest(L);
  auto train = split_studies(records, load_split(L), Split::Train);
  if (c.segmentation.train_studies > 0 && train.size() > c.segmentation.train_studies) {
    train.resize(c.segmentation.train_studies);
  }
  if (train.empty()) throw std::runtime_error("no training studies for the segmentation cascade");
  std::vector<LabeledStudy> data;
  for (const auto& r : train) data.push_back({load_volume(r), load_mask(r)});

  SegmentationCascade cascade(c.segmentation.base_channels, c.segmentation.grid, segmentation_seed(c));
  fs::create_directories(L.segmentation_dir());
  SegTrainSummary out;
  out.studies = data.size();
  {
    LossLog log1(L.segmentation_loss(1)), log2(L.segmentation_loss(2));
    out.losses = train_segmentation(
        cascade, data, effective_seg_train(c),
        [&](std::size_t e, double loss) {
          log1.add(e, loss);
          say(log, "segmentation stage 1 epoch " + std::to_string(e) + " loss " + fmt("%.4f", loss));
        },
        [&](std::size_t e, double loss) {
          log2.add(e, loss);
          say(log, "segmentation stage 2 epoch " + std::to_string(e) + " loss " + fmt("%.4f", loss));
        });
  }
  nn::save_weights(L.segmentation_weights(1), cascade.stage1.parameters());
  nn::save_weights(L.segmentation_weights(2), cascade.stage2.parameters());
  SegmentationCascade check(c.segmentation.base_channels, c.segmentation.grid, 0);
  nn::load_weights(L.segmentation_weights(1), check.stage1.parameters());
  nn::load_weights(L.segmentation_weights(2), check.stage2.parameters());
  record_config(c);
  say(log, "segmentation cascade trained on " + std::to_string(out.studies) + " studies");
  return out;
}

nn::GradCheckReport verify_stage_gradients(Backbone b, const Dims3& roi, std::uint64_t seed,
                                           std::size_t elements_per_leaf) {
  std::unique_ptr<StageNet<double>> net;
  if (b == Backbone::ThreeD) {
    Classifier3DSpec spec;
    spec.input = roi;
    net = std::make_unique<Classifier3D<double>>(spec, seed);
  } else {
    Classifier2DSpec spec;
    spec.input = roi;
    net = std::make_unique<Classifier2D<double>>(spec, seed);
  }
  std::mt19937_64 rng(seed);
  for (auto& e : net->parameters().entries()) {
    if (e.var->shape().size() != 1) continue;
    for (auto& v : e.var->tensor.values()) v = std::uniform_real_distribution<double>(0.05, 0.3)(rng);
  }
  nn::Tensor<double> input(nn::Shape{1, roi.depth, roi.height, roi.width});
  for (auto& v : input.values()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  auto x = nn::make_leaf(std::move(input));
  auto leaves = net->parameters().entries();
  leaves.push_back({"input", x});
  nn::GradCheckOptions opts;
  // At ROI dims enough units sit near a ReLU or pooling kink that a 1e-5
  // step crosses one. A 1e-6 step stays clear; its roundoff, about
  // eps |L| / h, sets the floor under the relative error.
  opts.step = 1e-6;
  opts.denominator_floor = 1e-5;
  opts.max_elements_per_leaf = elements_per_leaf;
  const StageNet<double>* n = net.get();
  return nn::finite_diff_check(
      [&](nn::Tape<double>& t) {
        return nn::weighted_cross_entropy(t, nn::binary_probabilities(t, n->forward(t, x)), 1, {1.0, 1.0});
      },
      leaves, opts);
}

StageTrainResult run_train_stage(const RunConfig& c, Backbone b, Stage s, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  const auto records = load_manifest(L);
  const auto split = load_split(L);
  auto samples = [&](Split which) {
    std::vector<StageSample> out;
    for (const auto& r : split_studies(records, split, which)) {
      if (!stage_admits(s, r.grade)) continue;
      out.push_back({r.study_id, truth_roi(r, c.roi), r.grade});
    }
    return out;
  };
  const auto train = samples(Split::Train);
  const auto validation = samples(Split::Validation);
  const std::string tag = std::string(backbone_name(b)) + " " + std::string(stage_abbrev(s));

  const std::uint64_t seed = stage_seed(c, b, s);
  if (c.precision == Precision::Verify64) {
    const auto rep = verify_stage_gradients(b, c.roi, seed);
    say(log, tag + " 64-bit gradient check: max relative error " + fmt("%.3g", rep.max_relative_error) + " over " +
                 std::to_string(rep.checked) + " elements");
    if (!rep.passed) {
      throw std::runtime_error(tag + " gradient check failed at " + rep.worst_leaf + "[" +
                               std::to_string(rep.worst_index) + "]");
    }
  }

  auto net = make_stage_net(b, c.roi, seed);
  StageConfig cfg = effective_stage(c, s);
  cfg.seed = seed;
  fs::create_directories(L.stage_dir(b));
  StageTrainResult result;
  {
    LossLog train_log(L.stage_loss(b, s)), val_log(L.stage_validation_loss(b, s));
    result = train_stage(*net, train, validation, cfg, [&](std::size_t e, double tl, double vl) {
      train_log.add(e, tl);
      if (std::isfinite(vl)) val_log.add(e, vl);
      say(log, tag + " epoch " + std::to_string(e) + " loss " + fmt("%.4f", tl) + " validation " + fmt("%.4f", vl));
    });
  }
  nn::save_weights(L.stage_weights(b, s), net->parameters());
  auto check = make_stage_net(b, c.roi, 0);
  nn::load_weights(L.stage_weights(b, s), check->parameters());
  record_config(c);
  say(log, tag + ": " + std::to_string(train.size()) + " training studies, best epoch " +
               std::to_string(result.best_epoch));
  return result;
}

InferSummary run_infer(const RunConfig& c, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  const auto records = load_manifest(L);
  const auto test = split_studies(records, load_split(L), Split::Test);

  std::vector<StageModels> models;
  for (Backbone b : c.backbones) models.push_back(load_stage_models(c, b));
  std::optional<SegmentationCascade> cascade;
  if (c.roi_source == RoiSource::Segmentation) {
    require(L.segmentation_weights(1), "train-seg");
    require(L.segmentation_weights(2), "train-seg");
    cascade.emplace(c.segmentation.base_channels, c.segmentation.grid, segmentation_seed(c));
    nn::load_weights(L.segmentation_weights(1), cascade->stage1.parameters());
    nn::load_weights(L.segmentation_weights(2), cascade->stage2.parameters());
  }

  InferSummary summary;
  summary.studies = test.size();
  std::vector<BoxRecord> boxes;
  std::vector<BoundingBox> predicted_boxes, truth_boxes;
  std::vector<double>& dice = summary.dice;
  std::vector<std::vector<DecisionRecord>> decisions(c.backbones.size());
  for (const auto& r : test) {
    const Volume3D vol = load_volume(r);
    std::optional<SegMask> truth;
    if (r.mask_path && !r.mask_path->empty()) truth = load_mask(r);
    BoundingBox box;
    if (cascade) {
      const auto seg = segment(*cascade, vol);
      if (truth) dice.push_back(mean_foreground_dice(seg.fine, *truth));
      try {
        box = derive_acl_bbox(seg.fine, r.side);
      } catch (const LocalizationError& e) {
        ++summary.localization_fallbacks;
        box = BoundingBox::full(vol.dims());
        say(log, "warning: " + r.study_id + ": " + e.what() + "; using the whole volume");
      }
      if (truth) {
        predicted_boxes.push_back(box);
        truth_boxes.push_back(derive_acl_bbox(*truth, r.side));
      }
    } else {
      if (!truth) throw MissingArtifactError("roi_source truth needs a mask for study " + r.study_id);
      box = derive_acl_bbox(*truth, r.side);
    }
    boxes.push_back({r.study_id, box});
    const Volume3D roi = localize_box(vol, box, c.roi);
    for (std::size_t k = 0; k < models.size(); ++k) {
      decisions[k].push_back({r.study_id, cascade_infer(scorers(models[k]), roi, c.thresholds), r.grade});
    }
  }
  write_boxes(L.boxes(), boxes);
  for (std::size_t k = 0; k < c.backbones.size(); ++k) {
    write_decisions(L.decisions(c.backbones[k]), decisions[k]);
    if (read_decisions(L.decisions(c.backbones[k])).size() != decisions[k].size()) {
      throw std::runtime_error("decision file does not read back");
    }
  }
  if (!predicted_boxes.empty()) summary.localization = evaluate_localization(predicted_boxes, truth_boxes);
  if (!dice.empty()) summary.mean_dice = std::accumulate(dice.begin(), dice.end(), 0.0) / static_cast<double>(dice.size());
  record_config(c);
  say(log, "inferred " + std::to_string(test.size()) + " test studies");
  if (summary.localization) say(log, "ACL box IoU " + summary.localization->format());
  if (summary.mean_dice) say(log, "mean foreground Dice " + fmt("%.3f", *summary.mean_dice));
  return summary;
}

std::string run_eval(const RunConfig& c, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  std::vector<ModelEvaluation> models;
  std::vector<Grade> truth;
  std::vector<std::string> ids;
  for (Backbone b : c.backbones) {
    require(L.decisions(b), "infer --backbone " + std::string(backbone_name(b)));
    const auto records = read_decisions(L.decisions(b));
    ModelEvaluation m;
    m.name = b == Backbone::ThreeD ? "3D" : "2D";
    std::vector<Grade> t;
    std::vector<std::string> order;
    for (const auto& r : records) {
      m.predicted.push_back(r.decision.grade);
      t.push_back(r.truth);
      order.push_back(r.study_id);
    }
    if (models.empty()) {
      truth = t;
      ids = order;
    } else if (order != ids || t != truth) {
      throw FormatError("decision files cover different studies; rerun `aclstage infer --backbone both`");
    }
    models.push_back(std::move(m));
  }
  if (truth.empty()) throw std::runtime_error("no test decisions to evaluate");

  std::ostringstream os;
  os << "Test studies: " << truth.size() << "\n\n" << format_report(models, truth);
  if (fs::exists(L.boxes()) && fs::exists(L.manifest())) {
    std::map<std::string, StudyRecord> by_id;
    for (const auto& r : read_manifest(L.manifest())) by_id[r.study_id] = r;
    std::vector<BoundingBox> pred, ref;
    for (const auto& b : read_boxes(L.boxes())) {
      auto it = by_id.find(b.study_id);
      if (it == by_id.end() || !it->second.mask_path) continue;
      pred.push_back(b.box);
      ref.push_back(derive_acl_bbox(load_mask(it->second), it->second.side));
    }
    if (!pred.empty()) {
      os << "\nACL localization IoU (n = " << pred.size() << "): " << evaluate_localization(pred, ref).format() << '\n';
    }
  }
  const std::string text = os.str();
  write_text(L.report(), text);
  record_config(c);
  say(log, "wrote " + L.report().string());
  return text;
}

SaliencySummary run_saliency(const RunConfig& c, Backbone b, const Logger& log) {
  c.validate();
  const RunLayout L{c.out};
  require(L.decisions(b), "infer --backbone " + std::string(backbone_name(b)));
  require(L.boxes(), "infer");
  const auto decisions = read_decisions(L.decisions(b));
  std::map<std::string, BoundingBox> boxes;
  for (const auto& r : read_boxes(L.boxes())) boxes[r.study_id] = r.box;
  std::map<std::string, StudyRecord> by_id;
  for (const auto& r : load_manifest(L)) by_id[r.study_id] = r;
  const auto models = load_stage_models(c, b);

  fs::remove_all(L.saliency_dir(b));
  fs::create_directories(L.saliency_dir(b));
  SaliencySummary out;
  for (const auto& d : decisions) {
    auto rec = by_id.find(d.study_id);
    auto box = boxes.find(d.study_id);
    if (rec == by_id.end() || box == boxes.end()) {
      throw FormatError("study " + d.study_id + " lacks a manifest entry or a box; rerun `aclstage infer`");
    }
    const Volume3D roi = localize_box(load_volume(rec->second), box->second, c.roi);
    const Stage s = deciding_stage(d.decision);
    const auto sal = saliency_map(*models.nets[static_cast<int>(s)], roi);
    write_kvol(L.saliency_dir(b) / (d.study_id + ".kvol"), sal.map);
    ++out.maps;
    out.degenerate += sal.degenerate;
  }
  record_config(c);
  say(log, "wrote " + std::to_string(out.maps) + " saliency maps to " + L.saliency_dir(b).string() +
               (out.degenerate ? " (" + std::to_string(out.degenerate) + " degenerate)" : ""));
  return out;
}

}  // namespace aclstage
