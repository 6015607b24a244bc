#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "aclstage/nn/kwts.hpp"
#include "aclstage/pipeline.hpp"
#include "doctest.h"

using namespace aclstage;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("aclstage_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct CliResult {
  int status = -1;
  std::string output;  // stdout and stderr
};

CliResult cli(const std::string& args, const std::string& env = "") {
  const auto log = fs::temp_directory_path() / "aclstage_pipeline_cli.log";
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(ACLSTAGE_CLI) + " " + args + " > " +
                          log.string() + " 2>&1";
  CliResult r;
  const int raw = std::system(cmd.c_str());
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

// Relative path -> contents for every regular file under root.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("phantom-gen is byte-identical across runs and output roots") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  const auto ra = cli("phantom-gen --count 40 --seed 7 --out " + a.string());
  REQUIRE(ra.status == 0);
  REQUIRE(cli("phantom-gen --count 40 --seed 7", "ACLSTAGE_OUT=" + b.string()).status == 0);
  const auto ta = tree(a), tb = tree(b);
  CHECK(ta.size() == 40 * 2 + 2);  // volumes, masks, manifest, config
  CHECK(ta == tb);

  // a rerun into the same root leaves identical bytes
  REQUIRE(cli("phantom-gen --count 40 --seed 7 --out " + a.string()).status == 0);
  CHECK(tree(a) == ta);

  REQUIRE(cli("phantom-gen --count 40 --seed 8 --out " + b.string()).status == 0);
  CHECK(tree(b) != ta);
}

TEST_CASE("phantom-gen with count 0 writes a header-only manifest") {
  const auto d = scratch("gen_zero");
  const auto r = cli("phantom-gen --count 0 --out " + d.string());
  CHECK(r.status == 0);
  const auto text = slurp(RunLayout{d}.manifest());
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  CHECK(read_manifest(RunLayout{d}.manifest()).empty());
}

TEST_CASE("a smaller cohort replaces a larger one") {
  const auto d = scratch("gen_shrink");
  REQUIRE(cli("phantom-gen --count 12 --out " + d.string()).status == 0);
  REQUIRE(cli("phantom-gen --count 5 --out " + d.string()).status == 0);
  CHECK(tree(d / "data").size() == 5 * 2 + 1);
}

TEST_CASE("default proportions apportion grades by largest remainder") {
  RunConfig c;
  c.cohort.study_count = 400;
  const auto plan = plan_cohort(effective_cohort(c));
  std::array<std::size_t, kGradeCount> counts{};
  for (Grade g : plan.grades) ++counts[static_cast<int>(g)];
  // 400 x (0.814, 0.014, 0.060, 0.111) / 0.999 = 325.93, 5.61, 24.02, 44.44
  CHECK(counts == std::array<std::size_t, kGradeCount>{326, 6, 24, 44});
}

TEST_CASE("missing upstream artifacts name the file and the producing subcommand") {
  const auto d = scratch("missing");
  auto r = cli("split --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("manifest.csv") != std::string::npos);
  CHECK(r.output.find("phantom-gen") != std::string::npos);

  REQUIRE(cli("phantom-gen --count 10 --out " + d.string()).status == 0);
  r = cli("train-stage --stage R --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("split.csv") != std::string::npos);

  r = cli("infer --roi-source truth --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("error: missing") == 0);

  r = cli("eval --backbone 2d --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("decisions_2d.csv") != std::string::npos);

  r = cli("split --config " + (d / "nope.json").string() + " --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("nope.json") != std::string::npos);
}

TEST_CASE("train-stage with zero epochs keeps the initialization") {
  const auto d = scratch("epochs0");
  REQUIRE(cli("phantom-gen --count 20 --seed 3 --out " + d.string()).status == 0);
  REQUIRE(cli("split --seed 3 --out " + d.string()).status == 0);
  for (const char* bb : {"3d", "2d"}) {
    CAPTURE(bb);
    const auto r = cli(std::string("train-stage --stage R --epochs 0 --seed 3 --backbone ") + bb + " --out " +
                       d.string());
    REQUIRE(r.status == 0);
    RunConfig c;
    c.seed = 3;
    const Backbone b = parse_backbone(bb);
    const auto init = make_stage_net(b, c.roi, stage_seed(c, b, Stage::Reconstructed));
    const auto expected = d / "expected.kwts";
    nn::save_weights(expected, init->parameters());
    CHECK(slurp(expected) == slurp(RunLayout{d}.stage_weights(b, Stage::Reconstructed)));
    CHECK(slurp(RunLayout{d}.stage_loss(b, Stage::Reconstructed)).empty());
  }
}

TEST_CASE("eval on perfect decisions reports full accuracy and kappa 1") {
  const auto d = scratch("perfect");
  std::vector<DecisionRecord> records;
  const std::array<Grade, 8> truth{Grade::Intact,  Grade::PartialTear,   Grade::FullTear, Grade::Reconstructed,
                                   Grade::Intact,  Grade::Reconstructed, Grade::FullTear, Grade::Intact};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const Grade g = truth[i];
    std::array<StageScorer, 3> s;
    for (Stage st : kStages) {
      s[static_cast<int>(st)] = [g, st](const Volume3D&) { return g == stage_positive(st) ? 0.9 : 0.1; };
    }
    records.push_back({"S" + std::to_string(i), cascade_infer(s, Volume3D({1, 1, 1})), g});
    REQUIRE(records.back().decision.grade == g);
  }
  write_decisions(RunLayout{d}.decisions(Backbone::ThreeD), records);
  const auto r = cli("eval --out " + d.string());
  REQUIRE(r.status == 0);
  const auto report = slurp(RunLayout{d}.report());
  CHECK(report.find("Overall accuracy  100 (8/8)") != std::string::npos);
  CHECK(report.find("Weighted kappa    1.00") != std::string::npos);
  CHECK(r.output.find(report) != std::string::npos);
}

TEST_CASE("config files are strict and flags override them") {
  const auto d = scratch("config");
  const auto cfg = d / "run.json";
  write(cfg, R"({"seed": 11, "cohort": {"count": 6, "phantom": {"noise_sd": 0.0}}, "out": ")" +
                 (d / "from_file").string() + R"("})");
  REQUIRE(cli("phantom-gen --config " + cfg.string()).status == 0);
  const auto written = load_run_config(RunLayout{d / "from_file"}.config());
  CHECK(written.seed == 11);
  CHECK(written.cohort.study_count == 6);
  CHECK(written.cohort.phantom.noise_sd == 0.0);

  REQUIRE(cli("phantom-gen --config " + cfg.string() + " --seed 12 --count 4 --out " + (d / "flags").string())
              .status == 0);
  const auto over = load_run_config(RunLayout{d / "flags"}.config());
  CHECK(over.seed == 12);
  CHECK(over.cohort.study_count == 4);
  CHECK(over.cohort.phantom.noise_sd == 0.0);

  write(cfg, R"({"cohort": {"cuont": 6}})");
  auto r = cli("phantom-gen --config " + cfg.string() + " --out " + d.string());
  CHECK(r.status == 1);
  CHECK(r.output.find("cuont") != std::string::npos);

  write(cfg, R"({"thresholds": [0.5, 1.5, 0.5]})");
  CHECK(cli("split --config " + cfg.string() + " --out " + d.string()).status == 1);
  CHECK(cli("split --threshold 0.4,0.5 --out " + d.string()).status == 1);
  CHECK_THROWS_AS(parse_run_config("{not json"), FormatError);
  CHECK_THROWS_AS(parse_run_config(R"({"seed": "x"})"), FormatError);
}

TEST_CASE("dump and parse of a run config round-trip") {
  RunConfig c;
  c.seed = 99;
  c.backbones = {Backbone::ThreeD, Backbone::TwoD};
  c.thresholds = {0.3, 0.6, 0.45};
  c.precision = Precision::Verify64;
  c.roi_source = RoiSource::Truth;
  c.cohort.study_count = 17;
  c.cohort.phantom.jitter = 0;
  c.segmentation.train.epochs = 3;
  c.stages[1].learning_rate = 0.125;
  c.stages[2].augment = false;
  c.split.ratios = {0.6, 0.2, 0.2};
  const auto text = dump_run_config(c);
  const auto back = parse_run_config(text);
  CHECK(dump_run_config(back) == text);
  CHECK(back.stages[1].learning_rate == 0.125);
  CHECK(back.backbones.size() == 2);
  CHECK(text.find("\"out\"") == std::string::npos);
}

TEST_CASE("nested seeds are distinct") {
  RunConfig c;
  std::vector<std::uint64_t> seeds{cohort_seed(c), split_seed(c), segmentation_seed(c)};
  for (Backbone b : {Backbone::ThreeD, Backbone::TwoD}) {
    for (Stage s : kStages) seeds.push_back(stage_seed(c, b, s));
  }
  std::sort(seeds.begin(), seeds.end());
  CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());
}

TEST_CASE("dilation grows a voxel into a cube") {
  const Dims3 d{7, 7, 7};
  std::vector<std::uint8_t> b(d.voxels(), 0);
  b[(3 * 7 + 3) * 7 + 3] = 1;
  CHECK(std::count(b.begin(), b.end(), 1) == 1);
  CHECK(dilate(b, d, 0) == b);
  const auto one = dilate(b, d, 1), two = dilate(b, d, 2);
  CHECK(std::count(one.begin(), one.end(), 1) == 27);
  CHECK(std::count(two.begin(), two.end(), 1) == 125);
  b.assign(d.voxels(), 0);
  b[0] = 1;
  const auto corner = dilate(b, d, 1);
  CHECK(std::count(corner.begin(), corner.end(), 1) == 8);
}

TEST_CASE("mass fraction counts saliency inside a region") {
  Volume3D s({1, 2, 2}, 0.0f);
  const std::array<float, 4> values{1.0f, 3.0f, 0.0f, 4.0f};
  std::copy(values.begin(), values.end(), s.data().begin());
  CHECK(mass_fraction(s, {1, 0, 0, 0}) == doctest::Approx(0.125));
  CHECK(mass_fraction(s, {0, 1, 1, 1}) == doctest::Approx(0.875));
  CHECK_THROWS_AS(mass_fraction(Volume3D({1, 2, 2}, 0.0f), {1, 1, 1, 1}), UndefinedInputError);
  CHECK_THROWS_AS(mass_fraction(s, {1, 1}), std::invalid_argument);
}

TEST_CASE("64-bit verification of the stage networks at ROI dims") {
  for (Backbone b : {Backbone::ThreeD, Backbone::TwoD}) {
    CAPTURE(backbone_name(b));
    const auto rep = verify_stage_gradients(b, kPhantomRoiDims, 21, 2);
    INFO("worst ", rep.worst_leaf, "[", rep.worst_index, "] analytic ", rep.analytic_at_worst, " numeric ",
         rep.numeric_at_worst);
    CHECK(rep.passed);
    CHECK(rep.max_relative_error < 1e-4);
    CHECK(rep.checked > 0);
  }
}

TEST_CASE("full pipeline on 40 phantoms emits every artifact") {
  const auto d = scratch("smoke");
  const auto cfg = d / "run.json";
  write(cfg, R"({
    "seed": 5,
    "backbone": "both",
    "cohort": {"count": 40},
    "segmentation": {"epochs": 1, "train_studies": 3},
    "stages": {"R": {"epochs": 1}, "FT": {"epochs": 1}, "PT": {"epochs": 1}}
  })");
  const auto r = cli("pipeline --config " + cfg.string() + " --out " + (d / "run").string());
  INFO(r.output);
  REQUIRE(r.status == 0);
  const RunLayout L{d / "run"};

  const auto manifest = read_manifest(L.manifest());
  REQUIRE(manifest.size() == 40);
  for (const auto& rec : manifest) {
    CHECK(read_kvol_volume(rec.volume_path).dims() == Dims3{48, 48, 32});
    CHECK(read_kvol_mask(*rec.mask_path).dims() == Dims3{48, 48, 32});
  }
  const auto split = read_split(L.split());
  CHECK(split.size() == 40);
  CHECK(!slurp(L.split_summary()).empty());
  const auto config = load_run_config(L.config());
  CHECK(config.seed == 5);

  SegmentationCascade cascade(4, {48, 48, 32}, 0);
  nn::load_weights(L.segmentation_weights(1), cascade.stage1.parameters());
  nn::load_weights(L.segmentation_weights(2), cascade.stage2.parameters());
  CHECK(slurp(L.segmentation_loss(1)).starts_with("1 "));

  const auto test = split_studies(manifest, split, Split::Test);
  CHECK(read_boxes(L.boxes()).size() == test.size());
  for (Backbone b : {Backbone::ThreeD, Backbone::TwoD}) {
    for (Stage s : kStages) {
      auto net = make_stage_net(b, kPhantomRoiDims, 0);
      nn::load_weights(L.stage_weights(b, s), net->parameters());
      std::istringstream log(slurp(L.stage_loss(b, s)));
      std::size_t epoch = 0;
      double loss = 0;
      CHECK(static_cast<bool>(log >> epoch >> loss));
      CHECK(epoch == 1);
      CHECK(std::isfinite(loss));
    }
    CHECK(read_decisions(L.decisions(b)).size() == test.size());
    std::size_t maps = 0;
    for (const auto& e : fs::directory_iterator(L.saliency_dir(b))) {
      const auto m = read_kvol_volume(e.path());
      CHECK(m.dims() == kPhantomRoiDims);
      ++maps;
    }
    CHECK(maps == test.size());
  }
  const auto report = slurp(L.report());
  CHECK(report.find("3D sensitivity") != std::string::npos);
  CHECK(report.find("2D sensitivity") != std::string::npos);
  CHECK(report.find("Weighted kappa") != std::string::npos);
  CHECK(report.find("ACL localization IoU") != std::string::npos);

  // rerunning a subcommand reproduces its outputs bit for bit
  const auto before = tree(L.root);
  REQUIRE(cli("infer --config " + cfg.string() + " --out " + L.root.string()).status == 0);
  REQUIRE(cli("eval --config " + cfg.string() + " --out " + L.root.string()).status == 0);
  CHECK(tree(L.root) == before);
}
