// Runs the built artfix binary end to end on tiny configs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "artfix/config.hpp"
#include "artfix/image_io.hpp"
#include "artfix/metrics.hpp"
#include "artfix/textures.hpp"
#include "support.hpp"

using namespace artfix;
namespace fs = std::filesystem;

namespace {

const char* kToyConfig = R"([run]
seed = 3
[model]
image_size = 8
embed_dim = 8
depths = 1
num_heads = 2
[diffusion]
steps = 150
[data]
patch_size = 8
synthetic_count = 6
[train]
batch_size = 2
total_steps = 6
checkpoint_every = 3
learning_rate = 1e-3
[ablate]
eval_images = 2
timed_restores = 10
)";

struct CliRun {
  int code;
  std::string log;
};

CliRun cli(const std::string& args, const fs::path& log_file) {
  const std::string cmd = std::string(ARTFIX_CLI) + " " + args + " > " + log_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(log_file);
  std::stringstream ss;
  ss << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string bytes_of(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// One trained toy model shared by the restore tests.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("cli");
    std::ofstream(*dir_ / "toy.cfg") << kToyConfig;
    const CliRun r = cli("train --config " + (*dir_ / "toy.cfg").string() + " --out " + (*dir_ / "model").string(),
                      *dir_ / "train.log");
    ASSERT_EQ(r.code, 0) << r.log;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path path(const std::string& name) { return *dir_ / name; }
  static std::string cfg() { return " --config " + path("toy.cfg").string(); }
  static std::string model() { return (*dir_ / "model" / "model.bin").string(); }

  static test::TempDir* dir_;
};

test::TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, MissingDatasetIsConfigError) {
  std::ofstream(path("nodata.cfg")) << "[train]\ntotal_steps = 1\n";
  const CliRun r = cli("train --config " + path("nodata.cfg").string() + " --out " + path("x").string(), path("l"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.log.find("data.root_path"), std::string::npos) << r.log;

  const CliRun bad_dir = cli("train" + cfg() + " --set data.root_path=/nonexistent --out " + path("x").string(), path("l"));
  EXPECT_EQ(bad_dir.code, 2);
  EXPECT_NE(bad_dir.log.find("data.root_path"), std::string::npos);
}

TEST_F(Cli, ExitCodeContract) {
  EXPECT_EQ(cli("train" + cfg() + " --set model.bogus=1 --out " + path("x").string(), path("l")).code, 2);
  EXPECT_EQ(cli("frobnicate", path("l")).code, 2);
  EXPECT_EQ(cli("", path("l")).code, 2);
  EXPECT_EQ(cli("--help", path("l")).code, 0);
  std::ofstream(path("junk.bin")) << "junk";
  write_image(path("one.png"), tissue_texture(8, 1));
  const CliRun r = cli("restore" + cfg() + " --checkpoint " + path("junk.bin").string() + " --input " +
                        path("one.png").string() + " --detect --out " + path("x").string(),
                    path("l"));
  EXPECT_EQ(r.code, 3) << r.log;
}

TEST_F(Cli, TrainWritesCheckpointsAndDeterministicLoss) {
  const fs::path out = path("model");
  EXPECT_TRUE(fs::exists(out / "checkpoint_000003.bin"));
  EXPECT_TRUE(fs::exists(out / "model.bin"));
  ASSERT_TRUE(fs::exists(out / "loss.csv"));
  const std::string loss = bytes_of(out / "loss.csv");
  EXPECT_EQ(loss.rfind("step,loss\n", 0), 0u);
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 7);

  ASSERT_EQ(cli("train" + cfg() + " --out " + path("model2").string(), path("l")).code, 0);
  EXPECT_EQ(bytes_of(path("model2") / "loss.csv"), loss);
  EXPECT_EQ(bytes_of(path("model2") / "model.bin"), bytes_of(out / "model.bin"));
  ASSERT_EQ(cli("train" + cfg() + " --seed 4 --out " + path("model3").string(), path("l")).code, 0);
  EXPECT_NE(bytes_of(path("model3") / "loss.csv"), loss);
}

TEST_F(Cli, RestoreWritesSnapshotsAndKeepsUnmaskedPixels) {
  const ImageTensor x = tissue_texture(8, 21);
  write_image(path("r.png"), x);
  ArtifactMask m(8, 8);
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t xx = 3; xx < 7; ++xx) m.set(y, xx, true);
  write_mask(path("r_mask.png"), m);
  const std::string before = bytes_of(path("r.png"));
  const CliRun r = cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("r.png").string() +
                        " --mask " + path("r_mask.png").string() + " --out " + path("rest").string(),
                    path("l"));
  ASSERT_EQ(r.code, 0) << r.log;
  for (int t : {0, 50, 100, 150}) EXPECT_TRUE(fs::exists(path("rest") / "snapshots" / "r" / ("snap_t" + std::to_string(t) + ".png"))) << t;
  EXPECT_TRUE(fs::exists(path("rest") / "masks" / "r.png"));
  EXPECT_EQ(bytes_of(path("r.png")), before);

  const auto in = read_image(path("r.png"), ValueDomain::byte255), out = read_image(path("rest") / "r.png", ValueDomain::byte255);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i)
      if (!m[i]) {
        EXPECT_EQ(in.values[c * 64 + i], out.values[c * 64 + i]);
      }
  EXPECT_NE(in, out);

  const CliRun custom = cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("r.png").string() +
                             " --mask " + path("r_mask.png").string() + " --snapshots 10,0 --out " + path("rest2").string(),
                         path("l"));
  ASSERT_EQ(custom.code, 0);
  EXPECT_TRUE(fs::exists(path("rest2") / "snapshots" / "r" / "snap_t10.png"));
  EXPECT_FALSE(fs::exists(path("rest2") / "snapshots" / "r" / "snap_t50.png"));
  EXPECT_EQ(cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("r.png").string() +
                    " --mask " + path("r_mask.png").string() + " --snapshots 151 --out " + path("rest3").string(),
                path("l")).code,
            2);
  EXPECT_EQ(cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("r.png").string() + " --out " +
                    path("rest3").string(),
                path("l")).code,
            2);
}

TEST_F(Cli, AllBlackMaskLeavesImageByteIdentical) {
  write_image(path("b.png"), tissue_texture(8, 5));
  write_mask(path("b_mask.png"), ArtifactMask(8, 8));
  ASSERT_EQ(cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("b.png").string() + " --mask " +
                    path("b_mask.png").string() + " --out " + path("black").string(),
                path("l")).code,
            0);
  EXPECT_EQ(bytes_of(path("black") / "b.png"), bytes_of(path("b.png")));
}

TEST_F(Cli, DirectoryRestoreIsDeterministic) {
  fs::create_directories(path("five"));
  fs::create_directories(path("five_masks"));
  for (int i = 0; i < 5; ++i) {
    const std::string n = "im" + std::to_string(i) + ".png";
    write_image(path("five") / n, tissue_texture(8, std::uint64_t(30 + i)));
    write_mask(path("five_masks") / n, test::random_mask(8, 8, std::uint64_t(i), 0.4));
  }
  const std::string base = "restore" + cfg() + " --checkpoint " + model() + " --input " + path("five").string() +
                           " --mask " + path("five_masks").string() + " --snapshots 0 --seed 9 --out ";
  ASSERT_EQ(cli(base + path("d1").string(), path("l")).code, 0);
  ASSERT_EQ(cli(base + path("d2").string(), path("l")).code, 0);
  for (int i = 0; i < 5; ++i) {
    const std::string n = "im" + std::to_string(i) + ".png";
    ASSERT_TRUE(fs::exists(path("d1") / n));
    EXPECT_EQ(bytes_of(path("d1") / n), bytes_of(path("d2") / n));
  }
  ASSERT_EQ(cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("five").string() + " --mask " +
                    path("five_masks").string() + " --snapshots 0 --seed 10 --out " + path("d3").string(),
                path("l")).code,
            0);
  bool any_diff = false;
  for (int i = 0; i < 5; ++i) {
    const std::string n = "im" + std::to_string(i) + ".png";
    any_diff |= bytes_of(path("d1") / n) != bytes_of(path("d3") / n);
  }
  EXPECT_TRUE(any_diff);
}

TEST_F(Cli, DetectMaskSource) {
  write_image(path("det.png"), tissue_texture(8, 2));
  const CliRun r = cli("restore" + cfg() + " --checkpoint " + model() + " --input " + path("det.png").string() +
                        " --detect --snapshots 0 --out " + path("det_out").string(),
                    path("l"));
  ASSERT_EQ(r.code, 0) << r.log;
  EXPECT_EQ(read_mask(path("det_out") / "masks" / "det.png"), detect_artifacts(read_image(path("det.png"))));
}

TEST_F(Cli, EvaluateIdentityAndUnpaired) {
  for (const char* d : {"clean", "same", "emask"}) fs::create_directories(path(d));
  for (int i = 0; i < 2; ++i) {
    const std::string n = "e" + std::to_string(i) + ".png";
    write_image(path("clean") / n, tissue_texture(32, std::uint64_t(i)));
    write_image(path("same") / n, tissue_texture(32, std::uint64_t(i)));
    write_mask(path("emask") / n, test::random_mask(32, 32, std::uint64_t(i)));
  }
  const std::string args = "evaluate --clean " + path("clean").string() + " --restored " + path("same").string() +
                           " --masks " + path("emask").string() + " --out " + path("eval").string();
  const CliRun r = cli(args, path("l"));
  ASSERT_EQ(r.code, 0) << r.log;
  const std::string csv = bytes_of(path("eval") / "report.csv");
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  std::string col_line;
  for (const auto& c : metric_columns()) col_line += "," + c;
  EXPECT_EQ(header, "id" + col_line + ",mse_unit01,psnr_unit01");
  std::getline(lines, row);
  EXPECT_EQ(row, "e0,0,0,1,inf,1,inf,0,inf");
  EXPECT_TRUE(fs::exists(path("eval") / "report.json"));

  // Report mean equals the hand average of the per-image rows.
  fs::create_directories(path("noisy"));
  for (int i = 0; i < 2; ++i) {
    const std::string n = "e" + std::to_string(i) + ".png";
    write_image(path("noisy") / n, tissue_texture(32, std::uint64_t(100 + i)));
  }
  ASSERT_EQ(cli("evaluate --clean " + path("clean").string() + " --restored " + path("noisy").string() + " --masks " +
                    path("emask").string() + " --out " + path("eval2").string(),
                path("l")).code,
            0);
  const auto j = nlohmann::json::parse(bytes_of(path("eval2") / "report.json"));
  for (const char* k : {"mse", "ssim", "fsim", "psnr"}) {
    const double a = j["per_image"][0][k].get<double>(), b = j["per_image"][1][k].get<double>();
    EXPECT_NEAR(j["aggregate"][k].get<double>(), (a + b) / 2, 1e-12) << k;
  }

  fs::remove(path("same") / "e1.png");
  const CliRun unpaired = cli(args, path("l"));
  EXPECT_EQ(unpaired.code, 2);
  EXPECT_NE(unpaired.log.find("e1"), std::string::npos) << unpaired.log;
}

TEST_F(Cli, SynthesizeDeterministicAndLocal) {
  fs::create_directories(path("syn_in"));
  for (int i = 0; i < 3; ++i) write_image(path("syn_in") / ("s" + std::to_string(i) + ".png"), tissue_texture(24, std::uint64_t(i)));
  const std::string base = "synthesize" + cfg() + " --set synthesize.kind=bubble --input " + path("syn_in").string() + " --out ";
  ASSERT_EQ(cli(base + path("syn1").string(), path("l")).code, 0);
  ASSERT_EQ(cli(base + path("syn2").string(), path("l")).code, 0);
  for (int i = 0; i < 3; ++i) {
    const std::string n = "s" + std::to_string(i) + ".png";
    EXPECT_EQ(bytes_of(path("syn1") / n), bytes_of(path("syn2") / n));
    EXPECT_EQ(bytes_of(path("syn1") / "masks" / n), bytes_of(path("syn2") / "masks" / n));
    const auto clean = read_image(path("syn_in") / n, ValueDomain::byte255);
    const auto cor = read_image(path("syn1") / n, ValueDomain::byte255);
    const auto truth = read_mask(path("syn1") / "masks" / n);
    EXPECT_FALSE(truth.none());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 576; ++p)
        if (!truth[p]) {
          EXPECT_EQ(cor.values[c * 576 + p], clean.values[c * 576 + p]);
        }
  }
}

TEST_F(Cli, AblateEmitsThreeRows) {
  const CliRun r = cli("ablate" + cfg() +
                        " --set train.total_steps=2 diffusion.steps=10 restore.snapshots=0 model.image_size=32"
                        " model.patch_size=4 data.patch_size=32 --out " +
                        path("abl").string(),
                    path("l"));
  ASSERT_EQ(r.code, 0) << r.log;
  std::ifstream f(path("abl") / "ablation.csv");
  std::string header, line;
  std::getline(f, header);
  std::string want = "variant";
  for (const auto& c : metric_columns()) want += "," + c;
  EXPECT_EQ(header, want + ",params,flops,inference_seconds");
  RunConfig rc;
  parse_config_text(rc, kToyConfig);
  apply_override(rc, "model.image_size=32");
  apply_override(rc, "model.patch_size=4");
  std::vector<std::string> variants;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 10u) << line;
    variants.push_back(cells[0]);
    const auto model = with_variant(rc.model, cells[0]);
    EXPECT_EQ(cells[7], std::to_string(param_count(model)));
    EXPECT_EQ(cells[8], std::to_string(flop_count(model)));
    EXPECT_GT(std::stod(cells[9]), 0.0);
  }
  EXPECT_EQ(variants, variant_names());
  const auto j = nlohmann::json::parse(bytes_of(path("abl") / "ablation.json"));
  EXPECT_EQ(j.size(), 3u);
}
