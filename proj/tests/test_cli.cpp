// End-to-end checks of the command-line tool, driven as a subprocess the
// way a user would run it. The binary path is injected by the build.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("triseg_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args, const fs::path& capture = {}) const {
    std::string cmd = std::string(TRISEG_CLI_PATH) + " " + args;
    cmd += capture.empty() ? " > /dev/null 2>&1" : " > " + capture.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  void write_text(const fs::path& p, const std::string& text) const {
    std::ofstream out(p);
    out << text;
  }

  std::string read_text(const fs::path& p) const {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::vector<char> read_bytes(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, ReceptiveFieldReport) {
  const fs::path out = dir_ / "rf.txt";
  ASSERT_EQ(run("rf", out), 0);
  const std::string text = read_text(out);
  EXPECT_NE(text.find("wnet 220 220 9"), std::string::npos) << text;
  EXPECT_NE(text.find("tnet 220 220 9"), std::string::npos) << text;
  EXPECT_NE(text.find("enet 122 122 9"), std::string::npos) << text;
}

TEST_F(CliTest, ErrorPathsExitNonzero) {
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("segment"), 0);  // unknown subcommand
  EXPECT_NE(run("train"), 0);    // missing required flags
  EXPECT_NE(run("phantom-gen --config " + (dir_ / "absent.cfg").string() + " --out " +
                (dir_ / "x").string()),
            0);

  write_text(dir_ / "bad.cfg", "count=zero\n");
  EXPECT_NE(run("phantom-gen --config " + (dir_ / "bad.cfg").string() + " --out " +
                (dir_ / "x").string()),
            0);
  write_text(dir_ / "neg.cfg", "count=-3\n");
  EXPECT_NE(run("phantom-gen --config " + (dir_ / "neg.cfg").string() + " --out " +
                (dir_ / "x").string()),
            0);
}

TEST_F(CliTest, PhantomGenerationIsDeterministic) {
  write_text(dir_ / "gen.cfg",
             "count=1\n"
             "extents=24 24 16\n"
             "wt_radius=4 5\n"
             "tc_radius=2.5 3\n"
             "en_radius=1.2 1.8\n"
             "wt_fraction=0.002 0.5\n");
  const std::string cfg = " --config " + (dir_ / "gen.cfg").string();
  ASSERT_EQ(run("phantom-gen" + cfg + " --out " + (dir_ / "a").string() + " --seed 7"), 0);
  ASSERT_EQ(run("phantom-gen" + cfg + " --out " + (dir_ / "b").string() + " --seed 7"), 0);
  ASSERT_EQ(run("phantom-gen" + cfg + " --out " + (dir_ / "c").string() + " --seed 8"), 0);

  for (const char* name : {"t1.avol", "t1c.avol", "t2.avol", "flair.avol", "labels.avol"}) {
    const auto a = read_bytes(dir_ / "a" / "case_000" / name);
    ASSERT_FALSE(a.empty()) << name;
    EXPECT_EQ(a, read_bytes(dir_ / "b" / "case_000" / name)) << name;
  }
  EXPECT_NE(read_bytes(dir_ / "a" / "case_000" / "labels.avol"),
            read_bytes(dir_ / "c" / "case_000" / "labels.avol"));
}

TEST_F(CliTest, RenderWritesPng) {
  write_text(dir_ / "gen.cfg",
             "count=1\nextents=24 24 16\nwt_radius=4 5\ntc_radius=2.5 3\n"
             "en_radius=1.2 1.8\nwt_fraction=0.002 0.5\n");
  ASSERT_EQ(run("phantom-gen --config " + (dir_ / "gen.cfg").string() + " --out " +
                (dir_ / "cases").string() + " --seed 3"),
            0);

  write_text(dir_ / "render.cfg", "modality=flair\naxis=z\nslice=8\n");
  const fs::path png = dir_ / "slice.png";
  ASSERT_EQ(run("render --config " + (dir_ / "render.cfg").string() + " --data " +
                (dir_ / "cases" / "case_000").string() + " --out " + png.string()),
            0);
  const auto bytes = read_bytes(png);
  ASSERT_GE(bytes.size(), 8u);
  const unsigned char magic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[i]), magic[i]);

  // out-of-range slice index is an error, not a crash
  write_text(dir_ / "render_bad.cfg", "modality=flair\naxis=z\nslice=99\n");
  EXPECT_NE(run("render --config " + (dir_ / "render_bad.cfg").string() + " --data " +
                (dir_ / "cases" / "case_000").string() + " --out " + png.string()),
            0);
}

TEST_F(CliTest, EvaluateAgainstIdenticalPredictions) {
  write_text(dir_ / "gen.cfg",
             "count=2\nextents=24 24 16\nwt_radius=4 5\ntc_radius=2.5 3\n"
             "en_radius=1.2 1.8\nwt_fraction=0.002 0.5\n");
  ASSERT_EQ(run("phantom-gen --config " + (dir_ / "gen.cfg").string() + " --out " +
                (dir_ / "truth").string() + " --seed 5"),
            0);

  // predictions that are the ground truth itself must score Dice 1
  fs::create_directories(dir_ / "preds");
  for (const char* c : {"case_000", "case_001"})
    fs::copy_file(dir_ / "truth" / c / "labels.avol", dir_ / "preds" / (std::string(c) + ".avol"));

  const fs::path csv = dir_ / "eval.csv";
  ASSERT_EQ(run("evaluate --pred " + (dir_ / "preds").string() + " --data " +
                    (dir_ / "truth").string() + " --out " + csv.string(),
                dir_ / "eval.out"),
            0);
  const std::string text = read_text(csv);
  EXPECT_NE(text.find("case_000,WT,1,0"), std::string::npos) << text;
  EXPECT_NE(text.find("case_001,EN,1,0"), std::string::npos) << text;
  EXPECT_NE(text.find("summary,WT,dice,1,0,1,1,1,2,0"), std::string::npos) << text;

  // a missing prediction file is an error
  fs::remove(dir_ / "preds" / "case_001.avol");
  EXPECT_NE(run("evaluate --pred " + (dir_ / "preds").string() + " --data " +
                (dir_ / "truth").string() + " --out " + csv.string()),
            0);
}

TEST_F(CliTest, CorruptedInputsAreRefused) {
  write_text(dir_ / "gen.cfg",
             "count=1\nextents=24 24 16\nwt_radius=4 5\ntc_radius=2.5 3\n"
             "en_radius=1.2 1.8\nwt_fraction=0.002 0.5\n");
  ASSERT_EQ(run("phantom-gen --config " + (dir_ / "gen.cfg").string() + " --out " +
                (dir_ / "cases").string() + " --seed 9"),
            0);

  // corrupt the magic of one modality file
  const fs::path t1 = dir_ / "cases" / "case_000" / "t1.avol";
  auto bytes = read_bytes(t1);
  bytes[0] = 'Z';
  std::ofstream(t1, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(8));

  write_text(dir_ / "render.cfg", "modality=t1\naxis=z\nslice=8\n");
  const fs::path err = dir_ / "err.txt";
  EXPECT_NE(run("render --config " + (dir_ / "render.cfg").string() + " --data " +
                    (dir_ / "cases" / "case_000").string() + " --out " + (dir_ / "x.png").string(),
                err),
            0);
  EXPECT_NE(read_text(err).find("error:"), std::string::npos);
}
