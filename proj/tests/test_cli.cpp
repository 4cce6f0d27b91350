#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ssd/cli.hpp"
#include "test_support.hpp"

using namespace ssd;
using testing_support::TempDir;

namespace {

struct ToolResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

ToolResult run_tool(const std::vector<std::string>& args, const TempDir& scratch) {
  std::string cmd = quote(SSD_TOOL);
  for (const auto& a : args) cmd += " " + quote(a);
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  ToolResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

/// A tiny 16 px generator checkpoint shared by the tests in this file.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto data = testing_support::blob_set(8, 16, 1);
    Trainer<float> t(testing_support::tiny_config(), data);
    t.run(2);
    save_checkpoint(t.snapshot(), *dir_ / "g.ckpt");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string ckpt() { return (*dir_ / "g.ckpt").string(); }

  TempDir scratch_{"cli_run"};
  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(ExitCodes, EachErrorKindHasItsOwnCode) {
  using namespace ssd::cli;
  std::vector<int> codes;
  for (auto k : {ErrorKind::argument, ErrorKind::config, ErrorKind::io, ErrorKind::integrity, ErrorKind::version,
                 ErrorKind::numeric})
    codes.push_back(exit_code_for(k));
  EXPECT_EQ(codes, (std::vector<int>{3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(exit_code_for(ErrorKind::dimension), 3);
  EXPECT_EQ(format_count(3809104), "3,809,104");
  EXPECT_EQ(format_count(999), "999");
  EXPECT_EQ(format_count(1000), "1,000");
  EXPECT_EQ(default_columns(16), 4u);
  EXPECT_EQ(default_columns(17), 5u);
  EXPECT_EQ(default_columns(1), 1u);
}

TEST(ResolveConfig, FlagsOverrideTheFileWhichOverridesDefaults) {
  TempDir dir("resolve");
  std::ofstream(dir / "c.txt") << "epochs=7\nbatch_size=16\nlr=0.001\n";
  cli::TrainOptions o;
  o.config = dir / "c.txt";
  o.batch_size = 8;
  o.no_spectral_norm = true;
  const auto c = cli::resolve_train_config(o);
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_FALSE(c.spectral_norm);
  EXPECT_EQ(c.beta1, 0.5);
  o.data_fraction = 40;
  EXPECT_THROW(cli::resolve_train_config(o), ConfigError);
}

TEST_F(CliTest, CountParamsPrintsPublishedFigures) {
  const auto r = run_tool({"count-params"}, scratch_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mapping network 40,400\n"), std::string::npos);
  EXPECT_NE(r.out.find("generator 3,809,104\n"), std::string::npos);
  EXPECT_NE(r.out.find("discriminator 2,765,568\n"), std::string::npos);
  EXPECT_NE(r.out.find("total 6,574,672 (6.575M)\n"), std::string::npos);
  const auto control = run_tool({"count-params", "--arch", "dcgan-control"}, scratch_);
  ASSERT_EQ(control.code, 0);
  EXPECT_NE(control.out.find("mapping network 0\n"), std::string::npos);
  EXPECT_EQ(run_tool({"count-params", "--arch", "resnet"}, scratch_).code, 2);
}

TEST_F(CliTest, HelpDocumentsDefaults) {
  const auto train = run_tool({"train", "--help"}, scratch_);
  EXPECT_EQ(train.code, 0);
  for (const char* s : {"--epochs", "[default: 20]", "[default: 32]", "--no-spectral-norm", "lr=5e-4", "--data-fraction"})
    EXPECT_NE(train.out.find(s), std::string::npos) << s;
  const auto gen = run_tool({"generate", "--help"}, scratch_);
  EXPECT_NE(gen.out.find("16"), std::string::npos);
  const auto eval = run_tool({"evaluate", "--help"}, scratch_);
  EXPECT_NE(eval.out.find("fid,clean-fid,kid"), std::string::npos);
  EXPECT_EQ(run_tool({}, scratch_).code, 2);
  EXPECT_EQ(run_tool({"fly"}, scratch_).code, 2);
}

TEST_F(CliTest, GenerateIsByteIdenticalForASeed) {
  const auto a = scratch_ / "a.png", b = scratch_ / "b.png", c = scratch_ / "c.png";
  ASSERT_EQ(run_tool({"generate", "--checkpoint", ckpt(), "--seed", "5", "--out", a.string()}, scratch_).code, 0);
  ASSERT_EQ(run_tool({"generate", "--checkpoint", ckpt(), "--seed", "5", "--out", b.string()}, scratch_).code, 0);
  ASSERT_EQ(run_tool({"generate", "--checkpoint", ckpt(), "--seed", "6", "--out", c.string()}, scratch_).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_NE(slurp(a), slurp(c));
  const auto img = decode_image(a);
  EXPECT_EQ(img.width, 4 * 16 + 3 * 2u);  // 16 samples in a 4 x 4 grid
  EXPECT_EQ(img.height, img.width);
}

TEST_F(CliTest, GenerateErrors) {
  const auto zero = run_tool({"generate", "--checkpoint", ckpt(), "--n", "0", "--out", (scratch_ / "z.png").string()}, scratch_);
  EXPECT_EQ(zero.code, 3);
  EXPECT_NE(zero.err.find("argument error"), std::string::npos) << zero.err;
  EXPECT_EQ(run_tool({"generate", "--checkpoint", (scratch_ / "missing.ckpt").string()}, scratch_).code, 5);
  auto bytes = detail::read_file(ckpt());
  bytes[bytes.size() - 5] ^= 0x10;
  write_file_atomic(scratch_ / "bad.ckpt", bytes.data(), bytes.size());
  const auto bad = run_tool({"generate", "--checkpoint", (scratch_ / "bad.ckpt").string()}, scratch_);
  EXPECT_EQ(bad.code, 6);
  EXPECT_NE(bad.err.find("integrity error"), std::string::npos) << bad.err;
  bytes = detail::read_file(ckpt());
  bytes[8] = '9';
  write_file_atomic(scratch_ / "v9.ckpt", bytes.data(), bytes.size());
  EXPECT_EQ(run_tool({"generate", "--checkpoint", (scratch_ / "v9.ckpt").string()}, scratch_).code, 7);
}

TEST_F(CliTest, InterpolationEndpointsMatchGenerate) {
  const auto frames = scratch_ / "frames";
  const auto r = run_tool({"interpolate", "--checkpoint", ckpt(), "--seed-a", "11", "--seed-b", "12", "--steps", "5",
                           "--out", (scratch_ / "row.png").string(), "--frames-dir", frames.string()},
                          scratch_);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto row = decode_image(scratch_ / "row.png");
  EXPECT_EQ(row.width, 5 * 16 + 4 * 2u);
  EXPECT_EQ(row.height, 16u);
  for (auto [seed, frame] : {std::pair<const char*, const char*>{"11", "frame_000.png"}, {"12", "frame_004.png"}}) {
    const auto gen = scratch_ / (std::string("gen_") + seed + ".png");
    ASSERT_EQ(run_tool({"generate", "--checkpoint", ckpt(), "--n", "1", "--seed", seed, "--out", gen.string()}, scratch_).code, 0);
    EXPECT_EQ(slurp(gen), slurp(frames / frame)) << seed;
  }
  EXPECT_NE(slurp(frames / "frame_000.png"), slurp(frames / "frame_002.png"));
  EXPECT_EQ(run_tool({"interpolate", "--checkpoint", ckpt(), "--steps", "1", "--out", (scratch_ / "x.png").string()}, scratch_).code, 3);
  const auto two = run_tool({"interpolate", "--checkpoint", ckpt(), "--steps", "2", "--out", (scratch_ / "two.png").string()}, scratch_);
  EXPECT_EQ(two.code, 0);
  EXPECT_EQ(decode_image(scratch_ / "two.png").width, 2 * 16 + 2u);
}

TEST_F(CliTest, EvaluateReportsAndUsageErrors) {
  const auto real = scratch_ / "real";
  testing_support::write_blob_dir(real, 6, 32, 2);
  const auto report = scratch_ / "report.txt", csv = scratch_ / "m.csv";
  const auto self = run_tool({"evaluate", "--real-dir", real.string(), "--fake-dir", real.string(), "--out",
                              report.string(), "--csv", csv.string()},
                             scratch_);
  ASSERT_EQ(self.code, 0) << self.err;
  EXPECT_NE(self.out.find("extractor=patch-stats"), std::string::npos);
  EXPECT_NE(self.out.find("n_real=6 n_fake=6"), std::string::npos);
  EXPECT_EQ(slurp(report).rfind("fid=", 0), 0u);
  const double fid = std::stod(self.out.substr(self.out.find("fid=") + 4));
  EXPECT_LE(std::abs(fid), 1e-6);
  EXPECT_EQ(slurp(csv).rfind(kReportCsvHeader, 0), 0u);

  const auto gen = run_tool({"evaluate", "--real-dir", real.string(), "--checkpoint", ckpt(), "--n-samples", "64"}, scratch_);
  ASSERT_EQ(gen.code, 0) << gen.err;
  EXPECT_NE(gen.out.find("n_fake=64"), std::string::npos);

  const auto missing = run_tool({"evaluate", "--real-dir", real.string()}, scratch_);
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("usage error"), std::string::npos);
  EXPECT_EQ(run_tool({"evaluate", "--real-dir", real.string(), "--fake-dir", real.string(), "--checkpoint", ckpt()},
                     scratch_).code,
            2);
  EXPECT_EQ(run_tool({"evaluate", "--real-dir", real.string(), "--fake-dir", real.string(), "--metrics", "is"},
                     scratch_).code,
            3);
  const auto plugin = run_tool({"evaluate", "--real-dir", real.string(), "--fake-dir", real.string(), "--extractor",
                                std::string("plugin:") + SSD_TEST_PLUGIN},
                               scratch_);
  EXPECT_EQ(plugin.code, 0) << plugin.err;
  EXPECT_NE(plugin.out.find("extractor=test-mean"), std::string::npos);
}

TEST_F(CliTest, TrainWritesTheRunDirectory) {
  const auto data = scratch_ / "data", out = scratch_ / "run";
  testing_support::write_blob_dir(data, 10, 64, 3);
  std::ofstream(scratch_ / "tiny.txt") << "generator_channels=8,16,8,3\ndiscriminator_channels=3,8,16,1\n"
                                       << "val_noise_count=10\n";
  const auto r = run_tool({"train", "--config", (scratch_ / "tiny.txt").string(), "--data-dir", data.string(),
                           "--out-dir", out.string(), "--epochs", "2", "--batch-size", "4", "--data-fraction", "50"},
                          scratch_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("training on 5 of 10 images (50%)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("steps=2"), std::string::npos) << r.out;
  for (const char* f : {"best.ckpt", "final.ckpt", "losses.csv", "config.txt", "samples_epoch_001.png", "samples_epoch_002.png"})
    EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
  const auto cfg = read_config_file(out / "config.txt");
  EXPECT_EQ(cfg.epochs, 2u);
  EXPECT_EQ(cfg.generator_channels, (ChannelPlan{8, 16, 8, 3}));
  const auto inspect = run_tool({"inspect", (out / "final.ckpt").string()}, scratch_);
  EXPECT_EQ(inspect.code, 0);
  EXPECT_NE(inspect.out.find("config.epochs = 2"), std::string::npos) << inspect.out;

  std::ofstream(scratch_ / "bad.txt") << "epoch=2\n";
  const auto bad = run_tool({"train", "--config", (scratch_ / "bad.txt").string(), "--data-dir", data.string(),
                             "--out-dir", out.string()},
                            scratch_);
  EXPECT_EQ(bad.code, 4);
  EXPECT_NE(bad.err.find("epoch"), std::string::npos);
  EXPECT_EQ(run_tool({"train", "--data-dir", (scratch_ / "none").string(), "--out-dir", out.string()}, scratch_).code, 2);
}
