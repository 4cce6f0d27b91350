#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ssd/artifacts.hpp"
#include "ssd/training.hpp"
#include "test_support.hpp"

using namespace ssd;
using testing_support::TempDir;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.set("format", "test");
  c.set("epoch", "3");
  c.set("validation_loss", "0.69314718055994529");
  c.set("note", "spaces are fine in values");
  Tensor<float> a(Shape{3, 5});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = float(i) * 0.37f - 2.0f;
  a[4] = -0.0f;
  a[7] = std::numeric_limits<float>::denorm_min();
  a[8] = std::numeric_limits<float>::max();
  c.add("layer.weight", a);
  c.add("scalar", Tensor<float>(Shape{}, 1.5f));
  c.add("empty_row", Tensor<float>(Shape{0, 4}));
  c.add("u", Tensor<float>(Shape{17}, 0.25f));
  return c;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir dir("ckpt");
  const auto c = sample_checkpoint();
  save_checkpoint(c, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.tensors.size(), c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, c.tensors[i].shape);
    ASSERT_EQ(back.tensors[i].data.size(), c.tensors[i].data.size());
    EXPECT_EQ(std::memcmp(back.tensors[i].data.data(), c.tensors[i].data.data(), c.tensors[i].data.size() * 4), 0);
  }
  EXPECT_TRUE(std::signbit(back.tensor("layer.weight").data[4]));
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
}

TEST(Checkpoint, PayloadIsAlignedLittleEndian) {
  Checkpoint c;
  c.add("x", Tensor<float>(Shape{1}, 1.0f));
  const auto bytes = serialize_checkpoint(c);
  EXPECT_EQ(bytes.size() % kPayloadAlignment, 0u);
  const std::size_t start = bytes.size() - kPayloadAlignment;
  // 1.0f = 0x3f800000
  EXPECT_EQ(bytes[start + 0], 0x00);
  EXPECT_EQ(bytes[start + 2], 0x80);
  EXPECT_EQ(bytes[start + 3], 0x3f);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 10), "SSDCKPT 1\n");
}

TEST(Checkpoint, FreshNetworksRoundTrip) {
  Generator<float> g;
  Discriminator<float> d;
  init_weights(g, 1);
  init_weights(d, 2);
  Checkpoint c;
  for (auto& p : g.parameters()) c.add("g." + p.name, p.param->value);
  for (auto& b : d.buffers()) c.add("d." + b.name, *b.buffer);
  const auto back = parse_checkpoint(serialize_checkpoint(c), "memory");
  Generator<float> g2;
  for (auto& p : g2.parameters()) back.read_into("g." + p.name, p.param->value);
  auto pa = g.parameters(), pb = g2.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].param->value, pb[i].param->value);
  Tensor<float> wrong(Shape{3});
  EXPECT_THROW(back.read_into("g.mapping.0.bias", wrong), IntegrityError);
  EXPECT_THROW(back.tensor("missing"), IntegrityError);
  EXPECT_THROW(back.get("missing"), IntegrityError);
}

TEST(Checkpoint, VersionMismatchIsAVersionError) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  bytes[8] = '2';
  EXPECT_THROW(parse_checkpoint(bytes, "v2"), VersionError);
  try {
    parse_checkpoint(bytes, "v2");
  } catch (const VersionError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationAndCorruptionAreIntegrityErrors) {
  const auto good = serialize_checkpoint(sample_checkpoint());
  auto truncated = good;
  truncated.resize(good.size() - 64);
  EXPECT_THROW(parse_checkpoint(truncated, "t"), IntegrityError);
  auto half = good;
  half.resize(40);
  EXPECT_THROW(parse_checkpoint(half, "t"), IntegrityError);
  auto extended = good;
  extended.push_back(0);
  EXPECT_THROW(parse_checkpoint(extended, "t"), IntegrityError);
  // Flip bytes across the tail of the file (padding and payload) and in the manifest.
  const std::size_t payload_start = good.size() - 320;
  for (std::size_t pos = payload_start; pos < good.size(); pos += 37) {
    auto flipped = good;
    flipped[pos] ^= 0x01;
    EXPECT_THROW(parse_checkpoint(flipped, "f"), IntegrityError) << pos;
  }
  for (std::size_t pos : {20u, 40u, 60u}) {
    auto flipped = good;
    flipped[pos] ^= 0x01;
    EXPECT_THROW(parse_checkpoint(flipped, "f"), IntegrityError) << pos;
  }
  EXPECT_THROW(parse_checkpoint({'n', 'o', 'p', 'e'}, "x"), IntegrityError);
}

TEST(Checkpoint, RejectsUnstorableFields) {
  Checkpoint c;
  c.set("bad key", "v");
  EXPECT_THROW(serialize_checkpoint(c), ArgumentError);
  Checkpoint d;
  d.add("bad name", Tensor<float>(Shape{1}));
  EXPECT_THROW(serialize_checkpoint(d), ArgumentError);
}

TEST(Checkpoint, ResumedRunFromFileMatchesStraightRun) {
  TempDir dir("resume");
  const auto data = testing_support::blob_set(24, 16, 3);
  auto cfg = testing_support::tiny_config();
  cfg.epochs = 4;  // 6 batches per epoch, 24 steps
  Trainer<float> straight(cfg, data);
  straight.run(20);
  Trainer<float> first(cfg, data);
  first.run(10);
  save_checkpoint(first.snapshot(), dir / "mid.ckpt");
  auto resumed = Trainer<float>::restore(load_checkpoint(dir / "mid.ckpt"), data);
  resumed.run(10);
  EXPECT_EQ(serialize_checkpoint(resumed.snapshot()), serialize_checkpoint(straight.snapshot()));
}

// ---------------------------------------------------------------------------
// Config files

TEST(ConfigFile, RoundTripAndDefaults) {
  TempDir dir("cfg");
  TrainConfig c;
  c.lr = 1.0 / 3.0;
  c.beta1 = 0.25;
  c.seed = 123456789012345ull;
  c.spectral_norm = false;
  c.generator_mode = GeneratorMode::mapping_only;
  c.data_fraction = 75;
  c.generator_channels = {100, 256, 128, 64, 32, 3};
  c.discriminator_channels = {3, 32, 64, 128, 256, 1};
  write_config_file(c, dir / "c.txt");
  EXPECT_EQ(read_config_file(dir / "c.txt"), c);
  EXPECT_EQ(parse_config(render_config(TrainConfig{})), TrainConfig{});
  EXPECT_EQ(parse_config(""), TrainConfig{});
  const auto partial = parse_config("# comment\n  epochs = 3  \n\nbatch_size=8 # trailing\n");
  EXPECT_EQ(partial.epochs, 3u);
  EXPECT_EQ(partial.batch_size, 8u);
  EXPECT_EQ(partial.lr, TrainConfig{}.lr);
}

TEST(ConfigFile, Errors) {
  EXPECT_THROW(parse_config("learning_rate=0.1"), ConfigError);
  EXPECT_THROW(parse_config("epochs"), ConfigError);
  EXPECT_THROW(parse_config("epochs=two"), ConfigError);
  EXPECT_THROW(parse_config("epochs=-1"), ConfigError);
  EXPECT_THROW(parse_config("spectral_norm=maybe"), ConfigError);
  EXPECT_THROW(parse_config("generator_mode=stylegan"), ConfigError);
  EXPECT_THROW(parse_config("lr=0.1x"), ConfigError);
  TempDir dir("cfgerr");
  std::ofstream(dir / "bad.txt") << "epochs=1\nbogus=2\n";
  try {
    read_config_file(dir / "bad.txt");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bad.txt"), std::string::npos);
  }
  EXPECT_THROW(read_config_file(dir / "missing.txt"), IoError);
}

// ---------------------------------------------------------------------------
// Sample grids

TEST(SampleGrid, LayoutArithmetic) {
  Tensor<float> imgs(Shape{16, 3, 64, 64}, 1.0f);
  const auto grid = make_sample_grid(imgs, 4);
  EXPECT_EQ(grid.width, 262u);
  EXPECT_EQ(grid.height, 262u);
  EXPECT_EQ(grid.at(0, 0, 0), 255);
  EXPECT_EQ(grid.at(64, 10, 1), 0);   // separator row
  EXPECT_EQ(grid.at(10, 65, 2), 0);   // separator column
  EXPECT_EQ(grid.at(66, 66, 0), 255);
  const auto ragged = make_sample_grid(Tensor<float>(Shape{5, 3, 8, 8}, 1.0f), 3);
  EXPECT_EQ(ragged.width, 3 * 8 + 2 * 2u);
  EXPECT_EQ(ragged.height, 2 * 8 + 2u);
  EXPECT_EQ(ragged.at(17, 25, 0), 0);  // empty sixth slot
}

TEST(SampleGrid, RangeMappingAndSingleImage) {
  TempDir dir("grid");
  Tensor<float> one(Shape{1, 3, 64, 64}, -1.0f);
  one[0] = 1.0f;
  one[1] = 0.0f;
  one[2] = 0.5f;
  write_sample_grid(one, 1, dir / "one.png");
  const auto img = decode_image(dir / "one.png");
  EXPECT_EQ(img.width, 64u);
  EXPECT_EQ(img.height, 64u);
  EXPECT_EQ(img.at(0, 0, 0), 255);
  EXPECT_EQ(img.at(0, 1, 0), 128);  // round(127.5) ties to even: 128
  EXPECT_EQ(img.at(0, 2, 0), 191);  // round(191.25)
  EXPECT_EQ(img.at(5, 5, 2), 0);
  EXPECT_THROW(make_sample_grid(one, 0), ArgumentError);
  EXPECT_THROW(make_sample_grid(Tensor<float>(Shape{0, 3, 4, 4}), 1), ArgumentError);
  EXPECT_THROW(write_sample_grid(one, 1, dir / "no" / "such" / "dir.png"), IoError);
}

// ---------------------------------------------------------------------------
// Loss CSV

TEST(LossCsv, HeaderRowsAndParseBack) {
  TempDir dir("csv");
  TrainLog log;
  write_loss_csv(log, dir / "empty.csv");
  EXPECT_EQ(lines_of(dir / "empty.csv"), std::vector<std::string>{kLossCsvHeader});
  for (std::size_t i = 0; i < 3; ++i)
    log.steps.push_back(StepRecord{i + 1, i / 2, 1.0 / 3.0 + double(i), std::exp(-double(i)) * 0.123456789123,
                                   0.9, 1e-9, 12345.678901234});
  write_loss_csv(log, dir / "log.csv");
  EXPECT_EQ(lines_of(dir / "log.csv").size(), 4u);
  const auto back = read_loss_csv(dir / "log.csv");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].step, log.steps[i].step);
    EXPECT_EQ(back[i].epoch, log.steps[i].epoch);
    EXPECT_NEAR(back[i].d_loss, log.steps[i].d_loss, 1e-9 * std::abs(log.steps[i].d_loss));
    EXPECT_NEAR(back[i].g_loss, log.steps[i].g_loss, 1e-9 * std::abs(log.steps[i].g_loss));
    EXPECT_NEAR(back[i].g_grad_norm, log.steps[i].g_grad_norm, 1e-9 * log.steps[i].g_grad_norm);
  }
  std::ofstream(dir / "bad.csv") << "step,loss\n";
  EXPECT_THROW(read_loss_csv(dir / "bad.csv"), IoError);
}

TEST(AtomicWrite, NoTemporaryFilesRemain) {
  TempDir dir("atomic");
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  write_loss_csv(TrainLog{}, dir / "l.csv");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 2u);
}
