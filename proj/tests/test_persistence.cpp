#include <gtest/gtest.h>

#include <filesystem>

#include "efr/efr.hpp"
#include "efr/io.hpp"

using namespace efr;

namespace {

TrainState trained_state() {
  TrainState s = TrainState::fresh({}, 4);
  Rng rng(4);
  Matrix shots(10, 2);
  for (double& v : shots.reshaped()) v = rng.normal();
  LossConfig cfg;
  cfg.iterations = 3;
  return run_adaptation(s, shots, cfg).final_state;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("efr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const TrainState s = trained_state();
  const std::string bytes = serialize(s);
  const TrainState back = deserialize(bytes);
  EXPECT_EQ(back, s);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_EQ(bytes.substr(0, 4), "EFR1");
}

TEST(Checkpoint, RestoredRngContinuesTheSameStream) {
  TrainState s = trained_state();
  s.rng.next_u64();
  TrainState back = deserialize(serialize(s));
  EXPECT_EQ(back.rng.next_u64(), s.rng.next_u64());
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = temp_dir("ckpt");
  const TrainState s = trained_state();
  save_checkpoint(dir / "a.efr", s);
  EXPECT_EQ(load_checkpoint(dir / "a.efr"), s);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.efr.tmp"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, WrongMagicNamesBothValues) {
  std::string bytes = serialize(trained_state());
  bytes.replace(0, 4, "EFR0");
  try {
    deserialize(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("EFR1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("EFR0"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, TruncationAndTrailingBytesAreRejected) {
  const std::string bytes = serialize(trained_state());
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize(bytes.substr(0, cut)), FormatError) << "cut at " << cut;
  EXPECT_THROW(deserialize(bytes + "x"), FormatError);
}

TEST(Checkpoint, MissingRecordIsReported) {
  CheckpointWriter w;
  w.add("rotation.param", Matrix(Matrix::Zero(2, 2)));
  EXPECT_THROW(deserialize(w.bytes()), FormatError);
}

TEST(Checkpoint, ReaderTypesAndShapes) {
  CheckpointWriter w;
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  w.add("m", m);
  w.add("v", Vector(Vector::LinSpaced(4, 0.0, 1.0)));
  w.add_integers("u", {7, 8});
  const CheckpointReader r(w.bytes());
  EXPECT_EQ(r.matrix("m"), m);
  EXPECT_EQ(r.vector("v"), Vector::LinSpaced(4, 0.0, 1.0));
  EXPECT_EQ(r.integers("u"), (std::vector<std::uint64_t>{7, 8}));
  EXPECT_THROW(r.vector("m"), FormatError);
  EXPECT_THROW(r.matrix("u"), FormatError);
  EXPECT_FALSE(r.contains("missing"));
}

TEST(Config, RenderParseRoundTrip) {
  LossConfig c;
  c.lambda1 = 0.125;
  c.tau = 0.3;
  c.seed = 12345678901234ULL;
  c.rotate = false;
  c.gan_loss = GanLossForm::Literal;
  c.preset = "scaled-mixture";
  c.per_slice_coupling = true;
  EXPECT_EQ(parse_config(render_config(c)), c);
  EXPECT_EQ(parse_config(render_config(LossConfig{})), LossConfig{});
}

TEST(Config, CommentsBlanksAndOverrides) {
  const LossConfig c = parse_config("# header\n\n  lambda1 = 0.5  # inline\nbatch_size=4\r\n", LossConfig{});
  EXPECT_EQ(c.lambda1, 0.5);
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.lambda2, LossConfig{}.lambda2);
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("lambda3 = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lambda3");
  }
}

TEST(Config, BadValuesAreRejected) {
  EXPECT_THROW(parse_config("tau = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_size = 2.5\n"), ConfigError);
  EXPECT_THROW(parse_config("rotate = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("just text\n"), ConfigError);
}

TEST(Config, ValidateNamesTheKey) {
  LossConfig c;
  c.tau = 0.0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "tau");
  }
  c = LossConfig{};
  c.preset = "nope";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SnapshotCoversEveryKey) {
  const auto snap = config_snapshot(LossConfig{});
  for (const char* key : {"preset", "lambda1", "lambda2", "tau", "t_slices", "epsilon", "outer_iters", "inner_iters",
                          "coupling_restarts", "per_slice_coupling", "batch_size", "iterations", "lr", "beta1", "beta2",
                          "seed", "n_shot", "rotate", "literal_gan_loss"})
    EXPECT_EQ(snap.count(key), 1u) << key;
  EXPECT_EQ(snap.at("lambda1"), "0.6");
}

TEST(Csv, ParsesAndRoundTrips) {
  const Matrix m = parse_csv_matrix("1,2\n 3.5 , -4e-3\r\n\n");
  ASSERT_EQ(m.rows(), 2);
  ASSERT_EQ(m.cols(), 2);
  EXPECT_EQ(m(1, 1), -4e-3);
  Matrix r(2, 3);
  r << 0.1, 1.0 / 3.0, -2.5e-300, 7, 8, 9;
  EXPECT_EQ(parse_csv_matrix(csv_matrix(r)), r);
}

TEST(Csv, RejectsMalformedInput) {
  EXPECT_THROW(parse_csv_matrix(""), FormatError);
  EXPECT_THROW(parse_csv_matrix("1,2\n3\n"), FormatError);
  EXPECT_THROW(parse_csv_matrix("1,x\n"), FormatError);
  EXPECT_THROW(parse_csv_matrix("1,,2\n"), FormatError);
  EXPECT_THROW(parse_csv_matrix("nan,1\n"), FormatError);
  EXPECT_THROW(load_csv_matrix("/nonexistent/shots.csv"), FormatError);
}
