#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/cli.hpp"
#include "evtrack/synthgen.hpp"
#include "test_util.hpp"

using namespace evtrack;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path().string());
  return files;
}

}  // namespace

TEST(Cli, ExitCodeClasses) {
  EXPECT_EQ(exit_code_for(ErrorCode::InvalidArgument), kExitUsage);
  EXPECT_EQ(exit_code_for(ErrorCode::BadMagic), kExitFormat);
  EXPECT_EQ(exit_code_for(ErrorCode::ChecksumMismatch), kExitFormat);
  EXPECT_EQ(exit_code_for(ErrorCode::NonFinite), kExitNumeric);
  EXPECT_EQ(exit_code_for(ErrorCode::Io), kExitIo);
}

TEST(Cli, ConfigParsing) {
  const auto kv = parse_config("# comment\nseed = 7\n\n  events_per_slice=500  # trailing\n");
  EXPECT_EQ(kv.at("seed"), "7");
  EXPECT_EQ(kv.at("events_per_slice"), "500");
  EXPECT_THROW(parse_config("novalue\n"), Error);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"nonsense"}).code, kExitUsage);
  EXPECT_EQ(run({"stats", "--window-ms"}).code, kExitUsage);
  EXPECT_EQ(run({"bench", "--reps", "5"}).code, kExitUsage);
}

TEST(Cli, HelpDocumentsRecipeFlags) {
  const auto top = run({"--help"});
  EXPECT_EQ(top.code, kExitOk);
  for (const char* sub : {"synth", "stats", "slice", "train", "calibrate", "quantize", "infer", "eval", "cv", "bench", "relay"})
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  const auto cv = run({"cv", "--help"});
  EXPECT_EQ(cv.code, kExitOk);
  for (const char* flag : {"--manifest", "--epochs", "--out-dir", "--reduce-range", "--calibration-frames"})
    EXPECT_NE(cv.out.find(flag), std::string::npos) << flag;
  const auto relay = run({"relay", "--help"});
  for (const char* flag : {"--listen", "--model", "--events-per-slice"})
    EXPECT_NE(relay.out.find(flag), std::string::npos) << flag;
}

TEST(Cli, MissingFileIsIoError) {
  testutil::TempDir dir("cli_io");
  EXPECT_EQ(run({"stats", "--events", dir.file("nope.evt1"), "--window-ms", "10"}).code, kExitIo);
}

TEST(Cli, CorruptFileIsFormatError) {
  testutil::TempDir dir("cli_fmt");
  write_text_file(dir.file("bad.evt1"), "EVTXxxxxxxxxxxxx");
  EXPECT_EQ(run({"stats", "--events", dir.file("bad.evt1"), "--window-ms", "10"}).code, kExitFormat);
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  testutil::TempDir dir("cli_cfg");
  write_text_file(dir.file("run.cfg"), "seed = 3\nbogus_key = 1\n");
  EXPECT_EQ(run({"--config", dir.file("run.cfg"), "synth", "--out", dir.file("out")}).code, kExitUsage);
}

TEST(Cli, SynthIsByteIdentical) {
  testutil::TempDir dir("cli_synth");
  const std::vector<std::string> common{"--participants", "4", "--duration-s", "0.2"};
  auto a = std::vector<std::string>{"--seed", "7", "synth", "--out", dir.file("a")};
  auto b = std::vector<std::string>{"--seed", "7", "synth", "--out", dir.file("b")};
  a.insert(a.end(), common.begin(), common.end());
  b.insert(b.end(), common.begin(), common.end());
  ASSERT_EQ(run(a).code, kExitOk);
  ASSERT_EQ(run(b).code, kExitOk);
  const auto sa = snapshot(dir.file("a")), sb = snapshot(dir.file("b"));
  EXPECT_GE(sa.size(), 9u);
  EXPECT_EQ(sa, sb);
}

TEST(Cli, ConfigFileMergesUnderFlags) {
  testutil::TempDir dir("cli_merge");
  write_text_file(dir.file("run.cfg"), "participants = 4\nduration_s = 0.1\n");
  ASSERT_EQ(run({"--config", dir.file("run.cfg"), "synth", "--out", dir.file("x"), "--duration-s", "0.2"}).code, kExitOk);
  ASSERT_EQ(run({"synth", "--out", dir.file("y"), "--participants", "4", "--duration-s", "0.2"}).code, kExitOk);
  EXPECT_EQ(snapshot(dir.file("x")), snapshot(dir.file("y")));
}

TEST(Cli, SliceStatsInferPipeline) {
  testutil::TempDir dir("cli_pipe");
  ASSERT_EQ(run({"--seed", "3", "synth", "--out", dir.file("d"), "--participants", "4", "--duration-s", "0.3"}).code, kExitOk);
  const auto manifest = read_manifest(dir.file("d/manifest.csv"));
  const std::string ev = manifest.front().events_path;

  auto st = run({"stats", "--events", ev, "--window-ms", "50", "--out", dir.file("stats.csv")});
  ASSERT_EQ(st.code, kExitOk) << st.err;
  EXPECT_EQ(read_file(dir.file("stats.csv")).size() > 20, true);

  auto sl = run({"slice", "--events", ev, "--events-per-slice", "1000", "--out", dir.file("frames.bin"),
                 "--durations", dir.file("dur.csv")});
  ASSERT_EQ(sl.code, kExitOk) << sl.err;

  save_model(build_default_model(2, 1), dir.file("m.bin"));
  auto inf = run({"infer", "--model", dir.file("m.bin"), "--events", ev, "--labels", manifest.front().labels_path,
                  "--out", dir.file("pred.csv")});
  ASSERT_EQ(inf.code, kExitOk) << inf.err;
  const auto text = read_file(dir.file("pred.csv"));
  const std::string csv(text.begin(), text.end());
  EXPECT_EQ(csv.rfind("frame_id,cx,cy,w,h,err_px\n", 0), 0u);
  auto again = run({"infer", "--model", dir.file("m.bin"), "--events", ev, "--labels", manifest.front().labels_path,
                    "--out", dir.file("pred2.csv")});
  ASSERT_EQ(again.code, kExitOk);
  EXPECT_EQ(read_file(dir.file("pred2.csv")), text);
}
