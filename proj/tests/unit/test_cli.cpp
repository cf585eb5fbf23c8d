#include "sdfvf/cli.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>

using namespace sdfvf;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "sdfvf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("sdfvf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    write_file_bytes(dir_ / name, text);
    return (dir_ / name).string();
  }
  std::string out() const { return dir_.string(); }

  fs::path dir_;
};

const char* kSphereSpec = R"({"dims": [5, 5, 5], "spacing_mm": [1, 1, 1],
  "primitives": [{"kind": "box", "label": 1, "min_mm": [0, 0, 0], "max_mm": [4, 4, 4]}]})";

const char* kScenario = R"({
  "volume": {"phantom": {
    "dims": [32, 32, 32], "spacing_mm": [0.5, 0.5, 0.5],
    "matrix": {"label": 1, "min_mm": [0, 0, 0], "max_mm": [16, 16, 10]},
    "primitives": [{"kind": "sphere", "label": 2, "center_mm": [8, 8, 5], "radius_mm": 2.5}]
  }},
  "matrix_label": 1,
  "constraints": [{"label": 2}],
  "robot": {"preset": "gantry", "q0": [8, 8, 13]},
  "duration_s": 1.5,
  "seed": 4,
  "force_script": {"kind": "operator", "target_mm": [8.1, 8.2, 5], "push_N": 4, "jitter_N": 0.3}
})";

}  // namespace

TEST_F(CliTest, HelpAndUsageErrors) {
  EXPECT_EQ(cli_run({"--help"}).code, 0);
  EXPECT_EQ(cli_run({}).code, cli::validation);
  EXPECT_EQ(cli_run({"frobnicate"}).code, cli::validation);
  EXPECT_EQ(cli_run({"calib", "pivot"}).code, cli::validation);  // neither --input nor --synthetic
}

TEST_F(CliTest, SdfBuildFullGridCenter) {
  const std::string spec = write("box.json", kSphereSpec);
  const Result r = cli_run({"--out", out(), "sdf-build", spec});
  ASSERT_EQ(r.code, 0) << r.err;
  const SdfVolume s = read_sdf_cache(dir_ / "sdf_label1.sdf");
  EXPECT_EQ(s.at(2, 2, 2), -3.0);
  EXPECT_NE(r.out.find("label 1: min -3 mm"), std::string::npos) << r.out;

  const std::string first = read_file_bytes(dir_ / "sdf_label1.sdf");
  ASSERT_EQ(cli_run({"--out", out(), "--threads", "3", "sdf-build", spec}).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "sdf_label1.sdf"), first);
}

TEST_F(CliTest, SdfBuildMissingLabelAndMissingFile) {
  const std::string spec = write("box.json", kSphereSpec);
  const Result r = cli_run({"--out", out(), "sdf-build", spec, "--labels", "9"});
  EXPECT_EQ(r.code, cli::validation);
  EXPECT_NE(r.err.find("label 9 is absent"), std::string::npos) << r.err;
  EXPECT_EQ(cli_run({"--out", out(), "sdf-build", (dir_ / "nope.nrrd").string()}).code, cli::io);
  write("bad.nrrd", "NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\nencoding: raw\n\n");
  EXPECT_EQ(cli_run({"--out", out(), "sdf-build", (dir_ / "bad.nrrd").string()}).code, cli::validation);
}

TEST_F(CliTest, PhantomThenSdfBuildFromNrrd) {
  const std::string spec = write("box.json", kSphereSpec);
  ASSERT_EQ(cli_run({"--out", out(), "phantom", spec, "--name", "p.nrrd"}).code, 0);
  const LabeledVolume v = load_label_volume(dir_ / "p.nrrd");
  EXPECT_EQ(v.volume.count(1), 125u);
  ASSERT_EQ(cli_run({"--out", out(), "sdf-build", (dir_ / "p.nrrd").string(), "--labels", "1"}).code, 0);
  EXPECT_EQ(read_sdf_cache(dir_ / "sdf_label1.sdf").at(2, 2, 2), -3.0);
}

TEST_F(CliTest, ExperimentPairedOutputs) {
  const std::string sc = write("s.json", kScenario);
  const Result r = cli_run({"--out", out(), "experiment", sc, "--vf", "--no-vf", "--csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"trace_vf.jsonl", "trace_novf.jsonl", "metrics_vf.json", "metrics_novf.json",
                        "metrics_paired.json", "trace_vf.csv", "trace_novf.csv"})
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  const auto paired = nlohmann::json::parse(read_file_bytes(dir_ / "metrics_paired.json"));
  EXPECT_EQ(paired["vf"]["vf_enabled"], true);
  EXPECT_EQ(paired["novf"]["vf_enabled"], false);
  EXPECT_EQ(paired["vf"]["seed"], 4);

  const Result rep = cli_run({"report", (dir_ / "trace_novf.jsonl").string(), "--csv", (dir_ / "r.csv").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(rep.out.find("[BREACH]"), std::string::npos) << rep.out;
  EXPECT_EQ(read_file_bytes(dir_ / "r.csv"), read_file_bytes(dir_ / "trace_novf.csv"));
  const Result rep_vf = cli_run({"report", (dir_ / "trace_vf.jsonl").string()});
  EXPECT_EQ(rep_vf.out.find("[BREACH]"), std::string::npos) << rep_vf.out;
}

TEST_F(CliTest, ExperimentSeedOverrideChangesTrace) {
  const std::string sc = write("s.json", kScenario);
  ASSERT_EQ(cli_run({"--out", out(), "experiment", sc, "--no-vf"}).code, 0);
  const std::string a = read_file_bytes(dir_ / "trace_novf.jsonl");
  ASSERT_EQ(cli_run({"--out", out(), "experiment", sc, "--no-vf"}).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "trace_novf.jsonl"), a);
  ASSERT_EQ(cli_run({"--out", out(), "--seed", "5", "experiment", sc, "--no-vf"}).code, 0);
  EXPECT_NE(read_file_bytes(dir_ / "trace_novf.jsonl"), a);
}

TEST_F(CliTest, ReportEmptyAndCorruptTraces) {
  write("empty.jsonl", "");
  const Result e = cli_run({"report", (dir_ / "empty.jsonl").string()});
  EXPECT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("ticks 0"), std::string::npos);
  write("bad.jsonl", "{\"type\":\"header\",\"dt\":0.001,\"labels\":[],\"tau0\":[],\"matrix_label\":1,\"voxel_volume_mm3\":1}\n{\n");
  const Result b = cli_run({"report", (dir_ / "bad.jsonl").string()});
  EXPECT_EQ(b.code, cli::validation);
  EXPECT_NE(b.err.find("line 2"), std::string::npos) << b.err;
}

TEST_F(CliTest, CalibSyntheticKinds) {
  for (const char* kind : {"pivot", "hand-eye", "register", "gravity"}) {
    const Result r = cli_run({"--out", out(), "--seed", "3", "calib", kind, "--synthetic"});
    ASSERT_EQ(r.code, 0) << kind << ": " << r.err;
    const auto j = nlohmann::json::parse(read_file_bytes(dir_ / ("calib_" + std::string(kind) + ".json")));
    EXPECT_EQ(j["kind"], kind);
  }
  EXPECT_EQ(cli_run({"--out", out(), "calib", "wobble", "--synthetic"}).code, cli::validation);
}

TEST_F(CliTest, CalibDegenerateInputIsNumerical) {
  const std::string in = write("reg.json", R"({"model_mm": [[0,0,0],[1,0,0],[2,0,0]],
                                              "measured_mm": [[0,0,0],[1,0,0],[2,0,0]]})");
  EXPECT_EQ(cli_run({"--out", out(), "calib", "register", "--input", in}).code, cli::numerical);
}

TEST_F(CliTest, BinaryExitCodes) {
  const std::string spec = write("box.json", kSphereSpec);
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  const std::string bin = SDFVF_CLI_PATH;
  EXPECT_EQ(status(bin + " --out " + out() + " sdf-build " + spec), 0);
  EXPECT_EQ(status(bin + " --out " + out() + " sdf-build " + spec + " --labels 4"), 1);
  EXPECT_EQ(status(bin + " report " + out() + "/missing.jsonl"), 2);
}
