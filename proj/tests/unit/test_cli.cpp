#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "tamformer/cli.hpp"
#include "tamformer/harness.hpp"

using namespace tamformer;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tamformer_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A short run so the CLI flows stay fast.
fs::path write_short_config(const fs::path& dir) {
  const fs::path p = dir / "short.json";
  std::ofstream(p) << R"({"train": {"epochs_stage1": 2, "epochs_stage2": 2, "augment": false}})";
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  const Run r = cli({"gen-data", "--n", "4", "--out", "x.jsonl", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--bogus") != std::string::npos);
  CHECK(cli({"train", "--data", "d.jsonl", "--out", "o", "--profile", "huge"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("missing inputs exit 3") {
  const fs::path dir = temp_dir("missing");
  const Run r = cli({"eval", "--data", (dir / "none.jsonl").string(), "--checkpoint",
                     (dir / "none.json").string(), "--times", "1", "--report",
                     (dir / "r.json").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("none.jsonl") != std::string::npos);
  CHECK(cli({"plot", "--reports", (dir / "nope.json").string(), "--out",
             (dir / "p.svg").string()})
            .code == 3);
  fs::remove_all(dir);
}

TEST_CASE("grad-check reports the maximum relative error") {
  const Run r = cli({"grad-check", "--seed", "7"});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
}

TEST_CASE("gen-data, train, eval, dump-masks and plot") {
  const fs::path dir = temp_dir("flow");
  const std::string data = (dir / "data" / "d.jsonl").string();
  Run r = cli({"gen-data", "--n", "24", "--seed", "3", "--out", data});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote 24 samples (12 crossing, 12 not crossing)") != std::string::npos);

  const std::string cfg = write_short_config(dir).string();
  const std::string run1 = (dir / "run1").string(), run2 = (dir / "run2").string();
  REQUIRE(cli({"train", "--data", data, "--config", cfg, "--out", run1, "--seed", "5"}).code == 0);
  REQUIRE(cli({"train", "--data", data, "--config", cfg, "--out", run2, "--seed", "5"}).code == 0);
  for (const char* f : {"model.json", "stage1.json", "stage2.json", "train_log.csv"})
    CHECK(read_file(fs::path(run1) / f) == read_file(fs::path(run2) / f));
  const std::string log = read_file(fs::path(run1) / "train_log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 1 + 4);

  const std::string ckpt = (fs::path(run1) / "model.json").string();
  const std::string report = (dir / "reports" / "with.json").string();
  r = cli({"eval", "--data", data, "--checkpoint", ckpt, "--times", "1.3,1.2,1.1,1.0", "--report",
           report});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("t_a,acc,auc,f1", 0) == 0);
  CHECK(load_report(report).rows.size() == 4);

  r = cli({"eval", "--data", data, "--checkpoint", ckpt, "--times", "10", "--report", report});
  CHECK(r.code == 2);
  CHECK(r.err.find("outside the observable range") != std::string::npos);

  r = cli({"eval", "--data", data, "--checkpoint", ckpt, "--times", "1,abc", "--report", report});
  CHECK(r.code == 2);

  r = cli({"dump-masks", "--data", data, "--checkpoint", ckpt, "--out",
           (dir / "masks").string(), "--limit", "2"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote 4 mask files") != std::string::npos);

  const std::string svg = (dir / "plot.svg").string();
  r = cli({"plot", "--reports", report, "--out", svg});
  REQUIRE(r.code == 0);
  CHECK(read_file(svg).find("<polyline data-name=\"with\"") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("the installed binary uses the same exit codes") {
  const std::string exe = TAMFORMER_CLI_PATH;
  auto status = [&](const std::string& args) {
    const int raw = std::system((exe + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status("--help") == 0);
  CHECK(status("nonsense") == 2);
  CHECK(status("eval --data /nonexistent/d.jsonl --checkpoint /nonexistent/m.json --times 1 "
               "--report /tmp/r.json") == 3);
}
