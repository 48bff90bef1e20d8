#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "coarseseg/cli.hpp"
#include "coarseseg/io.hpp"
#include "support.hpp"

using namespace coarseseg;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "coarseseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string bin = COARSESEG_BIN;

}  // namespace

TEST_CASE("help and usage exit codes") {
  CHECK(shell(bin + " --help") == 0);
  CHECK(shell(bin + " train --help") == 0);
  CHECK(shell(bin) == 1);
  CHECK(shell(bin + " frobnicate") == 1);
  CHECK(shell(bin + " gradcheck --no-such-flag") == 1);
}

TEST_CASE("gradcheck exit codes") {
  CHECK(run({"gradcheck"}) == 0);
  CHECK(run({"gradcheck", "--dtype", "float64", "--threshold", "1e-5"}) == 0);
  CHECK(run({"gradcheck", "--dtype", "float32", "--threshold", "1e-3"}) == 0);
  CHECK(run({"gradcheck", "--threshold", "1e-12"}) == 1);
  CHECK(run({"gradcheck", "--break-trace-gradient"}) == 1);
  CHECK(run({"gradcheck", "--dtype", "float16"}) == 1);
}

TEST_CASE("gradcheck prints the comparison") {
  const testing::TempDir dir("gc");
  const auto out = dir / "out.txt";
  CHECK(std::system((bin + " gradcheck > " + out.string()).c_str()) == 0);
  CHECK(io::read_text(out).find("max_rel_err < 0.0001") != std::string::npos);
}

TEST_CASE("build, synth, train and eval pipeline") {
  const testing::TempDir dir("cli");
  const std::string d = dir.path.string();
  save_dataset(testing::blob_dataset(16, 7), dir / "clean");
  save_dataset(testing::blob_dataset(4, 70, 16, 16, "test"), dir / "test");

  REQUIRE(run({"noise", "synth", "--data", d + "/clean", "--level", "2", "--seed", "1",
               "--out", d + "/noisy"}) == 0);
  CHECK(std::filesystem::exists(dir / "noisy" / "config.resolved.json"));
  CHECK(run({"noise", "synth", "--data", d + "/clean", "--level", "2", "--out", d + "/noisy"}) == 1);
  CHECK(run({"noise", "synth", "--data", d + "/clean", "--level", "9", "--out", d + "/n9"}) == 1);

  std::ofstream(dir / "cfg.json") << R"({"dataset": "noisy", "val_dataset": "test",
    "test_dataset": "test", "output": "run", "epochs": 1, "batch_size": 8,
    "arch": {"seg_base_channels": 4, "ann_channels": 4}})";
  REQUIRE(run({"train", "--config", d + "/cfg.json"}) == 0);
  CHECK(std::filesystem::exists(dir / "run" / "report.json"));
  CHECK(std::filesystem::exists(dir / "run" / "config.resolved.json"));
  CHECK(run({"train", "--config", d + "/cfg.json"}) == 1);
  CHECK(run({"train", "--config", d + "/cfg.json", "--force", "--set", "epochs=2"}) == 0);
  CHECK(run({"train", "--config", d + "/cfg.json", "--force", "--set", "bogus=1"}) == 1);

  const std::string ckpt = d + "/run/checkpoints/epoch_0002.ckpt";
  REQUIRE(run({"eval", "--checkpoint", ckpt, "--data", d + "/test", "--report", d + "/ev.json"}) == 0);
  const auto report = nlohmann::json::parse(io::read_text(dir / "ev.json"));
  CHECK(report.at("per_image").size() == 4);
  CHECK(report.at("miou").get<double>() >= 0.0);
  CHECK(run({"eval", "--checkpoint", ckpt, "--data", d + "/test", "--report", d + "/ev.json"}) == 1);
  CHECK(run({"eval", "--checkpoint", d + "/missing.ckpt", "--data", d + "/test", "--report",
             d + "/ev2.json"}) == 2);

  CHECK(run({"panels", "--checkpoint", ckpt, "--data", d + "/noisy", "--sample", "toy0", "--out",
             d + "/p.png"}) == 0);
  CHECK(io::read_png(dir / "p.png").channels == 3);
  CHECK(run({"panels", "--checkpoint", ckpt, "--data", d + "/noisy", "--sample", "nope", "--out",
             d + "/q.png"}) == 1);

  CHECK(run({"dataset", "split", "--data", d + "/clean", "--fractions", "0.75,0.25", "--names",
             "train,test", "--seed", "3", "--out", d + "/parts"}) == 0);
  CHECK(load_dataset(dir / "parts" / "train").samples.size() == 12);
  CHECK(load_dataset(dir / "parts" / "test").split_tag == SplitTag::test);
}

TEST_CASE("relative outputs honour the output root") {
  const testing::TempDir dir("root");
  save_dataset(testing::blob_dataset(2, 1), dir / "clean");
  ::setenv("COARSESEG_OUTPUT_ROOT", dir.path.c_str(), 1);
  CHECK(cli::output_path("x/y") == dir.path / "x/y");
  CHECK(cli::output_path("/abs") == std::filesystem::path("/abs"));
  CHECK(run({"noise", "synth", "--data", (dir / "clean").string(), "--level", "1", "--out",
             "rooted"}) == 0);
  ::unsetenv("COARSESEG_OUTPUT_ROOT");
  CHECK(std::filesystem::exists(dir / "rooted" / "manifest.json"));
}
