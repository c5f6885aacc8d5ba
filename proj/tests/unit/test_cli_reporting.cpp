#include <doctest.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "cli/cli.hpp"
#include "quanos/error.hpp"
#include "quanos/hash.hpp"
#include "quanos/report.hpp"
#include "test_support.hpp"

using namespace quanos;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

// Runs the CLI with stdout and stderr captured.
Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Result r;
  try {
    r.code = cli::dispatch(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::string kData = QUANOS_TEST_DATA_DIR;

std::vector<std::string> small_train(const fs::path& out, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> a{"train", "--data-dir", kData, "--train-samples", "256", "--test-samples", "100",
                             "--epochs", "1", "--out", out.string()};
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

}  // namespace

TEST_CASE("exit codes and usage errors") {
  CHECK(run({}).code == 2);
  CHECK(run({"--help"}).code == 0);
  const auto v = run({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find("0.1.0") != std::string::npos);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"energy", "--no-such-flag"}).code == 2);

  const auto bad_eps = run({"attack", "--eps", "-1"});
  CHECK(bad_eps.code == 2);
  CHECK(bad_eps.err.find("--eps") != std::string::npos);

  const auto dir = test::scratch_dir("cli-codes");
  CHECK(run({"energy", "--plan", (dir / "missing.plan").string(), "--out", dir.string()}).code == 2);
  CHECK(run({"energy", "--preset", "resnet18-cifar", "--checkpoint", "x.ckpt"}).code == 2);

  SUBCASE("domain errors exit 1") {
    std::ofstream(dir / "short.plan") << "4 4 4\n";
    const auto r = run({"energy", "--preset", "vgg19-cifar", "--plan", (dir / "short.plan").string(), "--out",
                        (dir / "e").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("error") != std::string::npos);
    fs::create_directories(dir / "empty");
    auto args = small_train(dir / "t");
    args[2] = (dir / "empty").string();
    CHECK(run(args).code == 1);
    args[2] = (dir / "nowhere").string();
    const auto t = run(args);
    CHECK(t.code == 1);
  }
}

TEST_CASE("grids") {
  CHECK(cli::parse_grid("0.05:0.3:0.05") == std::vector<double>{0.05, 0.1, 0.15, 0.2, 0.25, 0.3});
  CHECK(cli::parse_grid("0,0.5,0.9") == std::vector<double>{0, 0.5, 0.9});
  CHECK(cli::parse_grid("0.1") == std::vector<double>{0.1});
  CHECK_THROWS_AS(cli::parse_grid("1:0:0.1"), ArgumentError);
  CHECK_THROWS_AS(cli::parse_grid("0:1:0"), ArgumentError);
  CHECK_THROWS_AS(cli::parse_grid("a,b"), ArgumentError);
  CHECK_THROWS_AS(cli::parse_grid(""), ArgumentError);
}

TEST_CASE("emit_plotdata") {
  const auto dir = test::scratch_dir("plotdata");
  SUBCASE("one row per layer") {
    Series s{"ans", {"layer", "ans"}, {{0, 0.1}, {4, 0.3}, {8, 0.2}}};
    const auto files = emit_plotdata({s}, dir / "a");
    REQUIRE(files.size() == 2);
    CHECK(files.back().filename() == "index.csv");
    CHECK(slurp(dir / "a" / "ans.csv") == "layer,ans\n0,0.1\n4,0.3\n8,0.2\n");
    const auto index = slurp(dir / "a" / "index.csv");
    CHECK(index.find("ans,ans.csv,3," + sha256_file(dir / "a" / "ans.csv")) != std::string::npos);
  }
  SUBCASE("long format over models and epsilons") {
    Series s{"adversarial_loss", {"model", "epsilon", "adv_loss"}, {}};
    for (const char* m : {"base", "u8", "quanos"}) {
      for (int i = 1; i <= 6; ++i) s.rows.push_back({std::string(m), 0.05 * i, 10.0 * i});
    }
    emit_plotdata({s}, dir / "b");
    CHECK(line_count(slurp(dir / "b" / "adversarial_loss.csv")) == 19);
  }
  SUBCASE("re-emit is byte-identical") {
    Series s{"curve", {"p", "acc"}, {{0.0, 0.9}, {0.5, 0.7}, {0.99, 1.0 / 3.0}}};
    emit_plotdata({s}, dir / "c1");
    emit_plotdata({s}, dir / "c2");
    CHECK(slurp(dir / "c1" / "curve.csv") == slurp(dir / "c2" / "curve.csv"));
    CHECK(slurp(dir / "c1" / "index.csv") == slurp(dir / "c2" / "index.csv"));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(emit_plotdata({}, dir / "d"), ArgumentError);
    CHECK_THROWS_AS(emit_plotdata({Series{"../escape", {"x"}, {{1}}}}, dir / "d"), ArgumentError);
    std::ofstream(dir / "file") << "x";
    CHECK_THROWS_AS(emit_plotdata({Series{"s", {"x"}, {{1}}}}, dir / "file" / "sub"), IoError);
  }
}

TEST_CASE("energy subcommand and manifests") {
  const auto dir = test::scratch_dir("cli-energy");
  std::ofstream(dir / "hybrid.plan") << "9 4 5 3 3 3 4 2 4 6 9 8 9 7 3 2 2\n";
  const auto out = dir / "run";
  const auto r = run({"energy", "--preset", "vgg19-cifar", "--plan", (dir / "hybrid.plan").string(), "--configs",
                      "standard,dg,dvafs", "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mJ") != std::string::npos);
  const auto summary = slurp(out / "energy_summary.csv");
  CHECK(line_count(summary) == 4);
  CHECK(summary.find("dvafs") != std::string::npos);
  CHECK(fs::exists(out / "energy_layers.csv"));

  SUBCASE("nothing is written outside the output directory") {
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++entries;
    CHECK(entries == 2);
  }
  SUBCASE("manifest lists inputs, outputs and config") {
    const auto m = RunManifest::load(out / "manifest.json");
    CHECK(m.command_line.front() == "energy");
    CHECK(m.config.at("preset") == "vgg19-cifar");
    CHECK(m.outputs.size() >= 2);
    CHECK(m.inputs.size() == 1);
    CHECK(!m.code_version.empty());
  }
  SUBCASE("verification detects tampering") {
    CHECK(verify_manifest(out / "manifest.json").empty());
    CHECK(run({"report", "--verify-manifest", (out / "manifest.json").string()}).code == 0);
    std::ofstream(out / "energy_summary.csv", std::ios::app) << "x\n";
    const auto issues = verify_manifest(out / "manifest.json");
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].path == "energy_summary.csv");
    CHECK(issues[0].problem == "hash mismatch");
    CHECK(run({"report", "--verify-manifest", (out / "manifest.json").string()}).code == 1);
    fs::remove(out / "energy_layers.csv");
    CHECK(verify_manifest(out / "manifest.json").size() == 2);
  }
  SUBCASE("manifest json round trip") {
    const auto m = RunManifest::load(out / "manifest.json");
    CHECK(RunManifest::from_json(m.to_json()).to_json() == m.to_json());
    CHECK_THROWS_AS(RunManifest::from_json("{not json"), CorruptionError);
  }
}

TEST_CASE("end-to-end comparison and replay") {
  const auto dir = test::scratch_dir("cli-e2e");
  REQUIRE(run(small_train(dir / "u16", {"--uniform-bits", "16"})).code == 0);
  REQUIRE(run(small_train(dir / "u4", {"--uniform-bits", "4"})).code == 0);
  fs::copy_file(dir / "u16" / "model.ckpt", dir / "u16.ckpt");
  fs::copy_file(dir / "u4" / "model.ckpt", dir / "u4.ckpt");
  CHECK(fs::exists(dir / "u16" / "train_log.csv"));
  CHECK(fs::exists(dir / "u4" / "plan.csv"));

  const auto out = dir / "cmp";
  const auto r = run({"report", "--data-dir", kData, "--compare", (dir / "u16.ckpt").string(),
                      (dir / "u4.ckpt").string(), "--eps-grid", "0.05:0.3:0.05", "--samples", "100", "--out",
                      out.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("seed: 0") != std::string::npos);
  const auto table = slurp(out / "adversarial_loss.csv");
  CHECK(line_count(table) == 13);
  CHECK(table.rfind("model,epsilon,clean_acc,adv_acc,adv_loss\n", 0) == 0);
  CHECK(fs::exists(out / "plotdata" / "adversarial_loss.csv"));

  SUBCASE("replay reproduces identical CSVs") {
    const auto rr = run({"report", "--replay", (out / "manifest.json").string(), "--out", (dir / "again").string()});
    CHECK(rr.code == 0);
    CHECK(rr.out.find("DIFFERENT") == std::string::npos);
    CHECK(slurp(out / "adversarial_loss.csv") == slurp(dir / "again" / "adversarial_loss.csv"));
  }
  SUBCASE("attack and ans on a checkpoint") {
    const auto a = run({"attack", "--data-dir", kData, "--checkpoint", (dir / "u16.ckpt").string(), "--samples",
                        "50", "--eps-grid", "0,0.1", "--out", (dir / "atk").string()});
    REQUIRE(a.code == 0);
    const auto csv = slurp(dir / "atk" / "attack.csv");
    CHECK(line_count(csv) == 3);
    const auto n = run({"ans", "--data-dir", kData, "--checkpoint", (dir / "u16.ckpt").string(), "--samples", "50",
                        "--out", (dir / "ans").string()});
    REQUIRE(n.code == 0);
    CHECK(fs::exists(dir / "ans" / "ans.csv"));
    CHECK(fs::exists(dir / "ans" / "plan.csv"));
  }
}
