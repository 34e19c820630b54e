#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "../common/oracles.hpp"
#include "cli.hpp"
#include "dain/data.hpp"

using namespace dain;
using dain::cli::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// runs a command in-process with stdout and stderr captured
int run_quiet(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "dain");
  std::ostringstream o, e;
  auto* old_out = std::cout.rdbuf(o.rdbuf());
  auto* old_err = std::cerr.rdbuf(e.rdbuf());
  int rc = 0;
  try {
    rc = cli::run(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  if (out) *out = o.str() + e.str();
  return rc;
}

int run_tool(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DAIN_TOOL) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("run config round trips through json") {
  RunConfig c;
  CHECK(cli::from_json(cli::to_json(c)) == c);
  c.command = "train";
  c.arch = "tean";
  c.rho1 = -0.25;
  c.views = {-10, 5};
  c.reports = {"a.json", "b.json"};
  c.multiview = true;
  c.lr = 0.0123456789012345;
  c.seed = 18446744073709551615ULL;
  const auto j = cli::to_json(c);
  CHECK(cli::from_json(j) == c);
  CHECK(cli::from_json(json::parse(j.dump())) == c);
  auto bad = j;
  bad["no_such_key"] = 1;
  CHECK_THROWS(cli::from_json(bad));
  auto wrong_type = j;
  wrong_type["epochs"] = "many";
  CHECK_THROWS(cli::from_json(wrong_type));
}

TEST_CASE("generate writes a deterministic dataset") {
  oracle::TempDir a("cli_gen_a"), b("cli_gen_b");
  REQUIRE(run_quiet({"generate", "--output-dir", a.path.string()}) == 0);
  REQUIRE(run_quiet({"generate", "--output-dir", b.path.string()}) == 0);
  const auto ma = slurp(a.path / "manifest.tsv");
  CHECK(count_lines(ma) == 4 * 20 * 9);
  CHECK(ma == slurp(b.path / "manifest.tsv"));
  CHECK(fs::exists(a.path / "generate.config.json"));
  auto echoed = cli::from_json(json::parse(slurp(a.path / "generate.config.json")));
  CHECK(echoed.command == "generate");
  CHECK(echoed.output_dir == a.path.string());
  const auto m = data::read_manifest(a.path / "manifest.tsv");
  CHECK(slurp(a.path / m.records[5].path) == slurp(b.path / m.records[5].path));
}

TEST_CASE("generate without angular response gives zero differential files") {
  oracle::TempDir d("cli_rho0");
  REQUIRE(run_quiet({"generate", "--output-dir", d.path.string(), "--rho1", "0", "--noise-sigma", "0",
                     "--samples-per-class", "2", "--views", "-40,0,40"}) == 0);
  const auto m = data::read_manifest(d.path / "manifest.tsv");
  REQUIRE(m.records.size() == 4 * 2 * 3);
  for (const auto& r : m.records) {
    const auto out = d.path / "diff" / (std::to_string(&r - m.records.data()) + ".f32");
    REQUIRE(run_quiet({"diffimg", "--output-dir", d.path.string(), "--image-v", (d.path / r.path).string(),
                       "--image-v-delta", (d.path / data::partner_path(r.path)).string(), "--out-image",
                       out.string()}) == 0);
    for (double v : data::read_image(out).to_vector()) CHECK(v == 0.0);
  }
}

TEST_CASE("config files and precedence") {
  oracle::TempDir d("cli_cfg");
  RunConfig c;
  c.samples_per_class = 3;
  c.views = {0, 10};
  c.dataset = "spatial";
  c.output_dir = (d.path / "from_file").string();
  {
    std::ofstream f(d.path / "gen.json");
    f << cli::to_json(c).dump();
  }
  REQUIRE(run_quiet({"generate", "--config", (d.path / "gen.json").string(), "--samples-per-class", "2"}) == 0);
  const auto m = data::read_manifest(d.path / "from_file" / "manifest.tsv");
  CHECK(m.records.size() == 8 * 2 * 2);

  std::ofstream(d.path / "typo.json") << R"({"sampels_per_class": 3})";
  CHECK(run_quiet({"generate", "--config", (d.path / "typo.json").string(), "--output-dir", d.path.string()}) == 2);
  CHECK(run_quiet({"generate", "--no-such-flag"}) == 2);
  CHECK(run_quiet({"frobnicate"}) == 2);
  CHECK(run_quiet({"generate", "--help"}) == 0);
}

TEST_CASE("train usage errors and dry run") {
  oracle::TempDir d("cli_usage");
  CHECK(run_quiet({"train", "--arch", "resnet", "--output-dir", d.path.string(), "--n-classes", "4", "--dry-run"}) == 2);
  const auto err = json::parse(slurp(d.path / "error.json"));
  CHECK(err.at("exit_code") == 2);
  CHECK(err.at("kind") == "usage");
  CHECK(err.at("command") == "train");
  CHECK(err.at("message").get<std::string>().find("resnet") != std::string::npos);

  std::string out;
  CHECK(run_quiet({"train", "--arch", "dep", "--n-classes", "4", "--dry-run", "--output-dir", d.path.string()}, &out) == 0);
  CHECK(out.find("config ok: arch=dep parameters=") != std::string::npos);
  CHECK_FALSE(fs::exists(d.path / "model.ckpt"));
  CHECK(run_quiet({"train", "--arch", "dain", "--output-dir", d.path.string()}) == 2);
  CHECK(run_quiet({"train", "--arch", "dain", "--backbone", "1x28:8k3", "--n-classes", "4", "--dry-run",
                   "--output-dir", d.path.string()}) == 2);
}

TEST_CASE("train, eval, export and summarize end to end") {
  oracle::TempDir d("cli_e2e");
  const auto data_dir = (d.path / "data").string(), split_dir = (d.path / "splits").string(),
             run_dir = (d.path / "run").string();
  REQUIRE(run_quiet({"generate", "--output-dir", data_dir, "--dataset", "mixed", "--samples-per-class", "8", "--views",
                     "-20,20", "--seed", "11"}) == 0);
  const auto manifest = data_dir + "/manifest.tsv";
  REQUIRE(run_quiet({"splits", "--manifest", manifest, "--output-dir", split_dir, "--train-fraction", "0.9",
                     "--n-splits", "2"}) == 0);
  CHECK(fs::exists(fs::path(split_dir) / "split_0.tsv"));
  CHECK(fs::exists(fs::path(split_dir) / "split_1.tsv"));
  const auto split = split_dir + "/split_0.tsv";

  REQUIRE(run_quiet({"train", "--manifest", manifest, "--split-file", split, "--output-dir", run_dir, "--arch",
                     "baseline", "--epochs", "200", "--lr", "0.01", "--seed", "3", "--max-decays", "0",
                     "--decay-window", "1000", "--target-train-acc", "1", "--stretch-pct", "0", "--flip-prob", "0",
                     "--n-views", "2"}) == 0);
  const auto metrics = slurp(fs::path(run_dir) / "metrics.csv");
  std::istringstream ms(metrics);
  std::string line, last;
  while (std::getline(ms, line)) last = line;
  std::vector<std::string> cells;
  std::istringstream ls(last);
  for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
  REQUIRE(cells.size() >= 5);
  CHECK(std::stod(cells[4]) == 1.0);
  CHECK(fs::exists(fs::path(run_dir) / "model.ckpt"));
  CHECK(fs::exists(fs::path(run_dir) / "train.config.json"));
  const auto summary = json::parse(slurp(fs::path(run_dir) / "train_summary.json"));
  CHECK(summary.at("final_train_acc") == 1.0);

  const auto ckpt = run_dir + "/model.ckpt";
  for (const char* mode : {"single", "voting", "pooling"})
    REQUIRE(run_quiet({"eval", "--manifest", manifest, "--split-file", split, "--checkpoint", ckpt, "--output-dir",
                       run_dir, "--eval-mode", mode, "--n-views", "2"}) == 0);
  const auto vote = slurp(fs::path(run_dir) / "eval_voting_report.json");
  const auto pool = slurp(fs::path(run_dir) / "eval_pooling_report.json");
  CHECK_FALSE(vote.empty());
  CHECK_FALSE(pool.empty());
  CHECK(fs::exists(fs::path(run_dir) / "eval_single_per_angle.csv"));
  CHECK_FALSE(fs::exists(fs::path(run_dir) / "eval_voting_per_angle.csv"));
  CHECK(count_lines(slurp(fs::path(run_dir) / "eval_single_per_angle.csv")) == 1 + 2);
  const auto single = json::parse(slurp(fs::path(run_dir) / "eval_single_report.json"));
  CHECK(single.at("total") == 4 * 1 * 2);
  CHECK(json::parse(vote).at("total") == 4);

  REQUIRE(run_quiet({"export-features", "--manifest", manifest, "--split-file", split, "--checkpoint", ckpt,
                     "--output-dir", run_dir, "--eval-split", "all"}) == 0);
  CHECK(count_lines(slurp(fs::path(run_dir) / "features.csv")) == 1 + 64);

  const auto r1 = run_dir + "/eval_single_report.json", r2 = run_dir + "/eval_pooling_report.json";
  std::string out;
  REQUIRE(run_quiet({"summarize", "--reports", r1 + "," + r2, "--output-dir", run_dir}, &out) == 0);
  CHECK(out.find("mean: ") != std::string::npos);
  CHECK(slurp(fs::path(run_dir) / "summary.txt") == out);

  CHECK(run_quiet({"eval", "--manifest", manifest, "--split-file", split, "--checkpoint", run_dir + "/missing.ckpt",
                   "--output-dir", run_dir}) == 2);
}

TEST_CASE("splits ingest a directory tree") {
  oracle::TempDir d("cli_gtos");
  for (const char* cls : {"asphalt", "grass"})
    for (const char* s : {"sample_01", "sample_02", "sample_03"})
      for (const char* which : {"base", "delta"}) {
        const auto p = d.path / "tree" / cls / s / (std::string("theta_+10_") + which + "_sun.f32");
        fs::create_directories(p.parent_path());
        data::write_image(p, Tensor::full({1, 4, 4}, 0.5).astype(DType::f32));
      }
  const auto out = d.path / "out";
  REQUIRE(run_quiet({"splits", "--gtos-root", (d.path / "tree").string(), "--output-dir", out.string(), "--n-splits",
                     "1"}) == 0);
  CHECK(count_lines(slurp(out / "manifest.tsv")) == 6);
  CHECK(slurp(out / "classes.tsv") == "0\tasphalt\n1\tgrass\n");
  const auto a = data::read_split(out / "split_0.tsv");
  std::size_t train = 0;
  for (const auto& [id, s] : a) train += s == data::Split::Train;
  CHECK(train == 4);
}

TEST_CASE("diffimg of identical views is zero") {
  oracle::TempDir d("cli_diff");
  std::mt19937_64 rng(3);
  const auto img = oracle::tensor({1, 6, 6}, rng, 0.0, 1.0).astype(DType::f32);
  data::write_image(d.path / "a.f32", img);
  REQUIRE(run_quiet({"diffimg", "--image-v", (d.path / "a.f32").string(), "--image-v-delta",
                     (d.path / "a.f32").string(), "--out-image", (d.path / "z.f32").string(), "--output-dir",
                     d.path.string()}) == 0);
  const auto z = data::read_image(d.path / "z.f32");
  CHECK(z.shape() == img.shape());
  for (double v : z.to_vector()) CHECK(v == 0.0);
  CHECK(run_quiet({"diffimg", "--image-v", (d.path / "a.f32").string(), "--image-v-delta",
                   (d.path / "a.f32").string(), "--out-image", (d.path / "z.png").string(), "--output-dir",
                   d.path.string()}) == 2);
}

TEST_CASE("installed binary: gradcheck and exit codes") {
  oracle::TempDir d("cli_bin");
  const auto log = d.path / "log.txt";
  CHECK(run_tool("gradcheck --arch dep --output-dir " + d.path.string(), log) == 0);
  const auto text = slurp(log);
  CHECK(text.find("PASS dep max_rel_err=") != std::string::npos);
  CHECK(json::parse(slurp(d.path / "gradcheck.json")).at("passed") == true);
  CHECK(run_tool("train --arch nope --n-classes 3 --dry-run --output-dir " + d.path.string(), log) == 2);
  CHECK(run_tool("eval --output-dir " + d.path.string(), log) == 2);

  const auto env_dir = d.path / "env";
  const std::string cmd = "DAIN_OUTPUT_DIR=" + env_dir.string() + " " + DAIN_TOOL +
                          " generate --samples-per-class 1 --views 0 > " + log.string() + " 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(env_dir / "manifest.tsv"));
}
