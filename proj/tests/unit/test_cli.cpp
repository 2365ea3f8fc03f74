// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <fmt/format.h>
#include <unistd.h>

#include "kunbr/cli/commands.hpp"
#include "kunbr/cli/manifest.hpp"
#include "kunbr/cli/run_config.hpp"
#include "kunbr/cli/svg.hpp"
#include "kunbr/gradbackend/error.hpp"
#include "kunbr/io.hpp"
#include "kunbr/lm/checkpoint.hpp"

using namespace kunbr;
using namespace kunbr::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / fmt::format("kunbr-cli-test-{}-{}", ::getpid(), counter++);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

json small_config() {
  return json::parse(R"({
    "schema": "kunbr.run/1", "seed": 3,
    "corpus": {"n_facts": 40},
    "model": {"layers": 4, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "train": {"epochs": 40, "lr": 0.01, "batch_size": 8},
    "unlearn": {"GD": {"epochs": 2}, "KUnBR": {"warm_steps": 4, "M": 4, "top_k": 2, "per_block_epochs": 2}},
    "attack": {"max_epochs": 5, "target_accuracy": 1.0}
  })");
}

fs::path write_config(const TempDir& t, const json& j, const std::string& name = "config.json") {
  const auto p = t.path / name;
  write_file_atomic(p, j.dump());
  return p;
}

int kunbr_cli(const fs::path& config, const fs::path& out, std::vector<std::string> args) {
  args.insert(args.end(), {"--config", config.string(), "--out", out.string()});
  return run(args);
}

void flip_bit(const fs::path& p, std::size_t offset) {
  std::string bytes = read_file(p);
  REQUIRE(offset < bytes.size());
  bytes[offset] = static_cast<char>(bytes[offset] ^ 0x01);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

}  // namespace

TEST_CASE("run config rejects unknown and misplaced keys") {
  CHECK_NOTHROW(parse_run_config(small_config()));
  CHECK_THROWS_AS(parse_run_config(json{{"seed", 1}}), ValidationError);
  CHECK_THROWS_AS(parse_run_config(json{{"schema", "kunbr.run/0"}}), ValidationError);

  auto j = small_config();
  j["model"]["layerz"] = 4;
  CHECK_THROWS_WITH_AS(parse_run_config(j), doctest::Contains("layerz"), ValidationError);

  j = small_config();
  j["unlearn"]["GA"] = {{"retain_coeff", 0.5}};
  CHECK_THROWS_AS(parse_run_config(j), ValidationError);
  j = small_config();
  j["unlearn"]["SGD"] = json::object();
  CHECK_THROWS_AS(parse_run_config(j), ValidationError);
  j = small_config();
  j["model"]["seed"] = 1;
  CHECK_THROWS_AS(parse_run_config(j), ValidationError);
  j = small_config();
  j["train"]["lr"] = "fast";
  CHECK_THROWS_AS(parse_run_config(j), ValidationError);
  j = small_config();
  j["attack"]["lr"] = -1.0;
  CHECK_THROWS_AS(parse_run_config(j), ValidationError);
}

TEST_CASE("run config round-trips through its full json") {
  const auto rc = parse_run_config(small_config());
  const auto full = to_json(rc);
  const auto again = parse_run_config(full);
  CHECK(to_json(again) == full);
  CHECK(eval::config_hash(again.experiment) == eval::config_hash(rc.experiment));
  CHECK(again.seed == 3);
  CHECK(again.experiment.model.layers == 4);
  CHECK(again.experiment.kunbr.top_k == 2);
}

TEST_CASE("manifest detects a single flipped bit") {
  TempDir t;
  write_file_atomic(t.path / "a.bin", std::string(1000, 'x'));
  RunManifest m;
  m.record(t.path, "a", "a.bin", "test");
  save_manifest(t.path, m);
  const auto loaded = load_manifest(t.path);
  CHECK(loaded.verify(t.path).empty());
  CHECK(loaded.require(t.path, "a") == t.path / "a.bin");

  flip_bit(t.path / "a.bin", 517);
  const auto problems = loaded.verify(t.path);
  REQUIRE(problems.size() == 1);
  CHECK(problems[0].find("hashes to") != std::string::npos);
  CHECK_THROWS_AS(loaded.require(t.path, "a"), IoError);
  CHECK_THROWS_AS(loaded.require(t.path, "b"), IoError);

  fs::remove(t.path / "a.bin");
  CHECK(loaded.verify(t.path).size() == 1);
}

TEST_CASE("malformed manifests are io errors") {
  TempDir t;
  write_file_atomic(t.path / "manifest.json", "{not json");
  CHECK_THROWS_AS(load_manifest(t.path), IoError);
  write_file_atomic(t.path / "manifest.json", R"({"schema":"other"})");
  CHECK_THROWS_AS(load_manifest(t.path), IoError);
}

TEST_CASE("svg charts") {
  const auto bars = bar_chart_svg("t <1>", "pct", {"GD", "KUnBR"},
                                  {{"A", {10, -5}, {1, 2}}, {"B", {20, 30}, {}}});
  CHECK(bars.rfind("<svg", 0) == 0);
  CHECK(bars.find("</svg>") != std::string::npos);
  CHECK(bars.find("t &lt;1&gt;") != std::string::npos);
  CHECK(bars.find("<rect x=") != std::string::npos);
  const auto lines = line_chart_svg("r", "pct", {"0", "1", "2"}, {{"GD", {1, 2, 3}, {}}});
  CHECK(lines.find("<polyline") != std::string::npos);
  CHECK_THROWS_AS(bar_chart_svg("t", "y", {"a"}, {{"A", {1, 2}, {}}}), ShapeError);
  CHECK_THROWS_AS(line_chart_svg("t", "y", {"a", "b"}, {{"A", {1, 2}, {1}}}), ShapeError);
}

TEST_CASE("cli exit codes") {
  TempDir t;
  CHECK(run(std::vector<std::string>{}) == kExitValidation);
  CHECK(run({"frobnicate"}) == kExitValidation);
  CHECK(run({"--help"}) == kExitOk);
  CHECK(run({"train", "--precision", "f16"}) == kExitValidation);

  auto bad = small_config();
  bad["corpus"]["bogus"] = 1;
  CHECK(kunbr_cli(write_config(t, bad), t.path / "out", {"generate-data"}) == kExitValidation);
  write_file_atomic(t.path / "broken.json", "{");
  CHECK(kunbr_cli(t.path / "broken.json", t.path / "out", {"show-config"}) == kExitValidation);
  CHECK(kunbr_cli(t.path / "missing.json", t.path / "out", {"show-config"}) == kExitIo);
  CHECK(run({"verify", "--dir", (t.path / "nowhere").string()}) == kExitIo);
}

TEST_CASE("staged cli run matches the in-process comparison") {
  TempDir t;
  const auto cfg = write_config(t, small_config());
  const auto out = t.path / "out";
  const auto dir = out / "seed-3";
  REQUIRE(kunbr_cli(cfg, out, {"generate-data"}) == kExitOk);
  REQUIRE(kunbr_cli(cfg, out, {"train"}) == kExitOk);

  // Unlearning needs the memorized model; attacking needs an unlearned one.
  CHECK(kunbr_cli(cfg, out, {"attack", "--method", "GD"}) == kExitValidation);
  CHECK(kunbr_cli(cfg, out, {"attack", "--checkpoint", (dir / "memorized.ckpt").string()}) == kExitValidation);

  for (const std::string m : {"GD", "KUnBR"}) {
    REQUIRE(kunbr_cli(cfg, out, {"unlearn", "--method", m}) == kExitOk);
    REQUIRE(kunbr_cli(cfg, out, {"attack", "--method", m}) == kExitOk);
  }
  REQUIRE(kunbr_cli(cfg, out, {"density", "--method", "KUnBR"}) == kExitOk);
  REQUIRE(kunbr_cli(cfg, out, {"evaluate"}) == kExitOk);
  CHECK(run({"verify", "--dir", dir.string()}) == kExitOk);
  CHECK(fs::exists(dir / "kunbr-warmup.ckpt"));
  CHECK(fs::exists(dir / "density-KUnBR.csv"));

  const auto rc = parse_run_config(small_config());
  const auto cmp = eval::run_comparison(rc.experiment, {"GD", "KUnBR"}, {3});
  REQUIRE(cmp.reports.size() == 2);
  for (const auto& expected : cmp.reports) {
    REQUIRE(expected.ok());
    const auto staged = json::parse(read_file(dir / fmt::format("report-{}.json", expected.method)));
    const auto direct = eval::to_json(expected);
    for (const char* key : {"a_unlearn", "a_rtt", "a_recover", "retain_accuracy", "retain_perplexity",
                            "rtt_t_accuracy", "rtt_epochs", "unlearned_sha256", "attacked_sha256", "config_hash",
                            "memorized_accuracy", "pre_v_accuracy"}) {
      CAPTURE(key);
      CHECK(staged.at(key) == direct.at(key));
    }
  }

  SUBCASE("a corrupted checkpoint is refused") {
    flip_bit(dir / "unlearned-GD.ckpt", 300);
    CHECK(run({"verify", "--dir", dir.string()}) == kExitIo);
    CHECK(kunbr_cli(cfg, out, {"attack", "--method", "GD"}) == kExitIo);
  }
  SUBCASE("a changed config is refused unless forced") {
    auto other = small_config();
    other["attack"]["lr"] = 5e-3;
    const auto cfg2 = write_config(t, other, "other.json");
    CHECK(kunbr_cli(cfg2, out, {"attack", "--method", "GD"}) == kExitValidation);
    CHECK(kunbr_cli(cfg2, out, {"attack", "--method", "GD", "--force"}) == kExitOk);
  }
  SUBCASE("a truncated checkpoint is an io error") {
    const auto p = t.path / "cut.ckpt";
    const std::string bytes = read_file(dir / "memorized.ckpt");
    write_file_atomic(p, bytes.substr(0, bytes.size() - 9));
    CHECK_THROWS_AS(load_checkpoint(p), IoError);
    CHECK(kunbr_cli(cfg, out, {"evaluate", p.string()}) == kExitIo);
  }
}

TEST_CASE("training twice gives identical checkpoints") {
  TempDir t;
  const auto cfg = write_config(t, small_config());
  std::string hashes[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = t.path / fmt::format("run{}", i);
    REQUIRE(kunbr_cli(cfg, out, {"generate-data"}) == kExitOk);
    REQUIRE(kunbr_cli(cfg, out, {"train"}) == kExitOk);
    hashes[i] = sha256_file(out / "seed-3" / "memorized.ckpt");
    CHECK(read_file(out / "seed-3" / "corpus.jsonl") == read_file(t.path / "run0" / "seed-3" / "corpus.jsonl"));
  }
  CHECK(hashes[0] == hashes[1]);

  const auto f32 = t.path / "f32";
  REQUIRE(kunbr_cli(cfg, f32, {"generate-data"}) == kExitOk);
  REQUIRE(kunbr_cli(cfg, f32, {"train", "--precision", "f32"}) == kExitOk);
  CHECK(load_checkpoint(f32 / "seed-3" / "memorized.ckpt").precision == Precision::kF32);
  CHECK(fs::file_size(f32 / "seed-3" / "memorized.ckpt") < fs::file_size(t.path / "run0" / "seed-3" / "memorized.ckpt"));
}

TEST_CASE("seed override picks the run directory") {
  TempDir t;
  const auto cfg = write_config(t, small_config());
  REQUIRE(run({"generate-data", "--config", cfg.string(), "--out", (t.path / "o").string(), "--seed", "7"}) == kExitOk);
  CHECK(fs::exists(t.path / "o" / "seed-7" / "corpus.jsonl"));
  CHECK(load_manifest(t.path / "o" / "seed-7").seed == 7);
}
