#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "sdtseg/config.hpp"
#include "sdtseg/raster.hpp"
#include "test_support.hpp"

using namespace sdtseg;
using nlohmann::json;
using testsup::TempDir;

TEST_CASE("run config defaults") {
  const RunConfig cfg = parse_run_config(json::object());
  CHECK(cfg.train.epochs == 50);
  CHECK(cfg.train.batch_size == 10);
  CHECK(cfg.train.lr == 0.01);
  CHECK(cfg.train.lr_milestones == std::vector<int>{25, 45});
  CHECK(cfg.train.weight_decay == 0.0005);
  CHECK(cfg.train.lambda == 2.0);
  CHECK(cfg.train.clip == 32.0);
  CHECK(cfg.train.crop == 64);
  CHECK(cfg.train.balance);
  CHECK(cfg.synth.classes == 5);
  CHECK(cfg.synth.image_size == 128);
  CHECK(cfg.images == 250);
}

TEST_CASE("run config parsing") {
  const json doc = {
      {"out_dir", "runs/x"},
      {"images", 20},
      {"train",
       {{"epochs", 3}, {"lambda", 0.5}, {"seed", 9}, {"trunk_width", 6}, {"crop", 16},
        {"void_policy", "background"}}},
      {"synth", {{"classes", 3}, {"image_size", 32}, {"shape_kinds", {"disk"}}}},
  };
  const RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.out_dir == "runs/x");
  CHECK(cfg.images == 20);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.lambda == 0.5);
  CHECK(cfg.train.seed == 9);
  CHECK(cfg.train.void_policy == VoidPolicy::background);
  CHECK(cfg.synth.classes == 3);
  CHECK(cfg.synth.disks);
  CHECK_FALSE(cfg.synth.rectangles);
}

TEST_CASE("run config rejects unknown and malformed keys") {
  CHECK_THROWS_AS(parse_run_config(json{{"bogus", 1}}), config_error);
  CHECK_THROWS_AS(parse_run_config(json{{"train", {{"learning_rate", 0.1}}}}), config_error);
  CHECK_THROWS_AS(parse_run_config(json{{"synth", {{"classes", "five"}}}}), config_error);
  CHECK_THROWS_AS(parse_run_config(json{{"train", {{"void_policy", "ignore"}}}}), config_error);
  CHECK_THROWS_AS(parse_run_config(json{{"synth", {{"shape_kinds", {"triangle"}}}}}),
                  config_error);
  // crop larger than the synthetic image
  CHECK_THROWS_AS(
      parse_run_config(json{{"train", {{"crop", 64}}}, {"synth", {{"image_size", 32}}}}),
      config_error);
  CHECK_THROWS_AS(parse_run_config(json::array()), config_error);
}

namespace {

json tiny_run_config(const std::string& out_dir, int classes = 3) {
  return json{
      {"out_dir", out_dir},
      {"images", 10},
      {"train",
       {{"epochs", 1},
        {"batch_size", 4},
        {"crop", 16},
        {"clip", 8.0},
        {"trunk_width", 6},
        {"seed", 2}}},
      {"synth",
       {{"classes", classes}, {"image_size", 32}, {"noise_sigma", 0.1}, {"seed", 4}}},
  };
}

void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream(p) << j.dump(2) << "\n";
}

}  // namespace

TEST_CASE("CLI end-to-end behavior") {
  const std::string cli = testsup::cli_path();
  REQUIRE_FALSE(cli.empty());
  TempDir tmp("cli");

  SECTION("sdt writes a stack with one channel per class") {
    LabelMask mask(6, 4, 2);
    mask.at(1, 1) = 1;
    mask.at(2, 2) = 1;
    write_mask(mask, tmp.path("m.pgm"));

    const auto r = testsup::run_command(cli + " sdt --mask " + tmp.path("m.pgm").string() +
                                        " --out " + tmp.path("m.sdtf").string() + " --clip 32");
    CHECK(r.exit_code == 0);
    const FieldStack stack = read_field_stack(tmp.path("m.sdtf"));
    CHECK(stack.channels() == 2);
    CHECK(stack.width() == 6);
    CHECK(stack.height() == 4);
  }

  SECTION("sdt with clip 1 produces the binary-mask target") {
    LabelMask mask(5, 5, 2);
    mask.at(2, 2) = 1;
    write_mask(mask, tmp.path("m.pgm"));
    const auto r = testsup::run_command(cli + " sdt --mask " + tmp.path("m.pgm").string() +
                                        " --out " + tmp.path("m.sdtf").string() + " --clip 1");
    CHECK(r.exit_code == 0);
    const FieldStack stack = read_field_stack(tmp.path("m.sdtf"));
    for (const auto& f : stack.fields)
      for (double v : f.data) CHECK((v == 1.0 || v == -1.0));
  }

  SECTION("sdt on a missing file exits 2") {
    const auto r = testsup::run_command(cli + " sdt --mask " + tmp.path("none.pgm").string() +
                                        " --out " + tmp.path("x.sdtf").string());
    CHECK(r.exit_code == 2);
  }

  SECTION("train rejects malformed JSON with exit 2") {
    testsup::write_bytes(tmp.path("bad.json"), "{ not json");
    const auto r =
        testsup::run_command(cli + " train --config " + tmp.path("bad.json").string());
    CHECK(r.exit_code == 2);
  }

  SECTION("train rejects unknown keys with exit 2") {
    json doc = tiny_run_config((tmp.dir() / "run").string());
    doc["train"]["momentum"] = 0.9;
    write_json(tmp.path("cfg.json"), doc);
    const auto r =
        testsup::run_command(cli + " train --config " + tmp.path("cfg.json").string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("unknown key") != std::string::npos);
  }

  SECTION("gradcheck passes by default and fails when corrupted") {
    const auto ok = testsup::run_command(cli + " gradcheck --seed 1 --lambda 2");
    CHECK(ok.exit_code == 0);
    CHECK(ok.output.find("PASSED") != std::string::npos);

    const auto bad = testsup::run_command(cli + " gradcheck --seed 1 --lambda 2 --corrupt");
    CHECK(bad.exit_code == 4);
    CHECK(bad.output.find("FAILED") != std::string::npos);
  }

  SECTION("bench prints one row per size") {
    const auto r = testsup::run_command(cli + " bench --sizes 64 --runs 2");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("size") != std::string::npos);
  }

  SECTION("train, eval and infer round trip") {
    const std::string run_dir = (tmp.dir() / "run").string();
    write_json(tmp.path("cfg.json"), tiny_run_config(run_dir));
    const auto tr = testsup::run_command(cli + " train --config " + tmp.path("cfg.json").string());
    INFO(tr.output);
    REQUIRE(tr.exit_code == 0);
    CHECK(std::filesystem::exists(run_dir + "/final.sdtw"));
    CHECK(std::filesystem::exists(run_dir + "/train_log.jsonl"));
    CHECK(std::filesystem::exists(run_dir + "/checkpoints/epoch_000.sdtw"));
    CHECK(std::filesystem::exists(run_dir + "/metrics.json"));

    // the log is one JSON object per line with the documented keys
    std::ifstream log(run_dir + "/train_log.jsonl");
    std::string line;
    REQUIRE(std::getline(log, line));
    const json entry = json::parse(line);
    for (const char* key : {"epoch", "step", "lr", "nll", "l1", "total", "val_oa"})
      CHECK(entry.contains(key));

    const auto ev = testsup::run_command(cli + " eval --weights " + run_dir +
                                         "/final.sdtw --config " + tmp.path("cfg.json").string());
    REQUIRE(ev.exit_code == 0);
    const json report = json::parse(ev.output);
    CHECK(report.contains("oa"));
    CHECK(report.contains("miou"));
    CHECK(report["per_class_f1"].size() == 3);
    CHECK(report["pixels_evaluated"].get<std::int64_t>() > 0);

    // class-count mismatch between weights and dataset
    write_json(tmp.path("cfg4.json"), tiny_run_config(run_dir, 4));
    const auto bad = testsup::run_command(cli + " eval --weights " + run_dir +
                                          "/final.sdtw --config " +
                                          tmp.path("cfg4.json").string());
    CHECK(bad.exit_code == 2);

    // inference on a synthetic image written by the synth command
    json synth_cfg = tiny_run_config((tmp.dir() / "data").string());
    write_json(tmp.path("synth.json"), synth_cfg);
    const auto sy = testsup::run_command(cli + " synth --config " + tmp.path("synth.json").string());
    REQUIRE(sy.exit_code == 0);
    const auto inf = testsup::run_command(
        cli + " infer --weights " + run_dir + "/final.sdtw --image " +
        (tmp.dir() / "data" / "val" / "img_0000.sdtf").string() + " --out " +
        tmp.path("pred.pgm").string() + " --window 16");
    REQUIRE(inf.exit_code == 0);
    const LabelMask pred = read_mask(tmp.path("pred.pgm"));
    CHECK(pred.width == 32);
    CHECK(pred.height == 32);
  }
}
