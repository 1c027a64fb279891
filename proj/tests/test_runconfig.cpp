#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cvc/runconfig.hpp"

using namespace cvc;

TEST_CASE("defaults mirror the full-scale setup") {
  RunConfig cfg;
  CHECK(cfg.model.image_size == 224);
  CHECK(cfg.model.enc_dim == 768);
  CHECK(cfg.model.mask_ratio == 0.9);
  CHECK(cfg.base_lr == 1.5e-4);
  CHECK(cfg.weight_decay == 0.05);
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.95);
  CHECK(cfg.epochs == 400);
  CHECK(cfg.warmup_epochs == 40);
  CHECK(cfg.warmup_lr == 1e-6);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("text round trip preserves every key") {
  RunConfig cfg;
  cfg.set("image_size", "64");
  cfg.set("patch", "8");
  cfg.set("enc_depth", "4");
  cfg.set("enc_dim", "64");
  cfg.set("enc_heads", "4");
  cfg.set("dec_depth", "2");
  cfg.set("dec_dim", "48");
  cfg.set("decoder_variant", "cat");
  cfg.set("mask_ratio", "0.75");
  cfg.set("base_lr", "0.003");
  cfg.set("data_manifest", "some/dir/pairs.jsonl");
  cfg.set("swap_views", "false");
  RunConfig back = RunConfig::from_text(cfg.to_text());
  for (const auto& k : RunConfig::keys()) CHECK(back.get(k) == cfg.get(k));
}

TEST_CASE("comments, blanks and spacing are accepted") {
  RunConfig cfg = RunConfig::from_text(
      "# a comment\n"
      "\n"
      "  image_size = 64   # trailing comment\n"
      "patch=8\n"
      "enc_dim=64\nenc_heads=4\ndec_dim=48\ndec_heads=4\n");
  CHECK(cfg.model.image_size == 64);
  CHECK(cfg.model.patch == 8);
}

TEST_CASE("bad inputs are configuration errors with context") {
  CHECK_THROWS_AS(RunConfig::from_text("nonsense line\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("unknown_key=3\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("mask_ratio=not_a_number\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("mask_ratio=1.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("base_lr=-1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("batch_size=0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("decoder_variant=bogus\n"), ConfigError);
  try {
    RunConfig::from_text("epochs=twelve\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("epochs") != std::string::npos);
  }
}

TEST_CASE("file round trip") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cvc_runconfig.cfg").string();
  RunConfig cfg;
  cfg.set("seed", "1234");
  cfg.set("checkpoint_every", "50");
  cfg.write_file(path);
  RunConfig back = RunConfig::from_file(path);
  CHECK(back.seed == 1234);
  CHECK(back.checkpoint_every == 50);
  fs::remove(path);
  CHECK_THROWS_AS(RunConfig::from_file("/missing/nowhere.cfg"), ConfigError);
}
