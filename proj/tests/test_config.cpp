#include "doctest.h"

#include "e2ebt/config.hpp"

#include <cstdlib>
#include <fstream>

using namespace e2ebt;
namespace fs = std::filesystem;

TEST_CASE("config text sets typed values and ignores comments") {
  RunConfig c;
  c.apply_text(
      "# toy run\n"
      "seed = 7\n"
      "\n"
      "bt.lambda_x = 0.02   # stronger\n"
      "bt.latent_method = gst\n"
      "bt.share_embeddings = false\n"
      "paths.work = /tmp/w\n"
      "lm.layers = 3\n");
  CHECK(c.seed == 7);
  CHECK(c.bt.lambda_x == 0.02);
  CHECK(c.bt.latent_method == LatentMethod::gst);
  CHECK_FALSE(c.bt.share_embeddings);
  CHECK(c.paths.work == fs::path("/tmp/w"));
  CHECK(c.lm.decoder_layers == 3);
}

TEST_CASE("unknown keys and malformed values are rejected with a location") {
  RunConfig c;
  CHECK_THROWS_WITH_AS(c.apply_text("bt.lambda = 1\n", "f"), doctest::Contains("f:1: unknown config key"), ConfigError);
  CHECK_THROWS_WITH_AS(c.apply_text("\nmodel.width = wide\n", "f"), doctest::Contains("f:2"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("model.width = 32x\n"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("bt.share_embeddings = maybe\n"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("just words\n"), ConfigError);
  CHECK_THROWS_AS(c.set("seed", "-1"), ConfigError);
}

TEST_CASE("a dumped config reads back to the same values") {
  RunConfig a;
  a.apply_text("seed = 11\nbt.alpha_y = 0.125\nmodel.dropout = 0.3\ndata.window = 4\n");
  RunConfig b;
  b.apply_text(a.to_text());
  CHECK(b.to_text() == a.to_text());
  for (const auto& key : RunConfig::keys()) CHECK(a.get(key) == b.get(key));
}

TEST_CASE("overrides beat the file, which beats the environment seed") {
  const fs::path path = fs::temp_directory_path() / "e2ebt_config_test.conf";
  {
    std::ofstream out(path);
    out << "bt.max_iters = 50\n";
  }
  setenv("E2EBT_SEED", "42", 1);
  RunConfig c = load_run_config(path, {"bt.lr=0.5"});
  CHECK(c.seed == 42);
  CHECK(c.bt.max_iters == 50);
  CHECK(c.bt.lr == 0.5);
  c = load_run_config(path, {"seed = 5"});
  CHECK(c.seed == 5);
  {
    std::ofstream out(path, std::ios::app);
    out << "seed = 9\n";
  }
  CHECK(load_run_config(path, {}).seed == 9);
  unsetenv("E2EBT_SEED");
  CHECK(load_run_config(std::nullopt, {}).seed == 1);
  CHECK_THROWS_AS(load_run_config(path, {"nonsense"}), ConfigError);
  CHECK_THROWS_AS(load_run_config(fs::temp_directory_path() / "e2ebt_missing.conf", {}), ConfigError);
  fs::remove(path);
}

TEST_CASE("the AS horizon follows max_iters unless set") {
  RunConfig c;
  c.apply_text("bt.max_iters = 800\nseed = 3\n");
  CHECK(c.resolved_bt().as_total_iters == 800);
  CHECK(c.resolved_bt().seed == 3);
  c.set("bt.as_total_iters", "100");
  CHECK(c.resolved_bt().as_total_iters == 100);
  c.set("bt.lambda_y", "-1");
  CHECK_THROWS(c.resolved_bt());
}
