#include <doctest.h>

#include "ntq/runconfig.hpp"

using namespace ntq;

TEST_CASE("runconfig: defaults, JSON overrides, unknown fields ignored") {
  const RunConfig def;
  CHECK(def.seed == 1);
  CHECK(def.quant.bits == 4);
  CHECK(def.tweak.lr0 == 1e-5);
  CHECK(def.tweak.iters == 1);
  CHECK(def.calib.n_samples == 16);
  CHECK(def.calib.token_length == 128);
  CHECK(def.model.vocab_size == 512);
  CHECK(def.model.hidden == 128);
  CHECK(def.model.n_layers == 4);

  const RunConfig c = RunConfig::from_json_text(R"({
    "seed": 42,
    "quant": {"bits": 2, "group_size": 64},
    "tweak": {"loss": "kl", "iters": 3},
    "model": {"hidden": 64, "n_heads": 8},
    "calib": {"source": "gaussian"}
  })");
  CHECK(c.seed == 42);
  CHECK(c.quant.bits == 2);
  CHECK(c.quant.group_size == 64);
  CHECK(c.tweak.loss_kind == TweakConfig::Loss::kKl);
  CHECK(c.tweak.iters == 3);
  CHECK(c.model.hidden == 64);
  CHECK(c.model.n_heads == 8);
  CHECK(c.model.vocab_size == 512);  // untouched default
  CHECK(c.calib.source == "gaussian");
}

TEST_CASE("runconfig: bad JSON and bad enums raise ConfigError") {
  CHECK_THROWS_AS(RunConfig::from_json_text("{nope"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"tweak": {"loss": "huber"}})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"model": {"norm_kind": "scalenorm"}})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"seed": "not-a-number"})"), ConfigError);
}

TEST_CASE("runconfig: run id is stable and sensitive to every field") {
  const RunConfig a = RunConfig::from_json_text(R"({"seed": 7})");
  const RunConfig b = RunConfig::from_json_text(R"({"seed": 7})");
  CHECK(a.run_id() == b.run_id());
  CHECK(a.run_id().size() == 16);

  const RunConfig c = RunConfig::from_json_text(R"({"seed": 8})");
  CHECK(a.run_id() != c.run_id());
  const RunConfig d = RunConfig::from_json_text(R"({"seed": 7, "quant": {"bits": 8}})");
  CHECK(a.run_id() != d.run_id());

  CHECK(a.provenance_json().find(a.run_id()) != std::string::npos);
  CHECK(a.provenance_json().find(kArtifactVersion) != std::string::npos);
}

TEST_CASE("runconfig: canonical json round-trips through the parser") {
  const RunConfig a = RunConfig::from_json_text(R"({
    "seed": 11, "out": "x", "quantizer": "smoothquant",
    "compare": {"methods": [{"name": "f", "path": "p"}], "datasets": [{"name": "d", "path": "q"}]}
  })");
  const RunConfig b = RunConfig::from_json_text(a.canonical_json());
  CHECK(a.run_id() == b.run_id());
  CHECK(b.compare.methods.size() == 1);
  CHECK(b.compare.methods[0].first == "f");
}
