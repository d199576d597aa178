#include <catch2/catch_amalgamated.hpp>

#include "flowcast/config.hpp"
#include "helpers.hpp"

using namespace flowcast;

namespace {

const char* kFullConfig = R"(
# toy experiment
[dataset]
source = banana
n = 2000
seed = 11
recipe = none

[model]
family = maf
num_layers = 5
hidden_layers = 1
hidden_units = 32
activation = relu
seed = 3

[train]
batch = 100
max_epochs = 50
seed = 9

[output]
dir = runs/toy
)";

}  // namespace

TEST_CASE("config parsing fills defaults and reads values") {
  ExperimentConfig cfg = parse_experiment_config_text(kFullConfig);
  REQUIRE(cfg.dataset.source == "banana");
  REQUIRE(cfg.dataset.n == 2000);
  REQUIRE(cfg.model.family == "maf");
  REQUIRE(cfg.model.num_layers == 5);
  REQUIRE(cfg.model.hidden_units == 32);
  REQUIRE(cfg.train.batch == 100);
  REQUIRE(cfg.train.max_epochs == 50);
  REQUIRE(cfg.output_dir == "runs/toy");
  // family default: flows use the smaller step
  REQUIRE(cfg.train.step_size == 1e-4);
  // fixed optimizer defaults
  REQUIRE(cfg.train.beta1 == 0.9);
  REQUIRE(cfg.train.beta2 == 0.999);
  REQUIRE(cfg.train.adam_eps == 1e-8);
  REQUIRE(cfg.train.l2 == 1e-6);
  REQUIRE(cfg.train.patience == 30);
}

TEST_CASE("single-layer families default to the larger step size") {
  ExperimentConfig cfg = parse_experiment_config_text(
      "[dataset]\nsource = banana\n[model]\nfamily = made\n");
  REQUIRE(cfg.train.step_size == 1e-3);
}

TEST_CASE("config round trip is the identity") {
  ExperimentConfig cfg = parse_experiment_config_text(kFullConfig);
  const std::string text1 = serialize_experiment_config(cfg);
  ExperimentConfig cfg2 = parse_experiment_config_text(text1);
  const std::string text2 = serialize_experiment_config(cfg2);
  REQUIRE(text1 == text2);
}

TEST_CASE("unknown keys name themselves and the allowed set") {
  try {
    parse_experiment_config_text("[model]\nfamly = maf\n");
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("famly") != std::string::npos);
    REQUIRE(msg.find("family") != std::string::npos);
    REQUIRE(msg.find("hidden_units") != std::string::npos);
  }
}

TEST_CASE("unknown family lists the five families") {
  try {
    parse_experiment_config_text("[dataset]\nsource = banana\n[model]\nfamily = glow\n");
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    for (const char* f : {"made", "made_mog", "realnvp", "maf", "maf_mog"})
      REQUIRE(msg.find(f) != std::string::npos);
  }
}

TEST_CASE("family-specific keys are validated") {
  REQUIRE_THROWS_AS(parse_experiment_config_text(
                        "[dataset]\nsource = banana\n[model]\nfamily = made\ncomponents = 10\n"),
                    UsageError);
  REQUIRE_THROWS_AS(parse_experiment_config_text(
                        "[dataset]\nsource = banana\n[model]\nfamily = made\nnum_layers = 5\n"),
                    UsageError);
  // and accepted where they apply
  ExperimentConfig ok = parse_experiment_config_text(
      "[dataset]\nsource = banana\n[model]\nfamily = maf_mog\nnum_layers = 3\ncomponents = 7\n");
  REQUIRE(ok.model.components == 7);
}

TEST_CASE("malformed values and sections are rejected") {
  REQUIRE_THROWS_AS(parse_experiment_config_text("[model]\nfamily = maf\nhidden_units = many\n"),
                    UsageError);
  REQUIRE_THROWS_AS(parse_experiment_config_text("[mystery]\nkey = 1\n"), UsageError);
  REQUIRE_THROWS_AS(parse_experiment_config_text("family = maf\n"), UsageError);
  REQUIRE_THROWS_AS(parse_experiment_config_text("[dataset]\nsource = visions\n"), UsageError);
  REQUIRE_THROWS_AS(parse_experiment_config_text("[dataset]\nsource = file\n"), UsageError);
}

TEST_CASE("orders parse from comma lists") {
  ExperimentConfig cfg = parse_experiment_config_text(
      "[dataset]\nsource = banana\n[model]\nfamily = made\norder = 2,1\n");
  REQUIRE(cfg.model.order == Order{2, 1});
}
