#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "stgp/config.hpp"
#include "stgp/posterior.hpp"

using namespace stgp;

TEST_CASE("sectioned key=value text parses with comments and case folding", "[config]") {
  const std::string text =
      "# comment line\n"
      "[data]\n"
      "counts = a.csv\n"
      "  Locations = b.csv  \n"
      "; another comment\n"
      "population = c.csv\n"
      "horizon = 4\n"
      "\n"
      "[Model]\n"
      "time_kernel = matern32 + periodic\n"
      "space_kernel = matern32\n"
      "family = zinb\n"
      "len_time = 6.5\n"
      "[sampler]\n"
      "chains = 2\n"
      "warmup = 150\n"
      "samples = 75\n"
      "rhat_threshold = 1.2\n"
      "[run]\n"
      "seed = 11\n"
      "out = results\n";
  const app_config cfg = parse_config_text(text, "inline");
  CHECK(cfg.counts_path == "a.csv");
  CHECK(cfg.locations_path == "b.csv");
  CHECK(cfg.data_horizon == 4);
  CHECK(cfg.time_kernel_str == "matern32 + periodic");
  CHECK(cfg.family == family_kind::zi_neg_binomial);
  CHECK(cfg.family_set);
  REQUIRE(cfg.param_values.size() == 1);
  CHECK(cfg.param_values[0].first == "len_time");
  CHECK(cfg.param_values[0].second == 6.5);
  CHECK(cfg.sampler.n_chains == 2);
  CHECK(cfg.sampler.n_warmup == 150);
  CHECK(cfg.rhat_threshold == 1.2);
  CHECK(cfg.seed == 11);
  CHECK(cfg.out_dir == "results");
}

TEST_CASE("unknown sections and keys are named with their location", "[config]") {
  try {
    parse_config_text("[nope]\nx = 1\n", "cfg.ini");
    FAIL("expected a validation error");
  } catch (const validation_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("cfg.ini:1") != std::string::npos);
    CHECK(msg.find("[nope]") != std::string::npos);
  }

  try {
    parse_config_text("[sampler]\nchians = 4\n", "cfg.ini");
    FAIL("expected a validation error");
  } catch (const validation_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("cfg.ini:2") != std::string::npos);
    CHECK(msg.find("chians") != std::string::npos);
  }

  CHECK_THROWS_AS(parse_config_text("[data\ncounts = x\n", "c"), validation_error);
  CHECK_THROWS_AS(parse_config_text("counts = x\n", "c"), validation_error);
  CHECK_THROWS_AS(parse_config_text("[data]\ncounts =\n", "c"), validation_error);
  CHECK_THROWS_AS(parse_config_text("[sampler]\nchains = two\n", "c"), validation_error);
  CHECK_THROWS_AS(parse_config_text("[sampler]\nchains = 2.5\n", "c"), validation_error);
  CHECK_THROWS_AS(parse_config_text("[model]\ninteraction = maybe\n", "c"), validation_error);
}

TEST_CASE("misspelled model parameters surface as unknown keys", "[config]") {
  app_config cfg = parse_config_text("[model]\npreset = model2\nlenght_time = 6\n", "c");
  try {
    make_model_spec(cfg);
    FAIL("expected a validation error");
  } catch (const validation_error& e) {
    CHECK(std::string(e.what()).find("lenght_time") != std::string::npos);
  }

  // correctly spelled slot names are applied to the kernels
  cfg = parse_config_text(
      "[model]\npreset = model2\nlen_time = 6\nsigma_time = 0.5\nbias_var = 0.25\n", "c");
  const model_spec spec = make_model_spec(cfg);
  kernel_expr bias_node;
  const kernel_expr full = assemble_kernel(spec, &bias_node);
  const auto slots = collect_slots(full);
  REQUIRE(slots.size() == 5);
  CHECK(slots[0].node->params.lengthscale == 6.0);
  CHECK(slots[1].node->params.variance == Catch::Approx(0.25)); // sigma given, stored as variance
  CHECK(bias_node->params.variance == Catch::Approx(0.25));     // bias given as variance directly

  CHECK_THROWS_AS(
      make_model_spec(parse_config_text("[model]\npreset = model2\nlen_time = -1\n", "c")),
      validation_error);
}

TEST_CASE("kernel expression grammar covers composition and grouping", "[config]") {
  const kernel_expr sum = parse_kernel_expr("matern32 + periodic", {0}, 52.0);
  CHECK(sum->kind == kernel_kind::sum);
  CHECK(sum->left->kind == kernel_kind::matern32);
  CHECK(sum->right->kind == kernel_kind::periodic);
  CHECK(sum->right->params.period == 52.0);

  const kernel_expr prod = parse_kernel_expr("rbf * matern32", {1, 2}, 52.0);
  CHECK(prod->kind == kernel_kind::product);

  // '*' binds tighter than '+'
  const kernel_expr mixed = parse_kernel_expr("bias + rbf * matern32", {0}, 52.0);
  CHECK(mixed->kind == kernel_kind::sum);
  CHECK(mixed->left->kind == kernel_kind::bias);
  CHECK(mixed->right->kind == kernel_kind::product);

  const kernel_expr grouped = parse_kernel_expr("(bias + rbf) * matern32", {0}, 52.0);
  CHECK(grouped->kind == kernel_kind::product);
  CHECK(grouped->left->kind == kernel_kind::sum);

  try {
    parse_kernel_expr("matern32 + wavelet", {0}, 52.0);
    FAIL("expected a validation error");
  } catch (const validation_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("wavelet") != std::string::npos);
    CHECK(msg.find("position") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_kernel_expr("matern32 +", {0}, 52.0), validation_error);
  CHECK_THROWS_AS(parse_kernel_expr("(matern32", {0}, 52.0), validation_error);
  CHECK_THROWS_AS(parse_kernel_expr("matern32 rbf", {0}, 52.0), validation_error);
  CHECK_THROWS_AS(parse_kernel_expr("", {0}, 52.0), validation_error);
}

TEST_CASE("presets expand to the documented model ladder", "[config]") {
  struct expect {
    const char* preset;
    kernel_kind time_kind; // top node of the time kernel
    kernel_kind space_kind;
    family_kind fam;
  };
  const expect table[] = {
      {"model1", kernel_kind::rbf, kernel_kind::matern32, family_kind::neg_binomial},
      {"model2", kernel_kind::matern32, kernel_kind::matern32, family_kind::neg_binomial},
      {"model3", kernel_kind::sum, kernel_kind::matern32, family_kind::neg_binomial},
      {"model4", kernel_kind::sum, kernel_kind::rbf, family_kind::neg_binomial},
      {"model5", kernel_kind::sum, kernel_kind::matern32, family_kind::zi_neg_binomial},
      {"model6", kernel_kind::periodic, kernel_kind::matern32, family_kind::neg_binomial},
  };
  for (const auto& e : table) {
    app_config cfg;
    cfg.preset = e.preset;
    const model_spec spec = make_model_spec(cfg);
    CHECK(spec.time_kernel->kind == e.time_kind);
    CHECK(spec.space_kernel->kind == e.space_kind);
    CHECK(spec.family == e.fam);
    apply_preset(cfg);
    CHECK(cfg.model_name == e.preset);
  }

  // explicit keys beat the preset
  app_config cfg = parse_config_text("[model]\npreset = model1\ntime_kernel = matern32\n", "c");
  const model_spec spec = make_model_spec(cfg);
  CHECK(spec.time_kernel->kind == kernel_kind::matern32);

  app_config bad;
  bad.preset = "model7";
  CHECK_THROWS_AS(make_model_spec(bad), validation_error);

  app_config none;
  CHECK_THROWS_AS(make_model_spec(none), validation_error);
}

TEST_CASE("simulation config inherits the model and true family parameters", "[config]") {
  const app_config cfg = parse_config_text("[model]\npreset = model5\nphi = 0.3\nlambda = -0.5\n"
                                           "[simulate]\nlocations = 7\nweeks = 12\n"
                                           "[run]\nseed = 17\n",
                                           "c");
  const sim_config sc = make_sim_config(cfg);
  CHECK(sc.n_locations == 7);
  CHECK(sc.n_weeks == 12);
  CHECK(sc.phi == 0.3);
  CHECK(sc.lambda == -0.5);
  CHECK(sc.seed == 17);
  CHECK(sc.spec.family == family_kind::zi_neg_binomial);
}

TEST_CASE("posterior thinning spreads indices chain-major and caps at the supply", "[config]") {
  const auto idx = thin_indices(4, 1000, 200);
  REQUIRE(idx.size() == 200);
  CHECK(idx[0] == std::pair<int, int>(0, 0));
  CHECK(idx[49] == std::pair<int, int>(0, 980));
  CHECK(idx[50] == std::pair<int, int>(1, 0));
  // evenly spaced: k * 1000 / 50
  for (int k = 0; k < 50; ++k) CHECK(idx[static_cast<std::size_t>(k)].second == k * 20);

  // asking for more than exists returns every draw once
  const auto all = thin_indices(2, 5, 100);
  REQUIRE(all.size() == 10);
  CHECK(all[4] == std::pair<int, int>(0, 4));
  CHECK(all[9] == std::pair<int, int>(1, 4));

  CHECK_THROWS_AS(thin_indices(0, 5, 10), validation_error);
  CHECK_THROWS_AS(thin_indices(2, 5, 0), validation_error);
}
