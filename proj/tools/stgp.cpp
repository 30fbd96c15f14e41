#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "stgp/commands.hpp"
#include "stgp/config.hpp"
#include "stgp/errors.hpp"

namespace {

struct cli_args {
  std::string config_path;
  std::string out_dir;
  std::string preset;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> runs;
};

void add_common(CLI::App* sub, cli_args& args) {
  sub->add_option("config", args.config_path, "config file (INI-style)")->required();
  sub->add_option("--out", args.out_dir, "output directory (overrides [run] out)");
  sub->add_option("--preset", args.preset, "model preset, model1..model6 (overrides [model] preset)");
  auto* seed_opt = sub->add_option("--seed", args.seed, "RNG seed (overrides [run] seed)");
  sub->final_callback([seed_opt, &args] { args.seed_set = seed_opt->count() > 0; });
}

stgp::app_config load_config(const cli_args& args) {
  stgp::app_config cfg = stgp::parse_config_file(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (!args.preset.empty()) cfg.preset = args.preset;
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.runs.empty()) cfg.compare_runs = args.runs;
  return cfg;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatio-temporal count model toolkit"};
  app.require_subcommand(1);

  cli_args args;
  auto* sim = app.add_subcommand("simulate", "generate a synthetic count panel");
  auto* fit = app.add_subcommand("fit", "sample the posterior by HMC");
  auto* pred = app.add_subcommand("predict", "forecast future weeks from a fitted run");
  auto* eval = app.add_subcommand("evaluate", "score a fitted run (LOO, p-value, CRPS)");
  auto* cmp = app.add_subcommand("compare", "rank several evaluated runs");
  for (auto* sub : {sim, fit, pred, eval, cmp}) add_common(sub, args);
  cmp->add_option("runs", args.runs, "evaluated run directories (overrides [compare] runs)");

  CLI11_PARSE(app, argc, argv);

  try {
    const stgp::app_config cfg = load_config(args);
    if (sim->parsed()) stgp::cmd_simulate(cfg);
    else if (fit->parsed()) stgp::cmd_fit(cfg);
    else if (pred->parsed()) stgp::cmd_predict(cfg);
    else if (eval->parsed()) stgp::cmd_evaluate(cfg);
    else if (cmp->parsed()) stgp::cmd_compare(cfg);
  } catch (const stgp::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
