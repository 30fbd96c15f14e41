#pragma once

#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stgp/config.hpp"
#include "stgp/data.hpp"
#include "stgp/errors.hpp"
#include "stgp/forecast.hpp"
#include "stgp/model.hpp"
#include "stgp/posterior.hpp"
#include "stgp/scoring.hpp"
#include "stgp/simulate.hpp"
#include "stgp/util.hpp"

namespace stgp {

namespace detail {

inline std::string iso_timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[40];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

} // namespace detail

// Everything that pins a fitted model's identity: resolved kernels, family,
// priors, inducing policy and the train/test horizon. Artifacts written by
// one command are only consumed by another when these hashes agree.
inline std::uint64_t model_identity_hash(const app_config& cfg_in) {
  app_config cfg = cfg_in;
  apply_preset(cfg);
  std::ostringstream s;
  s << "time=" << cfg.time_kernel_str << "\nspace=" << cfg.space_kernel_str
    << "\ninteraction=" << cfg.interaction << "\nbias=" << cfg.bias
    << "\nfamily=" << static_cast<int>(cfg.family) << "\nperiod=" << format_double(cfg.period)
    << "\nstride=" << cfg.stride << "\ninclude_final=" << cfg.include_final
    << "\nhorizon=" << cfg.data_horizon << "\npriors=" << format_double(cfg.priors.ig_alpha) << ','
    << format_double(cfg.priors.ig_beta) << ',' << format_double(cfg.priors.sigma_scale) << ','
    << format_double(cfg.priors.bias_sigma_scale) << ','
    << format_double(cfg.priors.inv_sqrt_phi_scale) << ',' << format_double(cfg.priors.lambda_mean)
    << ',' << format_double(cfg.priors.lambda_sd) << "\nparams=";
  for (const auto& [k, v] : cfg.param_values) s << k << '=' << format_double(v) << ';';
  return fnv1a(s.str());
}

struct run_manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string config_hash;  // full config text
  std::string model_hash;   // resolved model identity
  std::string dataset_hash; // content hash of the loaded/produced dataset
  int horizon = 0;
  std::string created;
  std::string config_echo;
};

inline void write_manifest(const std::string& out_dir, const run_manifest& m) {
  nlohmann::json j;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["model_hash"] = m.model_hash;
  j["dataset_hash"] = m.dataset_hash;
  j["horizon"] = m.horizon;
  j["created"] = m.created;
  j["config"] = m.config_echo;
  const std::string path = out_dir + "/manifest_" + m.command + ".json";
  std::ofstream out(path);
  if (!out) throw validation_error(path + ": cannot write");
  out << j.dump(2) << '\n';
}

inline run_manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw validation_error(path + ": cannot open manifest");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw validation_error(path + ": malformed manifest: " + e.what());
  }
  run_manifest m;
  m.command = j.value("command", "");
  m.seed = j.value("seed", std::uint64_t{0});
  m.config_hash = j.value("config_hash", "");
  m.model_hash = j.value("model_hash", "");
  m.dataset_hash = j.value("dataset_hash", "");
  m.horizon = j.value("horizon", 0);
  m.created = j.value("created", "");
  m.config_echo = j.value("config", "");
  return m;
}

// Refuses to mix configurations inside one output directory.
inline void check_out_dir(const std::string& out_dir, const std::string& config_hash) {
  namespace fs = std::filesystem;
  if (!fs::exists(out_dir)) return;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("manifest_", 0) != 0 || entry.path().extension() != ".json") continue;
    const run_manifest m = read_manifest(entry.path().string());
    if (m.config_hash != config_hash)
      throw validation_error(out_dir + ": already holds results for a different configuration (" +
                             name + "); use a fresh output directory");
  }
}

namespace detail {

inline std::string require_out(const app_config& cfg) {
  if (cfg.out_dir.empty())
    throw validation_error("no output directory configured; pass --out or set [run] out");
  std::filesystem::create_directories(cfg.out_dir);
  check_out_dir(cfg.out_dir, hex64(fnv1a(cfg.raw_text)));
  return cfg.out_dir;
}

inline dataset load_data(const app_config& cfg) {
  if (cfg.counts_path.empty() || cfg.locations_path.empty() || cfg.population_path.empty())
    throw validation_error("config [data]: counts, locations and population paths are required");
  return load_dataset(cfg.counts_path, cfg.locations_path, cfg.population_path);
}

inline run_manifest base_manifest(const app_config& cfg, const std::string& command) {
  run_manifest m;
  m.command = command;
  m.seed = cfg.seed;
  m.config_hash = hex64(fnv1a(cfg.raw_text));
  m.model_hash = hex64(model_identity_hash(cfg));
  m.horizon = cfg.data_horizon;
  m.created = iso_timestamp();
  m.config_echo = cfg.raw_text;
  return m;
}

inline std::string model_label(const app_config& cfg_in) {
  app_config cfg = cfg_in;
  apply_preset(cfg);
  return cfg.model_name.empty() ? std::string("model") : cfg.model_name;
}

inline run_manifest require_fit_manifest(const app_config& cfg, const std::string& out_dir,
                                         std::uint64_t data_hash) {
  const std::string path = out_dir + "/manifest_fit.json";
  if (!std::filesystem::exists(path))
    throw validation_error(path + ": no fit manifest; run `fit` into this directory first");
  const run_manifest m = read_manifest(path);
  if (m.model_hash != hex64(model_identity_hash(cfg)))
    throw validation_error(out_dir + ": samples were fitted under a different model configuration");
  if (m.dataset_hash != hex64(data_hash))
    throw validation_error(out_dir + ": samples were fitted on a different dataset");
  if (m.horizon != cfg.data_horizon)
    throw validation_error(out_dir + ": samples were fitted with horizon " +
                           std::to_string(m.horizon) + ", config requests " +
                           std::to_string(cfg.data_horizon));
  return m;
}

} // namespace detail

inline void cmd_simulate(const app_config& cfg) {
  const std::string out = detail::require_out(cfg);
  const sim_config sc = make_sim_config(cfg);
  const sim_result sim = simulate(sc);

  save_dataset(sim.data, out + "/counts.csv", out + "/locations.csv", out + "/population.csv");
  {
    std::ofstream tf(out + "/truth_params.csv");
    if (!tf) throw validation_error(out + "/truth_params.csv: cannot write");
    tf << "parameter,value\n";
    for (const auto& [name, value] : sim.truth) tf << name << ',' << format_double(value) << '\n';
  }
  {
    std::ofstream lf(out + "/truth_latent.csv");
    if (!lf) throw validation_error(out + "/truth_latent.csv: cannot write");
    lf << "location_id,week,f\n";
    for (Eigen::Index i = 0; i < sim.data.n_locations(); ++i)
      for (Eigen::Index j = 0; j < sim.data.n_weeks(); ++j)
        lf << sim.data.locations[static_cast<std::size_t>(i)].id << ','
           << sim.data.weeks[static_cast<std::size_t>(j)] << ','
           << format_double(sim.latent(i, j)) << '\n';
  }

  run_manifest m = detail::base_manifest(cfg, "simulate");
  m.dataset_hash = hex64(dataset_hash(sim.data));
  write_manifest(out, m);

  std::cout << "simulate: wrote " << sim.data.n_locations() << " locations x "
            << sim.data.n_weeks() << " weeks to " << out << "\n";
}

inline void cmd_fit(const app_config& cfg) {
  const std::string out = detail::require_out(cfg);
  const dataset full = detail::load_data(cfg);
  const auto [train, test] = train_test_split(full, cfg.data_horizon);
  (void)test;

  const latent_count_model model(make_model_spec(cfg), train);
  hmc_options opt = cfg.sampler;
  opt.seed = cfg.seed;
  const fit_result fit = fit_hmc(model, opt);

  write_samples_csv(out + "/samples.csv", fit.samples);
  const auto summary = fit.samples.summarize();
  {
    std::ofstream sf(out + "/summary.csv");
    if (!sf) throw validation_error(out + "/summary.csv: cannot write");
    sf << "parameter,mean,q02.5,q50,q97.5,rhat\n";
    for (const auto& r : summary)
      sf << r.name << ',' << format_double(r.mean) << ',' << format_double(r.q025) << ','
         << format_double(r.q50) << ',' << format_double(r.q975) << ',' << format_double(r.rhat)
         << '\n';
  }
  {
    std::ofstream cf(out + "/convergence.txt");
    if (!cf) throw validation_error(out + "/convergence.txt: cannot write");
    cf << "max_rhat " << format_double(fit.max_rhat) << "\n";
    cf << "rhat_threshold " << format_double(cfg.rhat_threshold) << "\n";
    for (std::size_t c = 0; c < fit.chains.size(); ++c)
      cf << "chain " << c << ": accept_rate " << format_double(fit.chains[c].accept_rate)
         << " step_size " << format_double(fit.chains[c].step_size) << " divergences "
         << fit.chains[c].divergences << "\n";
    cf << "latent_clamp_activations " << fit.clamp_count << "\n";
  }

  run_manifest m = detail::base_manifest(cfg, "fit");
  m.dataset_hash = hex64(dataset_hash(full));
  write_manifest(out, m);

  std::cout << "fit: " << detail::model_label(cfg) << " on " << train.n_locations()
            << " locations x " << train.n_weeks() << " weeks\n";
  for (const auto& r : summary)
    if (r.name.rfind("v[", 0) != 0)
      std::cout << "  " << r.name << ": median " << format_double(r.q50) << "  95% ["
                << format_double(r.q025) << ", " << format_double(r.q975) << "]  rhat "
                << format_double(r.rhat) << "\n";
  std::cout << "fit: max R-hat " << format_double(fit.max_rhat) << "\n";

  if (!(fit.max_rhat < cfg.rhat_threshold))
    throw convergence_error("max R-hat " + format_double(fit.max_rhat) + " is not below " +
                            format_double(cfg.rhat_threshold) + "; samples were written to " + out);
}

inline void cmd_predict(const app_config& cfg) {
  const std::string out = detail::require_out(cfg);
  const dataset full = detail::load_data(cfg);
  const auto [train, test] = train_test_split(full, cfg.data_horizon);
  (void)test;
  detail::require_fit_manifest(cfg, out, dataset_hash(full));

  const latent_count_model model(make_model_spec(cfg), train);
  const posterior_samples samples = read_samples_csv(out + "/samples.csv");

  if (cfg.forecast_horizon < 1) throw validation_error("config [forecast] horizon: must be >= 1");
  const int last_train = train.weeks.back();
  std::vector<int> future_weeks;
  for (int h = 1; h <= cfg.forecast_horizon; ++h) future_weeks.push_back(last_train + h);

  // Week columns present in the file are used as-is; beyond the panel the
  // latest known population carries forward.
  Eigen::MatrixXd pops(full.n_locations(), cfg.forecast_horizon);
  for (int h = 0; h < cfg.forecast_horizon; ++h) {
    Eigen::Index src = -1;
    for (std::size_t j = 0; j < full.weeks.size(); ++j)
      if (full.weeks[j] == future_weeks[static_cast<std::size_t>(h)]) src = static_cast<Eigen::Index>(j);
    pops.col(h) = src >= 0 ? full.populations.col(src)
                           : full.populations.col(static_cast<Eigen::Index>(train.n_weeks()) - 1);
  }

  forecast_options fopt;
  fopt.n_draws = cfg.forecast_draws;
  fopt.perturb = cfg.perturb;
  fopt.seed = cfg.seed;
  const forecast_result fc = forecast_counts(model, samples, future_weeks, pops, fopt);

  write_forecast_csv(out + "/forecast.csv", fc);
  write_forecast_geojson(out + "/forecast.geojson", fc, full.locations);

  run_manifest m = detail::base_manifest(cfg, "predict");
  m.dataset_hash = hex64(dataset_hash(full));
  write_manifest(out, m);

  std::cout << "predict: wrote " << fc.n_cells() << " forecast rows (" << full.n_locations()
            << " locations x " << cfg.forecast_horizon << " weeks) to " << out << "\n";
}

inline void cmd_evaluate(const app_config& cfg) {
  const std::string out = detail::require_out(cfg);
  const dataset full = detail::load_data(cfg);
  const auto [train, test] = train_test_split(full, cfg.data_horizon);
  detail::require_fit_manifest(cfg, out, dataset_hash(full));

  const latent_count_model model(make_model_spec(cfg), train);
  const posterior_samples samples = read_samples_csv(out + "/samples.csv");
  if (samples.names != model.names())
    throw validation_error(out + "/samples.csv: parameter names do not match the configured model");

  score_report report;
  report.model_name = detail::model_label(cfg);
  report.data_hash = dataset_hash(full);

  const loglik_matrix llm = build_loglik_matrix(model, samples, cfg.score_draws);
  const loo_result loo = loo_estimate(llm);
  report.elpd = loo.elpd;
  report.looic = loo.looic;
  report.p_loo = loo.p_loo;
  report.pareto_k = loo.khat;
  for (const auto& w : loo.warnings) std::cout << "evaluate: warning: " << w << "\n";

  const tukey_result tukey = bayesian_pvalue(model, samples, cfg.score_draws, cfg.seed);
  report.bayes_p = tukey.p;
  report.tukey_obs = tukey.obs;
  report.tukey_sim = tukey.sim;

  if (test.n_weeks() > 0) {
    forecast_options fopt;
    fopt.n_draws = cfg.forecast_draws;
    fopt.perturb = cfg.perturb;
    fopt.seed = cfg.seed;
    const forecast_result fc = forecast_counts(model, samples, test.weeks, test.populations, fopt);

    const Eigen::Index H = test.n_weeks();
    std::map<int, std::pair<double, int>> week_acc; // week -> (sum, count)
    int covered = 0, held_out = 0;
    for (Eigen::Index i = 0; i < test.n_locations(); ++i)
      for (Eigen::Index h = 0; h < H; ++h) {
        if (!test.observed(i, h)) continue;
        const Eigen::Index c = i * H + h;
        const double y = static_cast<double>(test.counts(i, h));
        Eigen::VectorXd draws = fc.count_draws.col(c);
        const double crps = crps_split(draws, y);
        auto& acc = week_acc[test.weeks[static_cast<std::size_t>(h)]];
        acc.first += crps;
        acc.second += 1;
        ++held_out;
        if (fc.q025[c] <= y && y <= fc.q975[c]) ++covered;
      }
    double crps_sum = 0.0;
    for (const auto& [week, acc] : week_acc) {
      report.crps_by_week[week] = acc.first / acc.second;
      crps_sum += report.crps_by_week[week];
    }
    if (!week_acc.empty()) report.crps_mean = crps_sum / static_cast<double>(week_acc.size());
    if (held_out > 0) report.coverage95 = static_cast<double>(covered) / held_out;
  }

  write_score_csv(out + "/scores.csv", report);
  write_crps_by_week_csv(out + "/crps_by_week.csv", report);
  {
    std::ofstream kf(out + "/pareto_k.csv");
    if (!kf) throw validation_error(out + "/pareto_k.csv: cannot write");
    kf << "cell,location_id,week,pareto_k\n";
    const auto cells = model.cells();
    for (std::size_t c = 0; c < cells.size(); ++c)
      kf << c << ',' << train.locations[static_cast<std::size_t>(cells[c].loc)].id << ','
         << train.weeks[static_cast<std::size_t>(cells[c].week)] << ','
         << format_double(loo.khat[static_cast<Eigen::Index>(c)]) << '\n';
  }
  {
    std::ofstream tf(out + "/scores.txt");
    if (!tf) throw validation_error(out + "/scores.txt: cannot write");
    write_score_text(tf, report);
  }

  run_manifest m = detail::base_manifest(cfg, "evaluate");
  m.dataset_hash = hex64(report.data_hash);
  write_manifest(out, m);

  write_score_text(std::cout, report);
}

inline void cmd_compare(const app_config& cfg) {
  const std::string out = detail::require_out(cfg);
  if (cfg.compare_runs.size() < 2)
    throw validation_error("config [compare] runs: need at least two run directories");
  if (!cfg.compare_labels.empty() && cfg.compare_labels.size() != cfg.compare_runs.size())
    throw validation_error("config [compare] labels: must match the number of runs");

  std::vector<score_report> reports;
  for (std::size_t i = 0; i < cfg.compare_runs.size(); ++i) {
    score_report r = read_score_csv(cfg.compare_runs[i] + "/scores.csv");
    if (!cfg.compare_labels.empty()) r.model_name = cfg.compare_labels[i];
    else if (r.model_name.empty()) r.model_name = cfg.compare_runs[i];
    reports.push_back(std::move(r));
  }
  const auto ranked = compare_models(std::move(reports));
  write_compare_csv(out + "/comparison.csv", ranked);

  run_manifest m = detail::base_manifest(cfg, "compare");
  m.dataset_hash = hex64(ranked.front().data_hash);
  write_manifest(out, m);

  std::cout << "rank  model  looic  crps  bayes_p\n";
  for (std::size_t i = 0; i < ranked.size(); ++i)
    std::cout << (i + 1) << "  " << ranked[i].model_name << "  " << format_double(ranked[i].looic)
              << "  " << format_double(ranked[i].crps_mean) << "  "
              << format_double(ranked[i].bayes_p) << "\n";
}

} // namespace stgp
