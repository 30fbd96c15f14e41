#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stgp/errors.hpp"
#include "stgp/hmc.hpp"
#include "stgp/kernels.hpp"
#include "stgp/model.hpp"
#include "stgp/simulate.hpp"
#include "stgp/util.hpp"

namespace stgp {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Recursive-descent parser for kernel expressions:
//   expr   := term ('+' term)*
//   term   := factor ('*' factor)*
//   factor := name | '(' expr ')'
// with names exponential | matern32 | rbf | periodic | bias.
struct kexpr_parser {
  const std::string& text;
  std::size_t pos = 0;
  std::vector<int> dims;
  double period;

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw validation_error("kernel expression '" + text + "': " + msg + " at position " +
                           std::to_string(pos));
  }

  kernel_expr parse_expr() {
    kernel_expr k = parse_term();
    skip_ws();
    while (pos < text.size() && text[pos] == '+') {
      ++pos;
      k = k_sum(std::move(k), parse_term());
      skip_ws();
    }
    return k;
  }

  kernel_expr parse_term() {
    kernel_expr k = parse_factor();
    skip_ws();
    while (pos < text.size() && text[pos] == '*') {
      ++pos;
      k = k_product(std::move(k), parse_factor());
      skip_ws();
    }
    return k;
  }

  kernel_expr parse_factor() {
    skip_ws();
    if (pos >= text.size()) fail("unexpected end of expression");
    if (text[pos] == '(') {
      ++pos;
      kernel_expr k = parse_expr();
      skip_ws();
      if (pos >= text.size() || text[pos] != ')') fail("missing ')'");
      ++pos;
      return k;
    }
    std::string name;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_'))
      name += text[pos++];
    if (name.empty()) fail("expected a kernel name");
    if (name == "exponential") return k_exponential(1.0, 1.0, dims);
    if (name == "matern32") return k_matern32(1.0, 1.0, dims);
    if (name == "rbf") return k_rbf(1.0, 1.0, dims);
    if (name == "periodic") return k_periodic(1.0, 1.0, period, dims);
    if (name == "bias") return k_bias(1.0);
    fail("unknown kernel '" + name + "'");
  }
};

} // namespace detail

inline kernel_expr parse_kernel_expr(const std::string& text, std::vector<int> dims, double period) {
  detail::kexpr_parser p{text, 0, std::move(dims), period};
  kernel_expr k = p.parse_expr();
  p.skip_ws();
  if (p.pos != text.size()) p.fail("trailing input");
  return k;
}

// Parsed configuration: sectioned key = value lines, full-line comments with
// '#' or ';'. Unknown sections and keys are hard errors.
struct app_config {
  std::string raw_text;

  // [data]
  std::string counts_path, locations_path, population_path;
  int data_horizon = 0;

  // [model]
  std::string preset;
  std::string model_name;
  std::string time_kernel_str, space_kernel_str;
  bool time_kernel_set = false, space_kernel_set = false, family_set = false;
  bool interaction = true, bias = true;
  family_kind family = family_kind::neg_binomial;
  double period = 52.0;
  std::vector<std::pair<std::string, double>> param_values; // slot names, phi, lambda

  // [priors]
  prior_config priors;

  // [inducing]
  int stride = 5;
  bool include_final = true;

  // [sampler]
  hmc_options sampler;
  double rhat_threshold = 1.1;

  // [forecast]
  int forecast_horizon = 4;
  int forecast_draws = 1000;
  bool perturb = true;

  // [evaluate]
  int score_draws = 200;

  // [simulate]
  sim_config sim;

  // [run]
  std::uint64_t seed = 0;
  std::string out_dir;

  // [compare]
  std::vector<std::string> compare_runs;
  std::vector<std::string> compare_labels;
};

namespace detail {

inline bool parse_bool(const std::string& section, const std::string& key, const std::string& v) {
  const std::string s = lower(v);
  if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
  if (s == "false" || s == "no" || s == "off" || s == "0") return false;
  throw validation_error("config [" + section + "] " + key + ": '" + v + "' is not a boolean");
}

inline double parse_num(const std::string& section, const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw validation_error("config [" + section + "] " + key + ": '" + v + "' is not a number");
  }
}

inline int parse_int_cfg(const std::string& section, const std::string& key, const std::string& v) {
  const double d = parse_num(section, key, v);
  const int i = static_cast<int>(d);
  if (static_cast<double>(i) != d)
    throw validation_error("config [" + section + "] " + key + ": '" + v + "' is not an integer");
  return i;
}

inline family_kind parse_family(const std::string& v) {
  const std::string s = lower(v);
  if (s == "poisson") return family_kind::poisson;
  if (s == "nb" || s == "negbin" || s == "negative_binomial") return family_kind::neg_binomial;
  if (s == "zinb" || s == "zero_inflated_nb" || s == "zero_inflated_negative_binomial")
    return family_kind::zi_neg_binomial;
  throw validation_error("config [model] family: unknown family '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t pos = v.find(',', start);
    if (pos == std::string::npos) {
      const std::string item = trim(v.substr(start));
      if (!item.empty()) out.push_back(item);
      break;
    }
    const std::string item = trim(v.substr(start, pos - start));
    if (!item.empty()) out.push_back(item);
    start = pos + 1;
  }
  return out;
}

} // namespace detail

// Table-1 model ladder presets. Explicit kernel/family keys win over the
// preset's defaults.
inline void apply_preset(app_config& cfg) {
  if (cfg.preset.empty()) return;
  std::string t, s;
  family_kind fam = family_kind::neg_binomial;
  if (cfg.preset == "model1") {
    t = "rbf";
    s = "matern32";
  } else if (cfg.preset == "model2") {
    t = "matern32";
    s = "matern32";
  } else if (cfg.preset == "model3") {
    t = "matern32 + periodic";
    s = "matern32";
  } else if (cfg.preset == "model4") {
    t = "matern32 + periodic";
    s = "rbf";
  } else if (cfg.preset == "model5") {
    t = "matern32 + periodic";
    s = "matern32";
    fam = family_kind::zi_neg_binomial;
  } else if (cfg.preset == "model6") {
    t = "periodic";
    s = "matern32";
  } else {
    throw validation_error("config: unknown preset '" + cfg.preset + "' (expected model1..model6)");
  }
  if (!cfg.time_kernel_set) cfg.time_kernel_str = t;
  if (!cfg.space_kernel_set) cfg.space_kernel_str = s;
  if (!cfg.family_set) cfg.family = fam;
  if (cfg.model_name.empty()) cfg.model_name = cfg.preset;
}

inline app_config parse_config_text(const std::string& text, const std::string& origin) {
  app_config cfg;
  cfg.raw_text = text;

  static const std::set<std::string> known_sections = {
      "data", "model", "priors", "inducing", "sampler",
      "forecast", "evaluate", "simulate", "run", "compare"};

  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto ctx = [&]() { return origin + ":" + std::to_string(lineno); };

  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw validation_error(ctx() + ": malformed section header '" + t + "'");
      section = detail::lower(detail::trim(t.substr(1, t.size() - 2)));
      if (!known_sections.count(section))
        throw validation_error(ctx() + ": unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw validation_error(ctx() + ": expected 'key = value', got '" + t + "'");
    if (section.empty()) throw validation_error(ctx() + ": key outside any [section]");
    const std::string key = detail::lower(detail::trim(t.substr(0, eq)));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty()) throw validation_error(ctx() + ": empty key");
    if (val.empty()) throw validation_error(ctx() + ": empty value for key '" + key + "'");

    auto unknown = [&]() {
      throw validation_error(ctx() + ": unknown key '" + key + "' in section [" + section + "]");
    };

    if (section == "data") {
      if (key == "counts") cfg.counts_path = val;
      else if (key == "locations") cfg.locations_path = val;
      else if (key == "population") cfg.population_path = val;
      else if (key == "horizon") cfg.data_horizon = detail::parse_int_cfg(section, key, val);
      else unknown();
    } else if (section == "model") {
      if (key == "preset") cfg.preset = detail::lower(val);
      else if (key == "name") cfg.model_name = val;
      else if (key == "time_kernel") { cfg.time_kernel_str = val; cfg.time_kernel_set = true; }
      else if (key == "space_kernel") { cfg.space_kernel_str = val; cfg.space_kernel_set = true; }
      else if (key == "interaction") cfg.interaction = detail::parse_bool(section, key, val);
      else if (key == "bias") cfg.bias = detail::parse_bool(section, key, val);
      else if (key == "family") { cfg.family = detail::parse_family(val); cfg.family_set = true; }
      else if (key == "period") cfg.period = detail::parse_num(section, key, val);
      else cfg.param_values.emplace_back(key, detail::parse_num(section, key, val));
      // parameter-looking keys are validated against the kernel's slot names
      // once the kernels are known (see make_model_spec)
    } else if (section == "priors") {
      if (key == "lengthscale_alpha") cfg.priors.ig_alpha = detail::parse_num(section, key, val);
      else if (key == "lengthscale_beta") cfg.priors.ig_beta = detail::parse_num(section, key, val);
      else if (key == "kernel_sd_scale") cfg.priors.sigma_scale = detail::parse_num(section, key, val);
      else if (key == "bias_sd_scale") cfg.priors.bias_sigma_scale = detail::parse_num(section, key, val);
      else if (key == "inv_sqrt_phi_scale") cfg.priors.inv_sqrt_phi_scale = detail::parse_num(section, key, val);
      else if (key == "lambda_mean") cfg.priors.lambda_mean = detail::parse_num(section, key, val);
      else if (key == "lambda_sd") cfg.priors.lambda_sd = detail::parse_num(section, key, val);
      else unknown();
    } else if (section == "inducing") {
      if (key == "stride") cfg.stride = detail::parse_int_cfg(section, key, val);
      else if (key == "include_final") cfg.include_final = detail::parse_bool(section, key, val);
      else unknown();
    } else if (section == "sampler") {
      if (key == "chains") cfg.sampler.n_chains = detail::parse_int_cfg(section, key, val);
      else if (key == "warmup") cfg.sampler.n_warmup = detail::parse_int_cfg(section, key, val);
      else if (key == "samples") cfg.sampler.n_samples = detail::parse_int_cfg(section, key, val);
      else if (key == "target_accept") cfg.sampler.target_accept = detail::parse_num(section, key, val);
      else if (key == "leapfrog_min") cfg.sampler.leapfrog_min = detail::parse_int_cfg(section, key, val);
      else if (key == "leapfrog_max") cfg.sampler.leapfrog_max = detail::parse_int_cfg(section, key, val);
      else if (key == "threads") cfg.sampler.threads = detail::parse_int_cfg(section, key, val);
      else if (key == "step_size") cfg.sampler.init_step = detail::parse_num(section, key, val);
      else if (key == "rhat_threshold") cfg.rhat_threshold = detail::parse_num(section, key, val);
      else unknown();
    } else if (section == "forecast") {
      if (key == "horizon") cfg.forecast_horizon = detail::parse_int_cfg(section, key, val);
      else if (key == "draws") cfg.forecast_draws = detail::parse_int_cfg(section, key, val);
      else if (key == "perturb") cfg.perturb = detail::parse_bool(section, key, val);
      else unknown();
    } else if (section == "evaluate") {
      if (key == "score_draws") cfg.score_draws = detail::parse_int_cfg(section, key, val);
      else unknown();
    } else if (section == "simulate") {
      if (key == "locations") cfg.sim.n_locations = detail::parse_int_cfg(section, key, val);
      else if (key == "weeks") cfg.sim.n_weeks = detail::parse_int_cfg(section, key, val);
      else if (key == "base_rate") cfg.sim.base_rate = detail::parse_num(section, key, val);
      else if (key == "pop_min") cfg.sim.pop_min = detail::parse_num(section, key, val);
      else if (key == "pop_max") cfg.sim.pop_max = detail::parse_num(section, key, val);
      else if (key == "lon_min") cfg.sim.lon_min = detail::parse_num(section, key, val);
      else if (key == "lon_max") cfg.sim.lon_max = detail::parse_num(section, key, val);
      else if (key == "lat_min") cfg.sim.lat_min = detail::parse_num(section, key, val);
      else if (key == "lat_max") cfg.sim.lat_max = detail::parse_num(section, key, val);
      else unknown();
    } else if (section == "run") {
      if (key == "seed") {
        const double d = detail::parse_num(section, key, val);
        if (d < 0) throw validation_error("config [run] seed: must be nonnegative");
        cfg.seed = static_cast<std::uint64_t>(d);
      } else if (key == "out") cfg.out_dir = val;
      else unknown();
    } else if (section == "compare") {
      if (key == "runs") cfg.compare_runs = detail::split_list(val);
      else if (key == "labels") cfg.compare_labels = detail::split_list(val);
      else unknown();
    }
  }
  return cfg;
}

inline app_config parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw validation_error(path + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

// Builds the model from a parsed config, resolving presets, parsing kernel
// expressions and applying any initial/true parameter values by slot name.
// Leftover [model] keys that name no parameter are errors.
inline model_spec make_model_spec(const app_config& cfg_in) {
  app_config cfg = cfg_in;
  apply_preset(cfg);
  if (cfg.time_kernel_str.empty() || cfg.space_kernel_str.empty())
    throw validation_error("config [model]: time_kernel and space_kernel (or a preset) are required");

  model_spec spec;
  spec.time_kernel = parse_kernel_expr(cfg.time_kernel_str, {0}, cfg.period);
  spec.space_kernel = parse_kernel_expr(cfg.space_kernel_str, {1, 2}, cfg.period);
  spec.interaction = cfg.interaction;
  spec.bias = cfg.bias;
  spec.family = cfg.family;
  spec.priors = cfg.priors;
  spec.inducing_stride = cfg.stride;
  spec.include_final_week = cfg.include_final;

  kernel_expr bias_node;
  const kernel_expr full = assemble_kernel(spec, &bias_node);
  const auto slots = collect_slots(full);
  for (const auto& [key, value] : cfg.param_values) {
    if (key == "phi" || key == "lambda") continue; // observation family, applied by callers
    bool found = false;
    for (const auto& s : slots) {
      if (s.name != key) continue;
      if (!(value > 0.0))
        throw validation_error("config [model] " + key + ": must be positive");
      if (s.is_lengthscale) s.node->params.lengthscale = value;
      else if (s.node == bias_node.get()) {
        s.node->params.variance = value; // given as variance
        spec.bias_variance = value;      // survives later kernel re-assembly
      } else s.node->params.variance = value * value; // given as sigma
      found = true;
      break;
    }
    if (!found)
      throw validation_error("config [model]: unknown key '" + key + "'");
  }
  return spec;
}

inline double config_param(const app_config& cfg, const std::string& name, double fallback) {
  for (const auto& [key, value] : cfg.param_values)
    if (key == name) return value;
  return fallback;
}

inline sim_config make_sim_config(const app_config& cfg) {
  sim_config sc = cfg.sim;
  sc.spec = make_model_spec(cfg);
  sc.phi = config_param(cfg, "phi", sc.phi);
  sc.lambda = config_param(cfg, "lambda", sc.lambda);
  sc.seed = cfg.seed;
  return sc;
}

} // namespace stgp
