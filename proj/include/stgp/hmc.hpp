#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <random>
#include <sstream>
#include <thread>
#include <vector>

#include "stgp/errors.hpp"
#include "stgp/rng.hpp"

namespace stgp {

struct hmc_options {
  int n_warmup = 1000;
  int n_samples = 1000;
  int n_chains = 4;
  double target_accept = 0.8;
  int leapfrog_min = 15;
  int leapfrog_max = 20;
  std::uint64_t seed = 0;
  int threads = 1;        // worker pool size; results do not depend on it
  double init_step = -1.0; // > 0 skips the automatic search
};

// Nesterov-style dual averaging of log step size toward a target acceptance.
class dual_average {
public:
  dual_average(double eps0, double target)
      : delta_(target) { restart(eps0); }

  void restart(double eps0) {
    mu_ = std::log(10.0 * eps0);
    log_eps_ = std::log(eps0);
    log_eps_bar_ = 0.0;
    h_bar_ = 0.0;
    count_ = 0;
  }

  void update(double accept_prob) {
    ++count_;
    const double eta = 1.0 / (count_ + t0_);
    h_bar_ = (1.0 - eta) * h_bar_ + eta * (delta_ - accept_prob);
    log_eps_ = mu_ - std::sqrt(static_cast<double>(count_)) / gamma_ * h_bar_;
    const double w = std::pow(static_cast<double>(count_), -kappa_);
    log_eps_bar_ = w * log_eps_ + (1.0 - w) * log_eps_bar_;
  }

  double eps() const { return std::exp(log_eps_); }
  double eps_bar() const { return count_ > 0 ? std::exp(log_eps_bar_) : std::exp(log_eps_); }

private:
  double delta_;
  double gamma_ = 0.05, t0_ = 10.0, kappa_ = 0.75;
  double mu_ = 0.0, log_eps_ = 0.0, log_eps_bar_ = 0.0, h_bar_ = 0.0;
  int count_ = 0;
};

struct leapfrog_state {
  Eigen::VectorXd q, p, grad;
  double logp = 0.0;
};

// H = -log p(q) + (1/2) p' diag(inv_metric) p.
inline double hamiltonian(double logp, const Eigen::VectorXd& p, const Eigen::VectorXd& inv_metric) {
  return -logp + 0.5 * (inv_metric.array() * p.array().square()).sum();
}

// n_steps of the leapfrog integrator; exposed so integrator accuracy can be
// checked directly. Target is callable: double(const VectorXd&, VectorXd&).
template <class Target>
leapfrog_state leapfrog(Target&& target, leapfrog_state st, double eps,
                        int n_steps, const Eigen::VectorXd& inv_metric,
                        std::uint64_t* grad_evals = nullptr) {
  for (int s = 0; s < n_steps; ++s) {
    st.p += 0.5 * eps * st.grad;
    st.q.array() += eps * inv_metric.array() * st.p.array();
    st.logp = target(st.q, st.grad);
    if (grad_evals) ++*grad_evals;
    st.p += 0.5 * eps * st.grad;
    if (!st.p.allFinite() || !st.q.allFinite()) {
      st.logp = -std::numeric_limits<double>::infinity();
      break;
    }
  }
  return st;
}

struct chain_result {
  Eigen::MatrixXd draws; // n_samples x dim, unconstrained scale
  double accept_rate = 0.0;
  double step_size = 0.0;
  Eigen::VectorXd inv_metric;
  int divergences = 0;
  std::uint64_t grad_evals = 0;
};

struct hmc_result {
  std::vector<chain_result> chains;
};

namespace detail {

template <class Target, class Rng>
double find_reasonable_epsilon(Target&& target, const leapfrog_state& st0,
                               const Eigen::VectorXd& inv_metric, Rng& rng,
                               std::uint64_t* grad_evals) {
  std::normal_distribution<double> nd(0.0, 1.0);
  leapfrog_state st = st0;
  st.p.resize(st.q.size());
  for (Eigen::Index i = 0; i < st.q.size(); ++i)
    st.p[i] = nd(rng) / std::sqrt(inv_metric[i]);
  const double h0 = hamiltonian(st.logp, st.p, inv_metric);
  double eps = 1.0;
  auto log_ratio = [&](double e) {
    leapfrog_state s1 = leapfrog(target, st, e, 1, inv_metric, grad_evals);
    const double h1 = hamiltonian(s1.logp, s1.p, inv_metric);
    const double a = h0 - h1;
    return std::isfinite(a) ? a : -std::numeric_limits<double>::infinity();
  };
  double a = log_ratio(eps);
  const double log_half = std::log(0.5);
  const double dir = a > log_half ? 1.0 : -1.0;
  for (int iter = 0; iter < 100; ++iter) {
    if (dir > 0 && !(a > log_half)) break;
    if (dir < 0 && !(a < log_half)) break;
    eps *= dir > 0 ? 2.0 : 0.5;
    if (eps < 1e-10 || eps > 1e6) break;
    a = log_ratio(eps);
  }
  return std::clamp(eps, 1e-10, 1e6);
}

template <class Target>
chain_result run_chain(Target& target, const Eigen::VectorXd& q0,
                       const hmc_options& opt, int chain_id) {
  const Eigen::Index d = q0.size();
  auto rng = substream(opt.seed, static_cast<std::uint64_t>(chain_id));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::uniform_int_distribution<int> lsteps(opt.leapfrog_min, opt.leapfrog_max);

  chain_result out;
  out.inv_metric = Eigen::VectorXd::Ones(d);
  out.draws.resize(opt.n_samples, d);

  leapfrog_state cur;
  cur.q = q0;
  cur.grad.resize(d);
  cur.logp = target(cur.q, cur.grad);
  ++out.grad_evals;
  if (!std::isfinite(cur.logp)) {
    std::ostringstream os;
    os << "chain " << chain_id << ": log density is not finite at the initial point";
    throw numerical_error(os.str());
  }

  // One proposal; returns acceptance probability and updates cur on accept.
  auto transition = [&](double eps, bool* divergent) {
    leapfrog_state st = cur;
    st.p.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) st.p[i] = nd(rng) / std::sqrt(out.inv_metric[i]);
    const double h0 = hamiltonian(st.logp, st.p, out.inv_metric);
    const int L = lsteps(rng);
    st = leapfrog(target, st, eps, L, out.inv_metric, &out.grad_evals);
    const double h1 = hamiltonian(st.logp, st.p, out.inv_metric);
    double accept = 0.0;
    bool div = false;
    if (std::isfinite(h1)) {
      accept = std::min(1.0, std::exp(h0 - h1));
      div = (h1 - h0) > 1000.0;
    } else {
      div = true;
    }
    if (divergent) *divergent = div;
    if (ud(rng) < accept) cur = std::move(st);
    return accept;
  };

  double eps = opt.init_step > 0.0
                   ? opt.init_step
                   : find_reasonable_epsilon(target, cur, out.inv_metric, rng, &out.grad_evals);
  dual_average da(eps, opt.target_accept);

  std::vector<double> eps_trace;
  std::vector<Eigen::VectorXd> metric_buf;
  const int w_collect = opt.n_warmup / 2;      // start of variance collection
  const int w_metric = (3 * opt.n_warmup) / 4; // metric switch point
  int warm_accepts = 0;

  for (int it = 0; it < opt.n_warmup; ++it) {
    if (it == w_metric && metric_buf.size() >= 10) {
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
      for (const auto& q : metric_buf) mean += q;
      mean /= static_cast<double>(metric_buf.size());
      Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
      for (const auto& q : metric_buf) var += (q - mean).array().square().matrix();
      var /= static_cast<double>(metric_buf.size() - 1);
      const double nb = static_cast<double>(metric_buf.size());
      // shrink toward a small constant, as a guard against noisy estimates
      var = (nb / (nb + 5.0)) * var.array() + 1e-3 * (5.0 / (nb + 5.0));
      out.inv_metric = var.cwiseMax(1e-10);
      eps = find_reasonable_epsilon(target, cur, out.inv_metric, rng, &out.grad_evals);
      da.restart(eps);
    }
    const double e = da.eps();
    eps_trace.push_back(e);
    const double a = transition(e, nullptr);
    if (a > 0.0) ++warm_accepts;
    da.update(a);
    if (it >= w_collect && it < w_metric) metric_buf.push_back(cur.q);
  }

  if (opt.n_warmup > 0 && warm_accepts == 0) {
    std::ostringstream os;
    os << "chain " << chain_id << ": no proposals accepted during warmup; step size trace:";
    const std::size_t k = std::min<std::size_t>(5, eps_trace.size());
    for (std::size_t i = 0; i < k; ++i) os << " " << eps_trace[i];
    if (eps_trace.size() > 2 * k) os << " ...";
    for (std::size_t i = eps_trace.size() > k ? eps_trace.size() - k : k; i < eps_trace.size(); ++i)
      os << " " << eps_trace[i];
    throw numerical_error(os.str());
  }

  out.step_size = opt.n_warmup > 0 ? da.eps_bar() : eps;
  double acc_sum = 0.0;
  for (int it = 0; it < opt.n_samples; ++it) {
    bool div = false;
    acc_sum += transition(out.step_size, &div);
    if (div) ++out.divergences;
    out.draws.row(it) = cur.q;
  }
  out.accept_rate = opt.n_samples > 0 ? acc_sum / opt.n_samples : 0.0;
  return out;
}

} // namespace detail

// Runs n_chains independent chains over a worker pool. make_target(chain) must
// return a fresh target (owning any mutable state); init(chain) gives the
// start point. Chain c consumes RNG substream (seed, c), so results are
// identical for any thread count.
template <class TargetFactory, class InitFn>
hmc_result hmc_run(TargetFactory&& make_target, InitFn&& init, const hmc_options& opt) {
  if (opt.n_chains < 1) throw validation_error("hmc: need at least one chain");
  if (opt.n_samples < 1) throw validation_error("hmc: need at least one post-warmup draw");
  if (opt.n_warmup < 0) throw validation_error("hmc: negative warmup length");
  if (opt.leapfrog_min < 1 || opt.leapfrog_max < opt.leapfrog_min)
    throw validation_error("hmc: invalid leapfrog step range");
  if (!(opt.target_accept > 0.0 && opt.target_accept < 1.0))
    throw validation_error("hmc: target acceptance must lie in (0,1)");

  const int C = opt.n_chains;
  hmc_result res;
  res.chains.resize(C);
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(C));
  std::atomic<int> next{0};

  auto work = [&]() {
    for (;;) {
      const int c = next.fetch_add(1);
      if (c >= C) return;
      try {
        auto target = make_target(c);
        const Eigen::VectorXd q0 = init(c);
        res.chains[static_cast<std::size_t>(c)] = detail::run_chain(target, q0, opt, c);
      } catch (...) {
        errs[static_cast<std::size_t>(c)] = std::current_exception();
      }
    }
  };

  const int nthreads = std::clamp(opt.threads, 1, C);
  if (nthreads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errs)
    if (e) std::rethrow_exception(e);
  return res;
}

} // namespace stgp
