#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "stgp/data.hpp"
#include "stgp/errors.hpp"
#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "stgp/likelihoods.hpp"
#include "stgp/priors.hpp"
#include "stgp/rng.hpp"

namespace stgp {

// Model definition: kernel structure (one row of the model ladder),
// observation family, priors and inducing-grid policy.
struct model_spec {
  kernel_expr time_kernel;  // active dimension 0 only
  kernel_expr space_kernel; // active dimensions 1,2 only
  bool interaction = true;  // add k_time * k_space with shared hyperparameters
  bool bias = true;         // append a constant kernel (estimated mean level)
  double bias_variance = 1.0;
  family_kind family = family_kind::neg_binomial;
  prior_config priors;
  int inducing_stride = 5;
  bool include_final_week = true;
};

// k_time + k_space [+ k_time*k_space] [+ bias]; product shares nodes.
inline kernel_expr assemble_kernel(const model_spec& spec, kernel_expr* bias_out = nullptr) {
  if (!spec.time_kernel || !spec.space_kernel)
    throw validation_error("model needs both a time and a space kernel");
  kernel_expr k = spec.interaction ? build_spatiotemporal(spec.time_kernel, spec.space_kernel)
                                   : k_sum(spec.time_kernel, spec.space_kernel);
  if (spec.bias) {
    kernel_expr b = k_bias(spec.bias_variance);
    if (bias_out) *bias_out = b;
    k = k_sum(k, b);
  } else if (bias_out) {
    bias_out->reset();
  }
  return k;
}

// Background effect e_ij = p_ij * R with R the crude incidence rate over the
// training window (observed cells only).
struct offset_table {
  double R = 0.0;
  Eigen::MatrixXd e;
};

inline double crude_rate(const Eigen::MatrixXd& y, const Eigen::MatrixXd& pop) {
  if (y.rows() != pop.rows() || y.cols() != pop.cols())
    throw validation_error("crude_rate: shape mismatch");
  if ((y.array() < 0.0).any()) throw validation_error("crude_rate: negative counts");
  if (!(pop.array() > 0.0).all()) throw validation_error("crude_rate: populations must be positive");
  const double tp = pop.sum();
  if (!(tp > 0.0)) throw validation_error("crude_rate: zero total population");
  return y.sum() / tp;
}

inline double crude_rate(const dataset& d) {
  double ty = 0.0, tp = 0.0;
  for (Eigen::Index i = 0; i < d.n_locations(); ++i)
    for (Eigen::Index j = 0; j < d.n_weeks(); ++j)
      if (d.observed(i, j)) {
        ty += static_cast<double>(d.counts(i, j));
        tp += d.populations(i, j);
      }
  if (!(tp > 0.0)) throw validation_error("crude_rate: zero total population over observed cells");
  return ty / tp;
}

inline offset_table build_offsets(const dataset& d) {
  offset_table t;
  t.R = crude_rate(d);
  if (!(t.R > 0.0))
    throw validation_error("build_offsets: all observed counts are zero; the rate offset degenerates");
  t.e = d.populations * t.R;
  return t;
}

// Sum of observation log pmfs over observed cells (location-major order);
// masked cells contribute nothing.
inline double loglik_dataset(const obs_family& fam, const dataset& d, const offset_table& off,
                             const Eigen::VectorXd& f, std::uint64_t* clamp_count = nullptr) {
  const auto cells = d.observed_cells();
  if (f.size() != static_cast<Eigen::Index>(cells.size()))
    throw validation_error("loglik_dataset: latent vector does not match observed cells");
  double s = 0.0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const double mu = mean_counts(off.e(cells[c].loc, cells[c].week),
                                  f[static_cast<Eigen::Index>(c)], clamp_count);
    s += family_logpmf(fam, d.counts(cells[c].loc, cells[c].week), mu);
  }
  return s;
}

// How a stored (constrained) value maps to the unconstrained coordinate.
enum class coord_transform { log_value, log_sqrt, identity };

// Joint model over unconstrained coordinates
//   z = [kernel hyperparameters | phi | lambda | whitened latents v].
//
// The latent field at observed cells is f = K_nm K_mm^{-1} L v with
// L = chol(K_mm + jitter I); counts follow the observation family with
// mu = e * exp(f). log_posterior_and_grad returns the log joint (priors with
// transform Jacobians + likelihood) and its exact gradient via a hand-rolled
// reverse pass: logpmf -> f -> triangular solve -> Cholesky -> Gram entries.
//
// The panel layout makes every Gram entry a function of one time-kernel entry
// T(w,w') and one space-kernel entry S(l,l'):
//   K = T + S + T.*S + bias_var,
// so forward products and adjoint contractions reduce to small W- and L-sized
// matrix operations instead of O(nM) kernel evaluations.
class latent_count_model {
public:
  latent_count_model(const model_spec& spec, const dataset& train)
      : spec_(spec), data_(train) {
    if (data_.n_locations() == 0 || data_.n_weeks() == 0)
      throw validation_error("model: empty dataset");

    std::vector<int> td, sd;
    detail::collect_active(*spec_.time_kernel, td);
    detail::collect_active(*spec_.space_kernel, sd);
    for (int t : td)
      if (t != 0) throw validation_error("time kernel must act on dimension 0 only");
    for (int s : sd)
      if (s != 1 && s != 2) throw validation_error("space kernel must act on dimensions 1,2 only");

    time_ = clone_expr(spec_.time_kernel);
    space_ = clone_expr(spec_.space_kernel);
    model_spec cloned = spec_;
    cloned.time_kernel = time_;
    cloned.space_kernel = space_;
    full_ = assemble_kernel(cloned, &bias_node_);

    slots_ = collect_slots(full_);
    kg_time_ = std::make_unique<kernel_gradient>(time_);
    kg_space_ = std::make_unique<kernel_gradient>(space_);
    Pt_ = static_cast<int>(kg_time_->slots().size());
    Ps_ = static_cast<int>(kg_space_->slots().size());
    Pk_ = static_cast<int>(slots_.size());
    if (Pk_ != Pt_ + Ps_ + (spec_.bias ? 1 : 0))
      throw numerical_error("model: kernel slot layout mismatch");

    offsets_ = build_offsets(data_);

    cells_ = data_.observed_cells();
    const Eigen::Index n = static_cast<Eigen::Index>(cells_.size());
    y_.resize(n);
    e_.resize(n);
    cell_loc_.resize(cells_.size());
    cell_w_.resize(cells_.size());
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      y_[static_cast<Eigen::Index>(c)] = data_.counts(cells_[c].loc, cells_[c].week);
      e_[static_cast<Eigen::Index>(c)] = offsets_.e(cells_[c].loc, cells_[c].week);
      cell_loc_[c] = cells_[c].loc;
      cell_w_[c] = cells_[c].week;
    }

    grid_ = select_inducing_grid(data_.weeks, data_.locations, spec_.inducing_stride,
                                 spec_.include_final_week);

    const Eigen::Index W = data_.n_weeks();
    const Eigen::Index L = data_.n_locations();
    week_pts_.setZero(W, 3);
    for (Eigen::Index j = 0; j < W; ++j)
      week_pts_(j, 0) = static_cast<double>(data_.weeks[static_cast<std::size_t>(j)]);
    sel_pts_.setZero(static_cast<Eigen::Index>(grid_.n_sel_weeks), 3);
    for (int b = 0; b < grid_.n_sel_weeks; ++b)
      sel_pts_(b, 0) = static_cast<double>(
          data_.weeks[static_cast<std::size_t>(grid_.week_positions[static_cast<std::size_t>(b)])]);
    loc_pts_.setZero(L, 3);
    for (Eigen::Index i = 0; i < L; ++i) {
      loc_pts_(i, 1) = data_.locations[static_cast<std::size_t>(i)].lon;
      loc_pts_(i, 2) = data_.locations[static_cast<std::size_t>(i)].lat;
    }

    // Coordinate layout and reporting metadata.
    for (const auto& s : slots_) {
      names_.push_back(s.name);
      if (s.node == bias_node_.get()) {
        kinds_.push_back(coord_kind::bias_sigma);
        transforms_.push_back(coord_transform::log_sqrt); // reported as variance
      } else {
        kinds_.push_back(s.is_lengthscale ? coord_kind::lengthscale : coord_kind::kernel_sigma);
        transforms_.push_back(coord_transform::log_value);
      }
    }
    idx_phi_ = -1;
    idx_lambda_ = -1;
    if (spec_.family != family_kind::poisson) {
      idx_phi_ = static_cast<int>(names_.size());
      names_.push_back("phi");
      kinds_.push_back(coord_kind::phi);
      transforms_.push_back(coord_transform::log_value);
    }
    if (spec_.family == family_kind::zi_neg_binomial) {
      idx_lambda_ = static_cast<int>(names_.size());
      names_.push_back("lambda");
      kinds_.push_back(coord_kind::lambda);
      transforms_.push_back(coord_transform::identity);
    }
    latent_offset_ = static_cast<int>(names_.size());
    for (Eigen::Index m = 0; m < grid_.size(); ++m) {
      names_.push_back("v[" + std::to_string(m) + "]");
      kinds_.push_back(coord_kind::latent);
      transforms_.push_back(coord_transform::identity);
    }
  }

  latent_count_model(const latent_count_model& other)
      : latent_count_model(other.spec_, other.data_) {}
  latent_count_model& operator=(const latent_count_model&) = delete;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(names_.size()); }
  Eigen::Index n_latents() const { return grid_.size(); }
  int n_hyper() const { return latent_offset_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<coord_kind>& kinds() const { return kinds_; }
  const std::vector<coord_transform>& transforms() const { return transforms_; }
  const dataset& data() const { return data_; }
  const offset_table& offsets() const { return offsets_; }
  const inducing_grid& grid() const { return grid_; }
  const model_spec& spec() const { return spec_; }
  const std::vector<cell_index>& cells() const { return cells_; }
  std::uint64_t clamp_count() const { return clamps_; }

  // Prior medians plus per-chain U(-0.5, 0.5) jitter, all on the z scale.
  Eigen::VectorXd init_z(std::uint64_t seed, int chain) const {
    Eigen::VectorXd z(dim());
    for (Eigen::Index i = 0; i < dim(); ++i)
      z[i] = prior_median_z(kinds_[static_cast<std::size_t>(i)], spec_.priors);
    auto rng = substream(seed, 0x696e6974ull + static_cast<std::uint64_t>(chain));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (Eigen::Index i = 0; i < dim(); ++i) z[i] += u(rng);
    return z;
  }

  Eigen::VectorXd constrain(const Eigen::VectorXd& z) const {
    Eigen::VectorXd c(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) {
      switch (transforms_[static_cast<std::size_t>(i)]) {
        case coord_transform::log_value: c[i] = std::exp(z[i]); break;
        case coord_transform::log_sqrt: c[i] = std::exp(2.0 * z[i]); break;
        case coord_transform::identity: c[i] = z[i]; break;
      }
    }
    return c;
  }

  Eigen::VectorXd unconstrain(const Eigen::VectorXd& c) const {
    Eigen::VectorXd z(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) {
      switch (transforms_[static_cast<std::size_t>(i)]) {
        case coord_transform::log_value: z[i] = std::log(c[i]); break;
        case coord_transform::log_sqrt: z[i] = 0.5 * std::log(c[i]); break;
        case coord_transform::identity: z[i] = c[i]; break;
      }
    }
    return z;
  }

  // Observation family at an unconstrained (phi, lambda) slice.
  obs_family family_at(const Eigen::VectorXd& z) const {
    obs_family fam;
    fam.kind = spec_.family;
    if (idx_phi_ >= 0) fam.phi = std::exp(z[idx_phi_]);
    if (idx_lambda_ >= 0) fam.lambda = z[idx_lambda_];
    return fam;
  }

  // Applies kernel hyperparameters from an unconstrained vector and returns
  // the shared kernel expression (valid until the next apply).
  const kernel_expr& apply_kernel_params(const Eigen::VectorXd& z) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const double zi = z[static_cast<Eigen::Index>(i)];
      if (slots_[i].is_lengthscale)
        slots_[i].node->params.lengthscale = std::exp(zi);
      else
        slots_[i].node->params.variance = std::exp(2.0 * zi);
    }
    return full_;
  }

  double log_posterior(const Eigen::VectorXd& z) const {
    Eigen::VectorXd g;
    return eval(z, g, false);
  }

  double log_posterior_and_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const {
    return eval(z, grad, true);
  }

  // Likelihood term alone (no priors); used by scaling checks and scoring.
  double loglik(const Eigen::VectorXd& z) const {
    Eigen::VectorXd f, mu;
    latent_field(z, f, mu);
    const obs_family fam = family_at(z);
    double s = 0.0;
    for (Eigen::Index c = 0; c < f.size(); ++c) s += family_logpmf(fam, y_[c], mu[c]);
    return s;
  }

  // Latent field and cell means at one unconstrained point.
  void latent_field(const Eigen::VectorXd& z, Eigen::VectorXd& f, Eigen::VectorXd& mu) const {
    if (z.size() != dim()) throw validation_error("model: coordinate vector has wrong length");
    workspace ws;
    forward(z, ws);
    f = ws.f;
    mu = ws.mu;
  }

  // Per-cell log pmf for one unconstrained draw (row of a loglik matrix).
  Eigen::VectorXd cell_loglik(const Eigen::VectorXd& z) const {
    Eigen::VectorXd f, mu;
    latent_field(z, f, mu);
    const obs_family fam = family_at(z);
    Eigen::VectorXd ll(f.size());
    for (Eigen::Index c = 0; c < f.size(); ++c) ll[c] = family_logpmf(fam, y_[c], mu[c]);
    return ll;
  }

  const Eigen::VectorXd& cell_counts() const { return y_dbl_init(); }
  const Eigen::VectorXd& cell_offsets() const { return e_; }
  std::int64_t cell_count(Eigen::Index c) const { return y_[c]; }

private:
  struct workspace {
    Eigen::MatrixXd T, S, Tmm;
    std::vector<Eigen::MatrixXd> dT, dS;
    Eigen::MatrixXd Kmm, Lmat;
    double jitter_factor = 0.0;
    Eigen::MatrixXd Umat; // u' reshaped (n_sel_weeks x L)
    Eigen::VectorXd uprime, f, mu;
    std::vector<bool> clamped;
  };

  // Builds T, S (+ gradients), K_mm, its Cholesky, u' = L^{-T} v and the
  // latent field f over observed cells.
  void forward(const Eigen::VectorXd& z, workspace& ws, bool want_grad = false) const {
    const Eigen::Index W = data_.n_weeks();
    const Eigen::Index L = data_.n_locations();
    const int Wm = grid_.n_sel_weeks;
    const Eigen::Index M = grid_.size();

    apply_kernel_params(z);
    const double bias_var = spec_.bias ? std::exp(2.0 * z[Pk_ - 1]) : 0.0;

    ws.T.resize(W, Wm);
    if (want_grad) ws.dT.assign(static_cast<std::size_t>(Pt_), Eigen::MatrixXd(W, Wm));
    std::array<double, 64> buf{};
    for (Eigen::Index w = 0; w < W; ++w)
      for (int b = 0; b < Wm; ++b) {
        if (want_grad) {
          buf.fill(0.0);
          ws.T(w, b) = kg_time_->value_and_grad(week_pts_, w, sel_pts_, b, buf.data());
          for (int k = 0; k < Pt_; ++k) ws.dT[static_cast<std::size_t>(k)](w, b) = buf[static_cast<std::size_t>(k)];
        } else {
          ws.T(w, b) = detail::eval_node(*time_, week_pts_, w, sel_pts_, b);
        }
      }

    ws.S.resize(L, L);
    if (want_grad) ws.dS.assign(static_cast<std::size_t>(Ps_), Eigen::MatrixXd(L, L));
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = i; j < L; ++j) {
        if (want_grad) {
          buf.fill(0.0);
          const double v = kg_space_->value_and_grad(loc_pts_, i, loc_pts_, j, buf.data());
          ws.S(i, j) = ws.S(j, i) = v;
          for (int k = 0; k < Ps_; ++k) {
            ws.dS[static_cast<std::size_t>(k)](i, j) = buf[static_cast<std::size_t>(k)];
            ws.dS[static_cast<std::size_t>(k)](j, i) = buf[static_cast<std::size_t>(k)];
          }
        } else {
          const double v = detail::eval_node(*space_, loc_pts_, i, loc_pts_, j);
          ws.S(i, j) = ws.S(j, i) = v;
        }
      }

    ws.Tmm.resize(Wm, Wm);
    for (int a = 0; a < Wm; ++a)
      for (int b = 0; b < Wm; ++b)
        ws.Tmm(a, b) = ws.T(grid_.week_positions[static_cast<std::size_t>(a)], b);

    const double inter = spec_.interaction ? 1.0 : 0.0;
    ws.Kmm.resize(M, M);
    for (Eigen::Index i = 0; i < L; ++i)
      for (int a = 0; a < Wm; ++a) {
        const Eigen::Index m1 = i * Wm + a;
        for (Eigen::Index j = 0; j < L; ++j)
          for (int b = 0; b < Wm; ++b) {
            const Eigen::Index m2 = j * Wm + b;
            const double t = ws.Tmm(a, b);
            const double s = ws.S(i, j);
            ws.Kmm(m1, m2) = t + s + inter * t * s + bias_var;
          }
      }

    chol_result ch = chol_with_jitter(ws.Kmm);
    ws.Lmat = std::move(ch.L);
    ws.jitter_factor = ch.factor;

    const Eigen::VectorXd v = z.tail(M);
    ws.uprime = ws.Lmat.transpose().triangularView<Eigen::Upper>().solve(v);
    ws.Umat.resize(Wm, L);
    for (Eigen::Index j = 0; j < L; ++j)
      for (int b = 0; b < Wm; ++b) ws.Umat(b, j) = ws.uprime[j * Wm + b];

    // f_c = T(w_c,:) us_b + S(l_c,:) us_j + inter * T(w_c,:) M2(:,l_c) + bias_var * usum
    const Eigen::VectorXd us_b = ws.Umat.rowwise().sum();
    const Eigen::VectorXd us_j = ws.Umat.colwise().sum();
    const double usum = ws.uprime.sum();
    Eigen::MatrixXd M2;
    if (spec_.interaction) M2 = ws.Umat * ws.S; // (b, l) = sum_j Umat(b,j) S(j,l)

    const Eigen::Index n = static_cast<Eigen::Index>(cells_.size());
    ws.f.resize(n);
    ws.mu.resize(n);
    ws.clamped.assign(static_cast<std::size_t>(n), false);
    for (Eigen::Index c = 0; c < n; ++c) {
      const int lc = cell_loc_[static_cast<std::size_t>(c)];
      const int wc = cell_w_[static_cast<std::size_t>(c)];
      double fc = ws.T.row(wc).dot(us_b) + ws.S.row(lc).dot(us_j) + bias_var * usum;
      if (spec_.interaction) fc += ws.T.row(wc).dot(M2.col(lc));
      const double fcl = clamp_latent(fc, &clamps_);
      ws.clamped[static_cast<std::size_t>(c)] = (fcl != fc);
      ws.f[c] = fcl;
      ws.mu[c] = e_[c] * std::exp(fcl);
    }
  }

  double eval(const Eigen::VectorXd& z, Eigen::VectorXd& grad, bool want_grad) const {
    if (z.size() != dim()) throw validation_error("model: coordinate vector has wrong length");
    if (want_grad) grad.setZero(dim());
    if (!z.allFinite()) return -std::numeric_limits<double>::infinity();

    const Eigen::Index W = data_.n_weeks();
    const Eigen::Index L = data_.n_locations();
    const int Wm = grid_.n_sel_weeks;
    const Eigen::Index M = grid_.size();
    const Eigen::Index n = static_cast<Eigen::Index>(cells_.size());
    const double inter = spec_.interaction ? 1.0 : 0.0;

    workspace ws;
    try {
      forward(z, ws, want_grad);
    } catch (const numerical_error&) {
      if (want_grad) grad.setZero(dim());
      return -std::numeric_limits<double>::infinity();
    }
    // overflowed hyperparameters can leak NaN into the field through K_nm
    if (!ws.f.allFinite() || !ws.mu.allFinite()) {
      if (want_grad) grad.setZero(dim());
      return -std::numeric_limits<double>::infinity();
    }

    const obs_family fam = family_at(z);
    // exp(z_phi) overflows to inf on wild trajectories; reject, don't throw
    if (idx_phi_ >= 0 && !std::isfinite(fam.phi)) {
      if (want_grad) grad.setZero(dim());
      return -std::numeric_limits<double>::infinity();
    }
    const double r = idx_phi_ >= 0 ? 1.0 / fam.phi : 0.0;

    double loglik = 0.0;
    Eigen::VectorXd fbar(n);
    double sum_dr = 0.0, sum_dlambda = 0.0;
    for (Eigen::Index c = 0; c < n; ++c) {
      loglik += family_logpmf(fam, y_[c], ws.mu[c]);
      if (want_grad) {
        const obs_grad og = family_logpmf_grad(fam, y_[c], ws.mu[c]);
        fbar[c] = ws.clamped[static_cast<std::size_t>(c)] ? 0.0 : og.d_mu * ws.mu[c];
        sum_dr += og.d_r;
        sum_dlambda += og.d_lambda;
      }
    }

    double logprior = 0.0;
    for (Eigen::Index i = 0; i < dim(); ++i)
      logprior += prior_logpdf_z(kinds_[static_cast<std::size_t>(i)], z[i], spec_.priors);

    const double lp = loglik + logprior;
    if (!std::isfinite(lp)) {
      if (want_grad) grad.setZero(dim());
      return -std::numeric_limits<double>::infinity();
    }
    if (!want_grad) return lp;

    // ---- reverse pass ----
    const double bias_var = spec_.bias ? std::exp(2.0 * z[Pk_ - 1]) : 0.0;

    // ubar = K_nm^T fbar, assembled from panel aggregates of fbar.
    Eigen::VectorXd Fw = Eigen::VectorXd::Zero(W);   // sum of fbar by week
    Eigen::VectorXd Fl = Eigen::VectorXd::Zero(L);   // sum of fbar by location
    Eigen::MatrixXd Fwl = Eigen::MatrixXd::Zero(W, L);
    for (Eigen::Index c = 0; c < n; ++c) {
      Fw[cell_w_[static_cast<std::size_t>(c)]] += fbar[c];
      Fl[cell_loc_[static_cast<std::size_t>(c)]] += fbar[c];
      Fwl(cell_w_[static_cast<std::size_t>(c)], cell_loc_[static_cast<std::size_t>(c)]) += fbar[c];
    }
    const double fsum = fbar.sum();

    const Eigen::VectorXd alpha = ws.T.transpose() * Fw;          // Wm
    const Eigen::VectorXd beta = ws.S * Fl;                       // L (S symmetric)
    Eigen::MatrixXd Gamma;                                        // Wm x L
    if (spec_.interaction) Gamma = ws.T.transpose() * Fwl * ws.S;
    Eigen::VectorXd ubar(M);
    for (Eigen::Index j = 0; j < L; ++j)
      for (int b = 0; b < Wm; ++b)
        ubar[j * Wm + b] = alpha[b] + beta[j] + (spec_.interaction ? Gamma(b, j) : 0.0) +
                           bias_var * fsum;

    // Triangular-solve adjoint: u' solves L^T u' = v.
    const Eigen::VectorXd wv = ws.Lmat.triangularView<Eigen::Lower>().solve(ubar);
    grad.tail(M) += wv; // dv
    Eigen::MatrixXd Lbar = -(ws.uprime * wv.transpose());
    Lbar.triangularView<Eigen::StrictlyUpper>().setZero();

    // Cholesky adjoint: Kbar = (1/2) L^{-T} (P + P^T) L^{-1}, P = Phi(L^T Lbar).
    Eigen::MatrixXd P = ws.Lmat.transpose() * Lbar;
    P.triangularView<Eigen::StrictlyUpper>().setZero();
    P.diagonal() *= 0.5;
    const Eigen::MatrixXd X = ws.Lmat.transpose().triangularView<Eigen::Upper>().solve(P);
    const Eigen::MatrixXd Y =
        ws.Lmat.transpose().triangularView<Eigen::Upper>().solve(X.transpose());
    Eigen::MatrixXd Kbar = 0.5 * (Y.transpose() + Y);

    // The jitter scales with mean(diag K_mm), so its derivative contributes a
    // trace term: effective adjoint = Kbar + (factor/M) tr(Kbar) I.
    const double tr_corr = ws.jitter_factor / static_cast<double>(M) * Kbar.trace();
    Kbar.diagonal().array() += tr_corr;

    // Reduced adjoints: A_t(w,b) multiplies dT(w,b); A_s(i,j) multiplies dS(i,j).
    Eigen::MatrixXd At = Eigen::MatrixXd::Zero(W, Wm);
    Eigen::MatrixXd As = Eigen::MatrixXd::Zero(L, L);
    double bias_acc = 0.0;

    // K_nm side, factorized through the panel: G = Umat * (1 + inter*S),
    // H = (1 + inter*T_block) ... assembled per cell.
    {
      Eigen::MatrixXd Sp = inter * ws.S;
      Sp.array() += 1.0;
      Eigen::MatrixXd Tp = inter * ws.T;
      Tp.array() += 1.0;
      const Eigen::MatrixXd G = ws.Umat * Sp;  // Wm x L
      const Eigen::MatrixXd H = Tp * ws.Umat;  // W x L
      const double usum = ws.uprime.sum();
      for (Eigen::Index c = 0; c < n; ++c) {
        const int lc = cell_loc_[static_cast<std::size_t>(c)];
        const int wc = cell_w_[static_cast<std::size_t>(c)];
        At.row(wc) += fbar[c] * G.col(lc).transpose();
        As.row(lc) += fbar[c] * H.row(wc);
        bias_acc += fbar[c] * usum;
      }
    }

    // K_mm side: direct sweep over inducing pairs.
    for (Eigen::Index i = 0; i < L; ++i)
      for (int a = 0; a < Wm; ++a) {
        const Eigen::Index m1 = i * Wm + a;
        const int wrow = grid_.week_positions[static_cast<std::size_t>(a)];
        for (Eigen::Index j = 0; j < L; ++j)
          for (int b = 0; b < Wm; ++b) {
            const double kb = Kbar(m1, j * Wm + b);
            At(wrow, b) += kb * (1.0 + inter * ws.S(i, j));
            As(i, j) += kb * (1.0 + inter * ws.Tmm(a, b));
            bias_acc += kb;
          }
      }

    for (int k = 0; k < Pt_; ++k)
      grad[k] += (ws.dT[static_cast<std::size_t>(k)].array() * At.array()).sum();
    for (int k = 0; k < Ps_; ++k)
      grad[Pt_ + k] += (ws.dS[static_cast<std::size_t>(k)].array() * As.array()).sum();
    if (spec_.bias) grad[Pk_ - 1] += 2.0 * bias_var * bias_acc;

    if (idx_phi_ >= 0) grad[idx_phi_] += sum_dr * (-r); // dr/d log(phi) = -r
    if (idx_lambda_ >= 0) grad[idx_lambda_] += sum_dlambda;

    for (Eigen::Index i = 0; i < dim(); ++i)
      grad[i] += prior_dlogpdf_z(kinds_[static_cast<std::size_t>(i)], z[i], spec_.priors);

    return lp;
  }

  const Eigen::VectorXd& y_dbl_init() const {
    if (y_dbl_.size() != y_.size()) {
      y_dbl_.resize(y_.size());
      for (Eigen::Index i = 0; i < y_.size(); ++i) y_dbl_[i] = static_cast<double>(y_[i]);
    }
    return y_dbl_;
  }

  model_spec spec_;
  dataset data_;
  kernel_expr time_, space_, full_, bias_node_;
  std::vector<param_slot> slots_;
  std::unique_ptr<kernel_gradient> kg_time_, kg_space_;
  int Pt_ = 0, Ps_ = 0, Pk_ = 0;
  offset_table offsets_;
  std::vector<cell_index> cells_;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> y_;
  Eigen::VectorXd e_;
  mutable Eigen::VectorXd y_dbl_;
  std::vector<int> cell_loc_, cell_w_;
  inducing_grid grid_;
  Eigen::MatrixXd week_pts_, sel_pts_, loc_pts_;
  std::vector<std::string> names_;
  std::vector<coord_kind> kinds_;
  std::vector<coord_transform> transforms_;
  int idx_phi_ = -1, idx_lambda_ = -1, latent_offset_ = 0;
  mutable std::uint64_t clamps_ = 0;
};

} // namespace stgp
