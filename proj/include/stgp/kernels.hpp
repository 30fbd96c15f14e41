#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "stgp/errors.hpp"

namespace stgp {

// Covariance functions over space-time inputs. By convention input dimension
// 0 is the week index and dimensions 1-2 are longitude/latitude in degrees.
//
// Conventions that the rest of the library relies on:
//  - the exponential kernel divides the distance by 2l, not l;
//  - bias is the constant kernel k = sigma^2 and realizes the estimated
//    constant mean level;
//  - free hyperparameters live on an unconstrained scale, z = log(sigma) for
//    amplitudes and z = log(l) for lengthscales; the periodic period is a
//    fixed setting, not a sampled parameter.

enum class kernel_kind { exponential, matern32, rbf, periodic, bias, sum, product };

struct kernel_params {
  double variance = 1.0;    // sigma^2
  double lengthscale = 1.0; // l
  double period = 52.0;     // weeks; periodic kernel only
};

struct kernel_node;
using kernel_expr = std::shared_ptr<kernel_node>;

struct kernel_node {
  kernel_kind kind;
  kernel_params params;          // base nodes only
  std::vector<int> active_dims;  // base nodes only; bias ignores it
  kernel_expr left, right;       // sum/product only
};

inline bool is_base(kernel_kind k) {
  return k != kernel_kind::sum && k != kernel_kind::product;
}

inline kernel_expr make_base(kernel_kind kind, kernel_params p, std::vector<int> dims) {
  if (!(p.variance > 0.0) || !(p.lengthscale > 0.0) || !(p.period > 0.0))
    throw validation_error("kernel parameters must be positive");
  if (kind != kernel_kind::bias && dims.empty())
    throw validation_error("base kernel needs at least one active dimension");
  auto n = std::make_shared<kernel_node>();
  n->kind = kind;
  n->params = p;
  n->active_dims = std::move(dims);
  return n;
}

inline kernel_expr k_exponential(double variance, double lengthscale, std::vector<int> dims) {
  return make_base(kernel_kind::exponential, {variance, lengthscale, 52.0}, std::move(dims));
}
inline kernel_expr k_matern32(double variance, double lengthscale, std::vector<int> dims) {
  return make_base(kernel_kind::matern32, {variance, lengthscale, 52.0}, std::move(dims));
}
inline kernel_expr k_rbf(double variance, double lengthscale, std::vector<int> dims) {
  return make_base(kernel_kind::rbf, {variance, lengthscale, 52.0}, std::move(dims));
}
inline kernel_expr k_periodic(double variance, double lengthscale, double period, std::vector<int> dims) {
  return make_base(kernel_kind::periodic, {variance, lengthscale, period}, std::move(dims));
}
inline kernel_expr k_bias(double variance) {
  return make_base(kernel_kind::bias, {variance, 1.0, 52.0}, {});
}
inline kernel_expr k_sum(kernel_expr l, kernel_expr r) {
  auto n = std::make_shared<kernel_node>();
  n->kind = kernel_kind::sum;
  n->left = std::move(l);
  n->right = std::move(r);
  return n;
}
inline kernel_expr k_product(kernel_expr l, kernel_expr r) {
  auto n = std::make_shared<kernel_node>();
  n->kind = kernel_kind::product;
  n->left = std::move(l);
  n->right = std::move(r);
  return n;
}

inline double base_from_distance(kernel_kind kind, const kernel_params& p, double d) {
  switch (kind) {
    case kernel_kind::exponential:
      return p.variance * std::exp(-d / (2.0 * p.lengthscale));
    case kernel_kind::matern32: {
      const double s = std::sqrt(3.0) * d / p.lengthscale;
      return p.variance * (1.0 + s) * std::exp(-s);
    }
    case kernel_kind::rbf:
      return p.variance * std::exp(-(d * d) / (2.0 * p.lengthscale * p.lengthscale));
    case kernel_kind::periodic: {
      const double s = std::sin(M_PI * d / p.period);
      return p.variance * std::exp(-(s * s) / (2.0 * p.lengthscale * p.lengthscale));
    }
    case kernel_kind::bias:
      return p.variance;
    default:
      throw validation_error("base_from_distance: not a base kernel");
  }
}

// d(base)/d(log l) expressed through the kernel value; see each case.
inline double base_dlogl_from_distance(kernel_kind kind, const kernel_params& p, double d, double value) {
  switch (kind) {
    case kernel_kind::exponential:
      return value * d / (2.0 * p.lengthscale);
    case kernel_kind::matern32: {
      const double s = std::sqrt(3.0) * d / p.lengthscale;
      return p.variance * s * s * std::exp(-s);
    }
    case kernel_kind::rbf:
      return value * (d * d) / (p.lengthscale * p.lengthscale);
    case kernel_kind::periodic: {
      const double s = std::sin(M_PI * d / p.period);
      return value * (s * s) / (p.lengthscale * p.lengthscale);
    }
    case kernel_kind::bias:
      return 0.0;
    default:
      throw validation_error("base_dlogl_from_distance: not a base kernel");
  }
}

namespace detail {

inline double distance_dims(const Eigen::MatrixXd& A, Eigen::Index a, const Eigen::MatrixXd& B,
                            Eigen::Index b, const std::vector<int>& dims) {
  double s = 0.0;
  for (int d : dims) {
    const double diff = A(a, d) - B(b, d);
    s += diff * diff;
  }
  return std::sqrt(s);
}

inline double eval_node(const kernel_node& n, const Eigen::MatrixXd& A, Eigen::Index a,
                        const Eigen::MatrixXd& B, Eigen::Index b) {
  switch (n.kind) {
    case kernel_kind::sum:
      return eval_node(*n.left, A, a, B, b) + eval_node(*n.right, A, a, B, b);
    case kernel_kind::product:
      return eval_node(*n.left, A, a, B, b) * eval_node(*n.right, A, a, B, b);
    case kernel_kind::bias:
      return n.params.variance;
    default:
      return base_from_distance(n.kind, n.params, distance_dims(A, a, B, b, n.active_dims));
  }
}

inline void check_dims(const kernel_node& n, Eigen::Index D) {
  if (n.kind == kernel_kind::sum || n.kind == kernel_kind::product) {
    check_dims(*n.left, D);
    check_dims(*n.right, D);
    return;
  }
  if (n.kind == kernel_kind::bias) return;
  for (int d : n.active_dims)
    if (d < 0 || d >= D) throw validation_error("kernel active dimension out of range");
}

} // namespace detail

inline double eval_base(kernel_kind kind, const kernel_params& p, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& x2, const std::vector<int>& active_dims) {
  if (!is_base(kind)) throw validation_error("eval_base: composite node");
  if (!x.allFinite() || !x2.allFinite()) throw validation_error("eval_base: non-finite input");
  if (x.size() != x2.size()) throw validation_error("eval_base: dimension mismatch");
  double s = 0.0;
  if (kind != kernel_kind::bias) {
    for (int d : active_dims) {
      if (d < 0 || d >= x.size()) throw validation_error("eval_base: active dimension out of range");
      const double diff = x[d] - x2[d];
      s += diff * diff;
    }
  }
  return base_from_distance(kind, p, std::sqrt(s));
}

// Gram matrix; rows of X / X2 are points. Symmetric (bitwise) when X and X2
// hold identical point sets because the distance computation is symmetric.
inline Eigen::MatrixXd eval_gram(const kernel_expr& expr, const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& X2) {
  if (!expr) throw validation_error("eval_gram: null kernel");
  if (X.cols() != X2.cols()) throw validation_error("eval_gram: dimension mismatch");
  if (!X.allFinite() || !X2.allFinite()) throw validation_error("eval_gram: non-finite input");
  detail::check_dims(*expr, X.cols());
  Eigen::MatrixXd K(X.rows(), X2.rows());
  for (Eigen::Index a = 0; a < X.rows(); ++a)
    for (Eigen::Index b = 0; b < X2.rows(); ++b) K(a, b) = detail::eval_node(*expr, X, a, X2, b);
  return K;
}

inline Eigen::MatrixXd eval_gram(const kernel_expr& expr, const Eigen::MatrixXd& X) {
  return eval_gram(expr, X, X);
}

namespace detail {
inline void collect_active(const kernel_node& n, std::vector<int>& dims) {
  if (n.kind == kernel_kind::sum || n.kind == kernel_kind::product) {
    collect_active(*n.left, dims);
    collect_active(*n.right, dims);
    return;
  }
  if (n.kind == kernel_kind::bias) return;
  dims.insert(dims.end(), n.active_dims.begin(), n.active_dims.end());
}
} // namespace detail

// k_time + k_space + k_time * k_space. The product node references the same
// underlying nodes as the additive terms, so its hyperparameters are shared
// rather than independent copies. A bias node is appended by the caller.
inline kernel_expr build_spatiotemporal(const kernel_expr& k_time, const kernel_expr& k_space) {
  std::vector<int> td, sd;
  detail::collect_active(*k_time, td);
  detail::collect_active(*k_space, sd);
  for (int t : td)
    for (int s : sd)
      if (t == s) throw validation_error("time and space kernels share an active dimension");
  return k_sum(k_sum(k_time, k_space), k_product(k_time, k_space));
}

namespace detail {
inline kernel_expr clone_rec(const kernel_expr& e,
                             std::unordered_map<const kernel_node*, kernel_expr>& done) {
  auto it = done.find(e.get());
  if (it != done.end()) return it->second;
  auto n = std::make_shared<kernel_node>();
  n->kind = e->kind;
  n->params = e->params;
  n->active_dims = e->active_dims;
  done[e.get()] = n;
  if (e->left) n->left = clone_rec(e->left, done);
  if (e->right) n->right = clone_rec(e->right, done);
  return n;
}
} // namespace detail

// Deep copy preserving node aliasing, so shared hyperparameters stay shared
// in the copy. Used to give each chain private, mutation-safe kernel state.
inline kernel_expr clone_expr(const kernel_expr& e) {
  std::unordered_map<const kernel_node*, kernel_expr> done;
  return detail::clone_rec(e, done);
}

// One slot per free hyperparameter. Shared nodes (the interaction term)
// contribute their slots once; depth-first left-to-right order.
struct param_slot {
  kernel_node* node;
  bool is_lengthscale; // false -> amplitude (z = log sigma)
  std::string name;
};

namespace detail {

inline std::string dims_tag(const kernel_node& n) {
  if (n.kind == kernel_kind::bias) return "bias";
  if (n.active_dims == std::vector<int>{0}) return "time";
  if (n.active_dims == std::vector<int>{1, 2}) return "space";
  return "k";
}

inline void collect_slots_rec(const kernel_expr& e, std::vector<param_slot>& out,
                              std::vector<const kernel_node*>& seen,
                              std::unordered_map<std::string, int>& tag_count) {
  if (e->kind == kernel_kind::sum || e->kind == kernel_kind::product) {
    collect_slots_rec(e->left, out, seen, tag_count);
    collect_slots_rec(e->right, out, seen, tag_count);
    return;
  }
  for (const kernel_node* p : seen)
    if (p == e.get()) return;
  seen.push_back(e.get());
  std::string tag = dims_tag(*e);
  const int idx = ++tag_count[tag];
  const std::string suffix = idx == 1 ? std::string() : std::to_string(idx);
  if (e->kind == kernel_kind::bias) {
    out.push_back({e.get(), false, "bias_var" + suffix});
    return;
  }
  out.push_back({e.get(), true, "len_" + tag + suffix});
  out.push_back({e.get(), false, "sigma_" + tag + suffix});
}

} // namespace detail

inline std::vector<param_slot> collect_slots(const kernel_expr& expr) {
  if (!expr) throw validation_error("collect_slots: null kernel");
  std::vector<param_slot> out;
  std::vector<const kernel_node*> seen;
  std::unordered_map<std::string, int> tag_count;
  detail::collect_slots_rec(expr, out, seen, tag_count);
  return out;
}

inline std::vector<std::string> param_names(const kernel_expr& expr) {
  std::vector<std::string> names;
  for (const auto& s : collect_slots(expr)) names.push_back(s.name);
  return names;
}

// Unconstrained coordinates: z = log(l) for lengthscales, z = log(sigma) for
// amplitudes (so the stored variance is exp(2z)).
inline Eigen::VectorXd param_vector(const kernel_expr& expr) {
  const auto slots = collect_slots(expr);
  Eigen::VectorXd z(static_cast<Eigen::Index>(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i)
    z[static_cast<Eigen::Index>(i)] = slots[i].is_lengthscale
                                          ? std::log(slots[i].node->params.lengthscale)
                                          : 0.5 * std::log(slots[i].node->params.variance);
  return z;
}

inline void param_unvector(const kernel_expr& expr, const Eigen::VectorXd& z) {
  const auto slots = collect_slots(expr);
  if (z.size() != static_cast<Eigen::Index>(slots.size()))
    throw validation_error("param_unvector: vector length mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double v = z[static_cast<Eigen::Index>(i)];
    if (slots[i].is_lengthscale)
      slots[i].node->params.lengthscale = std::exp(v);
    else
      slots[i].node->params.variance = std::exp(2.0 * v);
  }
}

// Value and gradient with respect to the unconstrained coordinates of the
// given slot list, accumulated through shared nodes. grad must hold
// slots.size() entries and be zero-initialized by the caller.
class kernel_gradient {
public:
  explicit kernel_gradient(const kernel_expr& expr) : expr_(expr), slots_(collect_slots(expr)) {
    if (slots_.size() > max_params)
      throw validation_error("kernel has too many free parameters");
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      auto& e = index_[slots_[i].node];
      (slots_[i].is_lengthscale ? e.first : e.second) = static_cast<int>(i);
    }
  }

  const std::vector<param_slot>& slots() const { return slots_; }
  Eigen::Index n_params() const { return static_cast<Eigen::Index>(slots_.size()); }

  double value_and_grad(const Eigen::MatrixXd& A, Eigen::Index a, const Eigen::MatrixXd& B,
                        Eigen::Index b, double* grad) const {
    return rec(*expr_, A, a, B, b, grad);
  }

private:
  static constexpr std::size_t max_params = 64;

  double rec(const kernel_node& n, const Eigen::MatrixXd& A, Eigen::Index a,
             const Eigen::MatrixXd& B, Eigen::Index b, double* grad) const {
    if (n.kind == kernel_kind::sum)
      return rec(*n.left, A, a, B, b, grad) + rec(*n.right, A, a, B, b, grad);
    if (n.kind == kernel_kind::product) {
      std::array<double, max_params> gl{}, gr{};
      const double vl = rec(*n.left, A, a, B, b, gl.data());
      const double vr = rec(*n.right, A, a, B, b, gr.data());
      for (std::size_t i = 0; i < slots_.size(); ++i) grad[i] += gl[i] * vr + vl * gr[i];
      return vl * vr;
    }
    const double d = n.kind == kernel_kind::bias
                         ? 0.0
                         : detail::distance_dims(A, a, B, b, n.active_dims);
    const double v = base_from_distance(n.kind, n.params, d);
    const auto it = index_.find(&n);
    if (it != index_.end()) {
      if (it->second.first >= 0)
        grad[it->second.first] += base_dlogl_from_distance(n.kind, n.params, d, v);
      if (it->second.second >= 0) grad[it->second.second] += 2.0 * v;
    }
    return v;
  }

  struct slot_pair {
    int first = -1;  // lengthscale slot
    int second = -1; // amplitude slot
  };

  kernel_expr expr_;
  std::vector<param_slot> slots_;
  std::unordered_map<const kernel_node*, slot_pair> index_;
};

} // namespace stgp
