#pragma once

// Levenberg-Marquardt over a factor graph. Huber terms are handled by
// iteratively reweighted normal equations; landmark points are eliminated
// with a Schur complement before the dense reduced solve.

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "msf/factors.hpp"

namespace msf {

struct SolverOptions {
  int max_iter = 20;
  double lambda_init = 1e-4;
  double rel_tol = 1e-6;
  double lambda_max = 1e10;
};

struct SolverReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::string termination;
  bool usable = true;  // false when no step could be taken and states are unchanged
  std::map<std::string, double> family_cost;  // at the final state

  std::string to_key_value(const std::string& tag = "solve") const {
    std::ostringstream ss;
    ss << std::setprecision(9) << "event=" << tag << " initial_cost=" << initial_cost
       << " final_cost=" << final_cost << " iterations=" << iterations
       << " termination=" << termination;
    for (const auto& [k, v] : family_cost) ss << " cost." << k << '=' << v;
    return ss.str();
  }
};

inline std::map<std::string, double> family_costs(const FactorGraph& g, const Variables& v) {
  std::map<std::string, double> out;
  for (const auto& f : g) out[to_string(f->kind())] += f->cost(v);
  return out;
}

class Problem {
 public:
  Variables variables;
  FactorGraph factors;

  template <class T>
  VarId add_variable(const T& value, bool constant = false) {
    const VarId id = variables.add(value);
    if (constant) set_constant(id);
    return id;
  }

  void add_factor(FactorPtr f) { factors.push_back(std::move(f)); }

  void set_constant(VarId id, bool constant = true) {
    auto& m = masks_[key(id)];
    m.assign(tangent_dim(id.kind), constant);
  }

  /// Holds individual tangent dimensions of a variable fixed.
  void fix_dims(VarId id, const std::vector<int>& dims) {
    auto& m = masks_[key(id)];
    if (m.empty()) m.assign(tangent_dim(id.kind), false);
    for (int d : dims) m.at(d) = true;
  }

  bool is_constant(VarId id) const {
    auto it = masks_.find(key(id));
    if (it == masks_.end()) return false;
    for (bool b : it->second) {
      if (!b) return false;
    }
    return true;
  }

  double cost() const { return weighted_cost(factors, variables); }

  SolverReport solve(const SolverOptions& opt = {}) {
    SolverReport rep;
    build_ordering();
    double cost0 = cost();
    rep.initial_cost = cost0;
    rep.final_cost = cost0;
    if (reduced_dim_ == 0 && point_slots_.empty()) {
      rep.termination = "no_free_variables";
      rep.family_cost = family_costs(factors, variables);
      return rep;
    }
    if (cost0 < 1e-30) {
      rep.termination = "zero_cost";
      rep.family_cost = family_costs(factors, variables);
      return rep;
    }
    double lambda = opt.lambda_init;
    double cost = cost0;
    rep.termination = "max_iterations";
    bool any_accept = false;
    int small_decreases = 0;
    for (int it = 0; it < opt.max_iter; ++it) {
      rep.iterations = it + 1;
      linearize();
      if (g_.size() > 0 && g_.cwiseAbs().maxCoeff() < 1e-14 * (1.0 + cost) && points_gradient_small(cost)) {
        rep.termination = "gradient";
        break;
      }
      bool accepted = false;
      while (!accepted) {
        VecX dx_reduced;
        std::vector<Vec3> dx_points;
        if (!solve_damped(lambda, dx_reduced, dx_points)) {
          lambda *= 10.0;
          if (lambda > opt.lambda_max) break;
          continue;
        }
        Variables trial = variables;
        apply(trial, dx_reduced, dx_points);
        const double new_cost = weighted_cost(factors, trial);
        if (std::isfinite(new_cost) && new_cost <= cost) {
          const double decrease = cost - new_cost;
          variables = std::move(trial);
          cost = new_cost;
          accepted = any_accept = true;
          lambda = std::max(lambda * 0.1, 1e-12);
          // Two small relative decreases in a row: the damped step has
          // settled onto the Gauss-Newton step.
          small_decreases = decrease <= opt.rel_tol * (cost + decrease) ? small_decreases + 1 : 0;
          if (small_decreases >= 2 || cost < 1e-30) {
            rep.termination = "converged";
            rep.final_cost = cost;
            rep.family_cost = family_costs(factors, variables);
            return rep;
          }
        } else {
          lambda *= 10.0;
          if (lambda > opt.lambda_max) break;
        }
      }
      if (!accepted) {
        rep.termination = any_accept ? "converged" : "no_descent";
        rep.usable = any_accept;
        break;
      }
    }
    rep.final_cost = cost;
    rep.family_cost = family_costs(factors, variables);
    return rep;
  }

 private:
  static long key(VarId id) { return static_cast<long>(id.kind) * (1L << 40) + id.index; }

  const std::vector<bool>* mask(VarId id) const {
    auto it = masks_.find(key(id));
    return it == masks_.end() ? nullptr : &it->second;
  }

  void build_ordering() {
    reduced_offset_.clear();
    point_slot_.clear();
    point_slots_.clear();
    reduced_vars_.clear();
    reduced_dim_ = 0;
    auto add_reduced = [&](VarId id) {
      if (is_constant(id)) return;
      reduced_offset_[key(id)] = reduced_dim_;
      reduced_vars_.push_back(id);
      reduced_dim_ += tangent_dim(id.kind);
    };
    for (int i = 0; i < static_cast<int>(variables.states.size()); ++i) add_reduced({VarKind::state, i});
    for (int i = 0; i < static_cast<int>(variables.poses.size()); ++i) add_reduced({VarKind::pose, i});
    for (int i = 0; i < static_cast<int>(variables.points.size()); ++i) {
      const VarId id{VarKind::point, i};
      if (is_constant(id)) continue;
      point_slot_[i] = static_cast<int>(point_slots_.size());
      point_slots_.push_back(i);
    }
  }

  struct PointBlock {
    Mat3 hpp = Mat3::Zero();
    Vec3 gp = Vec3::Zero();
    std::vector<std::pair<int, MatX>> hsp;  // (reduced offset, dim x 3)
  };

  void linearize() {
    H_ = MatX::Zero(reduced_dim_, reduced_dim_);
    g_ = VecX::Zero(reduced_dim_);
    points_.assign(point_slots_.size(), PointBlock{});
    VecX r;
    std::vector<MatX> J;
    for (const auto& f : factors) {
      if (!f->evaluate(variables, r, &J)) continue;
      double scale = f->weight();
      if (f->robust()) scale *= huber(r.squaredNorm(), *f->robust()).slope;
      if (scale == 0.0) continue;
      const auto& vars = f->variables();
      for (size_t a = 0; a < vars.size(); ++a) {
        const MatX Ja = masked(vars[a], J[a]);
        const int oa = offset(vars[a]);
        const int pa = slot(vars[a]);
        if (oa < 0 && pa < 0) continue;
        if (oa >= 0) g_.segment(oa, Ja.cols()) += scale * Ja.transpose() * r;
        if (pa >= 0) points_[pa].gp += scale * Ja.transpose() * r;
        for (size_t b = 0; b < vars.size(); ++b) {
          const int ob = offset(vars[b]);
          const int pb = slot(vars[b]);
          if (ob < 0 && pb < 0) continue;
          const MatX Jb = masked(vars[b], J[b]);
          if (oa >= 0 && ob >= 0) {
            H_.block(oa, ob, Ja.cols(), Jb.cols()) += scale * Ja.transpose() * Jb;
          } else if (pa >= 0 && pb >= 0) {
            if (pa == pb) points_[pa].hpp += scale * Ja.transpose() * Jb;
          } else if (oa >= 0 && pb >= 0) {
            add_hsp(points_[pb], oa, scale * Ja.transpose() * Jb);
          }
        }
      }
    }
    // Masked dimensions stay put.
    for (const VarId& id : reduced_vars_) {
      const auto* m = mask(id);
      if (!m) continue;
      const int o = offset(id);
      for (size_t d = 0; d < m->size(); ++d) {
        if ((*m)[d]) H_(o + d, o + d) = 1.0;
      }
    }
  }

  bool points_gradient_small(double cost) const {
    for (const auto& p : points_) {
      if (p.gp.cwiseAbs().maxCoeff() >= 1e-14 * (1.0 + cost)) return false;
    }
    return true;
  }

  static void add_hsp(PointBlock& pb, int offset, const MatX& block) {
    for (auto& [o, m] : pb.hsp) {
      if (o == offset) {
        m += block;
        return;
      }
    }
    pb.hsp.emplace_back(offset, block);
  }

  MatX masked(VarId id, const MatX& j) const {
    const auto* m = mask(id);
    if (!m) return j;
    MatX out = j;
    for (size_t d = 0; d < m->size(); ++d) {
      if ((*m)[d]) out.col(d).setZero();
    }
    return out;
  }

  int offset(VarId id) const {
    if (id.kind == VarKind::point) return -1;
    auto it = reduced_offset_.find(key(id));
    return it == reduced_offset_.end() ? -1 : it->second;
  }
  int slot(VarId id) const {
    if (id.kind != VarKind::point) return -1;
    auto it = point_slot_.find(id.index);
    return it == point_slot_.end() ? -1 : it->second;
  }

  bool solve_damped(double lambda, VecX& dx, std::vector<Vec3>& dp) const {
    MatX S = H_;
    VecX rhs = -g_;
    for (int i = 0; i < reduced_dim_; ++i) S(i, i) += lambda * (H_(i, i) + 1e-9);
    std::vector<Mat3> hpp_inv(points_.size());
    for (size_t p = 0; p < points_.size(); ++p) {
      Mat3 hpp = points_[p].hpp;
      for (int i = 0; i < 3; ++i) hpp(i, i) += lambda * (points_[p].hpp(i, i) + 1e-9);
      Eigen::LDLT<Mat3> ldlt(hpp);
      if (ldlt.info() != Eigen::Success) return false;
      hpp_inv[p] = ldlt.solve(Mat3::Identity());
      if (!hpp_inv[p].allFinite()) return false;
      for (const auto& [oa, ma] : points_[p].hsp) {
        const MatX t = ma * hpp_inv[p];
        rhs.segment(oa, ma.rows()) += t * points_[p].gp;
        for (const auto& [ob, mb] : points_[p].hsp) {
          S.block(oa, ob, ma.rows(), mb.rows()) -= t * mb.transpose();
        }
      }
    }
    dx = VecX::Zero(reduced_dim_);
    if (reduced_dim_ > 0) {
      Eigen::LDLT<MatX> ldlt(S);
      if (ldlt.info() != Eigen::Success) return false;
      dx = ldlt.solve(rhs);
      if (!dx.allFinite()) return false;
    }
    dp.assign(points_.size(), Vec3::Zero());
    for (size_t p = 0; p < points_.size(); ++p) {
      Vec3 b = -points_[p].gp;
      for (const auto& [oa, ma] : points_[p].hsp) b -= ma.transpose() * dx.segment(oa, ma.rows());
      dp[p] = hpp_inv[p] * b;
    }
    return true;
  }

  void apply(Variables& v, const VecX& dx, const std::vector<Vec3>& dp) const {
    for (const VarId& id : reduced_vars_) {
      const int o = offset(id);
      v.retract(id, dx.segment(o, tangent_dim(id.kind)));
    }
    for (size_t p = 0; p < point_slots_.size(); ++p) {
      v.points[point_slots_[p]] += dp[p];
    }
  }

  std::map<long, std::vector<bool>> masks_;
  std::map<long, int> reduced_offset_;
  std::map<int, int> point_slot_;
  std::vector<int> point_slots_;
  std::vector<VarId> reduced_vars_;
  int reduced_dim_ = 0;
  MatX H_;
  VecX g_;
  std::vector<PointBlock> points_;
};

}  // namespace msf
