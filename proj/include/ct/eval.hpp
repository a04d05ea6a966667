#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/ct_model.hpp"
#include "ct/rng.hpp"
#include "ct/safe_policy.hpp"
#include "ct/stats.hpp"
#include "ct/traj.hpp"

namespace ct {

// ---------------------------------------------------------------------------
// Policies under evaluation emit one per-step action distribution per logged
// decision point.
// ---------------------------------------------------------------------------

struct Dist1D {
  enum class Kind { point, gaussian, uniform } kind = Kind::point;
  double a = 0.0, b = 0.0;  // point: value; gaussian: (mu, sigma); uniform: [a, b]

  static Dist1D point(double v) { return {Kind::point, v, 0.0}; }
  static Dist1D gaussian(double mu, double sigma) { return {Kind::gaussian, mu, sigma}; }
  static Dist1D uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }

  double mean() const {
    switch (kind) {
      case Kind::point: return a;
      case Kind::gaussian: return a;
      default: return 0.5 * (a + b);
    }
  }
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

struct PolicyDecision {
  std::vector<Dist1D> dims;
  std::vector<double> means() const {
    std::vector<double> m;
    m.reserve(dims.size());
    for (const auto& d : dims) m.push_back(d.mean());
    return m;
  }
};

class EvalPolicy {
 public:
  virtual ~EvalPolicy() = default;
  virtual std::string name() const = 0;
  virtual std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const = 0;
};

// ---------------------------------------------------------------------------
// Naive baselines: worst-case benchmarks.
// ---------------------------------------------------------------------------

struct ActionBounds {
  std::vector<double> caps;  // per-dim maximum dose
};

namespace detail {
inline PolicyDecision point_decision(const std::vector<double>& v) {
  PolicyDecision d;
  for (double x : v) d.dims.push_back(Dist1D::point(x));
  return d;
}
}  // namespace detail

class MinPolicy final : public EvalPolicy {
 public:
  explicit MinPolicy(int action_dim) : dim_(action_dim) {}
  std::string name() const override { return "min"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    return std::vector<PolicyDecision>(
        traj.steps.size(), detail::point_decision(std::vector<double>(static_cast<size_t>(dim_), 0.0)));
  }

 private:
  int dim_;
};

class MaxPolicy final : public EvalPolicy {
 public:
  explicit MaxPolicy(ActionBounds b) : bounds_(std::move(b)) {}
  std::string name() const override { return "max"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    return std::vector<PolicyDecision>(traj.steps.size(), detail::point_decision(bounds_.caps));
  }

 private:
  ActionBounds bounds_;
};

class AltPolicy final : public EvalPolicy {
 public:
  explicit AltPolicy(ActionBounds b) : bounds_(std::move(b)) {}
  std::string name() const override { return "alt"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    std::vector<PolicyDecision> out;
    const std::vector<double> zeros(bounds_.caps.size(), 0.0);
    for (size_t t = 0; t < traj.steps.size(); ++t)
      out.push_back(detail::point_decision(t % 2 == 0 ? zeros : bounds_.caps));
    return out;
  }

 private:
  ActionBounds bounds_;
};

class RandomPolicy final : public EvalPolicy {
 public:
  explicit RandomPolicy(ActionBounds b) : bounds_(std::move(b)) {}
  std::string name() const override { return "random"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    PolicyDecision d;
    for (double cap : bounds_.caps) d.dims.push_back(Dist1D::uniform(0.0, cap));
    return std::vector<PolicyDecision>(traj.steps.size(), d);
  }

 private:
  ActionBounds bounds_;
};

// Doses scaled by the weight-analog feature (state dim 4).
class WeightPolicy final : public EvalPolicy {
 public:
  explicit WeightPolicy(ActionBounds b) : bounds_(std::move(b)) {}
  std::string name() const override { return "weight"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    std::vector<PolicyDecision> out;
    for (const auto& step : traj.steps) {
      const double w01 = std::clamp((step.state[4] + 2.0) / 4.0, 0.0, 1.0);
      std::vector<double> v;
      for (double cap : bounds_.caps) v.push_back(0.5 * cap * w01);
      out.push_back(detail::point_decision(v));
    }
    return out;
  }

 private:
  ActionBounds bounds_;
};

// The clinician's own logged actions, as point masses.
class PhysicianPolicy final : public EvalPolicy {
 public:
  std::string name() const override { return "physician"; }
  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    std::vector<PolicyDecision> out;
    for (const auto& step : traj.steps) out.push_back(detail::point_decision(step.action));
    return out;
  }
};

inline std::unique_ptr<EvalPolicy> naive_baseline(const std::string& name, int action_dim,
                                                  const ActionBounds& bounds) {
  if (name == "min") return std::make_unique<MinPolicy>(action_dim);
  if (name == "max") return std::make_unique<MaxPolicy>(bounds);
  if (name == "alt") return std::make_unique<AltPolicy>(bounds);
  if (name == "random") return std::make_unique<RandomPolicy>(bounds);
  if (name == "weight") return std::make_unique<WeightPolicy>(bounds);
  throw std::invalid_argument("unknown baseline policy: " + name);
}

// Teacher-forced sequence policy: context comes from the logged trajectory,
// conditioning channels follow the budget-decrement rule.
class SequencePolicyEval final : public EvalPolicy {
 public:
  SequencePolicyEval(const SafePolicy* policy, const CostFunction* budget_cost,
                     double target_return, double kappa, std::string display_name)
      : policy_(policy),
        budget_cost_(budget_cost),
        target_return_(target_return),
        kappa_(kappa),
        name_(std::move(display_name)) {}

  std::string name() const override { return name_; }

  std::vector<PolicyDecision> decide_trajectory(const Trajectory& traj) const override {
    const auto costs = budget_cost_->per_step_costs(traj);
    PolicyRollout roll(*policy_, target_return_, kappa_);
    std::vector<PolicyDecision> out;
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      const auto o = roll.decide(traj.steps[t].state);
      PolicyDecision d;
      for (size_t j = 0; j < o.mu.size(); ++j) d.dims.push_back(Dist1D::gaussian(o.mu[j], o.sigma[j]));
      out.push_back(std::move(d));
      roll.commit(traj.steps[t].action, traj.steps[t].reward, costs[t]);
    }
    return out;
  }

 private:
  const SafePolicy* policy_;
  const CostFunction* budget_cost_;
  double target_return_;
  double kappa_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Behavior model: k-means state clusters x per-dim quantile action bins.
// ---------------------------------------------------------------------------

struct BehaviorModel {
  int k = 0;
  int bins_per_dim = 0;
  int action_dim = 0;
  int state_dim = 0;
  std::vector<double> centroids;           // k x state_dim, normalized space
  std::vector<std::vector<double>> edges;  // per dim, inner edges (bins_per_dim - 1)
  std::vector<double> probs;               // k x n_joint, floored and normalized
  NormStats stats;

  int n_joint() const {
    int n = 1;
    for (int d = 0; d < action_dim; ++d) n *= bins_per_dim;
    return n;
  }

  int cluster_of(const std::vector<double>& raw_state) const {
    std::vector<double> s = raw_state;
    normalize_vector_inplace(s, stats);
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < k; ++c) {
      double d2 = 0.0;
      for (int j = 0; j < state_dim; ++j) {
        const double dlt = s[static_cast<size_t>(j)] - centroids[static_cast<size_t>(c) * state_dim + j];
        d2 += dlt * dlt;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    return best;
  }

  int bin_of(int dim, double v) const {
    const auto& e = edges[static_cast<size_t>(dim)];
    int b = 0;
    while (b < static_cast<int>(e.size()) && v >= e[static_cast<size_t>(b)]) ++b;
    return b;
  }

  int joint_bin(const std::vector<double>& action) const {
    int idx = 0;
    for (int d = 0; d < action_dim; ++d) idx = idx * bins_per_dim + bin_of(d, action[static_cast<size_t>(d)]);
    return idx;
  }

  double prob(int cluster, int joint) const {
    return probs[static_cast<size_t>(cluster) * n_joint() + joint];
  }

  // Probability the decision's action lands in bin b of one dim.
  double dim_bin_prob(const Dist1D& d, int dim, int b) const {
    const auto& e = edges[static_cast<size_t>(dim)];
    const double lo = (b == 0) ? -1e300 : e[static_cast<size_t>(b - 1)];
    const double hi = (b == static_cast<int>(e.size())) ? 1e300 : e[static_cast<size_t>(b)];
    switch (d.kind) {
      case Dist1D::Kind::point:
        return (d.a >= lo && d.a < hi) ? 1.0 : 0.0;
      case Dist1D::Kind::gaussian:
        return normal_cdf((hi - d.a) / d.b) - normal_cdf((lo - d.a) / d.b);
      default: {
        const double width = d.b - d.a;
        if (width <= 0.0) return (d.a >= lo && d.a < hi) ? 1.0 : 0.0;
        const double olo = std::max(lo, d.a), ohi = std::min(hi, d.b);
        return std::max(0.0, ohi - olo) / width;
      }
    }
  }

  double decision_joint_prob(const PolicyDecision& d, int joint) const {
    double p = 1.0;
    for (int dim = action_dim - 1; dim >= 0; --dim) {
      const int b = joint % bins_per_dim;
      joint /= bins_per_dim;
      p *= dim_bin_prob(d.dims[static_cast<size_t>(dim)], dim, b);
    }
    return p;
  }
};

inline BehaviorModel fit_behavior_model(const TrajectoryDataset& ds, int k, int bins_per_dim,
                                        uint64_t seed, double prob_floor = 1e-4,
                                        int kmeans_iters = 25) {
  BehaviorModel bm;
  bm.k = k;
  bm.bins_per_dim = bins_per_dim;
  bm.action_dim = ds.action_dim;
  bm.state_dim = ds.state_dim;
  bm.stats = ds.norm_stats.present() ? ds.norm_stats : compute_norm_stats(ds);

  std::vector<std::vector<double>> points;
  std::vector<std::vector<double>> acts;
  for (const auto& traj : ds.trajectories) {
    for (const auto& step : traj.steps) {
      std::vector<double> s = step.state;
      normalize_vector_inplace(s, bm.stats);
      points.push_back(std::move(s));
      acts.push_back(step.action);
    }
  }
  const size_t n = points.size();
  if (n == 0) throw std::invalid_argument("behavior model fit on empty dataset");
  if (static_cast<size_t>(k) > n)
    throw std::invalid_argument("k larger than sample count");

  // k-means++ seeding, fixed iteration count
  Rng rng(split_seed(seed, fnv1a64("behavior-kmeans")));
  const int S = bm.state_dim;
  bm.centroids.assign(static_cast<size_t>(k) * S, 0.0);
  std::vector<double> d2(n, 1e300);
  size_t first = rng.below(n);
  std::copy(points[first].begin(), points[first].end(), bm.centroids.begin());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double dd = 0.0;
      for (int j = 0; j < S; ++j) {
        const double dlt = points[i][static_cast<size_t>(j)] -
                           bm.centroids[static_cast<size_t>(c - 1) * S + j];
        dd += dlt * dlt;
      }
      d2[i] = std::min(d2[i], dd);
      total += d2[i];
    }
    double r = rng.uniform() * total;
    size_t pick = n - 1;
    for (size_t i = 0; i < n; ++i) {
      r -= d2[i];
      if (r <= 0.0) {
        pick = i;
        break;
      }
    }
    std::copy(points[pick].begin(), points[pick].end(),
              bm.centroids.begin() + static_cast<size_t>(c) * S);
  }
  std::vector<int> assign(n, 0);
  for (int it = 0; it < kmeans_iters; ++it) {
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = 1e300;
      for (int c = 0; c < k; ++c) {
        double dd = 0.0;
        for (int j = 0; j < S; ++j) {
          const double dlt =
              points[i][static_cast<size_t>(j)] - bm.centroids[static_cast<size_t>(c) * S + j];
          dd += dlt * dlt;
        }
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      assign[i] = best;
    }
    std::vector<double> sums(static_cast<size_t>(k) * S, 0.0);
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      for (int j = 0; j < S; ++j) sums[static_cast<size_t>(assign[i]) * S + j] += points[i][static_cast<size_t>(j)];
      ++counts[static_cast<size_t>(assign[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // keep empty-cluster centroid
      for (int j = 0; j < S; ++j)
        bm.centroids[static_cast<size_t>(c) * S + j] =
            sums[static_cast<size_t>(c) * S + j] / counts[static_cast<size_t>(c)];
    }
  }

  // per-dim quantile bin edges
  bm.edges.resize(static_cast<size_t>(bm.action_dim));
  for (int d = 0; d < bm.action_dim; ++d) {
    std::vector<double> vals;
    vals.reserve(n);
    for (const auto& a : acts) vals.push_back(a[static_cast<size_t>(d)]);
    for (int b = 1; b < bins_per_dim; ++b)
      bm.edges[static_cast<size_t>(d)].push_back(
          percentile(vals, static_cast<double>(b) / bins_per_dim));
  }

  // smoothed per-cluster joint-bin frequencies: mix with a uniform floor so
  // every probability stays >= prob_floor
  const int nj = bm.n_joint();
  if (prob_floor * nj >= 1.0) throw std::invalid_argument("prob_floor too large for bin count");
  std::vector<double> counts(static_cast<size_t>(k) * nj, 0.0);
  std::vector<double> totals(static_cast<size_t>(k), 0.0);
  for (size_t i = 0; i < n; ++i) {
    const int j = bm.joint_bin(acts[i]);
    counts[static_cast<size_t>(assign[i]) * nj + j] += 1.0;
    totals[static_cast<size_t>(assign[i])] += 1.0;
  }
  bm.probs.assign(static_cast<size_t>(k) * nj, 0.0);
  for (int c = 0; c < k; ++c) {
    for (int j = 0; j < nj; ++j) {
      const double emp = totals[static_cast<size_t>(c)] > 0.0
                             ? counts[static_cast<size_t>(c) * nj + j] / totals[static_cast<size_t>(c)]
                             : 1.0 / nj;
      bm.probs[static_cast<size_t>(c) * nj + j] = (1.0 - prob_floor * nj) * emp + prob_floor;
    }
  }
  return bm;
}

// ---------------------------------------------------------------------------
// omega: fraction of survivors among the N patients closest to the clinician.
// ---------------------------------------------------------------------------

struct PatientDiff {
  double iv = 0.0;      // mean |b - a| on the IV dim
  double vaso = 0.0;    // mean |b - a| on the vaso dim
  double action = 0.0;  // Euclidean norm of the per-dim mean absolute diffs
  double iv_signed = 0.0;
  double vaso_signed = 0.0;
  Outcome outcome = Outcome::survived;
};

inline PatientDiff patient_diff(const Trajectory& traj, const std::vector<PolicyDecision>& dec) {
  PatientDiff d;
  d.outcome = traj.outcome;
  const double n = static_cast<double>(traj.steps.size());
  for (size_t t = 0; t < traj.steps.size(); ++t) {
    const auto b = dec[t].means();
    d.iv += std::abs(b[0] - traj.steps[t].action[0]) / n;
    d.vaso += std::abs(b[1] - traj.steps[t].action[1]) / n;
    d.iv_signed += (b[0] - traj.steps[t].action[0]) / n;
    d.vaso_signed += (b[1] - traj.steps[t].action[1]) / n;
  }
  d.action = std::sqrt(d.iv * d.iv + d.vaso * d.vaso);
  return d;
}

// Rank-based selection; ties broken by an outcome-blind shuffled order.
inline double omega_from_diffs(const std::vector<double>& diffs,
                               const std::vector<Outcome>& outcomes, int N, Rng& rng) {
  std::vector<size_t> survivors, deaths;
  for (size_t i = 0; i < outcomes.size(); ++i)
    (outcomes[i] == Outcome::survived ? survivors : deaths).push_back(i);
  if (static_cast<int>(survivors.size()) < N || static_cast<int>(deaths.size()) < N)
    throw std::invalid_argument("omega needs at least N survivors and N deaths");
  rng.shuffle(survivors);
  rng.shuffle(deaths);
  std::vector<size_t> chosen(survivors.begin(), survivors.begin() + N);
  chosen.insert(chosen.end(), deaths.begin(), deaths.begin() + N);
  rng.shuffle(chosen);  // outcome-blind tie-break order
  std::stable_sort(chosen.begin(), chosen.end(),
                   [&](size_t a, size_t b) { return diffs[a] < diffs[b]; });
  int surv = 0;
  for (int i = 0; i < N; ++i)
    if (outcomes[chosen[static_cast<size_t>(i)]] == Outcome::survived) ++surv;
  return static_cast<double>(surv) / N;
}

struct OmegaResult {
  double iv = 0.0;
  double vaso = 0.0;
  double action = 0.0;
};

inline OmegaResult omega(const std::vector<PatientDiff>& diffs, int N, uint64_t seed) {
  std::vector<double> iv, vaso, action;
  std::vector<Outcome> outcomes;
  for (const auto& d : diffs) {
    iv.push_back(d.iv);
    vaso.push_back(d.vaso);
    action.push_back(d.action);
    outcomes.push_back(d.outcome);
  }
  OmegaResult r;
  Rng r1(split_seed(seed, 1)), r2(split_seed(seed, 2)), r3(split_seed(seed, 3));
  r.iv = omega_from_diffs(iv, outcomes, N, r1);
  r.vaso = omega_from_diffs(vaso, outcomes, N, r2);
  r.action = omega_from_diffs(action, outcomes, N, r3);
  return r;
}

// ---------------------------------------------------------------------------
// DIFF-vs-mortality curve.
// ---------------------------------------------------------------------------

struct DiffCurveRow {
  std::string dim;
  double lo = 0.0, hi = 0.0, center = 0.0;
  int count = 0;
  double mortality = 0.0;
  double sem = 0.0;
};

inline std::vector<DiffCurveRow> diff_mortality_curve(const std::vector<PatientDiff>& diffs,
                                                      int n_bins) {
  std::vector<DiffCurveRow> rows;
  const auto emit = [&](const std::string& dim, auto getter) {
    double lo = 1e300, hi = -1e300;
    for (const auto& d : diffs) {
      lo = std::min(lo, getter(d));
      hi = std::max(hi, getter(d));
    }
    if (hi <= lo) hi = lo + 1e-9;
    const double w = (hi - lo) / n_bins;
    for (int b = 0; b < n_bins; ++b) {
      const double blo = lo + b * w;
      const double bhi = (b == n_bins - 1) ? hi + 1e-12 : lo + (b + 1) * w;
      std::vector<double> deaths;
      for (const auto& d : diffs) {
        const double v = getter(d);
        if (v >= blo && v < bhi) deaths.push_back(d.outcome == Outcome::died ? 1.0 : 0.0);
      }
      if (deaths.empty()) continue;  // empty bins emitted as missing
      DiffCurveRow row;
      row.dim = dim;
      row.lo = blo;
      row.hi = bhi;
      row.center = 0.5 * (blo + bhi);
      row.count = static_cast<int>(deaths.size());
      row.mortality = mean(deaths);
      row.sem = sem(deaths);
      rows.push_back(row);
    }
  };
  emit("iv", [](const PatientDiff& d) { return d.iv_signed; });
  emit("vaso", [](const PatientDiff& d) { return d.vaso_signed; });
  return rows;
}

// ---------------------------------------------------------------------------
// Unsafe-action statistics.
// ---------------------------------------------------------------------------

struct UnsafeStats {
  double frac_vaso_075 = 0.0;
  double frac_vaso_090 = 0.0;
  double frac_dvaso_075 = 0.0;
  double frac_dvaso_090 = 0.0;
  double max_vaso = 0.0;
  double max_dvaso = 0.0;
  size_t n_decisions = 0;
  size_t n_changes = 0;
};

// vaso_sequences: per patient, the consecutive vaso doses of one policy.
inline UnsafeStats unsafe_stats(const std::vector<std::vector<double>>& vaso_sequences) {
  UnsafeStats s;
  size_t v075 = 0, v090 = 0, d075 = 0, d090 = 0;
  for (const auto& seq : vaso_sequences) {
    for (size_t t = 0; t < seq.size(); ++t) {
      ++s.n_decisions;
      s.max_vaso = std::max(s.max_vaso, seq[t]);
      if (seq[t] > 0.75) ++v075;
      if (seq[t] > 0.9) ++v090;
      if (t > 0) {
        const double dv = std::abs(seq[t] - seq[t - 1]);
        ++s.n_changes;
        s.max_dvaso = std::max(s.max_dvaso, dv);
        if (dv > 0.75) ++d075;
        if (dv > 0.9) ++d090;
      }
    }
  }
  if (s.n_decisions) {
    s.frac_vaso_075 = static_cast<double>(v075) / s.n_decisions;
    s.frac_vaso_090 = static_cast<double>(v090) / s.n_decisions;
  }
  if (s.n_changes) {
    s.frac_dvaso_075 = static_cast<double>(d075) / s.n_changes;
    s.frac_dvaso_090 = static_cast<double>(d090) / s.n_changes;
  }
  return s;
}

// ---------------------------------------------------------------------------
// OPE: weighted importance sampling variants and doubly robust.
// ---------------------------------------------------------------------------

struct OpeOptions {
  double gamma = 0.99;
  bool truncate = false;
  double trunc_quantile = 0.95;
  bool bootstrap = false;
  int n_bootstrap = 200;
  uint64_t seed = 0;
};

struct Estimate {
  double value = 0.0;
  double se = 0.0;
};

inline double discounted_return(const Trajectory& traj, double gamma) {
  double g = 0.0, f = 1.0;
  for (const auto& s : traj.steps) {
    g += f * s.reward;
    f *= gamma;
  }
  return g;
}

struct WisInputs {
  std::vector<double> ratios;   // per-trajectory importance ratios
  std::vector<double> returns;  // per-trajectory discounted returns
};

inline WisInputs wis_inputs(const std::vector<std::vector<PolicyDecision>>& decisions,
                            const TrajectoryDataset& ds, const BehaviorModel& bm, double gamma) {
  WisInputs in;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& traj = ds.trajectories[i];
    double rho = 1.0;
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      const int cluster = bm.cluster_of(traj.steps[t].state);
      const int jb = bm.joint_bin(traj.steps[t].action);
      const double pi = bm.decision_joint_prob(decisions[i][t], jb);
      const double pb = bm.prob(cluster, jb);
      rho *= pi / pb;
    }
    in.ratios.push_back(rho);
    in.returns.push_back(discounted_return(traj, gamma));
  }
  return in;
}

inline Estimate wis_from(const std::vector<double>& ratios, const std::vector<double>& returns) {
  double sum = 0.0;
  for (double r : ratios) sum += r;
  if (sum <= 0.0) throw std::runtime_error("all-zero importance ratios");
  double v = 0.0;
  for (size_t i = 0; i < ratios.size(); ++i) v += ratios[i] * returns[i];
  v /= sum;
  double se2 = 0.0;
  for (size_t i = 0; i < ratios.size(); ++i) {
    const double w = ratios[i] / sum;
    se2 += w * w * (returns[i] - v) * (returns[i] - v);
  }
  return {v, std::sqrt(se2)};
}

inline Estimate wis(const std::vector<std::vector<PolicyDecision>>& decisions,
                    const TrajectoryDataset& ds, const BehaviorModel& bm, OpeOptions opt) {
  auto in = wis_inputs(decisions, ds, bm, opt.gamma);
  if (opt.truncate) {
    const double cap = percentile(in.ratios, opt.trunc_quantile);
    for (auto& r : in.ratios) r = std::min(r, cap);
  }
  if (!opt.bootstrap) return wis_from(in.ratios, in.returns);

  const size_t n = in.ratios.size();
  std::vector<double> values;
  for (int b = 0; b < opt.n_bootstrap; ++b) {
    Rng rng(split_seed(opt.seed, static_cast<uint64_t>(b)));
    std::vector<double> r(n), g(n);
    for (size_t i = 0; i < n; ++i) {
      const size_t pick = rng.below(n);
      r[i] = in.ratios[pick];
      g[i] = in.returns[pick];
    }
    double sum = 0.0;
    for (double x : r) sum += x;
    if (sum <= 0.0) continue;  // degenerate resample
    values.push_back(wis_from(r, g).value);
  }
  if (values.empty()) throw std::runtime_error("all bootstrap resamples degenerate");
  Estimate e;
  e.value = mean(values);
  double s2 = 0.0;
  for (double v : values) s2 += (v - e.value) * (v - e.value);
  e.se = values.size() > 1 ? std::sqrt(s2 / static_cast<double>(values.size() - 1)) : 0.0;
  return e;
}

// Tabular fitted-Q evaluation over (cluster, joint action bin).
struct FqeConfig {
  int max_iters = 200;
  double tol = 1e-10;
  double gamma = 0.99;
};

struct FqeModel {
  std::vector<double> q;                // k x n_joint
  std::vector<double> policy_by_cluster;  // k x n_joint, projected target policy
  int k = 0, nj = 0;
  bool converged = false;

  double value_of(int cluster) const {
    double v = 0.0;
    for (int j = 0; j < nj; ++j)
      v += policy_by_cluster[static_cast<size_t>(cluster) * nj + j] * q[static_cast<size_t>(cluster) * nj + j];
    return v;
  }
};

inline FqeModel fit_fqe(const std::vector<std::vector<PolicyDecision>>& decisions,
                        const TrajectoryDataset& ds, const BehaviorModel& bm, FqeConfig cfg) {
  FqeModel fqe;
  fqe.k = bm.k;
  fqe.nj = bm.n_joint();
  fqe.q.assign(static_cast<size_t>(fqe.k) * fqe.nj, 0.0);

  // project the per-step target policy onto clusters
  fqe.policy_by_cluster.assign(static_cast<size_t>(fqe.k) * fqe.nj, 0.0);
  std::vector<double> cluster_counts(static_cast<size_t>(fqe.k), 0.0);
  struct Transition {
    int x = 0, u = 0;
    double r = 0.0;
    int x_next = -1;  // -1 terminal
  };
  std::vector<Transition> transitions;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& traj = ds.trajectories[i];
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      const int x = bm.cluster_of(traj.steps[t].state);
      for (int j = 0; j < fqe.nj; ++j)
        fqe.policy_by_cluster[static_cast<size_t>(x) * fqe.nj + j] +=
            bm.decision_joint_prob(decisions[i][t], j);
      cluster_counts[static_cast<size_t>(x)] += 1.0;
      Transition tr;
      tr.x = x;
      tr.u = bm.joint_bin(traj.steps[t].action);
      tr.r = traj.steps[t].reward;
      tr.x_next = (t + 1 < traj.steps.size()) ? bm.cluster_of(traj.steps[t + 1].state) : -1;
      transitions.push_back(tr);
    }
  }
  for (int c = 0; c < fqe.k; ++c) {
    double total = 0.0;
    for (int j = 0; j < fqe.nj; ++j) total += fqe.policy_by_cluster[static_cast<size_t>(c) * fqe.nj + j];
    if (total > 0.0) {
      for (int j = 0; j < fqe.nj; ++j) fqe.policy_by_cluster[static_cast<size_t>(c) * fqe.nj + j] /= total;
    } else {
      for (int j = 0; j < fqe.nj; ++j)
        fqe.policy_by_cluster[static_cast<size_t>(c) * fqe.nj + j] = 1.0 / fqe.nj;
    }
  }

  // group transitions by (x, u)
  std::map<std::pair<int, int>, std::vector<size_t>> groups;
  for (size_t i = 0; i < transitions.size(); ++i)
    groups[{transitions[i].x, transitions[i].u}].push_back(i);

  for (int it = 0; it < cfg.max_iters; ++it) {
    double max_delta = 0.0;
    std::vector<double> q_new = fqe.q;
    for (const auto& [xu, idxs] : groups) {
      double acc = 0.0;
      for (size_t i : idxs) {
        const auto& tr = transitions[i];
        double target = tr.r;
        if (tr.x_next >= 0) target += cfg.gamma * fqe.value_of(tr.x_next);
        acc += target;
      }
      acc /= static_cast<double>(idxs.size());
      if (!std::isfinite(acc)) throw std::runtime_error("fitted-Q evaluation diverged");
      const size_t qi = static_cast<size_t>(xu.first) * fqe.nj + xu.second;
      max_delta = std::max(max_delta, std::abs(acc - q_new[qi]));
      q_new[qi] = acc;
    }
    fqe.q = std::move(q_new);
    if (max_delta < cfg.tol) {
      fqe.converged = true;
      break;
    }
  }
  return fqe;
}

// Recursive doubly robust estimator (per-decision importance weights with a
// fitted-Q baseline), averaged over trajectories.
inline Estimate dr(const std::vector<std::vector<PolicyDecision>>& decisions,
                   const TrajectoryDataset& ds, const BehaviorModel& bm, const FqeModel& fqe,
                   double gamma = 0.99) {
  std::vector<double> per_traj;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& traj = ds.trajectories[i];
    double acc = 0.0;
    for (size_t t = traj.steps.size(); t-- > 0;) {
      const int x = bm.cluster_of(traj.steps[t].state);
      const int u = bm.joint_bin(traj.steps[t].action);
      const double pi = bm.decision_joint_prob(decisions[i][t], u);
      const double pb = bm.prob(x, u);
      const double rho = pi / pb;
      const double qv = fqe.q[static_cast<size_t>(x) * fqe.nj + u];
      acc = fqe.value_of(x) + rho * (traj.steps[t].reward + gamma * acc - qv);
    }
    per_traj.push_back(acc);
  }
  Estimate e;
  e.value = mean(per_traj);
  e.se = sem(per_traj);
  return e;
}

// ---------------------------------------------------------------------------
// RMSE and F1 against the clinician.
// ---------------------------------------------------------------------------

struct RmseF1 {
  std::vector<double> rmse_per_dim;
  double patient_f1 = 0.0;  // per-patient bin-match rate, averaged
  double sample_f1 = 0.0;   // pooled bin-match rate
};

inline RmseF1 rmse_f1(const std::vector<std::vector<PolicyDecision>>& decisions,
                      const TrajectoryDataset& ds, const BehaviorModel& bm) {
  RmseF1 out;
  out.rmse_per_dim.assign(static_cast<size_t>(ds.action_dim), 0.0);
  size_t n = 0, matches = 0;
  std::vector<double> per_patient;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& traj = ds.trajectories[i];
    size_t pm = 0;
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      const auto b = decisions[i][t].means();
      for (int d = 0; d < ds.action_dim; ++d) {
        const double err = b[static_cast<size_t>(d)] - traj.steps[t].action[static_cast<size_t>(d)];
        out.rmse_per_dim[static_cast<size_t>(d)] += err * err;
      }
      ++n;
      bool match = true;
      for (int d = 0; d < ds.action_dim; ++d) {
        if (bm.bin_of(d, b[static_cast<size_t>(d)]) !=
            bm.bin_of(d, traj.steps[t].action[static_cast<size_t>(d)]))
          match = false;
      }
      if (match) {
        ++matches;
        ++pm;
      }
    }
    per_patient.push_back(static_cast<double>(pm) / static_cast<double>(traj.steps.size()));
  }
  for (auto& r : out.rmse_per_dim) r = std::sqrt(r / static_cast<double>(n));
  out.sample_f1 = static_cast<double>(matches) / static_cast<double>(n);
  out.patient_f1 = mean(per_patient);
  return out;
}

}  // namespace ct
