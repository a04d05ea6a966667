#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/csv.hpp"
#include "ct/rng.hpp"
#include "ct/traj.hpp"

namespace ct {

// Synthetic constrained treatment environment. Observable state:
//   [0] severity score in [0, 24]   [1] lactate analog
//   [2] mean-BP analog              [3] heart-rate analog
//   [4..7] latent-noise dims (AR(1)); dim 4 doubles as the weight analog
// Action: (iv, vaso), both >= 0. Only vaso drives the hazard channel.
// Each patient has a hidden vaso tolerance; exceeding it, jumping doses, or
// keeping the trailing-dose mean above it accumulates hazard. Hazard past a
// fixed threshold kills; otherwise episodes run to the horizon.
struct EnvConfig {
  int state_dim = 8;
  int action_dim = 2;
  int horizon = 20;
  double dose_threshold = 0.75;    // population-level unsafe vaso dose
  double change_threshold = 0.75;  // unsafe inter-step vaso jump
  double lambda1 = -0.25;
  double lambda2 = -0.2;
  double severity_cutoff = 6.0;
  int history_depth = 3;
  uint64_t seed = 0;

  // initial distribution
  double init_severity_mean = 7.0;
  double init_severity_sd = 3.0;
  double tolerance_lo = 0.5;
  double tolerance_hi = 1.0;

  // dynamics
  double drift_base = 0.22;
  double drift_slope = 0.055;
  double relief_gain = 3.2;
  double eff_headroom = 0.10;
  double overdose_harm = 2.0;
  double strain_harm = 1.8;
  double jump_harm = 0.8;
  double severity_noise_sd = 0.45;
  double shock_prob = 0.10;  // acute deterioration events
  double shock_lo = 2.0;
  double shock_hi = 5.0;

  // hazard channel
  double hazard_decay = 0.88;
  double hazard_overdose = 1.0;
  double hazard_jump = 0.9;
  double hazard_strain = 0.7;
  double hazard_severity = 0.09;
  double hazard_severity_cutoff = 9.5;
  double hazard_death_threshold = 1.0;

  // expert dosing rule
  double expert_base = 0.05;
  double expert_slope = 0.05;
  double expert_margin = 0.05;
  double expert_rate_limit = 0.45;
  double expert_noise = 0.03;
  double iv_base = 0.30;
  double iv_slope = 0.05;
  double iv_noise = 0.05;
  double iv_cap = 2.0;

  void validate() const {
    if (dose_threshold <= 0 || change_threshold <= 0)
      throw std::invalid_argument("env thresholds must be > 0");
    if (horizon < 2) throw std::invalid_argument("horizon must be >= 2");
    if (history_depth < 1) throw std::invalid_argument("history_depth must be >= 1");
  }
};

// Never serialized into observable states; simulator and evaluation oracles only.
struct HiddenState {
  double tolerance = 0.0;
  std::deque<double> trailing_doses;  // last history_depth vaso doses, newest last
  double hazard = 0.0;

  double trailing_mean() const {
    if (trailing_doses.empty()) return 0.0;
    double s = 0.0;
    for (double d : trailing_doses) s += d;
    return s / static_cast<double>(trailing_doses.size());
  }
  double prev_vaso() const { return trailing_doses.empty() ? 0.0 : trailing_doses.back(); }
};

struct EnvStepResult {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
  bool died = false;
};

class SynthEnv {
 public:
  explicit SynthEnv(EnvConfig cfg) : cfg_(cfg), rng_(0) { cfg_.validate(); }

  const EnvConfig& config() const { return cfg_; }

  // Deterministic mean of the next severity (noise excluded); used by tests
  // and oracles to witness the trailing-dose (non-Markov) channel.
  static double expected_next_severity(const EnvConfig& cfg, double sev, double vaso,
                                       double prev_vaso, double trailing_mean, double tolerance) {
    const double overdose = std::max(0.0, vaso - tolerance);
    const double jump = std::abs(vaso - prev_vaso);
    const double strain = std::max(0.0, trailing_mean - tolerance);
    const double eff = std::min(vaso, tolerance + cfg.eff_headroom);
    const double relief = cfg.relief_gain * eff * (0.4 + 0.6 * sev / 24.0);
    const double drift = cfg.drift_base + cfg.drift_slope * sev;
    const double next = sev + drift - relief + cfg.overdose_harm * overdose +
                        cfg.strain_harm * strain +
                        cfg.jump_harm * (jump > cfg.change_threshold ? 1.0 : 0.0);
    return std::clamp(next, 0.0, 24.0);
  }

  std::vector<double> reset(uint64_t episode_seed) {
    rng_ = Rng(episode_seed);
    t_ = 0;
    done_ = false;
    died_ = false;
    hidden_ = HiddenState{};
    severity_ = std::clamp(rng_.normal(cfg_.init_severity_mean, cfg_.init_severity_sd), 1.0, 23.0);
    hidden_.tolerance = rng_.uniform(cfg_.tolerance_lo, cfg_.tolerance_hi);
    for (auto& z : z_) z = rng_.normal();
    obs_ = observe();
    return obs_;
  }

  EnvStepResult step(double iv, double vaso) {
    if (done_) throw std::logic_error("step() after episode end");
    if (!std::isfinite(iv) || !std::isfinite(vaso) || iv < 0.0 || vaso < 0.0)
      throw std::invalid_argument("actions must be finite and >= 0");

    const double prev_vaso = hidden_.prev_vaso();
    hidden_.trailing_doses.push_back(vaso);
    while (static_cast<int>(hidden_.trailing_doses.size()) > cfg_.history_depth)
      hidden_.trailing_doses.pop_front();

    const double sev = severity_;
    const double mean_next = expected_next_severity(cfg_, sev, vaso, prev_vaso,
                                                    hidden_.trailing_mean(), hidden_.tolerance);
    // acute deterioration shocks are part of the transition noise
    double shock = 0.0;
    if (rng_.uniform() < cfg_.shock_prob) shock = rng_.uniform(cfg_.shock_lo, cfg_.shock_hi);
    const double sev_next =
        std::clamp(mean_next + shock + rng_.normal(0.0, cfg_.severity_noise_sd), 0.0, 24.0);

    const double overdose = std::max(0.0, vaso - hidden_.tolerance);
    const double jump = std::abs(vaso - prev_vaso);
    const double strain = std::max(0.0, hidden_.trailing_mean() - hidden_.tolerance);
    hidden_.hazard = cfg_.hazard_decay * hidden_.hazard + cfg_.hazard_overdose * overdose +
                     cfg_.hazard_jump * std::max(0.0, jump - cfg_.change_threshold) +
                     cfg_.hazard_strain * strain +
                     cfg_.hazard_severity * std::max(0.0, sev - cfg_.hazard_severity_cutoff);

    const double reward = cfg_.lambda1 * std::tanh(sev - cfg_.severity_cutoff) +
                          cfg_.lambda2 * (sev_next - sev);

    severity_ = sev_next;
    ++t_;
    died_ = hidden_.hazard > cfg_.hazard_death_threshold;
    done_ = died_ || t_ >= cfg_.horizon;
    obs_ = observe();

    EnvStepResult res;
    res.state = obs_;
    res.reward = reward;
    res.done = done_;
    res.died = died_;
    return res;
  }

  // Severity-tracking dose rule: respects the patient's tolerance minus a
  // margin and rate-limits dose changes. Clamps are applied after the noise,
  // so the caps hold unconditionally.
  std::array<double, 2> expert_action(double prev_vaso) {
    const double sev = severity_;
    const double need = cfg_.expert_base + cfg_.expert_slope * sev;
    const double cap = std::max(0.0, hidden_.tolerance - cfg_.expert_margin);
    double v = std::min(need, cap);
    v += rng_.uniform(-cfg_.expert_noise, cfg_.expert_noise);
    v = std::clamp(v, prev_vaso - cfg_.expert_rate_limit, prev_vaso + cfg_.expert_rate_limit);
    v = std::clamp(v, 0.0, cap);
    double iv = cfg_.iv_base + cfg_.iv_slope * sev + rng_.uniform(-cfg_.iv_noise, cfg_.iv_noise);
    iv = std::clamp(iv, 0.0, cfg_.iv_cap);
    return {iv, v};
  }

  const std::vector<double>& observation() const { return obs_; }
  const HiddenState& hidden() const { return hidden_; }
  double severity() const { return severity_; }
  bool done() const { return done_; }
  bool died() const { return died_; }
  int time() const { return t_; }
  Rng& rng() { return rng_; }

  // Test hook: force an episode configuration without touching the RNG stream.
  void force_state(double severity, double tolerance, std::deque<double> trailing, double hazard) {
    severity_ = severity;
    hidden_.tolerance = tolerance;
    hidden_.trailing_doses = std::move(trailing);
    hidden_.hazard = hazard;
    obs_ = observe();
  }

 private:
  std::vector<double> observe() {
    std::vector<double> s(static_cast<size_t>(cfg_.state_dim), 0.0);
    s[0] = severity_;
    s[1] = 1.0 + 0.15 * severity_ + 0.25 * rng_.normal();
    s[2] = 88.0 - 1.4 * severity_ + 3.0 * rng_.normal();
    s[3] = 72.0 + 2.2 * severity_ + 4.0 * rng_.normal();
    for (int i = 0; i < 4; ++i) {
      z_[static_cast<size_t>(i)] = 0.8 * z_[static_cast<size_t>(i)] + 0.6 * rng_.normal();
      s[static_cast<size_t>(4 + i)] = z_[static_cast<size_t>(i)];
    }
    return s;
  }

  EnvConfig cfg_;
  Rng rng_;
  double severity_ = 0.0;
  std::array<double, 4> z_{};
  std::vector<double> obs_;
  HiddenState hidden_;
  int t_ = 0;
  bool done_ = false;
  bool died_ = false;
};

inline uint64_t episode_seed(uint64_t dataset_seed, int patient_index) {
  return split_seed(dataset_seed, static_cast<uint64_t>(patient_index));
}

// Evaluation-only oracle: replay the reset stream to recover a patient's
// hidden tolerance from (dataset seed, patient index).
inline double tolerance_for(const EnvConfig& cfg, uint64_t dataset_seed, int patient_index) {
  SynthEnv env(cfg);
  env.reset(episode_seed(dataset_seed, patient_index));
  return env.hidden().tolerance;
}

inline bool true_violation(const EnvConfig& cfg, double vaso, double prev_vaso, double tolerance) {
  if (vaso > std::min(cfg.dose_threshold, tolerance)) return true;
  if (std::abs(vaso - prev_vaso) > cfg.change_threshold) return true;
  return false;
}

// Per-step ground-truth violation flags for a logged trajectory (vaso = action dim 1).
inline std::vector<uint8_t> trajectory_violations(const EnvConfig& cfg, const Trajectory& traj,
                                                  double tolerance) {
  std::vector<uint8_t> flags(traj.steps.size(), 0);
  double prev = 0.0;
  for (size_t t = 0; t < traj.steps.size(); ++t) {
    const double vaso = traj.steps[t].action[1];
    flags[t] = true_violation(cfg, vaso, prev, tolerance) ? 1 : 0;
    prev = vaso;
  }
  return flags;
}

inline int parse_patient_index(const std::string& patient_id) {
  size_t pos = 0;
  while (pos < patient_id.size() && !std::isdigit(static_cast<unsigned char>(patient_id[pos]))) ++pos;
  if (pos == patient_id.size()) throw std::runtime_error("patient id has no index: " + patient_id);
  return std::stoi(patient_id.substr(pos));
}

struct HiddenTraceRow {
  std::string patient_id;
  int t = 0;
  double tolerance = 0.0;
  double hazard = 0.0;
  double trailing_mean = 0.0;
};

// One full expert episode. Step t records (s_t, a_t, r_t); the last step has
// done = true and the outcome is attributed to the whole episode.
inline Trajectory run_expert_episode(const EnvConfig& cfg, uint64_t seed, const std::string& id,
                                     std::vector<HiddenTraceRow>* hidden_trace = nullptr) {
  SynthEnv env(cfg);
  Trajectory traj;
  traj.patient_id = id;
  std::vector<double> state = env.reset(seed);
  double prev_vaso = 0.0;
  while (!env.done()) {
    const auto action = env.expert_action(prev_vaso);
    if (hidden_trace) {
      hidden_trace->push_back({id, env.time(), env.hidden().tolerance, env.hidden().hazard,
                               env.hidden().trailing_mean()});
    }
    const auto res = env.step(action[0], action[1]);
    Step s;
    s.state = state;
    s.action = {action[0], action[1]};
    s.reward = res.reward;
    s.done = res.done;
    traj.steps.push_back(std::move(s));
    state = res.state;
    prev_vaso = action[1];
  }
  traj.outcome = env.died() ? Outcome::died : Outcome::survived;
  return traj;
}

inline TrajectoryDataset generate_expert_dataset(const EnvConfig& cfg, int n_patients,
                                                 uint64_t seed,
                                                 std::vector<HiddenTraceRow>* hidden_trace = nullptr) {
  if (n_patients < 1) throw std::invalid_argument("n_patients must be >= 1");
  TrajectoryDataset ds;
  ds.state_dim = cfg.state_dim;
  ds.action_dim = cfg.action_dim;
  ds.tag = DatasetTag::expert;
  char buf[16];
  for (int i = 0; i < n_patients; ++i) {
    std::snprintf(buf, sizeof(buf), "p%06d", i);
    ds.trajectories.push_back(run_expert_episode(cfg, episode_seed(seed, i), buf, hidden_trace));
  }
  ds.norm_stats = compute_norm_stats(ds);
  return ds;
}

inline void write_hidden_trace(const std::vector<HiddenTraceRow>& rows, const std::string& path) {
  CsvWriter csv(path);
  csv.row({"patient_id", "t", "tolerance", "hazard", "trailing_mean"});
  for (const auto& r : rows) {
    csv.row({r.patient_id, std::to_string(r.t), format_double(r.tolerance),
             format_double(r.hazard), format_double(r.trailing_mean)});
  }
}

}  // namespace ct
