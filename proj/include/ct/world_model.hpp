#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/params.hpp"
#include "ct/rng.hpp"
#include "ct/tape.hpp"
#include "ct/traj.hpp"
#include "ct/transformer.hpp"

namespace ct {

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

struct WmConfig {
  SeqModelConfig seq;
  int state_dim = 8;
  int action_dim = 2;
  int max_timesteps = 32;
  double sigma_floor = 1e-4;
  double lambda_init = 0.1;
  double lambda_lr = 1e-3;

  WmConfig() {
    seq.embed_dim = 128;
    seq.n_layers = 3;
    seq.n_heads = 8;
    seq.context = 10;
    seq.learning_rate = 1e-4;
    seq.batch_size = 256;
    seq.train_steps = 5000;
  }
};

inline double gaussian_log_density(std::span<const double> x, std::span<const double> mu,
                                   std::span<const double> sigma) {
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mu[i]) / sigma[i];
    acc += -0.5 * z * z - std::log(sigma[i]) - 0.5 * kLog2Pi;
  }
  return acc;
}

inline double gaussian_entropy(std::span<const double> sigma) {
  double acc = 0.5 * static_cast<double>(sigma.size()) * (1.0 + kLog2Pi);
  for (double s : sigma) acc += std::log(s);
  return acc;
}

// Window assembled from explicit conditioning values rather than a stored
// trajectory; used by autoregressive generation and policy inference.
inline ContextWindow make_history_window(const std::vector<std::vector<double>>& states,
                                         const std::vector<std::vector<double>>& actions,
                                         const std::vector<double>& rtg_values,
                                         const std::vector<double>& ctg_values, int t_end, int K) {
  if (t_end < 0 || t_end >= static_cast<int>(states.size()))
    throw std::out_of_range("history window index");
  const int S = static_cast<int>(states[0].size());
  const int A = actions.empty() ? 0 : static_cast<int>(actions[0].size());
  ContextWindow w;
  w.length = K;
  w.state_dim = S;
  w.action_dim = A;
  w.t_end = t_end;
  w.states.assign(static_cast<size_t>(K) * S, 0.0);
  w.actions.assign(static_cast<size_t>(K) * A, 0.0);
  w.rtg.assign(static_cast<size_t>(K), 0.0);
  w.ctg.assign(static_cast<size_t>(K), 0.0);
  w.pad.assign(static_cast<size_t>(K), 1);
  w.timesteps.assign(static_cast<size_t>(K), 0);
  const int start = std::max(0, t_end - K + 1);
  for (int src = start; src <= t_end; ++src) {
    const int slot = K - 1 - (t_end - src);
    std::copy(states[static_cast<size_t>(src)].begin(), states[static_cast<size_t>(src)].end(),
              w.states.begin() + static_cast<size_t>(slot) * S);
    if (src < static_cast<int>(actions.size())) {
      std::copy(actions[static_cast<size_t>(src)].begin(), actions[static_cast<size_t>(src)].end(),
                w.actions.begin() + static_cast<size_t>(slot) * A);
    }
    if (src < static_cast<int>(rtg_values.size())) w.rtg[static_cast<size_t>(slot)] = rtg_values[static_cast<size_t>(src)];
    if (src < static_cast<int>(ctg_values.size())) w.ctg[static_cast<size_t>(slot)] = ctg_values[static_cast<size_t>(src)];
    w.pad[static_cast<size_t>(slot)] = 0;
    w.timesteps[static_cast<size_t>(slot)] = src;
  }
  return w;
}

// Shared causal transformer with a stochastic Gaussian policy head plus
// reward and next-state heads, trained jointly on expert windows.
class WorldModel {
 public:
  WorldModel(WmConfig cfg, NormStats stats)
      : cfg_(cfg),
        stats_(std::move(stats)),
        enc_("wm", cfg.seq, {{"rtg", 1}, {"state", cfg.state_dim}, {"action", cfg.action_dim}},
             cfg.max_timesteps),
        lambda_(cfg.lambda_init) {
    enc_.register_params(store_);
    const int m = cfg_.seq.embed_dim;
    store_.add("wm/policy/mu/w", m, cfg_.action_dim, Init::xavier, cfg_.seq.seed);
    store_.add("wm/policy/mu/b", 1, cfg_.action_dim, Init::zeros, cfg_.seq.seed);
    store_.add("wm/policy/sigma/w", m, cfg_.action_dim, Init::xavier, cfg_.seq.seed);
    store_.add("wm/policy/sigma/b", 1, cfg_.action_dim, Init::zeros, cfg_.seq.seed);
    store_.add("wm/reward/w", m, 1, Init::xavier, cfg_.seq.seed);
    store_.add("wm/reward/b", 1, 1, Init::zeros, cfg_.seq.seed);
    store_.add("wm/state/w", m, cfg_.state_dim, Init::xavier, cfg_.seq.seed);
    store_.add("wm/state/b", 1, cfg_.state_dim, Init::zeros, cfg_.seq.seed);
  }

  const WmConfig& config() const { return cfg_; }
  const NormStats& norm_stats() const { return stats_; }
  ParamStore& params() { return store_; }
  double entropy_weight() const { return lambda_; }
  void set_entropy_weight(double l) { lambda_ = std::max(0.0, l); }

  struct ForwardNodes {
    ad::Tensor* mu = nullptr;       // [K, A] at state-token positions
    ad::Tensor* sigma = nullptr;    // [K, A], softplus-floored
    ad::Tensor* reward = nullptr;   // [K, 1] at action-token positions
    ad::Tensor* next_state = nullptr;  // [K, S], normalized units
  };

  ForwardNodes forward(ad::Tape& tape, const ContextWindow& w) const {
    const int K = w.length;
    std::vector<double> states = w.states;
    for (int t = 0; t < K; ++t) {
      if (w.pad[static_cast<size_t>(t)]) continue;
      normalize_vector_inplace(
          std::span<double>(states.data() + static_cast<size_t>(t) * cfg_.state_dim,
                            static_cast<size_t>(cfg_.state_dim)),
          stats_);
    }
    auto& store = const_cast<ParamStore&>(store_);
    ad::Tensor* h =
        enc_.encode(tape, store, {w.rtg, states, w.actions}, K, w.timesteps, w.pad);

    std::vector<int> s_rows(static_cast<size_t>(K)), a_rows(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) {
      s_rows[static_cast<size_t>(t)] = enc_.token_index(t, 1);
      a_rows[static_cast<size_t>(t)] = enc_.token_index(t, 2);
    }
    ad::Tensor* hs = tape.select_rows(h, s_rows);
    ad::Tensor* ha = tape.select_rows(h, a_rows);

    ForwardNodes out;
    out.mu = affine(tape, hs, tape.param(store.get("wm/policy/mu/w")),
                    tape.param(store.get("wm/policy/mu/b")));
    out.sigma = tape.add_const(
        tape.softplus(affine(tape, hs, tape.param(store.get("wm/policy/sigma/w")),
                             tape.param(store.get("wm/policy/sigma/b")))),
        cfg_.sigma_floor);
    out.reward = affine(tape, ha, tape.param(store.get("wm/reward/w")),
                        tape.param(store.get("wm/reward/b")));
    out.next_state = affine(tape, ha, tape.param(store.get("wm/state/w")),
                            tape.param(store.get("wm/state/b")));
    return out;
  }

  struct PolicyOut {
    std::vector<double> mu;
    std::vector<double> sigma;
  };

  // Gaussian action distribution at the last unpadded position.
  PolicyOut policy_at(const ContextWindow& w) const {
    ad::Tape tape;
    const auto nodes = forward(tape, w);
    const int slot = w.length - 1;
    PolicyOut out;
    for (int j = 0; j < cfg_.action_dim; ++j) {
      out.mu.push_back(nodes.mu->v(slot, j));
      out.sigma.push_back(nodes.sigma->v(slot, j));
      if (!std::isfinite(out.mu.back()) || !std::isfinite(out.sigma.back()))
        throw std::runtime_error("non-finite policy output");
    }
    return out;
  }

  struct StepPrediction {
    double reward = 0.0;
    std::vector<double> next_state_raw;
    bool finite = true;
  };

  StepPrediction predict_at(const ContextWindow& w) const {
    ad::Tape tape;
    const auto nodes = forward(tape, w);
    const int slot = w.length - 1;
    StepPrediction p;
    p.reward = nodes.reward->v(slot, 0);
    p.next_state_raw.resize(static_cast<size_t>(cfg_.state_dim));
    for (int j = 0; j < cfg_.state_dim; ++j) {
      const auto ji = static_cast<size_t>(j);
      p.next_state_raw[ji] =
          nodes.next_state->v(slot, j) * floored_std(stats_.std[ji]) + stats_.mean[ji];
      if (!std::isfinite(p.next_state_raw[ji])) p.finite = false;
    }
    if (!std::isfinite(p.reward)) p.finite = false;
    return p;
  }

  nlohmann::ordered_json checkpoint_extras() const {
    nlohmann::ordered_json j;
    j["model"] = "world";
    j["config"] = {{"embed_dim", cfg_.seq.embed_dim}, {"n_layers", cfg_.seq.n_layers},
                   {"n_heads", cfg_.seq.n_heads},     {"context", cfg_.seq.context},
                   {"learning_rate", cfg_.seq.learning_rate}, {"batch_size", cfg_.seq.batch_size},
                   {"train_steps", cfg_.seq.train_steps},     {"seed", cfg_.seq.seed},
                   {"state_dim", cfg_.state_dim},     {"action_dim", cfg_.action_dim},
                   {"max_timesteps", cfg_.max_timesteps},     {"sigma_floor", cfg_.sigma_floor},
                   {"lambda_init", cfg_.lambda_init}, {"lambda_lr", cfg_.lambda_lr},
                   {"activation", "gelu"},            {"norm", "pre_ln"},
                   {"dropout", 0.0}};
    j["norm_stats"] = {{"mean", stats_.mean}, {"std", stats_.std}};
    j["entropy_weight"] = lambda_;
    return j;
  }

  void save(const std::string& path) const { save_checkpoint(store_, checkpoint_extras(), path); }

  static WorldModel load(const std::string& path) {
    const auto ckpt = load_checkpoint(path);
    if (ckpt.header.value("model", "") != "world")
      throw std::runtime_error("checkpoint is not a world model: " + path);
    WmConfig cfg;
    const auto& c = ckpt.header.at("config");
    cfg.seq.embed_dim = c.at("embed_dim").get<int>();
    cfg.seq.n_layers = c.at("n_layers").get<int>();
    cfg.seq.n_heads = c.at("n_heads").get<int>();
    cfg.seq.context = c.at("context").get<int>();
    cfg.seq.learning_rate = c.at("learning_rate").get<double>();
    cfg.seq.batch_size = c.at("batch_size").get<int>();
    cfg.seq.train_steps = c.at("train_steps").get<int>();
    cfg.seq.seed = c.at("seed").get<uint64_t>();
    cfg.state_dim = c.at("state_dim").get<int>();
    cfg.action_dim = c.at("action_dim").get<int>();
    cfg.max_timesteps = c.at("max_timesteps").get<int>();
    cfg.sigma_floor = c.at("sigma_floor").get<double>();
    cfg.lambda_init = c.at("lambda_init").get<double>();
    cfg.lambda_lr = c.at("lambda_lr").get<double>();
    NormStats stats;
    stats.mean = ckpt.header.at("norm_stats").at("mean").get<std::vector<double>>();
    stats.std = ckpt.header.at("norm_stats").at("std").get<std::vector<double>>();
    WorldModel model(cfg, std::move(stats));
    restore_params(model.store_, ckpt);
    model.lambda_ = ckpt.header.value("entropy_weight", cfg.lambda_init);
    return model;
  }

 private:
  WmConfig cfg_;
  NormStats stats_;
  ParamStore store_;
  SeqEncoder enc_;
  double lambda_ = 0.1;
};

struct WmLossParts {
  ad::Tensor* total = nullptr;
  ad::Tensor* policy_nll = nullptr;
  ad::Tensor* entropy = nullptr;
  ad::Tensor* world_mse = nullptr;
};

// Gaussian NLL mean over positions: rows of (target, mu, sigma).
inline ad::Tensor* gaussian_nll_node(ad::Tape& tape, ad::Tensor* mu, ad::Tensor* sigma,
                                     const std::vector<double>& targets) {
  ad::Tensor* tgt = tape.input(targets, mu->rows, mu->cols);
  ad::Tensor* diff = tape.sub(tgt, mu);
  ad::Tensor* quad = tape.div(tape.square(diff), tape.scale(tape.square(sigma), 2.0));
  ad::Tensor* logs = tape.log_op(sigma);
  ad::Tensor* per_elem = tape.add_const(tape.add(quad, logs), 0.5 * kLog2Pi);
  return tape.scale(tape.sum_all(per_elem), 1.0 / static_cast<double>(mu->rows));
}

// Mean Gaussian entropy over positions.
inline ad::Tensor* gaussian_entropy_node(ad::Tape& tape, ad::Tensor* sigma) {
  ad::Tensor* logs = tape.sum_all(tape.log_op(sigma));
  return tape.add_const(tape.scale(logs, 1.0 / static_cast<double>(sigma->rows)),
                        0.5 * static_cast<double>(sigma->cols) * (1.0 + kLog2Pi));
}

struct WmBatchItem {
  ContextWindow window;               // rtg channel filled
  std::vector<double> reward_targets;  // per slot
  std::vector<double> next_state_targets;  // per slot, normalized, K x S
  std::vector<uint8_t> has_next;      // per slot
};

inline WmBatchItem make_wm_item(const Trajectory& traj, int t_end, int K, const NormStats& stats) {
  WmBatchItem item;
  item.window = window(traj, t_end, K, {.rtg = true});
  const int S = item.window.state_dim;
  item.reward_targets.assign(static_cast<size_t>(K), 0.0);
  item.next_state_targets.assign(static_cast<size_t>(K) * S, 0.0);
  item.has_next.assign(static_cast<size_t>(K), 0);
  for (int slot = 0; slot < K; ++slot) {
    if (item.window.pad[static_cast<size_t>(slot)]) continue;
    const int src = item.window.timesteps[static_cast<size_t>(slot)];
    item.reward_targets[static_cast<size_t>(slot)] = traj.steps[static_cast<size_t>(src)].reward;
    if (src + 1 < traj.horizon()) {
      item.has_next[static_cast<size_t>(slot)] = 1;
      std::vector<double> ns = traj.steps[static_cast<size_t>(src) + 1].state;
      normalize_vector_inplace(ns, stats);
      std::copy(ns.begin(), ns.end(),
                item.next_state_targets.begin() + static_cast<size_t>(slot) * S);
    }
  }
  return item;
}

// Joint loss for one window: policy NLL - lambda * entropy + reward/state MSE.
inline WmLossParts wm_loss_node(ad::Tape& tape, const WorldModel& model, const WmBatchItem& item) {
  const auto nodes = model.forward(tape, item.window);
  const int K = item.window.length;
  const int S = item.window.state_dim;
  const int A = item.window.action_dim;

  std::vector<int> pol_rows, nxt_rows;
  for (int t = 0; t < K; ++t) {
    if (item.window.pad[static_cast<size_t>(t)]) continue;
    pol_rows.push_back(t);
    if (item.has_next[static_cast<size_t>(t)]) nxt_rows.push_back(t);
  }
  if (pol_rows.empty()) throw std::invalid_argument("window with no unpadded slots");

  std::vector<double> act_targets(pol_rows.size() * static_cast<size_t>(A));
  for (size_t r = 0; r < pol_rows.size(); ++r)
    for (int j = 0; j < A; ++j)
      act_targets[r * A + j] = item.window.actions[static_cast<size_t>(pol_rows[r]) * A + j];

  ad::Tensor* mu = tape.select_rows(nodes.mu, pol_rows);
  ad::Tensor* sigma = tape.select_rows(nodes.sigma, pol_rows);
  WmLossParts parts;
  parts.policy_nll = gaussian_nll_node(tape, mu, sigma, act_targets);
  parts.entropy = gaussian_entropy_node(tape, sigma);
  ad::Tensor* policy_loss =
      tape.add(parts.policy_nll, tape.scale(parts.entropy, -model.entropy_weight()));

  if (!nxt_rows.empty()) {
    std::vector<double> r_targets(nxt_rows.size());
    std::vector<double> s_targets(nxt_rows.size() * static_cast<size_t>(S));
    for (size_t r = 0; r < nxt_rows.size(); ++r) {
      r_targets[r] = item.reward_targets[static_cast<size_t>(nxt_rows[r])];
      for (int j = 0; j < S; ++j)
        s_targets[r * S + j] =
            item.next_state_targets[static_cast<size_t>(nxt_rows[r]) * S + j];
    }
    ad::Tensor* rhat = tape.select_rows(nodes.reward, nxt_rows);
    ad::Tensor* shat = tape.select_rows(nodes.next_state, nxt_rows);
    ad::Tensor* sq_r = tape.square(tape.sub(tape.input(r_targets, static_cast<int>(nxt_rows.size()), 1), rhat));
    ad::Tensor* sq_s = tape.square(
        tape.sub(tape.input(s_targets, static_cast<int>(nxt_rows.size()), S), shat));
    std::vector<double> ones(static_cast<size_t>(S), 1.0);
    ad::Tensor* row_sums = tape.matmul(sq_s, tape.input(ones, S, 1));
    ad::Tensor* per_pos = tape.add(sq_r, row_sums);
    parts.world_mse = tape.scale(tape.sum_all(per_pos), 1.0 / static_cast<double>(nxt_rows.size()));
    parts.total = tape.add(policy_loss, parts.world_mse);
  } else {
    parts.world_mse = nullptr;
    parts.total = policy_loss;
  }
  return parts;
}

struct WmTrainLog {
  std::vector<double> total;
  std::vector<double> policy_nll;
  std::vector<double> world_mse;
  std::vector<double> entropy_weight;
};

inline WmTrainLog train_world_model(WorldModel& model, const TrajectoryDataset& expert) {
  const auto& cfg = model.config();
  Rng rng(split_seed(cfg.seq.seed, fnv1a64("wm-train")));
  WmTrainLog log;
  for (int step = 0; step < cfg.seq.train_steps; ++step) {
    std::vector<ad::Tensor*> totals;
    double entropy_sum = 0.0;
    double nll_sum = 0.0, mse_sum = 0.0;
    int mse_count = 0;
    ad::Tape tape;
    for (int i = 0; i < cfg.seq.batch_size; ++i) {
      const auto& traj = expert.trajectories[rng.below(expert.trajectories.size())];
      const int t = static_cast<int>(rng.below(static_cast<uint64_t>(traj.horizon())));
      const auto item = make_wm_item(traj, t, cfg.seq.context, model.norm_stats());
      const auto parts = wm_loss_node(tape, model, item);
      totals.push_back(parts.total);
      entropy_sum += parts.entropy->val[0];
      nll_sum += parts.policy_nll->val[0];
      if (parts.world_mse) {
        mse_sum += parts.world_mse->val[0];
        ++mse_count;
      }
    }
    ad::Tensor* loss = tape.scale(tape.add_n(totals), 1.0 / static_cast<double>(totals.size()));
    if (!std::isfinite(loss->val[0]))
      throw std::runtime_error("world model training diverged at step " + std::to_string(step));
    model.params().zero_grad();
    tape.backward(loss);
    tape.flush_param_grads();
    model.params().adam_step(cfg.seq.learning_rate);
    // dual ascent on the entropy weight, clipped at zero
    const double mean_entropy = entropy_sum / static_cast<double>(totals.size());
    model.set_entropy_weight(model.entropy_weight() - cfg.lambda_lr * mean_entropy);
    log.total.push_back(loss->val[0]);
    log.policy_nll.push_back(nll_sum / static_cast<double>(totals.size()));
    log.world_mse.push_back(mse_count ? mse_sum / mse_count : 0.0);
    log.entropy_weight.push_back(model.entropy_weight());
  }
  return log;
}

// ---------------------------------------------------------------------------
// Violating-data generation: autoregressive rollouts under an inflated target
// return, sampling actions for exploration.
// ---------------------------------------------------------------------------

struct GenConfig {
  double target_return = 10.0;
  int gen_length = 10;
  int n_samples = 100;
  uint64_t seed = 0;
  double action_clip = 1.2;       // sampled doses clipped to [0, action_clip]
  double exploration_scale = 1.0;  // multiplies the policy sigma when sampling

  void validate() const {
    if (gen_length < 10 || gen_length > 15)
      throw std::invalid_argument("gen_length must be in [10, 15]");
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    if (action_clip <= 0.0) throw std::invalid_argument("action_clip must be > 0");
    if (exploration_scale <= 0.0) throw std::invalid_argument("exploration_scale must be > 0");
  }
};

struct GenReport {
  int truncated = 0;  // rollouts cut short by non-finite predictions
  double envelope_fraction = 0.0;  // states within expert envelope +/- 20%
};

inline TrajectoryDataset generate_violating(const WorldModel& model,
                                            const TrajectoryDataset& expert, const GenConfig& gen,
                                            GenReport* report = nullptr) {
  gen.validate();
  const int K = model.config().seq.context;
  const int S = model.config().state_dim;
  const int A = model.config().action_dim;

  // expert state envelope, per dim, widened by 20% of the range
  std::vector<double> env_lo(static_cast<size_t>(S), 1e300), env_hi(static_cast<size_t>(S), -1e300);
  for (const auto& traj : expert.trajectories) {
    for (const auto& st : traj.steps) {
      for (int d = 0; d < S; ++d) {
        env_lo[static_cast<size_t>(d)] = std::min(env_lo[static_cast<size_t>(d)], st.state[static_cast<size_t>(d)]);
        env_hi[static_cast<size_t>(d)] = std::max(env_hi[static_cast<size_t>(d)], st.state[static_cast<size_t>(d)]);
      }
    }
  }
  for (int d = 0; d < S; ++d) {
    const auto di = static_cast<size_t>(d);
    const double margin = 0.2 * (env_hi[di] - env_lo[di]);
    env_lo[di] -= margin;
    env_hi[di] += margin;
  }

  TrajectoryDataset out;
  out.state_dim = S;
  out.action_dim = A;
  out.tag = DatasetTag::violating;
  out.norm_stats = expert.norm_stats;  // frozen expert statistics

  Rng rng(gen.seed);
  size_t in_envelope = 0, total_dims = 0;
  int truncated = 0;
  char buf[16];
  for (int i = 0; i < gen.n_samples; ++i) {
    const size_t src_idx = rng.below(expert.trajectories.size());
    const auto& src = expert.trajectories[src_idx];

    std::vector<std::vector<double>> states = {src.steps.front().state};
    std::vector<std::vector<double>> actions;
    std::vector<double> rtg = {gen.target_return};

    Trajectory traj;
    std::snprintf(buf, sizeof(buf), "g%06d", i);
    traj.patient_id = buf;
    traj.source_id = src.patient_id;
    traj.outcome = Outcome::died;  // metadata only, never used in training

    bool cut = false;
    for (int t = 0; t < gen.gen_length && !cut; ++t) {
      actions.push_back(std::vector<double>(static_cast<size_t>(A), 0.0));
      auto w1 = make_history_window(states, actions, rtg, {}, t, K);
      const auto pol = model.policy_at(w1);
      auto& act = actions.back();
      for (int j = 0; j < A; ++j) {
        act[static_cast<size_t>(j)] = std::clamp(
            pol.mu[static_cast<size_t>(j)] +
                gen.exploration_scale * pol.sigma[static_cast<size_t>(j)] * rng.normal(),
            0.0, gen.action_clip);
      }
      auto w2 = make_history_window(states, actions, rtg, {}, t, K);
      const auto pred = model.predict_at(w2);
      if (!pred.finite) {
        ++truncated;
        cut = true;
        break;
      }
      Step step;
      step.state = states.back();
      step.action = act;
      step.reward = pred.reward;
      traj.steps.push_back(std::move(step));
      for (int d = 0; d < S; ++d) {
        const auto di = static_cast<size_t>(d);
        ++total_dims;
        if (pred.next_state_raw[di] >= env_lo[di] && pred.next_state_raw[di] <= env_hi[di])
          ++in_envelope;
      }
      states.push_back(pred.next_state_raw);
      rtg.push_back(rtg.back() - pred.reward);  // target decrement bookkeeping
    }
    if (!traj.steps.empty()) {
      traj.steps.back().done = true;
      out.trajectories.push_back(std::move(traj));
    }
  }
  if (report) {
    report->truncated = truncated;
    report->envelope_fraction =
        total_dims ? static_cast<double>(in_envelope) / static_cast<double>(total_dims) : 0.0;
  }
  return out;
}

struct SweepRow {
  double target_return = 0.0;
  double violation_rate = 0.0;
  double envelope_fraction = 0.0;
  int n_windows = 0;
};

// Violation labeling is delegated so the generator stays oracle-free.
inline std::vector<SweepRow> target_reward_sweep(
    const WorldModel& model, const TrajectoryDataset& expert, const std::vector<double>& targets,
    const GenConfig& base,
    const std::function<std::pair<double, int>(const TrajectoryDataset&)>& violation_rate_fn) {
  std::vector<SweepRow> rows;
  for (double target : targets) {
    GenConfig g = base;
    g.target_return = target;
    GenReport rep;
    const auto ds = generate_violating(model, expert, g, &rep);
    const auto [rate, n] = violation_rate_fn(ds);
    rows.push_back({target, rate, rep.envelope_fraction, n});
  }
  return rows;
}

}  // namespace ct
