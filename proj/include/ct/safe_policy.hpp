#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/params.hpp"
#include "ct/rng.hpp"
#include "ct/tape.hpp"
#include "ct/traj.hpp"
#include "ct/transformer.hpp"
#include "ct/world_model.hpp"

namespace ct {

struct PolicyConfig {
  SeqModelConfig seq;
  int state_dim = 8;
  int action_dim = 2;
  int max_timesteps = 32;
  double sigma_floor = 1e-4;

  PolicyConfig() {
    seq.embed_dim = 128;
    seq.n_layers = 3;
    seq.n_heads = 8;
    seq.context = 10;
    seq.learning_rate = 1e-4;
    seq.batch_size = 256;
    seq.train_steps = 60000;
  }
};

// Cost-conditioned sequence policy: tokens (return-to-go, cost-to-go, state,
// action) per timestep, Gaussian action head read at the state positions.
// Deterministic evaluation returns the mean.
class SafePolicy {
 public:
  SafePolicy(PolicyConfig cfg, NormStats stats)
      : cfg_(cfg),
        stats_(std::move(stats)),
        enc_("sp", cfg.seq,
             {{"rtg", 1}, {"ctg", 1}, {"state", cfg.state_dim}, {"action", cfg.action_dim}},
             cfg.max_timesteps) {
    enc_.register_params(store_);
    const int m = cfg_.seq.embed_dim;
    store_.add("sp/mu/w", m, cfg_.action_dim, Init::xavier, cfg_.seq.seed);
    store_.add("sp/mu/b", 1, cfg_.action_dim, Init::zeros, cfg_.seq.seed);
    store_.add("sp/sigma/w", m, cfg_.action_dim, Init::xavier, cfg_.seq.seed);
    store_.add("sp/sigma/b", 1, cfg_.action_dim, Init::zeros, cfg_.seq.seed);
  }

  const PolicyConfig& config() const { return cfg_; }
  const NormStats& norm_stats() const { return stats_; }
  ParamStore& params() { return store_; }

  struct ForwardNodes {
    ad::Tensor* mu = nullptr;     // [K, A] at state positions
    ad::Tensor* sigma = nullptr;  // [K, A]
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
        enc_.encode(tape, store, {w.rtg, w.ctg, states, w.actions}, K, w.timesteps, w.pad);
    std::vector<int> s_rows(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) s_rows[static_cast<size_t>(t)] = enc_.token_index(t, 2);
    ad::Tensor* hs = tape.select_rows(h, s_rows);
    ForwardNodes out;
    out.mu = affine(tape, hs, tape.param(store.get("sp/mu/w")), tape.param(store.get("sp/mu/b")));
    out.sigma = tape.add_const(
        tape.softplus(affine(tape, hs, tape.param(store.get("sp/sigma/w")),
                             tape.param(store.get("sp/sigma/b")))),
        cfg_.sigma_floor);
    return out;
  }

  struct PolicyOut {
    std::vector<double> mu;
    std::vector<double> sigma;
  };

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

  nlohmann::ordered_json checkpoint_extras() const {
    nlohmann::ordered_json j;
    j["model"] = "safe_policy";
    j["config"] = {{"embed_dim", cfg_.seq.embed_dim}, {"n_layers", cfg_.seq.n_layers},
                   {"n_heads", cfg_.seq.n_heads},     {"context", cfg_.seq.context},
                   {"learning_rate", cfg_.seq.learning_rate}, {"batch_size", cfg_.seq.batch_size},
                   {"train_steps", cfg_.seq.train_steps},     {"seed", cfg_.seq.seed},
                   {"state_dim", cfg_.state_dim},     {"action_dim", cfg_.action_dim},
                   {"max_timesteps", cfg_.max_timesteps},     {"sigma_floor", cfg_.sigma_floor},
                   {"activation", "gelu"},            {"norm", "pre_ln"},
                   {"dropout", 0.0}};
    j["norm_stats"] = {{"mean", stats_.mean}, {"std", stats_.std}};
    return j;
  }

  void save(const std::string& path) const { save_checkpoint(store_, checkpoint_extras(), path); }

  static SafePolicy load(const std::string& path) {
    const auto ckpt = load_checkpoint(path);
    if (ckpt.header.value("model", "") != "safe_policy")
      throw std::runtime_error("checkpoint is not a safe policy: " + path);
    PolicyConfig cfg;
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
    NormStats stats;
    stats.mean = ckpt.header.at("norm_stats").at("mean").get<std::vector<double>>();
    stats.std = ckpt.header.at("norm_stats").at("std").get<std::vector<double>>();
    SafePolicy model(cfg, std::move(stats));
    restore_params(model.store_, ckpt);
    return model;
  }

 private:
  PolicyConfig cfg_;
  NormStats stats_;
  ParamStore store_;
  SeqEncoder enc_;
};

// Action NLL over the unpadded positions of one window.
inline ad::Tensor* policy_window_nll(ad::Tape& tape, const SafePolicy& model,
                                     const ContextWindow& w) {
  const auto nodes = model.forward(tape, w);
  const int A = w.action_dim;
  std::vector<int> rows;
  for (int t = 0; t < w.length; ++t)
    if (!w.pad[static_cast<size_t>(t)]) rows.push_back(t);
  std::vector<double> targets(rows.size() * static_cast<size_t>(A));
  for (size_t r = 0; r < rows.size(); ++r)
    for (int j = 0; j < A; ++j)
      targets[r * A + j] = w.actions[static_cast<size_t>(rows[r]) * A + j];
  ad::Tensor* mu = tape.select_rows(nodes.mu, rows);
  ad::Tensor* sigma = tape.select_rows(nodes.sigma, rows);
  return gaussian_nll_node(tape, mu, sigma, targets);
}

struct PolicyTrainLog {
  std::vector<double> nll;
};

// Behavior cloning on relabeled expert data, conditioned on return-to-go and
// cost-to-go channels.
inline PolicyTrainLog train_safe_policy(SafePolicy& model, const TrajectoryDataset& relabeled) {
  const auto& cfg = model.config();
  for (const auto& traj : relabeled.trajectories)
    for (const auto& s : traj.steps)
      if (!s.cost.has_value())
        throw std::invalid_argument("safe policy training needs a relabeled dataset");
  Rng rng(split_seed(cfg.seq.seed, fnv1a64("sp-train")));
  PolicyTrainLog log;
  const WindowChannels ch{.rtg = true, .ctg = true};
  for (int step = 0; step < cfg.seq.train_steps; ++step) {
    ad::Tape tape;
    std::vector<ad::Tensor*> losses;
    for (int i = 0; i < cfg.seq.batch_size; ++i) {
      const auto& traj = relabeled.trajectories[rng.below(relabeled.trajectories.size())];
      const int t = static_cast<int>(rng.below(static_cast<uint64_t>(traj.horizon())));
      losses.push_back(policy_window_nll(tape, model, window(traj, t, cfg.seq.context, ch)));
    }
    ad::Tensor* loss = tape.scale(tape.add_n(losses), 1.0 / static_cast<double>(losses.size()));
    if (!std::isfinite(loss->val[0]))
      throw std::runtime_error("safe policy training diverged at step " + std::to_string(step));
    model.params().zero_grad();
    tape.backward(loss);
    tape.flush_param_grads();
    model.params().adam_step(cfg.seq.learning_rate);
    log.nll.push_back(loss->val[0]);
  }
  return log;
}

// Mean per-decision NLL of logged actions under the policy (held-out metric).
inline double held_out_action_nll(const SafePolicy& model, const TrajectoryDataset& relabeled) {
  const WindowChannels ch{.rtg = true, .ctg = true};
  double acc = 0.0;
  size_t n = 0;
  for (const auto& traj : relabeled.trajectories) {
    for (int t = 0; t < traj.horizon(); ++t) {
      const auto w = window(traj, t, model.config().seq.context, ch);
      const auto out = model.policy_at(w);
      acc -= gaussian_log_density(traj.steps[static_cast<size_t>(t)].action, out.mu, out.sigma);
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

// Inference-time conditioning: the return target decreases by observed
// rewards, the cost budget decreases by observed costs and clamps at zero.
class PolicyRollout {
 public:
  PolicyRollout(const SafePolicy& policy, double target_return, double cost_budget)
      : policy_(policy), rtg_(target_return), ctg_(std::max(0.0, cost_budget)) {
    if (cost_budget < 0.0) throw std::invalid_argument("cost budget must be >= 0");
  }

  SafePolicy::PolicyOut decide(const std::vector<double>& state_raw) {
    states_.push_back(state_raw);
    actions_.emplace_back(static_cast<size_t>(policy_.config().action_dim), 0.0);
    rtg_vals_.push_back(rtg_);
    ctg_vals_.push_back(ctg_);
    const int t = static_cast<int>(states_.size()) - 1;
    const auto w = make_history_window(states_, actions_, rtg_vals_, ctg_vals_, t,
                                       policy_.config().seq.context);
    return policy_.policy_at(w);
  }

  void commit(const std::vector<double>& action, double reward, double cost) {
    actions_.back() = action;
    rtg_ -= reward;
    ctg_ = std::max(0.0, ctg_ - cost);
  }

  double remaining_budget() const { return ctg_; }
  double remaining_target() const { return rtg_; }

 private:
  const SafePolicy& policy_;
  std::vector<std::vector<double>> states_;
  std::vector<std::vector<double>> actions_;
  std::vector<double> rtg_vals_, ctg_vals_;
  double rtg_ = 0.0;
  double ctg_ = 0.0;
};

}  // namespace ct
