#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/params.hpp"
#include "ct/rng.hpp"
#include "ct/tape.hpp"
#include "ct/traj.hpp"
#include "ct/transformer.hpp"

namespace ct {

struct CtConfig {
  SeqModelConfig seq;  // defaults below follow the CT hyperparameter block
  int state_dim = 8;
  int action_dim = 2;
  int max_timesteps = 32;
  double eps_floor = 1e-6;
  // stop once batch separation mean C_v - mean C_e reaches this (0 = never);
  // keeps the cost surface graded instead of a hard 0/1 split
  double stop_separation = 0.0;

  CtConfig() {
    seq.embed_dim = 64;
    seq.n_layers = 3;
    seq.n_heads = 1;
    seq.context = 10;
    seq.learning_rate = 1e-6;
    seq.batch_size = 512;
    seq.train_steps = 30000;
  }
};

// Per-window cost report: per-step costs, importance weights over the window,
// and the aggregate C = sum_t w_t * c_t. Entries cover unpadded slots only.
struct CostReport {
  std::vector<double> costs;    // c_t in (0,1)
  std::vector<double> weights;  // w_t >= 0, sum = 1
  double aggregate = 0.0;       // in (0,1)
};

// Sequence cost model: causal transformer over (s, a) pairs plus a weighted
// cost attention layer. Per-step costs come from the causal stream (c_t sees
// pairs <= t only); the weights see the whole window.
class CTModel {
 public:
  CTModel(CtConfig cfg, NormStats stats)
      : cfg_(cfg),
        stats_(std::move(stats)),
        enc_("ct", cfg.seq,
             {{"state", cfg.state_dim}, {"action", cfg.action_dim}}, cfg.max_timesteps) {
    enc_.register_params(store_);
    const int m = cfg_.seq.embed_dim;
    store_.add("ct/nm/wq", m, m, Init::xavier, cfg_.seq.seed);
    store_.add("ct/nm/bq", 1, m, Init::zeros, cfg_.seq.seed);
    store_.add("ct/nm/wk", m, m, Init::xavier, cfg_.seq.seed);
    store_.add("ct/nm/bk", 1, m, Init::zeros, cfg_.seq.seed);
    // small init keeps initial costs near 0.5
    store_.add("ct/nm/wv", m, 1, Init::small_normal, cfg_.seq.seed);
    store_.add("ct/nm/bv", 1, 1, Init::zeros, cfg_.seq.seed);
  }

  const CtConfig& config() const { return cfg_; }
  const NormStats& norm_stats() const { return stats_; }
  ParamStore& params() { return store_; }

  struct ForwardNodes {
    ad::Tensor* costs = nullptr;      // [K, 1], meaningful at unpadded slots
    ad::Tensor* weights = nullptr;    // [1, K], zero at padded slots
    ad::Tensor* aggregate = nullptr;  // [1, 1]
  };

  ForwardNodes forward(ad::Tape& tape, const ContextWindow& w) const {
    if (w.state_dim != cfg_.state_dim || w.action_dim != cfg_.action_dim)
      throw std::invalid_argument("window dims do not match model");
    const int K = w.length;
    const int m = cfg_.seq.embed_dim;

    std::vector<double> states = w.states;
    for (int t = 0; t < K; ++t) {
      if (w.pad[static_cast<size_t>(t)]) continue;
      normalize_vector_inplace(
          std::span<double>(states.data() + static_cast<size_t>(t) * cfg_.state_dim,
                            static_cast<size_t>(cfg_.state_dim)),
          stats_);
    }

    auto& store = const_cast<ParamStore&>(store_);
    ad::Tensor* h = enc_.encode(tape, store, {states, w.actions}, K, w.timesteps, w.pad);

    // d_t = output at the action token of step t
    std::vector<int> d_rows(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) d_rows[static_cast<size_t>(t)] = enc_.token_index(t, 1);
    ad::Tensor* d = tape.select_rows(h, d_rows);

    ad::Tensor* q = affine(tape, d, tape.param(store.get("ct/nm/wq")),
                           tape.param(store.get("ct/nm/bq")));
    ad::Tensor* k = affine(tape, d, tape.param(store.get("ct/nm/wk")),
                           tape.param(store.get("ct/nm/bk")));
    ad::Tensor* scores =
        tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(static_cast<double>(m)));

    // weight attention spans the whole window; padded slots are excluded from
    // the rows, the columns, and the 1/T averaging
    std::vector<uint8_t> nm_mask(static_cast<size_t>(K) * K, 0);
    int real = 0;
    for (int i = 0; i < K; ++i) {
      if (w.pad[static_cast<size_t>(i)]) continue;
      ++real;
      for (int j = 0; j < K; ++j) {
        if (!w.pad[static_cast<size_t>(j)]) nm_mask[static_cast<size_t>(i) * K + j] = 1;
      }
    }
    ad::Tensor* probs = tape.row_softmax_masked(scores, nm_mask);
    std::vector<double> avg_row(static_cast<size_t>(K), 0.0);
    for (int i = 0; i < K; ++i)
      if (!w.pad[static_cast<size_t>(i)]) avg_row[static_cast<size_t>(i)] = 1.0 / real;
    ad::Tensor* weights = tape.matmul(tape.input(avg_row, 1, K), probs);

    ad::Tensor* costs = tape.sigmoid(affine(tape, d, tape.param(store.get("ct/nm/wv")),
                                            tape.param(store.get("ct/nm/bv"))));
    ForwardNodes out;
    out.costs = costs;
    out.weights = weights;
    out.aggregate = tape.matmul(weights, costs);
    return out;
  }

  CostReport score(const ContextWindow& w) const {
    ad::Tape tape;
    const auto nodes = forward(tape, w);
    CostReport rep;
    for (int t = 0; t < w.length; ++t) {
      if (w.pad[static_cast<size_t>(t)]) continue;
      rep.costs.push_back(nodes.costs->v(t, 0));
      rep.weights.push_back(nodes.weights->v(0, t));
    }
    rep.aggregate = nodes.aggregate->val[0];
    if (!std::isfinite(rep.aggregate)) throw std::runtime_error("non-finite cost aggregate");
    return rep;
  }

  // Per-step cost c_t of the window ending at t, for relabeling.
  std::vector<double> per_step_costs(const Trajectory& traj) const {
    std::vector<double> out(traj.steps.size(), 0.0);
    for (int t = 0; t < traj.horizon(); ++t) {
      const auto w = window(traj, t, cfg_.seq.context);
      const auto rep = score(w);
      out[static_cast<size_t>(t)] = rep.costs.back();
    }
    return out;
  }

  // Window-level aggregate for a trajectory scored with this model's context.
  double window_cost(const Trajectory& traj, int t_end) const {
    return score(window(traj, t_end, cfg_.seq.context)).aggregate;
  }

  nlohmann::ordered_json checkpoint_extras() const {
    nlohmann::ordered_json j;
    j["model"] = "ct";
    j["config"] = {{"embed_dim", cfg_.seq.embed_dim},
                   {"n_layers", cfg_.seq.n_layers},
                   {"n_heads", cfg_.seq.n_heads},
                   {"context", cfg_.seq.context},
                   {"learning_rate", cfg_.seq.learning_rate},
                   {"batch_size", cfg_.seq.batch_size},
                   {"train_steps", cfg_.seq.train_steps},
                   {"seed", cfg_.seq.seed},
                   {"state_dim", cfg_.state_dim},
                   {"action_dim", cfg_.action_dim},
                   {"max_timesteps", cfg_.max_timesteps},
                   {"eps_floor", cfg_.eps_floor},
                   {"activation", "gelu"},
                   {"norm", "pre_ln"},
                   {"dropout", 0.0}};
    j["norm_stats"] = {{"mean", stats_.mean}, {"std", stats_.std}};
    return j;
  }

  void save(const std::string& path) const { save_checkpoint(store_, checkpoint_extras(), path); }

  static CtConfig config_from_header(const nlohmann::ordered_json& h) {
    CtConfig cfg;
    const auto& c = h.at("config");
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
    cfg.eps_floor = c.at("eps_floor").get<double>();
    return cfg;
  }

  static CTModel load(const std::string& path) {
    const auto ckpt = load_checkpoint(path);
    if (ckpt.header.value("model", "") != "ct")
      throw std::runtime_error("checkpoint is not a ct model: " + path);
    NormStats stats;
    stats.mean = ckpt.header.at("norm_stats").at("mean").get<std::vector<double>>();
    stats.std = ckpt.header.at("norm_stats").at("std").get<std::vector<double>>();
    CTModel model(config_from_header(ckpt.header), std::move(stats));
    restore_params(model.store_, ckpt);
    return model;
  }

 private:
  CtConfig cfg_;
  NormStats stats_;
  ParamStore store_;
  SeqEncoder enc_;
};

struct CtLossNodes {
  ad::Tensor* loss = nullptr;
  double mean_expert = 0.0;
  double mean_violating = 0.0;
};

// Contrastive cost loss over matched batches: push expert aggregates down and
// violating aggregates up, with epsilon-floored logs.
inline CtLossNodes ct_loss_node(ad::Tape& tape, const CTModel& model,
                                const std::vector<ContextWindow>& expert_batch,
                                const std::vector<ContextWindow>& violating_batch,
                                double eps_floor) {
  if (expert_batch.empty() || violating_batch.empty())
    throw std::invalid_argument("ct loss needs non-empty batches");
  CtLossNodes out;
  std::vector<ad::Tensor*> expert_logs, violating_logs;
  for (const auto& w : expert_batch) {
    auto nodes = model.forward(tape, w);
    out.mean_expert += nodes.aggregate->val[0];
    expert_logs.push_back(tape.log_op(tape.add_const(nodes.aggregate, eps_floor)));
  }
  for (const auto& w : violating_batch) {
    auto nodes = model.forward(tape, w);
    out.mean_violating += nodes.aggregate->val[0];
    violating_logs.push_back(tape.log_op(tape.add_const(nodes.aggregate, eps_floor)));
  }
  out.mean_expert /= static_cast<double>(expert_batch.size());
  out.mean_violating /= static_cast<double>(violating_batch.size());
  ad::Tensor* e = tape.scale(tape.add_n(expert_logs), 1.0 / static_cast<double>(expert_logs.size()));
  ad::Tensor* v =
      tape.scale(tape.add_n(violating_logs), 1.0 / static_cast<double>(violating_logs.size()));
  out.loss = tape.sub(e, v);
  return out;
}

// Scalar mirror of the loss for verification against fixed aggregates.
inline double ct_loss_value(const std::vector<double>& expert_costs,
                            const std::vector<double>& violating_costs, double eps_floor = 1e-6) {
  double e = 0.0, v = 0.0;
  for (double c : expert_costs) e += std::log(c + eps_floor);
  for (double c : violating_costs) v += std::log(c + eps_floor);
  return e / static_cast<double>(expert_costs.size()) -
         v / static_cast<double>(violating_costs.size());
}

struct CtTrainLog {
  std::vector<double> loss;
  std::vector<double> separation;  // batch mean C_v - mean C_e per step
};

// Uniformly sample a window ending at a random step of a random trajectory.
inline ContextWindow sample_window(const TrajectoryDataset& ds, int K, Rng& rng,
                                   WindowChannels ch = {}) {
  const auto& traj = ds.trajectories[rng.below(ds.trajectories.size())];
  const int t = static_cast<int>(rng.below(static_cast<uint64_t>(traj.horizon())));
  return window(traj, t, K, ch);
}

inline CtTrainLog train_ct(CTModel& model, const TrajectoryDataset& expert,
                           const TrajectoryDataset& violating) {
  const auto& cfg = model.config();
  Rng rng(split_seed(cfg.seq.seed, fnv1a64("ct-train")));
  CtTrainLog log;
  for (int step = 0; step < cfg.seq.train_steps; ++step) {
    std::vector<ContextWindow> eb, vb;
    eb.reserve(static_cast<size_t>(cfg.seq.batch_size));
    vb.reserve(static_cast<size_t>(cfg.seq.batch_size));
    for (int i = 0; i < cfg.seq.batch_size; ++i) {
      eb.push_back(sample_window(expert, cfg.seq.context, rng));
      vb.push_back(sample_window(violating, cfg.seq.context, rng));
    }
    ad::Tape tape;
    const auto nodes = ct_loss_node(tape, model, eb, vb, cfg.eps_floor);
    if (!std::isfinite(nodes.loss->val[0]))
      throw std::runtime_error("ct training diverged at step " + std::to_string(step));
    model.params().zero_grad();
    tape.backward(nodes.loss);
    tape.flush_param_grads();
    model.params().adam_step(cfg.seq.learning_rate);
    log.loss.push_back(nodes.loss->val[0]);
    log.separation.push_back(nodes.mean_violating - nodes.mean_expert);
    if (cfg.stop_separation > 0.0 && log.separation.back() >= cfg.stop_separation) break;
  }
  return log;
}

// ---------------------------------------------------------------------------
// Fixed-formula cost baselines (raw-unit thresholds).
// ---------------------------------------------------------------------------

struct DoseThresholds {
  double iv_max = 2000.0;
  double vaso_max = 1.0;
  double change_threshold = 0.75;
};

inline int custom_cost(double iv, double vaso, const DoseThresholds& th = {}) {
  return (iv > th.iv_max ? 1 : 0) + (vaso > th.vaso_max ? 1 : 0);
}

inline int llm_cost(double iv, double vaso, double prev_vaso, const DoseThresholds& th = {}) {
  return custom_cost(iv, vaso, th) + ((vaso - prev_vaso) > th.change_threshold ? 1 : 0);
}

// CostFunction interface: deterministic per-step costs in [0, 1] for a
// trajectory. Integer-count formulas are normalized by their maximum count so
// relabeled steps satisfy the dataset cost invariant.
class CostFunction {
 public:
  virtual ~CostFunction() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> per_step_costs(const Trajectory& traj) const = 0;

  PerStepCostFn as_fn() const {
    return [this](const Trajectory& traj) { return per_step_costs(traj); };
  }
};

class ZeroCost final : public CostFunction {
 public:
  std::string name() const override { return "zero"; }
  std::vector<double> per_step_costs(const Trajectory& traj) const override {
    return std::vector<double>(traj.steps.size(), 0.0);
  }
};

class CustomCost final : public CostFunction {
 public:
  explicit CustomCost(DoseThresholds th = {}) : th_(th) {}
  std::string name() const override { return "custom"; }
  std::vector<double> per_step_costs(const Trajectory& traj) const override {
    std::vector<double> out(traj.steps.size());
    for (size_t t = 0; t < traj.steps.size(); ++t)
      out[t] = custom_cost(traj.steps[t].action[0], traj.steps[t].action[1], th_) / 2.0;
    return out;
  }

 private:
  DoseThresholds th_;
};

class LlmCost final : public CostFunction {
 public:
  explicit LlmCost(DoseThresholds th = {}) : th_(th) {}
  std::string name() const override { return "llm"; }
  std::vector<double> per_step_costs(const Trajectory& traj) const override {
    std::vector<double> out(traj.steps.size());
    double prev = 0.0;
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      out[t] = llm_cost(traj.steps[t].action[0], traj.steps[t].action[1], prev, th_) / 3.0;
      prev = traj.steps[t].action[1];
    }
    return out;
  }

 private:
  DoseThresholds th_;
};

class CtCost final : public CostFunction {
 public:
  explicit CtCost(const CTModel* model) : model_(model) {}
  std::string name() const override { return "ct"; }
  std::vector<double> per_step_costs(const Trajectory& traj) const override {
    return model_->per_step_costs(traj);
  }

 private:
  const CTModel* model_;
};

}  // namespace ct
