#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ct/csv.hpp"

namespace ct {

using json = nlohmann::ordered_json;

enum class Outcome { survived, died };

inline std::string to_string(Outcome o) { return o == Outcome::survived ? "survived" : "died"; }

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "survived") return Outcome::survived;
  if (s == "died") return Outcome::died;
  throw std::runtime_error("unknown outcome: " + s);
}

enum class DatasetTag { expert, violating, generated };

inline std::string to_string(DatasetTag t) {
  switch (t) {
    case DatasetTag::expert: return "expert";
    case DatasetTag::violating: return "violating";
    default: return "generated";
  }
}

inline DatasetTag tag_from_string(const std::string& s) {
  if (s == "expert") return DatasetTag::expert;
  if (s == "violating") return DatasetTag::violating;
  if (s == "generated") return DatasetTag::generated;
  throw std::runtime_error("unknown dataset tag: " + s);
}

struct Step {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::optional<double> cost;  // filled by relabeling, in [0, 1]
  bool done = false;
};

struct Trajectory {
  std::string patient_id;
  Outcome outcome = Outcome::survived;
  std::string source_id;  // for generated data: id of the seeding patient
  std::vector<Step> steps;

  int horizon() const { return static_cast<int>(steps.size()); }
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  bool present() const { return !mean.empty(); }
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  int state_dim = 0;
  int action_dim = 0;
  NormStats norm_stats;  // computed over expert data only, frozen thereafter
  DatasetTag tag = DatasetTag::expert;

  size_t total_steps() const {
    size_t n = 0;
    for (const auto& t : trajectories) n += t.steps.size();
    return n;
  }
};

// K-slot slice ending at index t_end, left-padded with zeros when the
// trajectory prefix is shorter than K. Channels share one slot layout.
struct ContextWindow {
  int length = 0;     // K
  int state_dim = 0;
  int action_dim = 0;
  int t_end = 0;      // trajectory index of the last slot
  std::vector<double> states;    // K x S
  std::vector<double> actions;   // K x A
  std::vector<double> rtg;       // K (optional channel, zeros when unused)
  std::vector<double> ctg;       // K
  std::vector<uint8_t> pad;      // 1 = padded slot
  std::vector<int> timesteps;    // trajectory index per slot (0 for padded)

  int first_real_slot() const {
    int k = 0;
    while (k < length && pad[static_cast<size_t>(k)]) ++k;
    return k;
  }
  int real_count() const { return length - first_real_slot(); }
};

inline std::vector<double> compute_return_to_go(const Trajectory& traj) {
  std::vector<double> rtg(traj.steps.size(), 0.0);
  double acc = 0.0;
  for (size_t i = traj.steps.size(); i-- > 0;) {
    const double r = traj.steps[i].reward;
    if (!std::isfinite(r)) throw std::runtime_error("non-finite reward in " + traj.patient_id);
    acc += r;
    rtg[i] = acc;
  }
  return rtg;
}

inline std::vector<double> compute_cost_to_go(const Trajectory& traj) {
  std::vector<double> ctg(traj.steps.size(), 0.0);
  double acc = 0.0;
  for (size_t i = traj.steps.size(); i-- > 0;) {
    if (!traj.steps[i].cost.has_value())
      throw std::runtime_error("cost-to-go requested before relabeling: " + traj.patient_id);
    acc += *traj.steps[i].cost;
    ctg[i] = acc;
  }
  return ctg;
}

struct WindowChannels {
  bool rtg = false;
  bool ctg = false;
};

inline ContextWindow window(const Trajectory& traj, int t, int K, WindowChannels ch = {}) {
  const int T = traj.horizon();
  if (t < 0 || t >= T) throw std::out_of_range("window index out of range");
  if (K < 1) throw std::invalid_argument("window length must be >= 1");
  const int S = static_cast<int>(traj.steps.front().state.size());
  const int A = static_cast<int>(traj.steps.front().action.size());

  ContextWindow w;
  w.length = K;
  w.state_dim = S;
  w.action_dim = A;
  w.t_end = t;
  w.states.assign(static_cast<size_t>(K) * S, 0.0);
  w.actions.assign(static_cast<size_t>(K) * A, 0.0);
  w.rtg.assign(static_cast<size_t>(K), 0.0);
  w.ctg.assign(static_cast<size_t>(K), 0.0);
  w.pad.assign(static_cast<size_t>(K), 1);
  w.timesteps.assign(static_cast<size_t>(K), 0);

  std::vector<double> rtg_full, ctg_full;
  if (ch.rtg) rtg_full = compute_return_to_go(traj);
  if (ch.ctg) ctg_full = compute_cost_to_go(traj);

  const int start = std::max(0, t - K + 1);
  for (int src = start; src <= t; ++src) {
    const int slot = K - 1 - (t - src);
    const auto& st = traj.steps[static_cast<size_t>(src)];
    std::copy(st.state.begin(), st.state.end(), w.states.begin() + static_cast<size_t>(slot) * S);
    std::copy(st.action.begin(), st.action.end(),
              w.actions.begin() + static_cast<size_t>(slot) * A);
    if (ch.rtg) w.rtg[static_cast<size_t>(slot)] = rtg_full[static_cast<size_t>(src)];
    if (ch.ctg) w.ctg[static_cast<size_t>(slot)] = ctg_full[static_cast<size_t>(src)];
    w.pad[static_cast<size_t>(slot)] = 0;
    w.timesteps[static_cast<size_t>(slot)] = src;
  }
  return w;
}

inline NormStats compute_norm_stats(const TrajectoryDataset& ds) {
  NormStats st;
  const int S = ds.state_dim;
  st.mean.assign(static_cast<size_t>(S), 0.0);
  st.std.assign(static_cast<size_t>(S), 0.0);
  size_t n = 0;
  for (const auto& traj : ds.trajectories) {
    for (const auto& step : traj.steps) {
      for (int d = 0; d < S; ++d) st.mean[static_cast<size_t>(d)] += step.state[static_cast<size_t>(d)];
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("cannot compute norm stats on empty dataset");
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (const auto& traj : ds.trajectories) {
    for (const auto& step : traj.steps) {
      for (int d = 0; d < S; ++d) {
        const double dlt = step.state[static_cast<size_t>(d)] - st.mean[static_cast<size_t>(d)];
        st.std[static_cast<size_t>(d)] += dlt * dlt;
      }
    }
  }
  for (auto& s : st.std) s = std::sqrt(s / static_cast<double>(n));
  return st;
}

inline double floored_std(double s) { return std::max(s, 1e-6); }

inline TrajectoryDataset normalize_states(const TrajectoryDataset& ds) {
  if (!ds.norm_stats.present()) throw std::runtime_error("normalize_states: missing norm stats");
  TrajectoryDataset out = ds;
  for (auto& traj : out.trajectories) {
    for (auto& step : traj.steps) {
      for (int d = 0; d < ds.state_dim; ++d) {
        const auto di = static_cast<size_t>(d);
        step.state[di] = (step.state[di] - ds.norm_stats.mean[di]) / floored_std(ds.norm_stats.std[di]);
      }
    }
  }
  return out;
}

inline TrajectoryDataset denormalize_states(const TrajectoryDataset& ds) {
  if (!ds.norm_stats.present()) throw std::runtime_error("denormalize_states: missing norm stats");
  TrajectoryDataset out = ds;
  for (auto& traj : out.trajectories) {
    for (auto& step : traj.steps) {
      for (int d = 0; d < ds.state_dim; ++d) {
        const auto di = static_cast<size_t>(d);
        step.state[di] = step.state[di] * floored_std(ds.norm_stats.std[di]) + ds.norm_stats.mean[di];
      }
    }
  }
  return out;
}

inline void normalize_vector_inplace(std::span<double> state, const NormStats& st) {
  for (size_t d = 0; d < state.size(); ++d) state[d] = (state[d] - st.mean[d]) / floored_std(st.std[d]);
}

// cost_fn returns per-step costs c_0..c_{T-1} for a trajectory, each in [0, 1].
using PerStepCostFn = std::function<std::vector<double>(const Trajectory&)>;

inline TrajectoryDataset relabel_costs(const TrajectoryDataset& ds, const PerStepCostFn& cost_fn) {
  TrajectoryDataset out = ds;
  for (auto& traj : out.trajectories) {
    const auto costs = cost_fn(traj);
    if (costs.size() != traj.steps.size())
      throw std::runtime_error("cost function returned wrong length for " + traj.patient_id);
    for (size_t i = 0; i < costs.size(); ++i) {
      const double c = costs[i];
      if (!std::isfinite(c) || c < 0.0 || c > 1.0)
        throw std::runtime_error("cost outside [0,1] from cost function for " + traj.patient_id +
                                 " at t=" + std::to_string(i) + ": " + format_double(c));
      traj.steps[i].cost = c;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File I/O. Line-delimited JSON: one header record, then one trajectory per
// line. Floats use shortest round-trip form so save/load is bit-exact.
// ---------------------------------------------------------------------------

inline json dataset_header_json(const TrajectoryDataset& ds) {
  json h;
  h["format"] = "ct-dataset";
  h["version"] = 1;
  h["state_dim"] = ds.state_dim;
  h["action_dim"] = ds.action_dim;
  h["tag"] = to_string(ds.tag);
  if (ds.norm_stats.present()) {
    h["norm_stats"] = {{"mean", ds.norm_stats.mean}, {"std", ds.norm_stats.std}};
  } else {
    h["norm_stats"] = nullptr;
  }
  return h;
}

inline void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << dataset_header_json(ds).dump() << '\n';
  for (const auto& traj : ds.trajectories) {
    json t;
    t["patient_id"] = traj.patient_id;
    t["outcome"] = to_string(traj.outcome);
    if (!traj.source_id.empty()) t["src"] = traj.source_id;
    json steps = json::array();
    for (const auto& s : traj.steps) {
      json js;
      js["s"] = s.state;
      js["a"] = s.action;
      js["r"] = s.reward;
      if (s.cost.has_value()) js["c"] = *s.cost;
      steps.push_back(std::move(js));
    }
    t["steps"] = std::move(steps);
    out << t.dump() << '\n';
  }
}

inline TrajectoryDataset load_dataset(const std::string& path,
                                      std::optional<std::pair<int, int>> expected_dims = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);

  auto fail = [&](size_t line_no, const std::string& what) -> std::runtime_error {
    return std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
  };

  std::string line;
  size_t line_no = 0;
  if (!std::getline(in, line)) throw fail(1, "empty dataset file");
  ++line_no;

  TrajectoryDataset ds;
  try {
    const json h = json::parse(line);
    if (h.value("format", "") != "ct-dataset") throw fail(line_no, "not a ct-dataset header");
    ds.state_dim = h.at("state_dim").get<int>();
    ds.action_dim = h.at("action_dim").get<int>();
    ds.tag = tag_from_string(h.at("tag").get<std::string>());
    if (!h.at("norm_stats").is_null()) {
      ds.norm_stats.mean = h["norm_stats"].at("mean").get<std::vector<double>>();
      ds.norm_stats.std = h["norm_stats"].at("std").get<std::vector<double>>();
      if (static_cast<int>(ds.norm_stats.mean.size()) != ds.state_dim ||
          static_cast<int>(ds.norm_stats.std.size()) != ds.state_dim)
        throw fail(line_no, "norm_stats dimension mismatch");
    }
  } catch (const json::exception& e) {
    throw fail(line_no, std::string("malformed header: ") + e.what());
  }

  if (expected_dims && (expected_dims->first != ds.state_dim || expected_dims->second != ds.action_dim)) {
    throw fail(line_no, "dataset dims (" + std::to_string(ds.state_dim) + "," +
                            std::to_string(ds.action_dim) + ") do not match expected (" +
                            std::to_string(expected_dims->first) + "," +
                            std::to_string(expected_dims->second) + ")");
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Trajectory traj;
    try {
      const json t = json::parse(line);
      traj.patient_id = t.at("patient_id").get<std::string>();
      traj.outcome = outcome_from_string(t.at("outcome").get<std::string>());
      traj.source_id = t.value("src", "");
      for (const auto& js : t.at("steps")) {
        Step s;
        s.state = js.at("s").get<std::vector<double>>();
        s.action = js.at("a").get<std::vector<double>>();
        s.reward = js.at("r").get<double>();
        if (js.contains("c")) s.cost = js["c"].get<double>();
        traj.steps.push_back(std::move(s));
      }
    } catch (const json::exception& e) {
      throw fail(line_no, std::string("malformed record: ") + e.what());
    }
    if (traj.steps.empty()) throw fail(line_no, "trajectory with no steps");
    for (const auto& s : traj.steps) {
      if (static_cast<int>(s.state.size()) != ds.state_dim)
        throw fail(line_no, "state vector of length " + std::to_string(s.state.size()) +
                                ", expected " + std::to_string(ds.state_dim));
      if (static_cast<int>(s.action.size()) != ds.action_dim)
        throw fail(line_no, "action vector of length " + std::to_string(s.action.size()) +
                                ", expected " + std::to_string(ds.action_dim));
      if (!std::isfinite(s.reward)) throw fail(line_no, "non-finite reward");
    }
    traj.steps.back().done = true;
    ds.trajectories.push_back(std::move(traj));
  }
  if (ds.trajectories.empty()) throw fail(line_no, "dataset has no trajectories");

  if (!ds.norm_stats.present() && ds.tag == DatasetTag::expert) {
    ds.norm_stats = compute_norm_stats(ds);
  }
  return ds;
}

inline void export_csv(const TrajectoryDataset& ds, const std::string& path) {
  CsvWriter csv(path);
  std::vector<std::string> header = {"patient_id", "t", "outcome"};
  for (int d = 0; d < ds.state_dim; ++d) header.push_back("s" + std::to_string(d));
  for (int d = 0; d < ds.action_dim; ++d) header.push_back("a" + std::to_string(d));
  header.push_back("r");
  header.push_back("c");
  csv.row(header);
  for (const auto& traj : ds.trajectories) {
    for (size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& s = traj.steps[t];
      std::vector<std::string> row = {traj.patient_id, std::to_string(t), to_string(traj.outcome)};
      for (double v : s.state) row.push_back(format_double(v));
      for (double v : s.action) row.push_back(format_double(v));
      row.push_back(format_double(s.reward));
      row.push_back(s.cost ? format_double(*s.cost) : "");
      csv.row(row);
    }
  }
}

}  // namespace ct
