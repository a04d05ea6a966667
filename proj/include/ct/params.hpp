#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ct/rng.hpp"

namespace ct {

enum class Init { zeros, ones, xavier, small_normal };

struct ParamArray {
  std::string name;
  int rows = 0, cols = 0;
  std::vector<double> val, grad, m, v;  // Adam first/second moments

  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

// Named flat arrays for every weight, plus Adam state. Name-sorted iteration
// keeps every update and checkpoint byte-deterministic.
class ParamStore {
 public:
  ParamArray& add(const std::string& name, int rows, int cols, Init init, uint64_t seed) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    auto arr = std::make_unique<ParamArray>();
    arr->name = name;
    arr->rows = rows;
    arr->cols = cols;
    const size_t n = arr->size();
    arr->val.assign(n, 0.0);
    arr->grad.assign(n, 0.0);
    arr->m.assign(n, 0.0);
    arr->v.assign(n, 0.0);
    switch (init) {
      case Init::zeros:
        break;
      case Init::ones:
        arr->val.assign(n, 1.0);
        break;
      case Init::xavier: {
        Rng rng(split_seed(seed, fnv1a64(name)));
        const double sd = std::sqrt(2.0 / static_cast<double>(rows + cols));
        for (auto& x : arr->val) x = rng.normal(0.0, sd);
        break;
      }
      case Init::small_normal: {
        Rng rng(split_seed(seed, fnv1a64(name)));
        for (auto& x : arr->val) x = rng.normal(0.0, 0.02);
        break;
      }
    }
    ParamArray* ptr = arr.get();
    arrays_.push_back(std::move(arr));
    index_[name] = arrays_.size() - 1;
    return *ptr;
  }

  ParamArray& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *arrays_[it->second];
  }
  const ParamArray& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *arrays_[it->second];
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  template <typename Fn>
  void for_each(Fn&& fn) {                // name-sorted
    for (const auto& [name, idx] : index_) fn(*arrays_[idx]);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, idx] : index_) fn(*arrays_[idx]);
  }

  void zero_grad() {
    for (auto& a : arrays_) std::fill(a->grad.begin(), a->grad.end(), 0.0);
  }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& a : arrays_) n += a->size();
    return n;
  }

  int64_t step_count() const { return adam_step_; }

  // Bias-corrected Adam over every array.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++adam_step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step_));
    for_each([&](ParamArray& a) {
      for (size_t i = 0; i < a.val.size(); ++i) {
        const double g = a.grad[i];
        if (!std::isfinite(g))
          throw std::runtime_error("non-finite gradient in parameter " + a.name);
        a.m[i] = beta1 * a.m[i] + (1.0 - beta1) * g;
        a.v[i] = beta2 * a.v[i] + (1.0 - beta2) * g * g;
        const double mh = a.m[i] / bc1;
        const double vh = a.v[i] / bc2;
        a.val[i] -= lr * mh / (std::sqrt(vh) + eps);
        if (!std::isfinite(a.val[i]))
          throw std::runtime_error("non-finite update in parameter " + a.name);
      }
    });
  }

 private:
  std::map<std::string, size_t> index_;
  std::vector<std::unique_ptr<ParamArray>> arrays_;
  int64_t adam_step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line (config, step, seed, array directory),
// then named flat arrays of 64-bit floats in directory order.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ParamStore& store, const nlohmann::ordered_json& extras,
                            const std::string& path) {
  nlohmann::ordered_json header;
  header["format"] = "ct-checkpoint";
  header["version"] = 1;
  header["step"] = store.step_count();
  for (auto it = extras.begin(); it != extras.end(); ++it) header[it.key()] = it.value();
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  store.for_each([&](const ParamArray& a) {
    dir.push_back({{"name", a.name}, {"rows", a.rows}, {"cols", a.cols}});
  });
  header["arrays"] = std::move(dir);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << header.dump() << '\n';
  store.for_each([&](const ParamArray& a) {
    out.write(reinterpret_cast<const char*>(a.val.data()),
              static_cast<std::streamsize>(a.val.size() * sizeof(double)));
  });
}

struct CheckpointData {
  nlohmann::ordered_json header;
  std::map<std::string, std::vector<double>> arrays;
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint missing header: " + path);
  CheckpointData ckpt;
  ckpt.header = nlohmann::ordered_json::parse(line);
  if (ckpt.header.value("format", "") != "ct-checkpoint")
    throw std::runtime_error("not a ct-checkpoint file: " + path);
  for (const auto& entry : ckpt.header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<int>();
    const auto cols = entry.at("cols").get<int>();
    std::vector<double> data(static_cast<size_t>(rows) * static_cast<size_t>(cols));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint payload truncated: " + path);
    ckpt.arrays[name] = std::move(data);
  }
  return ckpt;
}

// Overwrite store values from a checkpoint; shapes must match exactly.
inline void restore_params(ParamStore& store, const CheckpointData& ckpt) {
  store.for_each([&](ParamArray& a) {
    auto it = ckpt.arrays.find(a.name);
    if (it == ckpt.arrays.end())
      throw std::runtime_error("checkpoint missing parameter: " + a.name);
    if (it->second.size() != a.val.size())
      throw std::runtime_error("checkpoint shape mismatch for " + a.name);
    a.val = it->second;
  });
}

}  // namespace ct
