#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ct/params.hpp"
#include "ct/tape.hpp"

namespace ct {

struct SeqModelConfig {
  int embed_dim = 64;
  int n_layers = 3;
  int n_heads = 1;
  int context = 10;  // K timesteps
  double learning_rate = 1e-4;
  int batch_size = 64;
  int train_steps = 1000;
  uint64_t seed = 0;

  void validate() const {
    if (embed_dim <= 0 || n_layers < 0 || n_heads <= 0 || context <= 0)
      throw std::invalid_argument("seq model config fields must be positive");
    if (embed_dim % n_heads != 0)
      throw std::invalid_argument("embed_dim must be divisible by n_heads");
  }
};

inline ad::Tensor* affine(ad::Tape& tape, ad::Tensor* x, ad::Tensor* w, ad::Tensor* b) {
  return tape.add_rowvec(tape.matmul(x, w), b);
}

inline void register_block_params(ParamStore& store, const std::string& prefix,
                                  const SeqModelConfig& cfg) {
  const int m = cfg.embed_dim;
  const int ff = 4 * m;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "/blk" + std::to_string(l);
    store.add(p + "/ln1/g", 1, m, Init::ones, cfg.seed);
    store.add(p + "/ln1/b", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/attn/wq", m, m, Init::xavier, cfg.seed);
    store.add(p + "/attn/bq", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/attn/wk", m, m, Init::xavier, cfg.seed);
    store.add(p + "/attn/bk", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/attn/wv", m, m, Init::xavier, cfg.seed);
    store.add(p + "/attn/bv", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/attn/wo", m, m, Init::xavier, cfg.seed);
    store.add(p + "/attn/bo", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/ln2/g", 1, m, Init::ones, cfg.seed);
    store.add(p + "/ln2/b", 1, m, Init::zeros, cfg.seed);
    store.add(p + "/ffn/w1", m, ff, Init::xavier, cfg.seed);
    store.add(p + "/ffn/b1", 1, ff, Init::zeros, cfg.seed);
    store.add(p + "/ffn/w2", ff, m, Init::xavier, cfg.seed);
    store.add(p + "/ffn/b2", 1, m, Init::zeros, cfg.seed);
  }
}

// Pre-LN residual blocks with GELU feed-forward. n_layers == 0 is the
// identity, which the tests rely on.
inline ad::Tensor* transformer_blocks(ad::Tape& tape, ParamStore& store, const std::string& prefix,
                                      const SeqModelConfig& cfg, ad::Tensor* x,
                                      const std::vector<uint8_t>& attn_mask) {
  const int m = cfg.embed_dim;
  const int dh = m / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "/blk" + std::to_string(l);
    ad::Tensor* h = tape.layer_norm(x, tape.param(store.get(p + "/ln1/g")),
                                    tape.param(store.get(p + "/ln1/b")));
    ad::Tensor* q = affine(tape, h, tape.param(store.get(p + "/attn/wq")),
                           tape.param(store.get(p + "/attn/bq")));
    ad::Tensor* k = affine(tape, h, tape.param(store.get(p + "/attn/wk")),
                           tape.param(store.get(p + "/attn/bk")));
    ad::Tensor* v = affine(tape, h, tape.param(store.get(p + "/attn/wv")),
                           tape.param(store.get(p + "/attn/bv")));
    std::vector<ad::Tensor*> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      ad::Tensor* qh = tape.select_cols(q, hh * dh, dh);
      ad::Tensor* kh = tape.select_cols(k, hh * dh, dh);
      ad::Tensor* vh = tape.select_cols(v, hh * dh, dh);
      ad::Tensor* scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
      ad::Tensor* probs = tape.row_softmax_masked(scores, attn_mask);
      heads.push_back(tape.matmul(probs, vh));
    }
    ad::Tensor* att = affine(tape, tape.concat_cols(heads),
                             tape.param(store.get(p + "/attn/wo")),
                             tape.param(store.get(p + "/attn/bo")));
    x = tape.add(x, att);
    ad::Tensor* h2 = tape.layer_norm(x, tape.param(store.get(p + "/ln2/g")),
                                     tape.param(store.get(p + "/ln2/b")));
    ad::Tensor* f1 = tape.gelu(affine(tape, h2, tape.param(store.get(p + "/ffn/w1")),
                                      tape.param(store.get(p + "/ffn/b1"))));
    ad::Tensor* f2 = affine(tape, f1, tape.param(store.get(p + "/ffn/w2")),
                            tape.param(store.get(p + "/ffn/b2")));
    x = tape.add(x, f2);
  }
  return x;
}

struct Modality {
  std::string name;
  int in_dim = 0;
};

// Shared token encoder: per-modality linear maps, a learned per-timestep
// positional table shared by the tokens of one timestep, an embedding layer
// norm, then the causal block stack.
class SeqEncoder {
 public:
  SeqEncoder(std::string prefix, SeqModelConfig cfg, std::vector<Modality> mods, int max_timesteps)
      : prefix_(std::move(prefix)), cfg_(cfg), mods_(std::move(mods)), max_timesteps_(max_timesteps) {
    cfg_.validate();
    if (mods_.empty()) throw std::invalid_argument("encoder needs at least one modality");
  }

  void register_params(ParamStore& store) const {
    const int m = cfg_.embed_dim;
    for (const auto& mod : mods_) {
      store.add(prefix_ + "/tok/" + mod.name + "/w", mod.in_dim, m, Init::xavier, cfg_.seed);
      store.add(prefix_ + "/tok/" + mod.name + "/b", 1, m, Init::zeros, cfg_.seed);
    }
    store.add(prefix_ + "/pos", max_timesteps_, m, Init::small_normal, cfg_.seed);
    store.add(prefix_ + "/embed_ln/g", 1, m, Init::ones, cfg_.seed);
    store.add(prefix_ + "/embed_ln/b", 1, m, Init::zeros, cfg_.seed);
    register_block_params(store, prefix_, cfg_);
  }

  int tokens_per_step() const { return static_cast<int>(mods_.size()); }
  int token_index(int slot, int mod) const { return slot * tokens_per_step() + mod; }

  const SeqModelConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  // Token-level causal mask: key <= query, both unpadded.
  std::vector<uint8_t> causal_mask(const std::vector<uint8_t>& pad_slots) const {
    const int K = static_cast<int>(pad_slots.size());
    const int n_mod = tokens_per_step();
    const int L = K * n_mod;
    std::vector<uint8_t> mask(static_cast<size_t>(L) * L, 0);
    for (int qi = 0; qi < L; ++qi) {
      if (pad_slots[static_cast<size_t>(qi / n_mod)]) continue;
      for (int ki = 0; ki <= qi; ++ki) {
        if (pad_slots[static_cast<size_t>(ki / n_mod)]) continue;
        mask[static_cast<size_t>(qi) * L + ki] = 1;
      }
    }
    return mask;
  }

  // inputs[i]: row-major [K, mods[i].in_dim]. Returns embedded token sequence [K*n_mod, m].
  ad::Tensor* embed(ad::Tape& tape, ParamStore& store,
                    const std::vector<std::span<const double>>& inputs, int K,
                    const std::vector<int>& timesteps) const {
    if (inputs.size() != mods_.size()) throw std::invalid_argument("embed: modality count mismatch");
    for (int t : timesteps) {
      if (t < 0 || t >= max_timesteps_)
        throw std::out_of_range("timestep outside positional table");
    }
    ad::Tensor* pos = tape.select_rows(tape.param(store.get(prefix_ + "/pos")), timesteps);
    std::vector<ad::Tensor*> per_mod;
    per_mod.reserve(mods_.size());
    for (size_t i = 0; i < mods_.size(); ++i) {
      ad::Tensor* in = tape.input(inputs[i], K, mods_[i].in_dim);
      ad::Tensor* e = affine(tape, in, tape.param(store.get(prefix_ + "/tok/" + mods_[i].name + "/w")),
                             tape.param(store.get(prefix_ + "/tok/" + mods_[i].name + "/b")));
      per_mod.push_back(tape.add(e, pos));
    }
    // interleave modalities per timestep
    ad::Tensor* stacked = tape.concat_rows(per_mod);
    std::vector<int> order(static_cast<size_t>(K) * mods_.size());
    for (int t = 0; t < K; ++t)
      for (size_t mi = 0; mi < mods_.size(); ++mi)
        order[static_cast<size_t>(t) * mods_.size() + mi] = static_cast<int>(mi) * K + t;
    ad::Tensor* tokens = tape.select_rows(stacked, order);
    return tape.layer_norm(tokens, tape.param(store.get(prefix_ + "/embed_ln/g")),
                           tape.param(store.get(prefix_ + "/embed_ln/b")));
  }

  ad::Tensor* encode(ad::Tape& tape, ParamStore& store,
                     const std::vector<std::span<const double>>& inputs, int K,
                     const std::vector<int>& timesteps, const std::vector<uint8_t>& pad_slots) const {
    ad::Tensor* tokens = embed(tape, store, inputs, K, timesteps);
    return transformer_blocks(tape, store, prefix_, cfg_, tokens, causal_mask(pad_slots));
  }

 private:
  std::string prefix_;
  SeqModelConfig cfg_;
  std::vector<Modality> mods_;
  int max_timesteps_;
};

}  // namespace ct
