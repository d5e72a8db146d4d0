#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "svq/tensor.hpp"

namespace svq {

// Named registry of trainable leaves. Registration order is the canonical
// order used by the optimizer and the checkpoint writer.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t);
  Tensor<T>* find(const std::string& name);
  const Tensor<T>* find(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::size_t count() const { return items_.size(); }
  i64 total_size() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out], undefined when bias-free
  static Linear create(ParamStore<T>& ps, const std::string& name, i64 in, i64 out, Rng& rng,
                       bool bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;  // [..., in] -> [..., out]
};

template <class T>
struct LayerNorm {
  Tensor<T> g, b;
  static LayerNorm create(ParamStore<T>& ps, const std::string& name, i64 dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, g, b, -1, T(1e-5)); }
};

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;
  static Mlp create(ParamStore<T>& ps, const std::string& name, i64 in, i64 hidden, i64 out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

// Gated recurrent unit, h' = z*n + (1-z)*h: forcing the update gate open
// replaces the state with the candidate, forcing it closed keeps h.
template <class T>
struct GruCell {
  Tensor<T> w_ih;  // [d, 3d], gate order r, z, n
  Tensor<T> w_hh;  // [d, 3d]
  Tensor<T> b_ih;  // [3d]
  Tensor<T> b_hh;  // [3d]
  static GruCell create(ParamStore<T>& ps, const std::string& name, i64 d, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& h, const Tensor<T>& x) const;  // [B, d] each
};

// ---- block-parallel variants: one parameter set per block index, shared
// across slots, evaluated as a single batched op over the block axis ----

template <class T>
struct BlockLinear {
  Tensor<T> w;  // [M, in, out]
  Tensor<T> b;  // [M, out]
  static BlockLinear create(ParamStore<T>& ps, const std::string& name, i64 m, i64 in, i64 out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;  // [M, R, in] -> [M, R, out]
};

template <class T>
struct BlockLayerNorm {
  Tensor<T> g, b;  // [M, d]
  Tensor<T> unit_g, zero_b;
  static BlockLayerNorm create(ParamStore<T>& ps, const std::string& name, i64 m, i64 d);
  Tensor<T> operator()(const Tensor<T>& x) const;  // [M, R, d]
};

template <class T>
struct BlockGru {
  Tensor<T> w_ih;  // [M, d, 3d]
  Tensor<T> w_hh;  // [M, d, 3d]
  Tensor<T> b_ih;  // [M, 3d]
  Tensor<T> b_hh;  // [M, 3d]
  static BlockGru create(ParamStore<T>& ps, const std::string& name, i64 m, i64 d, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& h, const Tensor<T>& x) const;  // [M, R, d] each
};

// Multi-head attention with learned q/k/v/out projections. With causal=true,
// position i attends only to positions <= i (q and k must index the same
// sequence).
template <class T>
struct Mha {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;
  static Mha create(ParamStore<T>& ps, const std::string& name, i64 dim, int heads, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, bool causal) const;
  // projected-tensor path, used by incremental decoding
  Tensor<T> attend(const Tensor<T>& qp, const Tensor<T>& kp, const Tensor<T>& vp, bool causal) const;
};

// Pre-norm transformer encoder layer (self-attention + feed-forward).
template <class T>
struct EncoderLayer {
  LayerNorm<T> ln1, ln2;
  Mha<T> attn;
  Linear<T> ff1, ff2;
  static EncoderLayer create(ParamStore<T>& ps, const std::string& name, i64 dim, int heads, i64 ff,
                             Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool causal, double drop = 0.0, Rng* rng = nullptr) const;
};

// Pre-norm transformer decoder layer (causal self-attention, cross-attention
// to a memory sequence, feed-forward).
template <class T>
struct DecoderLayer {
  LayerNorm<T> ln1, ln2, ln3;
  Mha<T> self_attn, cross_attn;
  Linear<T> ff1, ff2;
  static DecoderLayer create(ParamStore<T>& ps, const std::string& name, i64 dim, int heads, i64 ff,
                             Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& mem, double drop = 0.0,
                       Rng* rng = nullptr) const;
};

// Grown key/value history for incremental decoding. append() adds one
// position per sequence; as_tensors() materializes [B, len, D] views.
template <class T>
struct KvBuf {
  i64 batch = 0, dim = 0, len = 0;
  std::vector<T> k, v;
  void reset(i64 b, i64 d) {
    batch = b;
    dim = d;
    len = 0;
    k.clear();
    v.clear();
  }
  void append(const Tensor<T>& kt, const Tensor<T>& vt);  // [B, 1, D] each
  Tensor<T> k_tensor() const;
  Tensor<T> v_tensor() const;
};

// One causal decoding step: projects x_t, extends the cache, attends over
// the full history (causality holds by construction).
template <class T>
Tensor<T> cached_self_attention(const Mha<T>& mha, const Tensor<T>& x_t, KvBuf<T>& cache);

// Cross-attention with precomputed projected memory keys/values.
template <class T>
Tensor<T> cached_cross_attention(const Mha<T>& mha, const Tensor<T>& x_t, const Tensor<T>& mem_k,
                                 const Tensor<T>& mem_v);

// ---- optimizer ----

template <class T>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  i64 t = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamStore<T>& ps);
  bool initialized() const { return !m.empty(); }
  // Applies one bias-corrected update from the accumulated gradients.
  void step(ParamStore<T>& ps, double lr_scale = 1.0);
};

}  // namespace svq
