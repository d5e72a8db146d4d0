#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "svq/rng.hpp"

namespace svq {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

i64 numel(const Shape& s);
std::string shape_str(const Shape& s);

// ---- deterministic parallelism ----
//
// Work is split into fixed-size chunks regardless of worker count, and every
// chunk writes a disjoint output range, so results are bit-identical whether
// the pool runs 1 or N threads.
void set_num_threads(int n);
int num_threads();
void parallel_for(i64 n, i64 grain, const std::function<void(i64, i64)>& fn);

template <class T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::function<void()> backward;

  i64 size() const { return static_cast<i64>(value->size()); }
  T* data() { return value->data(); }
  const T* data() const { return value->data(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), T(0));
  }
  void add_grad(const T* g) {
    ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
};

// Value handle with an optional place in the differentiation graph.
// Copies are shallow (shared node).
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s);
  static Tensor ones(const Shape& s);
  static Tensor full(const Shape& s, T v);
  static Tensor from(const Shape& s, std::vector<T> data);
  static Tensor scalar(T v);
  static Tensor param(const Shape& s, std::vector<T> data);  // leaf with grad
  static Tensor randn(const Shape& s, Rng& rng, T mean = T(0), T stddev = T(1));
  static Tensor randu(const Shape& s, Rng& rng, T lo = T(0), T hi = T(1));

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  i64 dim(int i) const {
    if (i < 0) i += rank();
    return n_->shape[static_cast<std::size_t>(i)];
  }
  i64 size() const { return n_->size(); }
  T* data() { return n_->data(); }
  const T* data() const { return n_->data(); }
  const std::vector<T>& values() const { return *n_->value; }
  T item() const;

  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool has_grad() const { return n_ && !n_->grad.empty(); }
  std::vector<T>& grad();
  const std::vector<T>& grad() const;
  void zero_grad();
  void set_requires_grad(bool v = true) { n_->requires_grad = v; }

  Tensor clone() const;              // deep copy, detached
  Tensor reshaped(Shape s) const;    // alias, detached from graph unless recorded via reshape()
  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Ordered record of executed ops. Installing a tape (RAII) turns on
// recording for ops whose inputs require gradients; without one, every op
// is a pure value computation.
template <class T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor<T>& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  static Tape* current();
  void record(std::shared_ptr<TensorNode<T>> n) { nodes_.push_back(std::move(n)); }

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
  Tape* prev_ = nullptr;
};

// ---- ops ----
// All ops compute values eagerly and, when a tape is active and an input
// requires grad, record an adjoint closure.

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> scale(const Tensor<T>& a, T c);
template <class T> Tensor<T> neg(const Tensor<T>& a);

// b's shape must be a suffix of a's shape; b is broadcast over the leading
// axes (bias add, additive masks). Gradient on b sums over those axes.
template <class T> Tensor<T> add_bcast(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul_bcast(const Tensor<T>& a, const Tensor<T>& b);
// a: [*, R, C], b: [*, C] with identical leading axes; b broadcast over R.
template <class T> Tensor<T> add_rows(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> relu(const Tensor<T>& a);
template <class T> Tensor<T> sigmoid(const Tensor<T>& a);
template <class T> Tensor<T> tanh(const Tensor<T>& a);
template <class T> Tensor<T> exp(const Tensor<T>& a);
template <class T> Tensor<T> log(const Tensor<T>& a);
template <class T> Tensor<T> sqrt(const Tensor<T>& a);
template <class T> Tensor<T> square(const Tensor<T>& a);

// Batched matrix product over the last two axes. Batch axes must match
// exactly, or one side may be rank-2 (broadcast). ta/tb transpose the last
// two axes of the respective operand.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false);

template <class T> Tensor<T> reshape(const Tensor<T>& a, const Shape& s);
template <class T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <class T> Tensor<T> narrow(const Tensor<T>& a, int axis, i64 start, i64 len);
template <class T> Tensor<T> detach(const Tensor<T>& a);

template <class T> Tensor<T> sum_all(const Tensor<T>& a);
template <class T> Tensor<T> mean_all(const Tensor<T>& a);
template <class T> Tensor<T> sum_last(const Tensor<T>& a);  // reduces the last axis

template <class T> Tensor<T> softmax(const Tensor<T>& a, int axis);
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     int axis = -1, T eps = T(1e-5));
// x / (sum(x, axis) + eps) — the weighted-mean normalizer.
template <class T> Tensor<T> normalize_sum(const Tensor<T>& a, int axis, T eps);

// logits: [R, V]; targets: length R. Mean cross-entropy over rows.
template <class T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<i64>& targets);

// table: [V, D]; ids index rows; lead gives the output's leading axes
// (numel(lead) == ids.size()); result shape = lead + [D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<i64>& ids, const Shape& lead);

template <class T> Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng);

// Forward takes hard's values; backward passes gradients to soft unchanged.
template <class T> Tensor<T> straight_through(const Tensor<T>& soft, const Tensor<T>& hard);

// ---- value-side helpers (no gradients) ----
template <class T> std::vector<i64> argmax_last(const Tensor<T>& a);
template <class T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// ---- gradient oracle ----
//
// Central finite differences against tape adjoints. Returns the max over
// checked coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
// max_coords < 0 checks every coordinate; otherwise a deterministic random
// subset of that size per input.
double finite_difference_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps = 1e-5, i64 max_coords = -1,
    std::uint64_t coord_seed = 0);

}  // namespace svq
