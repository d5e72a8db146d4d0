#include "svq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace svq {

i64 numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// thread pool
// ---------------------------------------------------------------------------

namespace {

thread_local bool t_in_worker = false;

class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  int threads() const { return static_cast<int>(workers_.size()) + 1; }

  void resize(int n) {
    n = std::max(1, n);
    if (n == threads()) return;
    stop_workers();
    spawn(n - 1);
  }

  // Chunks are indexed 0..nchunks-1; assignment to workers is first-come but
  // every chunk's computation is independent, so results do not depend on
  // scheduling.
  void run(i64 nchunks, const std::function<void(i64)>& fn) {
    if (nchunks <= 1 || workers_.empty() || t_in_worker) {
      for (i64 i = 0; i < nchunks; ++i) fn(i);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(m_);
      fn_ = &fn;
      total_ = nchunks;
      next_.store(0, std::memory_order_relaxed);
      active_ = static_cast<int>(workers_.size());
      ++epoch_;
    }
    cv_.notify_all();
    work();
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return active_ == 0; });
    fn_ = nullptr;
  }

 private:
  Pool() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SVQ_THREADS")) n = std::atoi(env);
    spawn(std::max(1, n) - 1);
  }
  ~Pool() { stop_workers(); }

  void spawn(int n) {
    stop_ = false;
    for (int i = 0; i < n; ++i) workers_.emplace_back([this] { loop(); });
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void work() {
    const std::function<void(i64)>* fn = fn_;
    const i64 total = total_;
    i64 i;
    while ((i = next_.fetch_add(1, std::memory_order_relaxed)) < total) (*fn)(i);
  }

  void loop() {
    t_in_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        if (stop_) return;
        seen = epoch_;
      }
      work();
      {
        std::lock_guard<std::mutex> lk(m_);
        if (--active_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(i64)>* fn_ = nullptr;
  std::atomic<i64> next_{0};
  i64 total_ = 0;
  int active_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
};

}  // namespace

void set_num_threads(int n) { Pool::instance().resize(n); }
int num_threads() { return Pool::instance().threads(); }

void parallel_for(i64 n, i64 grain, const std::function<void(i64, i64)>& fn) {
  if (n <= 0) return;
  grain = std::max<i64>(1, grain);
  const i64 nchunks = (n + grain - 1) / grain;
  Pool::instance().run(nchunks, [&](i64 c) {
    const i64 lo = c * grain;
    fn(lo, std::min(n, lo + grain));
  });
}

// ---------------------------------------------------------------------------
// tensor + tape
// ---------------------------------------------------------------------------

namespace {

template <class T>
std::shared_ptr<TensorNode<T>> make_node(Shape s, std::shared_ptr<std::vector<T>> v) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(s);
  n->value = std::move(v);
  return n;
}

template <class T>
Tensor<T> make_uninit(const Shape& s) {
  return Tensor<T>(make_node<T>(s, std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel(s)))));
}

template <class T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* t = nullptr;
  return t;
}

template <class T, class... Ts>
bool recording(const Ts&... inputs) {
  if (!current_tape<T>()) return false;
  return (... || inputs.requires_grad());
}

template <class T>
void record(Tensor<T>& out, std::function<void()> bw) {
  auto n = out.node();
  n->requires_grad = true;
  n->backward = std::move(bw);
  current_tape<T>()->record(std::move(n));
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Iteration frame for an axis reduction: rows indexed by (outer, inner),
// element j of a row lives at (outer*len + j)*inner + inner_idx.
struct AxisFrame {
  i64 outer, len, inner;
};

AxisFrame axis_frame(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("axis out of range for " + shape_str(s));
  AxisFrame f{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) f.outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) f.inner *= s[static_cast<std::size_t>(i)];
  return f;
}

constexpr i64 kEwGrain = 1 << 15;

}  // namespace

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& s) {
  return from(s, std::vector<T>(static_cast<std::size_t>(numel(s)), T(0)));
}

template <class T>
Tensor<T> Tensor<T>::ones(const Shape& s) {
  return full(s, T(1));
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& s, T v) {
  return from(s, std::vector<T>(static_cast<std::size_t>(numel(s)), v));
}

template <class T>
Tensor<T> Tensor<T>::from(const Shape& s, std::vector<T> data) {
  if (static_cast<i64>(data.size()) != numel(s))
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(s));
  return Tensor<T>(make_node<T>(s, std::make_shared<std::vector<T>>(std::move(data))));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T v) {
  return from(Shape{}, {v});
}

template <class T>
Tensor<T> Tensor<T>::param(const Shape& s, std::vector<T> data) {
  Tensor<T> t = from(s, std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::randn(const Shape& s, Rng& rng, T mean, T stddev) {
  Tensor<T> t = make_uninit<T>(s);
  rng.fill_normal(t.data(), static_cast<std::size_t>(t.size()), mean, stddev);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::randu(const Shape& s, Rng& rng, T lo, T hi) {
  Tensor<T> t = make_uninit<T>(s);
  rng.fill_uniform(t.data(), static_cast<std::size_t>(t.size()), lo, hi);
  return t;
}

template <class T>
T Tensor<T>::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) + " elements");
  return data()[0];
}

template <class T>
std::vector<T>& Tensor<T>::grad() {
  n_->ensure_grad();
  return n_->grad;
}

template <class T>
const std::vector<T>& Tensor<T>::grad() const {
  n_->ensure_grad();
  return n_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  n_->grad.assign(static_cast<std::size_t>(size()), T(0));
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>::from(shape(), values());
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape s) const {
  if (numel(s) != size()) shape_error("reshaped", shape(), s);
  return Tensor<T>(make_node<T>(std::move(s), n_->value));
}

template <class T>
Tape<T>::Tape() {
  prev_ = current_tape<T>();
  current_tape<T>() = this;
}

template <class T>
Tape<T>::~Tape() {
  current_tape<T>() = prev_;
}

template <class T>
Tape<T>* Tape<T>::current() {
  return current_tape<T>();
}

template <class T>
void Tape<T>::clear() {
  nodes_.clear();
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  auto ln = loss.node();
  ln->ensure_grad();
  ln->grad[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode<T>* n = it->get();
    if (!n->grad.empty() && n->backward) n->backward();
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(a.size(), kEwGrain, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on] {
      if (an->requires_grad) an->add_grad(on->grad.data());
      if (bn->requires_grad) bn->add_grad(on->grad.data());
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(a.size(), kEwGrain, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = pa[i] - pb[i];
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on] {
      if (an->requires_grad) an->add_grad(on->grad.data());
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(a.size(), kEwGrain, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        const T* pb2 = bn->data();
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * pb2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const T* pa2 = an->data();
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (i64 i = 0; i < a.size(); ++i) po[i] = pa[i] + c;
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on] {
      if (an->requires_grad) an->add_grad(on->grad.data());
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  parallel_for(a.size(), kEwGrain, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = pa[i] * c;
  });
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on, c] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

namespace {

// Shared skeleton for unary elementwise ops whose local derivative is a
// function of (x, y).
template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd dydx) {
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  parallel_for(a.size(), kEwGrain, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = fwd(pa[i]);
  });
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on, dydx] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* x = an->data();
      const T* y = on->data();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * dydx(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// broadcasting adds / muls
// ---------------------------------------------------------------------------

namespace {

template <class T>
void check_suffix(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size()) shape_error(op, sa, sb);
  for (std::size_t i = 0; i < sb.size(); ++i)
    if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) shape_error(op, sa, sb);
}

}  // namespace

template <class T>
Tensor<T> add_bcast(const Tensor<T>& a, const Tensor<T>& b) {
  check_suffix("add_bcast", a, b);
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const i64 n = b.size();
  parallel_for(a.size() / n, std::max<i64>(1, kEwGrain / n), [&](i64 lo, i64 hi) {
    for (i64 blk = lo; blk < hi; ++blk)
      for (i64 k = 0; k < n; ++k) po[blk * n + k] = pa[blk * n + k] + pb[k];
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on] {
      if (an->requires_grad) an->add_grad(on->grad.data());
      if (bn->requires_grad) {
        bn->ensure_grad();
        const i64 n2 = bn->size();
        const i64 blocks = on->size() / n2;
        for (i64 blk = 0; blk < blocks; ++blk)
          for (i64 k = 0; k < n2; ++k) bn->grad[static_cast<std::size_t>(k)] += on->grad[static_cast<std::size_t>(blk * n2 + k)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_bcast(const Tensor<T>& a, const Tensor<T>& b) {
  check_suffix("mul_bcast", a, b);
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const i64 n = b.size();
  parallel_for(a.size() / n, std::max<i64>(1, kEwGrain / n), [&](i64 lo, i64 hi) {
    for (i64 blk = lo; blk < hi; ++blk)
      for (i64 k = 0; k < n; ++k) po[blk * n + k] = pa[blk * n + k] * pb[k];
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on] {
      const i64 n2 = bn->size();
      const i64 blocks = on->size() / n2;
      if (an->requires_grad) {
        an->ensure_grad();
        const T* pb2 = bn->data();
        for (i64 blk = 0; blk < blocks; ++blk)
          for (i64 k = 0; k < n2; ++k) {
            const std::size_t i = static_cast<std::size_t>(blk * n2 + k);
            an->grad[i] += on->grad[i] * pb2[k];
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const T* pa2 = an->data();
        for (i64 blk = 0; blk < blocks; ++blk)
          for (i64 k = 0; k < n2; ++k) {
            const std::size_t i = static_cast<std::size_t>(blk * n2 + k);
            bn->grad[static_cast<std::size_t>(k)] += on->grad[i] * pa2[i];
          }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != a.rank() - 1) shape_error("add_rows", a.shape(), b.shape());
  const i64 c = a.dim(-1);
  if (b.dim(-1) != c) shape_error("add_rows", a.shape(), b.shape());
  for (int i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) shape_error("add_rows", a.shape(), b.shape());
  const i64 rows = a.dim(-2);
  const i64 batch = a.size() / (rows * c);
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(batch * rows, std::max<i64>(1, kEwGrain / c), [&](i64 lo, i64 hi) {
    for (i64 row = lo; row < hi; ++row) {
      const i64 t = row / rows;
      const T* pbr = pb + t * c;
      for (i64 k = 0; k < c; ++k) po[row * c + k] = pa[row * c + k] + pbr[k];
    }
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on, batch, rows, c] {
      if (an->requires_grad) an->add_grad(on->grad.data());
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (i64 t = 0; t < batch; ++t)
          for (i64 r = 0; r < rows; ++r)
            for (i64 k = 0; k < c; ++k)
              bn->grad[static_cast<std::size_t>(t * c + k)] += on->grad[static_cast<std::size_t>((t * rows + r) * c + k)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != a.rank() - 1) shape_error("mul_rows", a.shape(), b.shape());
  const i64 c = a.dim(-1);
  if (b.dim(-1) != c) shape_error("mul_rows", a.shape(), b.shape());
  for (int i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) shape_error("mul_rows", a.shape(), b.shape());
  const i64 rows = a.dim(-2);
  const i64 batch = a.size() / (rows * c);
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(batch * rows, std::max<i64>(1, kEwGrain / c), [&](i64 lo, i64 hi) {
    for (i64 row = lo; row < hi; ++row) {
      const i64 t = row / rows;
      const T* pbr = pb + t * c;
      for (i64 k = 0; k < c; ++k) po[row * c + k] = pa[row * c + k] * pbr[k];
    }
  });
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on, batch, rows, c] {
      const T* pa2 = an->data();
      const T* pb2 = bn->data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (i64 t = 0; t < batch; ++t)
          for (i64 r = 0; r < rows; ++r)
            for (i64 k = 0; k < c; ++k) {
              const std::size_t i = static_cast<std::size_t>((t * rows + r) * c + k);
              an->grad[i] += on->grad[i] * pb2[t * c + k];
            }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (i64 t = 0; t < batch; ++t)
          for (i64 r = 0; r < rows; ++r)
            for (i64 k = 0; k < c; ++k) {
              const std::size_t i = static_cast<std::size_t>((t * rows + r) * c + k);
              bn->grad[static_cast<std::size_t>(t * c + k)] += on->grad[i] * pa2[i];
            }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const Mat<T>>;
template <class T>
using MMap = Eigen::Map<Mat<T>>;

// C[p,r] (+)= opA(A) * opB(B), with fixed row-chunk threading for large p.
template <class T>
void gemm(T* c, const T* a, const T* b, i64 p, i64 q, i64 r, i64 a0, i64 a1, i64 b0, i64 b1,
          bool ta, bool tb, bool accumulate, bool threaded) {
  CMap<T> A(a, a0, a1);
  CMap<T> B(b, b0, b1);
  MMap<T> C(c, p, r);
  auto run_rows = [&](i64 lo, i64 hi) {
    const i64 n = hi - lo;
    auto Cb = C.middleRows(lo, n);
    if (!ta && !tb) {
      if (accumulate) Cb.noalias() += A.middleRows(lo, n) * B;
      else Cb.noalias() = A.middleRows(lo, n) * B;
    } else if (!ta && tb) {
      if (accumulate) Cb.noalias() += A.middleRows(lo, n) * B.transpose();
      else Cb.noalias() = A.middleRows(lo, n) * B.transpose();
    } else if (ta && !tb) {
      if (accumulate) Cb.noalias() += A.middleCols(lo, n).transpose() * B;
      else Cb.noalias() = A.middleCols(lo, n).transpose() * B;
    } else {
      if (accumulate) Cb.noalias() += A.middleCols(lo, n).transpose() * B.transpose();
      else Cb.noalias() = A.middleCols(lo, n).transpose() * B.transpose();
    }
  };
  if (threaded && p >= 128 && p * q * r >= (i64(1) << 20)) {
    parallel_for(p, 64, run_rows);
  } else {
    run_rows(0, p);
  }
}

struct MatDims {
  i64 batch, p, q, r;
  Shape out_shape;
  bool a_bcast, b_bcast;
};

template <class T>
MatDims matmul_dims(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const i64 p = ta ? a.dim(-1) : a.dim(-2);
  const i64 q = ta ? a.dim(-2) : a.dim(-1);
  const i64 q2 = tb ? b.dim(-1) : b.dim(-2);
  const i64 r = tb ? b.dim(-2) : b.dim(-1);
  if (q != q2)
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                (ta ? "^T" : "") + " x " + shape_str(b.shape()) + (tb ? "^T" : ""));
  Shape ab(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  MatDims d;
  d.a_bcast = ab.empty() && !bb.empty();
  d.b_bcast = bb.empty() && !ab.empty();
  if (!d.a_bcast && !d.b_bcast && ab != bb)
    throw std::invalid_argument("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const Shape& batch_shape = d.a_bcast ? bb : ab;
  d.batch = numel(batch_shape);
  d.p = p;
  d.q = q;
  d.r = r;
  d.out_shape = batch_shape;
  d.out_shape.push_back(p);
  d.out_shape.push_back(r);
  return d;
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  const MatDims d = matmul_dims(a, b, ta, tb);
  Tensor<T> out = make_uninit<T>(d.out_shape);
  const i64 a0 = a.dim(-2), a1 = a.dim(-1), b0 = b.dim(-2), b1 = b.dim(-1);
  const i64 sa = d.a_bcast ? 0 : a0 * a1;
  const i64 sb = d.b_bcast ? 0 : b0 * b1;
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (d.batch == 1) {
    gemm(po, pa, pb, d.p, d.q, d.r, a0, a1, b0, b1, ta, tb, false, true);
  } else {
    parallel_for(d.batch, 1, [&](i64 lo, i64 hi) {
      for (i64 i = lo; i < hi; ++i)
        gemm(po + i * d.p * d.r, pa + i * sa, pb + i * sb, d.p, d.q, d.r, a0, a1, b0, b1, ta, tb,
             false, false);
    });
  }
  if (recording<T>(a, b)) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    record(out, [an, bn, on, d, a0, a1, b0, b1, sa, sb, ta, tb] {
      const T* pa2 = an->data();
      const T* pb2 = bn->data();
      const T* pg = on->grad.data();
      // dA: grad has the same layout as the stored (possibly transposed) A.
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        auto slice = [&](i64 i) {
          T* gai = ga + i * sa;
          const T* pbi = pb2 + i * sb;
          const T* pgi = pg + i * d.p * d.r;
          if (!ta) {
            // dA[p,q] += dC * opB(B)^T
            gemm(gai, pgi, pbi, d.p, d.r, d.q, d.p, d.r, b0, b1, false, !tb, true, d.batch == 1);
          } else {
            // dA[q,p] += opB(B) * dC^T
            gemm(gai, pbi, pgi, d.q, d.r, d.p, b0, b1, d.p, d.r, tb, true, true, d.batch == 1);
          }
        };
        if (d.batch == 1 || d.a_bcast) {
          // broadcast A accumulates over batch; keep the loop serial.
          for (i64 i = 0; i < (d.a_bcast ? d.batch : 1); ++i) slice(d.a_bcast ? i : 0);
        } else {
          parallel_for(d.batch, 1, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) slice(i);
          });
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        auto slice = [&](i64 i) {
          T* gbi = gb + i * sb;
          const T* pai = pa2 + i * sa;
          const T* pgi = pg + i * d.p * d.r;
          if (!tb) {
            // dB[q,r] += opA(A)^T * dC
            gemm(gbi, pai, pgi, d.q, d.p, d.r, a0, a1, d.p, d.r, !ta, false, true, d.batch == 1);
          } else {
            // dB[r,q] += dC^T * opA(A)
            gemm(gbi, pgi, pai, d.r, d.p, d.q, d.p, d.r, a0, a1, true, ta, true, d.batch == 1);
          }
        };
        if (d.batch == 1 || d.b_bcast) {
          for (i64 i = 0; i < (d.b_bcast ? d.batch : 1); ++i) slice(d.b_bcast ? i : 0);
        } else {
          parallel_for(d.batch, 1, [&](i64 lo, i64 hi) {
            for (i64 i = lo; i < hi; ++i) slice(i);
          });
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
  if (numel(s) != a.size()) shape_error("reshape", a.shape(), s);
  Tensor<T> out(make_node<T>(s, a.node()->value));  // aliases storage
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on] {
      if (an->requires_grad) an->add_grad(on->grad.data());
    });
  }
  return out;
}

namespace {

template <class T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& axes,
                  bool accumulate) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  std::vector<i64> in_strides(r, 1), out_idx_stride(r);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];
  // stride in the source for each output axis
  for (int i = 0; i < r; ++i) out_idx_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const i64 total = numel(in_shape);
  const i64 inner = out_shape[static_cast<std::size_t>(r - 1)];
  const i64 inner_stride = out_idx_stride[static_cast<std::size_t>(r - 1)];
  parallel_for(total / inner, std::max<i64>(1, kEwGrain / inner), [&](i64 lo, i64 hi) {
    std::vector<i64> idx(static_cast<std::size_t>(r), 0);
    for (i64 row = lo; row < hi; ++row) {
      i64 rem = row;
      i64 src_off = 0;
      for (int i = r - 2; i >= 0; --i) {
        idx[static_cast<std::size_t>(i)] = rem % out_shape[static_cast<std::size_t>(i)];
        rem /= out_shape[static_cast<std::size_t>(i)];
        src_off += idx[static_cast<std::size_t>(i)] * out_idx_stride[static_cast<std::size_t>(i)];
      }
      T* d = dst + row * inner;
      if (accumulate) {
        for (i64 k = 0; k < inner; ++k) d[k] += src[src_off + k * inner_stride];
      } else {
        for (i64 k = 0; k < inner; ++k) d[k] = src[src_off + k * inner_stride];
      }
    }
  });
}

}  // namespace

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw std::invalid_argument("permute: axes size must equal rank");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int ax = axes[static_cast<std::size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)]) throw std::invalid_argument("permute: invalid axes");
    seen[static_cast<std::size_t>(ax)] = true;
    out_shape[static_cast<std::size_t>(i)] = a.dim(ax);
  }
  Tensor<T> out = make_uninit<T>(out_shape);
  permute_copy(a.data(), out.data(), a.shape(), axes, false);
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    std::vector<int> inv(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) inv[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
    Shape out_shape_copy = out_shape;
    record(out, [an, on, inv, out_shape_copy] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      permute_copy(on->grad.data(), an->grad.data(), out_shape_copy, inv, true);
    });
  }
  return out;
}

template <class T>
Tensor<T> narrow(const Tensor<T>& a, int axis, i64 start, i64 len) {
  const AxisFrame f = axis_frame(a.shape(), axis);
  if (axis < 0) axis += a.rank();
  if (start < 0 || len <= 0 || start + len > f.len)
    throw std::invalid_argument("narrow: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") exceeds axis length " +
                                std::to_string(f.len));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<T> out = make_uninit<T>(out_shape);
  const T* pa = a.data();
  T* po = out.data();
  for (i64 o = 0; o < f.outer; ++o)
    for (i64 j = 0; j < len; ++j)
      std::copy_n(pa + (o * f.len + start + j) * f.inner, f.inner, po + (o * len + j) * f.inner);
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    const AxisFrame f2 = f;
    record(out, [an, on, f2, start, len] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (i64 o = 0; o < f2.outer; ++o)
        for (i64 j = 0; j < len; ++j) {
          T* g = an->grad.data() + (o * f2.len + start + j) * f2.inner;
          const T* s = on->grad.data() + (o * len + j) * f2.inner;
          for (i64 k = 0; k < f2.inner; ++k) g[k] += s[k];
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>(make_node<T>(a.shape(), a.node()->value));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  const T* pa = a.data();
  T s = T(0);
  for (i64 i = 0; i < a.size(); ++i) s += pa[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> sum_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("sum_last: rank must be >= 1");
  const i64 len = a.dim(-1);
  const i64 rows = a.size() / len;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor<T> out = make_uninit<T>(out_shape);
  const T* pa = a.data();
  T* po = out.data();
  for (i64 r = 0; r < rows; ++r) {
    T s = T(0);
    for (i64 k = 0; k < len; ++k) s += pa[r * len + k];
    po[r] = s;
  }
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on, rows, len] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (i64 r = 0; r < rows; ++r) {
        const T g = on->grad[static_cast<std::size_t>(r)];
        T* ga = an->grad.data() + r * len;
        for (i64 k = 0; k < len; ++k) ga[k] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const AxisFrame f = axis_frame(a.shape(), axis);
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  parallel_for(f.outer, std::max<i64>(1, 4096 / std::max<i64>(1, f.len * f.inner)), [&](i64 lo, i64 hi) {
    for (i64 o = lo; o < hi; ++o)
      for (i64 in = 0; in < f.inner; ++in) {
        const i64 base = o * f.len * f.inner + in;
        T m = pa[base];
        for (i64 j = 1; j < f.len; ++j) m = std::max(m, pa[base + j * f.inner]);
        T z = T(0);
        for (i64 j = 0; j < f.len; ++j) {
          const T e = std::exp(pa[base + j * f.inner] - m);
          po[base + j * f.inner] = e;
          z += e;
        }
        const T inv = T(1) / z;
        for (i64 j = 0; j < f.len; ++j) po[base + j * f.inner] *= inv;
      }
  });
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    const AxisFrame f2 = f;
    record(out, [an, on, f2] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* y = on->data();
      const T* g = on->grad.data();
      T* ga = an->grad.data();
      for (i64 o = 0; o < f2.outer; ++o)
        for (i64 in = 0; in < f2.inner; ++in) {
          const i64 base = o * f2.len * f2.inner + in;
          T dot = T(0);
          for (i64 j = 0; j < f2.len; ++j) dot += g[base + j * f2.inner] * y[base + j * f2.inner];
          for (i64 j = 0; j < f2.len; ++j) {
            const i64 i = base + j * f2.inner;
            ga[i] += y[i] * (g[i] - dot);
          }
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, int axis, T eps) {
  const AxisFrame f = axis_frame(x.shape(), axis);
  if (gain.size() != f.len || bias.size() != f.len)
    throw std::invalid_argument("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                                std::to_string(bias.size()) + " must equal axis length " +
                                std::to_string(f.len));
  Tensor<T> out = make_uninit<T>(x.shape());
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(f.outer * f.inner * 2));
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  T* ps = stats->data();
  const T invn = T(1) / static_cast<T>(f.len);
  parallel_for(f.outer, std::max<i64>(1, 4096 / std::max<i64>(1, f.len * f.inner)), [&](i64 lo, i64 hi) {
    for (i64 o = lo; o < hi; ++o)
      for (i64 in = 0; in < f.inner; ++in) {
        const i64 base = o * f.len * f.inner + in;
        T mean = T(0);
        for (i64 j = 0; j < f.len; ++j) mean += px[base + j * f.inner];
        mean *= invn;
        T var = T(0);
        for (i64 j = 0; j < f.len; ++j) {
          const T d = px[base + j * f.inner] - mean;
          var += d * d;
        }
        var *= invn;
        const T invstd = T(1) / std::sqrt(var + eps);
        const i64 row = o * f.inner + in;
        ps[row * 2] = mean;
        ps[row * 2 + 1] = invstd;
        for (i64 j = 0; j < f.len; ++j)
          po[base + j * f.inner] = (px[base + j * f.inner] - mean) * invstd * pg[j] + pb[j];
      }
  });
  if (recording<T>(x, gain, bias)) {
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto* on = out.node().get();
    const AxisFrame f2 = f;
    record(out, [xn, gn, bn, on, stats, f2] {
      const T* px2 = xn->data();
      const T* pg2 = gn->data();
      const T* g = on->grad.data();
      const T* ps2 = stats->data();
      const T invn2 = T(1) / static_cast<T>(f2.len);
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (i64 o = 0; o < f2.outer; ++o)
        for (i64 in = 0; in < f2.inner; ++in) {
          const i64 base = o * f2.len * f2.inner + in;
          const i64 row = o * f2.inner + in;
          const T mean = ps2[row * 2];
          const T invstd = ps2[row * 2 + 1];
          T sum_gg = T(0), sum_ggx = T(0);
          for (i64 j = 0; j < f2.len; ++j) {
            const i64 i = base + j * f2.inner;
            const T xhat = (px2[i] - mean) * invstd;
            const T gg = g[i] * pg2[j];
            sum_gg += gg;
            sum_ggx += gg * xhat;
            if (gn->requires_grad) gn->grad[static_cast<std::size_t>(j)] += g[i] * xhat;
            if (bn->requires_grad) bn->grad[static_cast<std::size_t>(j)] += g[i];
          }
          if (xn->requires_grad) {
            for (i64 j = 0; j < f2.len; ++j) {
              const i64 i = base + j * f2.inner;
              const T xhat = (px2[i] - mean) * invstd;
              xn->grad[static_cast<std::size_t>(i)] +=
                  invstd * (g[i] * pg2[j] - invn2 * (sum_gg + xhat * sum_ggx));
            }
          }
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> normalize_sum(const Tensor<T>& a, int axis, T eps) {
  const AxisFrame f = axis_frame(a.shape(), axis);
  Tensor<T> out = make_uninit<T>(a.shape());
  auto invs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(f.outer * f.inner));
  const T* pa = a.data();
  T* po = out.data();
  T* pi = invs->data();
  for (i64 o = 0; o < f.outer; ++o)
    for (i64 in = 0; in < f.inner; ++in) {
      const i64 base = o * f.len * f.inner + in;
      T s = T(0);
      for (i64 j = 0; j < f.len; ++j) s += pa[base + j * f.inner];
      const T inv = T(1) / (s + eps);
      pi[o * f.inner + in] = inv;
      for (i64 j = 0; j < f.len; ++j) po[base + j * f.inner] = pa[base + j * f.inner] * inv;
    }
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    const AxisFrame f2 = f;
    record(out, [an, on, invs, f2] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* y = on->data();
      const T* g = on->grad.data();
      const T* pi2 = invs->data();
      for (i64 o = 0; o < f2.outer; ++o)
        for (i64 in = 0; in < f2.inner; ++in) {
          const i64 base = o * f2.len * f2.inner + in;
          const T inv = pi2[o * f2.inner + in];
          T dot = T(0);
          for (i64 j = 0; j < f2.len; ++j) dot += g[base + j * f2.inner] * y[base + j * f2.inner];
          for (i64 j = 0; j < f2.len; ++j) {
            const i64 i = base + j * f2.inner;
            an->grad[static_cast<std::size_t>(i)] += (g[i] - dot) * inv;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses, lookup, sampling helpers
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<i64>& targets) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [rows, vocab]");
  const i64 rows = logits.dim(0);
  const i64 v = logits.dim(1);
  if (static_cast<i64>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: got " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  for (i64 t : targets)
    if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " out of range");
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * v));
  const T* pl = logits.data();
  T* pp = probs->data();
  std::vector<T> row_loss(static_cast<std::size_t>(rows));
  parallel_for(rows, 64, [&](i64 lo, i64 hi) {
    for (i64 r = lo; r < hi; ++r) {
      const i64 t = targets[static_cast<std::size_t>(r)];
      const T* l = pl + r * v;
      T m = l[0];
      for (i64 k = 1; k < v; ++k) m = std::max(m, l[k]);
      T z = T(0);
      for (i64 k = 0; k < v; ++k) {
        const T e = std::exp(l[k] - m);
        pp[r * v + k] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (i64 k = 0; k < v; ++k) pp[r * v + k] *= inv;
      row_loss[static_cast<std::size_t>(r)] = std::log(z) + m - l[t];
    }
  });
  T total = T(0);
  for (i64 r = 0; r < rows; ++r) total += row_loss[static_cast<std::size_t>(r)];
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(rows));
  if (recording<T>(logits)) {
    auto ln = logits.node();
    auto* on = out.node().get();
    auto tgt = std::make_shared<std::vector<i64>>(targets);
    record(out, [ln, on, probs, tgt, rows, v] {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const T g = on->grad[0] / static_cast<T>(rows);
      const T* pp2 = probs->data();
      T* gl = ln->grad.data();
      for (i64 r = 0; r < rows; ++r) {
        const i64 t = (*tgt)[static_cast<std::size_t>(r)];
        for (i64 k = 0; k < v; ++k) gl[r * v + k] += g * pp2[r * v + k];
        gl[r * v + t] -= g;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<i64>& ids, const Shape& lead) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [vocab, dim]");
  const i64 v = table.dim(0);
  const i64 dimension = table.dim(1);
  if (numel(lead) != static_cast<i64>(ids.size()))
    throw std::invalid_argument("embedding: lead shape does not match id count");
  Shape out_shape = lead;
  out_shape.push_back(dimension);
  Tensor<T> out = make_uninit<T>(out_shape);
  const T* pt = table.data();
  T* po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const i64 id = ids[i];
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(v) + ")");
    std::copy_n(pt + id * dimension, dimension, po + static_cast<i64>(i) * dimension);
  }
  if (recording<T>(table)) {
    auto tn = table.node();
    auto* on = out.node().get();
    auto ids_copy = std::make_shared<std::vector<i64>>(ids);
    record(out, [tn, on, ids_copy, dimension] {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      const T* g = on->grad.data();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        T* row = tn->grad.data() + (*ids_copy)[i] * dimension;
        const T* gi = g + static_cast<i64>(i) * dimension;
        for (i64 k = 0; k < dimension; ++k) row[k] += gi[k];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng) {
  if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (p == 0) return a;
  auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(a.size()));
  const T keep_inv = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = (rng.uniform() < p) ? T(0) : keep_inv;
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  const T* pm = mask->data();
  T* po = out.data();
  for (i64 i = 0; i < a.size(); ++i) po[i] = pa[i] * pm[i];
  if (recording<T>(a)) {
    auto an = a.node();
    auto* on = out.node().get();
    record(out, [an, on, mask] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* pm2 = mask->data();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * pm2[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> straight_through(const Tensor<T>& soft, const Tensor<T>& hard) {
  if (soft.shape() != hard.shape()) shape_error("straight_through", soft.shape(), hard.shape());
  Tensor<T> out = Tensor<T>::from(soft.shape(), hard.values());
  if (recording<T>(soft)) {
    auto sn = soft.node();
    auto* on = out.node().get();
    record(out, [sn, on] {
      if (sn->requires_grad) sn->add_grad(on->grad.data());
    });
  }
  return out;
}

template <class T>
std::vector<i64> argmax_last(const Tensor<T>& a) {
  const i64 len = a.dim(-1);
  const i64 rows = a.size() / len;
  std::vector<i64> out(static_cast<std::size_t>(rows));
  const T* pa = a.data();
  for (i64 r = 0; r < rows; ++r) {
    const T* p = pa + r * len;
    i64 best = 0;
    for (i64 k = 1; k < len; ++k)
      if (p[k] > p[best]) best = k;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  Tensor<T> out = make_uninit<T>(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (i64 i = 0; i < a.size(); ++i) po[i] = std::min(hi, std::max(lo, pa[i]));
  return out;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double finite_difference_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps, i64 max_coords, std::uint64_t coord_seed) {
  for (auto& t : inputs) t.set_requires_grad(true);
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> y = f(inputs);
    if (y.size() != 1) throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
    for (auto& t : inputs) t.zero_grad();
    tape.backward(y);
    for (auto& t : inputs) analytic.push_back(t.grad());
  }
  const auto eval = [&]() { return f(inputs).item(); };

  double max_err = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double>& t = inputs[ti];
    const i64 n = t.size();
    std::vector<i64> coords;
    if (max_coords < 0 || n <= max_coords) {
      coords.resize(static_cast<std::size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      // deterministic partial Fisher-Yates
      Rng rng(coord_seed, ti);
      std::vector<i64> all(static_cast<std::size_t>(n));
      std::iota(all.begin(), all.end(), 0);
      for (i64 i = 0; i < max_coords; ++i) {
        const i64 j = i + rng.uniform_int(n - i);
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      }
      coords.assign(all.begin(), all.begin() + max_coords);
    }
    for (i64 c : coords) {
      double* p = t.data() + c;
      const double x0 = *p;
      const double h = eps * std::max(1.0, std::abs(x0));
      *p = x0 + h;
      const double fp = eval();
      *p = x0 - h;
      const double fm = eval();
      *p = x0;
      const double num = (fp - fm) / (2 * h);
      const double ana = analytic[ti][static_cast<std::size_t>(c)];
      const double err = std::abs(ana - num) / (std::abs(ana) + std::abs(num) + 1e-12);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define SVQ_INSTANTIATE_TENSOR(T)                                                            \
  template class Tensor<T>;                                                                  \
  template class Tape<T>;                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> neg(const Tensor<T>&);                                                  \
  template Tensor<T> add_bcast(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul_bcast(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add_rows(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul_rows(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> tanh(const Tensor<T>&);                                                 \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> sqrt(const Tensor<T>&);                                                 \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                 \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                     \
  template Tensor<T> narrow(const Tensor<T>&, int, i64, i64);                                \
  template Tensor<T> detach(const Tensor<T>&);                                               \
  template Tensor<T> sum_all(const Tensor<T>&);                                              \
  template Tensor<T> mean_all(const Tensor<T>&);                                             \
  template Tensor<T> sum_last(const Tensor<T>&);                                             \
  template Tensor<T> softmax(const Tensor<T>&, int);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, T); \
  template Tensor<T> normalize_sum(const Tensor<T>&, int, T);                                \
  template Tensor<T> cross_entropy_mean(const Tensor<T>&, const std::vector<i64>&);          \
  template Tensor<T> embedding(const Tensor<T>&, const std::vector<i64>&, const Shape&);     \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                \
  template Tensor<T> straight_through(const Tensor<T>&, const Tensor<T>&);                   \
  template std::vector<i64> argmax_last(const Tensor<T>&);                                   \
  template Tensor<T> clamp(const Tensor<T>&, T, T);

SVQ_INSTANTIATE_TENSOR(float)
SVQ_INSTANTIATE_TENSOR(double)

#undef SVQ_INSTANTIATE_TENSOR

}  // namespace svq
