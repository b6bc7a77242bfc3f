#include "ptdr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#if defined(__GNUC__) || defined(__clang__)
#define PTDR_RESTRICT __restrict__
#else
#define PTDR_RESTRICT
#endif

namespace ptdr {

namespace {

std::atomic<bool> g_checked{false};

template <typename S>
void axpy(S a, const S* PTDR_RESTRICT x, S* PTDR_RESTRICT y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M,N] += A[M,K] * B[K,N], contiguous row-major. Each output row is
// accumulated in ascending k order, so results do not depend on the number
// of threads. Rows are processed four at a time so each B panel row is
// loaded once per block instead of once per row.
template <typename S>
void gemm_accum(const S* A, const S* B, S* C, std::int64_t M, std::int64_t K,
                std::int64_t N) {
  const std::int64_t blocks = (M + 3) / 4;
#pragma omp parallel for schedule(static) if (M * K * N > (1 << 16))
  for (std::int64_t blk = 0; blk < blocks; ++blk) {
    const std::int64_t i = blk * 4;
    if (i + 4 <= M) {
      S* PTDR_RESTRICT c0 = C + i * N;
      S* PTDR_RESTRICT c1 = C + (i + 1) * N;
      S* PTDR_RESTRICT c2 = C + (i + 2) * N;
      S* PTDR_RESTRICT c3 = C + (i + 3) * N;
      for (std::int64_t k = 0; k < K; ++k) {
        const S* PTDR_RESTRICT b = B + k * N;
        const S a0 = A[i * K + k];
        const S a1 = A[(i + 1) * K + k];
        const S a2 = A[(i + 2) * K + k];
        const S a3 = A[(i + 3) * K + k];
        for (std::int64_t j = 0; j < N; ++j) {
          const S bj = b[j];
          c0[j] += a0 * bj;
          c1[j] += a1 * bj;
          c2[j] += a2 * bj;
          c3[j] += a3 * bj;
        }
      }
    } else {
      for (std::int64_t r = i; r < M; ++r) {
        S* c = C + r * N;
        const S* a = A + r * K;
        for (std::int64_t k = 0; k < K; ++k) axpy(a[k], B + k * N, c, N);
      }
    }
  }
}

template <typename S>
std::vector<S> transposed(const S* src, std::int64_t rows, std::int64_t cols) {
  std::vector<S> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  return a;
}

template <typename S>
void require_defined(const TensorT<S>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename S>
void check_finite(const TensorT<S>& t, const char* op) {
  if (!g_checked.load(std::memory_order_relaxed)) return;
  for (S v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value in result");
  }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

// ---- TensorT --------------------------------------------------------------

template <typename S>
TensorT<S> TensorT<S>::make(Shape shape) {
  for (std::int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto st = std::make_shared<Storage>();
  st->shape = std::move(shape);
  st->values.resize(static_cast<std::size_t>(numel(st->shape)));
  return TensorT(std::move(st));
}

template <typename S>
TensorT<S> TensorT<S>::zeros(Shape shape) {
  return make(std::move(shape));
}

template <typename S>
TensorT<S> TensorT<S>::full(Shape shape, S value) {
  TensorT t = make(std::move(shape));
  std::fill(t.st_->values.begin(), t.st_->values.end(), value);
  return t;
}

template <typename S>
TensorT<S> TensorT<S>::from_data(Shape shape, std::vector<S> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  TensorT t = make(std::move(shape));
  t.st_->values = std::move(values);
  return t;
}

template <typename S>
TensorT<S> TensorT<S>::scalar(S value) {
  auto st = std::make_shared<Storage>();
  st->values.assign(1, value);
  return TensorT(std::move(st));
}

template <typename S>
TensorT<S> TensorT<S>::randn(Shape shape, Rng& rng) {
  TensorT t = make(std::move(shape));
  for (S& v : t.st_->values) v = static_cast<S>(rng.normal());
  return t;
}

template <typename S>
TensorT<S> TensorT<S>::uniform(Shape shape, S lo, S hi, Rng& rng) {
  TensorT t = make(std::move(shape));
  for (S& v : t.st_->values)
    v = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

template <typename S>
S TensorT<S>::item() const {
  if (!defined() || st_->values.size() != 1)
    throw ContractError("item(): tensor is not a scalar");
  return st_->values[0];
}

template <typename S>
TensorT<S> TensorT<S>::clone() const {
  auto st = std::make_shared<Storage>();
  st->shape = st_->shape;
  st->values = st_->values;
  return TensorT(std::move(st));
}

template <typename S>
void TensorT<S>::zero_grad() {
  if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
}

// ---- IntTensor ------------------------------------------------------------

IntTensor::IntTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    throw DimensionError("IntTensor: " + std::to_string(data.size()) + " values for shape " +
                         shape_str(shape));
}

IntTensor IntTensor::zeros(Shape s) {
  IntTensor t;
  t.shape = std::move(s);
  t.data.assign(static_cast<std::size_t>(numel(t.shape)), 0);
  return t;
}

// ---- Tape -----------------------------------------------------------------

namespace {
template <typename S>
TapeT<S>*& active_tape_slot() {
  thread_local TapeT<S>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename S>
TapeT<S>::TapeT() {
  auto& slot = active_tape_slot<S>();
  if (slot != nullptr) throw ContractError("a tape is already active on this thread");
  slot = this;
}

template <typename S>
TapeT<S>::~TapeT() {
  for (auto& st : touched_) {
    if (st->tape == this) {
      st->node = -1;
      st->tape = nullptr;
    }
  }
  auto& slot = active_tape_slot<S>();
  if (slot == this) slot = nullptr;
}

template <typename S>
TapeT<S>* TapeT<S>::active() {
  return active_tape_slot<S>();
}

template <typename S>
bool TapeT<S>::should_record(std::initializer_list<const TensorT<S>*> inputs) const {
  for (const TensorT<S>* t : inputs) {
    if (!t->defined()) continue;
    const auto& st = t->storage();
    if (st->param) return true;
    if (st->tape == this && st->node >= 0) return true;
  }
  return false;
}

template <typename S>
void TapeT<S>::record(TensorT<S>& output, std::initializer_list<const TensorT<S>*> inputs,
                      std::function<void()> backward_fn) {
  for (const TensorT<S>* t : inputs) {
    if (t->defined()) touched_.push_back(t->storage());
  }
  output.storage()->node = static_cast<std::int64_t>(nodes_.size());
  output.storage()->tape = this;
  touched_.push_back(output.storage());
  nodes_.push_back(Node{std::move(backward_fn)});
}

template <typename S>
void TapeT<S>::run_backward(const TensorT<S>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  if (loss.size() != 1) throw ContractError("backward: loss must be a scalar");
  const auto& st = loss.storage();
  if (st->tape != this || st->node < 0)
    throw GradientError("backward: loss is detached from the active tape");

  for (auto& s : touched_) s->grad.assign(s->values.size(), S(0));
  st->grad[0] = S(1);

  for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].backward_fn();

  for (auto& s : touched_) {
    if (s->tape == this) {
      s->node = -1;
      s->tape = nullptr;
    }
  }
  nodes_.clear();
  touched_.clear();
}

template <typename S>
void backward(const TensorT<S>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  const auto& st = loss.storage();
  if (st->tape == nullptr || st->node < 0)
    throw GradientError("backward: tensor has no recorded gradient path");
  st->tape->run_backward(loss);
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename S>
using Sto = std::shared_ptr<typename TensorT<S>::Storage>;

template <typename S>
void accum(const Sto<S>& st, const std::vector<S>& g) {
  S* PTDR_RESTRICT dst = st->grad.data();
  const S* PTDR_RESTRICT src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&a, &b})) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&a, &b}, [sa, sb, so] {
      accum<S>(sa, so->grad);
      accum<S>(sb, so->grad);
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&a, &b})) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&a, &b}, [sa, sb, so] {
      const S* go = so->grad.data();
      S* ga = sa->grad.data();
      S* gb = sb->grad.data();
      for (std::size_t i = 0; i < so->grad.size(); ++i) {
        ga[i] += go[i];
        gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&a, &b})) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&a, &b}, [sa, sb, so] {
      const S* go = so->grad.data();
      const S* va = sa->values.data();
      const S* vb = sb->values.data();
      S* ga = sa->grad.data();
      S* gb = sb->grad.data();
      for (std::size_t i = 0; i < so->grad.size(); ++i) {
        ga[i] += go[i] * vb[i];
        gb[i] += go[i] * va[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S factor) {
  require_defined(x, "scale");
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = factor * px[i];
  check_finite(out, "scale");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, factor] {
      const S* go = so->grad.data();
      S* gx = sx->grad.data();
      for (std::size_t i = 0; i < so->grad.size(); ++i) gx[i] += factor * go[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& x, S value) {
  require_defined(x, "add_scalar");
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < x.size(); ++i) po[i] = px[i] + value;
  check_finite(out, "add_scalar");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so] { accum<S>(sx, so->grad); });
  }
  return out;
}

template <typename S>
TensorT<S> silu(const TensorT<S>& x) {
  require_defined(x, "silu");
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    S s = S(1) / (S(1) + std::exp(-px[i]));
    po[i] = px[i] * s;
  }
  check_finite(out, "silu");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so] {
      const S* go = so->grad.data();
      const S* vx = sx->values.data();
      S* gx = sx->grad.data();
      for (std::size_t i = 0; i < so->grad.size(); ++i) {
        S s = S(1) / (S(1) + std::exp(-vx[i]));
        gx[i] += go[i] * s * (S(1) + vx[i] * (S(1) - s));
      }
    });
  }
  return out;
}

// ---- softmax family -------------------------------------------------------

namespace {

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit sp{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    sp.inner *= shape[i];
  return sp;
}

}  // namespace

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  require_defined(x, "softmax");
  int a = normalize_axis(axis, x.rank(), "softmax");
  AxisSplit sp = split_axis(x.shape(), a);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.n * sp.inner + i;
      S mx = px[base];
      for (std::int64_t j = 1; j < sp.n; ++j) mx = std::max(mx, px[base + j * sp.inner]);
      S total = S(0);
      for (std::int64_t j = 0; j < sp.n; ++j) {
        S e = std::exp(px[base + j * sp.inner] - mx);
        po[base + j * sp.inner] = e;
        total += e;
      }
      S inv = S(1) / total;
      for (std::int64_t j = 0; j < sp.n; ++j) po[base + j * sp.inner] *= inv;
    }
  }
  check_finite(out, "softmax");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, sp] {
      const S* go = so->grad.data();
      const S* y = so->values.data();
      S* gx = sx->grad.data();
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.n * sp.inner + i;
          S dot = S(0);
          for (std::int64_t j = 0; j < sp.n; ++j) {
            const std::int64_t k = base + j * sp.inner;
            dot += go[k] * y[k];
          }
          for (std::int64_t j = 0; j < sp.n; ++j) {
            const std::int64_t k = base + j * sp.inner;
            gx[k] += y[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> log_softmax(const TensorT<S>& x, int axis) {
  require_defined(x, "log_softmax");
  int a = normalize_axis(axis, x.rank(), "log_softmax");
  AxisSplit sp = split_axis(x.shape(), a);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.n * sp.inner + i;
      S mx = px[base];
      for (std::int64_t j = 1; j < sp.n; ++j) mx = std::max(mx, px[base + j * sp.inner]);
      S total = S(0);
      for (std::int64_t j = 0; j < sp.n; ++j) total += std::exp(px[base + j * sp.inner] - mx);
      S lse = mx + std::log(total);
      for (std::int64_t j = 0; j < sp.n; ++j) {
        const std::int64_t k = base + j * sp.inner;
        po[k] = px[k] - lse;
      }
    }
  }
  check_finite(out, "log_softmax");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, sp] {
      const S* go = so->grad.data();
      const S* y = so->values.data();
      S* gx = sx->grad.data();
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.n * sp.inner + i;
          S total = S(0);
          for (std::int64_t j = 0; j < sp.n; ++j) total += go[base + j * sp.inner];
          for (std::int64_t j = 0; j < sp.n; ++j) {
            const std::int64_t k = base + j * sp.inner;
            gx[k] += go[k] - std::exp(y[k]) * total;
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> nll_mean(const TensorT<S>& logp, const IntTensor& target) {
  require_defined(logp, "nll_mean");
  if (logp.rank() != 4) throw DimensionError("nll_mean: log-probabilities must be [N,C,H,W]");
  if (target.shape.size() != 3 || target.shape[0] != logp.dim(0) ||
      target.shape[1] != logp.dim(2) || target.shape[2] != logp.dim(3))
    throw DimensionError("nll_mean: target shape " + shape_str(target.shape) +
                         " does not match log-probabilities " + shape_str(logp.shape()));
  const std::int64_t N = logp.dim(0), C = logp.dim(1), H = logp.dim(2), W = logp.dim(3);
  const std::int64_t pixels = N * H * W;
  const S* p = logp.data().data();
  S total = S(0);
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        std::int32_t cls = target.data[static_cast<std::size_t>((n * H + y) * W + x)];
        if (cls < 0 || cls >= C)
          throw ContractError("nll_mean: class index " + std::to_string(cls) +
                              " out of range for " + std::to_string(C) + " classes");
        total += p[((n * C + cls) * H + y) * W + x];
      }
    }
  }
  TensorT<S> out = TensorT<S>::scalar(-total / static_cast<S>(pixels));
  check_finite(out, "nll_mean");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&logp})) {
    auto sl = logp.storage(), so = out.storage();
    IntTensor tgt = target;
    tape->record(out, {&logp}, [sl, so, tgt, N, C, H, W, pixels] {
      const S g = so->grad[0];
      S* gl = sl->grad.data();
      const S w = -g / static_cast<S>(pixels);
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t y = 0; y < H; ++y) {
          for (std::int64_t x = 0; x < W; ++x) {
            std::int32_t cls = tgt.data[static_cast<std::size_t>((n * H + y) * W + x)];
            gl[((n * C + cls) * H + y) * W + x] += w;
          }
        }
      }
    });
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  require_defined(x, "sum");
  const S* px = x.data().data();
  S total = S(0);
  for (std::int64_t i = 0; i < x.size(); ++i) total += px[i];
  TensorT<S> out = TensorT<S>::scalar(total);
  check_finite(out, "sum");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so] {
      const S g = so->grad[0];
      S* gx = sx->grad.data();
      for (std::size_t i = 0; i < sx->grad.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  require_defined(x, "mean");
  const S* px = x.data().data();
  S total = S(0);
  for (std::int64_t i = 0; i < x.size(); ++i) total += px[i];
  const S inv_n = S(1) / static_cast<S>(x.size());
  TensorT<S> out = TensorT<S>::scalar(total * inv_n);
  check_finite(out, "mean");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, inv_n] {
      const S g = so->grad[0] * inv_n;
      S* gx = sx->grad.data();
      for (std::size_t i = 0; i < sx->grad.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// ---- shape ops ------------------------------------------------------------

template <typename S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
  int ax = normalize_axis(axis, a.rank(), "concat");
  for (int i = 0; i < a.rank(); ++i) {
    if (i != ax && a.dim(i) != b.dim(i))
      throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " differ outside axis " + std::to_string(ax));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] += b.dim(ax);
  TensorT<S> out = TensorT<S>::zeros(out_shape);

  AxisSplit sa = split_axis(a.shape(), ax);
  const std::int64_t na = sa.n, nb = b.dim(ax), inner = sa.inner, outer = sa.outer;
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(po + o * (na + nb) * inner, pa + o * na * inner,
                static_cast<std::size_t>(na * inner) * sizeof(S));
    std::memcpy(po + (o * (na + nb) + na) * inner, pb + o * nb * inner,
                static_cast<std::size_t>(nb * inner) * sizeof(S));
  }
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&a, &b})) {
    auto sta = a.storage(), stb = b.storage(), so = out.storage();
    tape->record(out, {&a, &b}, [sta, stb, so, na, nb, inner, outer] {
      const S* go = so->grad.data();
      S* ga = sta->grad.data();
      S* gb = stb->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        const S* goa = go + o * (na + nb) * inner;
        const S* gob = go + (o * (na + nb) + na) * inner;
        axpy(S(1), goa, ga + o * na * inner, na * inner);
        axpy(S(1), gob, gb + o * nb * inner, nb * inner);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  require_defined(x, "reshape");
  if (numel(new_shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
  TensorT<S> out = TensorT<S>::from_data(new_shape, std::vector<S>(x.data().begin(), x.data().end()));
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so] { accum<S>(sx, so->grad); });
  }
  return out;
}

template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x) {
  require_defined(x, "transpose_last2");
  if (x.rank() < 2) throw DimensionError("transpose_last2: needs rank >= 2");
  Shape shape = x.shape();
  const std::int64_t M = shape[shape.size() - 2], N = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const std::int64_t batch = x.size() / (M * N);
  TensorT<S> out = TensorT<S>::zeros(shape);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const S* src = px + b * M * N;
    S* dst = po + b * M * N;
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) dst[j * M + i] = src[i * N + j];
  }
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, batch, M, N] {
      const S* go = so->grad.data();
      S* gx = sx->grad.data();
      for (std::int64_t b = 0; b < batch; ++b) {
        const S* src = go + b * M * N;
        S* dst = gx + b * M * N;
        for (std::int64_t j = 0; j < N; ++j)
          for (std::int64_t i = 0; i < M; ++i) dst[i * N + j] += src[j * M + i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& b) {
  require_defined(x, "add_channel_bias");
  require_defined(b, "add_channel_bias");
  if (x.rank() != 4 || b.rank() != 2 || b.dim(0) != x.dim(0) || b.dim(1) != x.dim(1))
    throw DimensionError("add_channel_bias: expected x [N,C,H,W] and bias [N,C], got " +
                         shape_str(x.shape()) + " and " + shape_str(b.shape()));
  const std::int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t nc = 0; nc < NC; ++nc) {
    const S bias = pb[nc];
    for (std::int64_t i = 0; i < HW; ++i) po[nc * HW + i] = px[nc * HW + i] + bias;
  }
  check_finite(out, "add_channel_bias");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x, &b})) {
    auto sx = x.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&x, &b}, [sx, sb, so, NC, HW] {
      const S* go = so->grad.data();
      S* gx = sx->grad.data();
      S* gb = sb->grad.data();
      for (std::int64_t nc = 0; nc < NC; ++nc) {
        S total = S(0);
        for (std::int64_t i = 0; i < HW; ++i) {
          gx[nc * HW + i] += go[nc * HW + i];
          total += go[nc * HW + i];
        }
        gb[nc] += total;
      }
    });
  }
  return out;
}

// ---- linear ---------------------------------------------------------------

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw DimensionError("linear: expected x [R,K], w [O,K], b [O]");
  const std::int64_t R = x.dim(0), K = x.dim(1), O = w.dim(0);
  if (w.dim(1) != K || b.dim(0) != O)
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros({R, O});
  S* po = out.mutable_data().data();
  const S* pb = b.data().data();
  for (std::int64_t r = 0; r < R; ++r) std::memcpy(po + r * O, pb, static_cast<std::size_t>(O) * sizeof(S));
  // y[r,:] += x[r,k] * wT[k,:]
  std::vector<S> wT = transposed(w.data().data(), O, K);
  gemm_accum(x.data().data(), wT.data(), po, R, K, O);
  check_finite(out, "linear");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x, &w, &b})) {
    auto sx = x.storage(), sw = w.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&x, &w, &b}, [sx, sw, sb, so, R, K, O] {
      const S* go = so->grad.data();
      const S* vx = sx->values.data();
      const S* vw = sw->values.data();
      // dx[r,:] += dy[r,o] * w[o,:]
      gemm_accum(go, vw, sx->grad.data(), R, O, K);
      // dw = dy^T x
      std::vector<S> goT = transposed(go, R, O);
      gemm_accum(goT.data(), vx, sw->grad.data(), O, R, K);
      // db[o] += sum_r dy[r,o]
      S* gb = sb->grad.data();
      for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t o = 0; o < O; ++o) gb[o] += go[r * O + o];
    });
  }
  return out;
}

// ---- conv2d ---------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t N, C, H, W, O, kh, kw, Ho, Wo;
  int stride, pad;
};

template <typename S>
ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& k, const TensorT<S>& b, int stride,
                   int pad) {
  if (x.rank() != 4 || k.rank() != 4 || b.rank() != 1)
    throw DimensionError("conv2d: expected x [N,C,H,W], kernel [O,C,kh,kw], bias [O]");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), 0, 0, stride, pad};
  if (k.dim(1) != d.C)
    throw DimensionError("conv2d: kernel channels " + std::to_string(k.dim(1)) +
                         " do not match input channels " + std::to_string(d.C));
  if (b.dim(0) != d.O) throw DimensionError("conv2d: bias size does not match output channels");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  if (d.kh > d.H + 2 * pad || d.kw > d.W + 2 * pad)
    throw DimensionError("conv2d: kernel larger than padded input");
  if ((d.H + 2 * pad - d.kh) % stride != 0 || (d.W + 2 * pad - d.kw) % stride != 0)
    throw ConfigError("conv2d: output size is not exact for stride " + std::to_string(stride));
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  return d;
}

// cols: [C*kh*kw, Ho*Wo] for one sample.
template <typename S>
void im2col(const S* x, const ConvDims& d, S* cols) {
  const std::int64_t HW = d.Ho * d.Wo;
#pragma omp parallel for schedule(static) if (d.C > 8)
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        S* row = cols + ((c * d.kh + ki) * d.kw + kj) * HW;
        for (std::int64_t oy = 0; oy < d.Ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.H) {
            std::fill(row + oy * d.Wo, row + (oy + 1) * d.Wo, S(0));
            continue;
          }
          for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
            const std::int64_t ix = ox * d.stride - d.pad + kj;
            row[oy * d.Wo + ox] = (ix < 0 || ix >= d.W) ? S(0) : x[(c * d.H + iy) * d.W + ix];
          }
        }
      }
    }
  }
}

// Transposed layout: colsT[Ho*Wo, C*kh*kw]. Emitted directly so the kernel
// gradient GEMM never needs an explicit transpose of the cols panel.
template <typename S>
void im2colT(const S* x, const ConvDims& d, S* colsT) {
  const std::int64_t CKK = d.C * d.kh * d.kw;
#pragma omp parallel for schedule(static) if (d.Ho > 8)
  for (std::int64_t oy = 0; oy < d.Ho; ++oy) {
    for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
      S* row = colsT + (oy * d.Wo + ox) * CKK;
      for (std::int64_t c = 0; c < d.C; ++c) {
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
          const std::int64_t iy = oy * d.stride - d.pad + ki;
          S* dst = row + (c * d.kh + ki) * d.kw;
          if (iy < 0 || iy >= d.H) {
            std::fill(dst, dst + d.kw, S(0));
            continue;
          }
          const S* src = x + (c * d.H + iy) * d.W;
          for (std::int64_t kj = 0; kj < d.kw; ++kj) {
            const std::int64_t ix = ox * d.stride - d.pad + kj;
            dst[kj] = (ix < 0 || ix >= d.W) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

// Growable per-thread scratch, one slot per concurrent buffer.
template <typename S>
S* conv_scratch(int slot, std::int64_t n) {
  thread_local std::vector<S> bufs[3];
  auto& b = bufs[slot];
  if (static_cast<std::int64_t>(b.size()) < n) b.resize(static_cast<std::size_t>(n));
  return b.data();
}

// Channels write disjoint slices of gx, so the channel loop parallelizes
// without changing any per-element accumulation order.
template <typename S>
void col2im_accum(const S* cols, const ConvDims& d, S* gx) {
#pragma omp parallel for schedule(static) if (d.C > 8)
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const S* row = cols + ((c * d.kh + ki) * d.kw + kj) * d.Ho * d.Wo;
        for (std::int64_t oy = 0; oy < d.Ho; ++oy) {
          const std::int64_t iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.H) continue;
          for (std::int64_t ox = 0; ox < d.Wo; ++ox) {
            const std::int64_t ix = ox * d.stride - d.pad + kj;
            if (ix < 0 || ix >= d.W) continue;
            gx[(c * d.H + iy) * d.W + ix] += row[oy * d.Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k, const TensorT<S>& b, int stride,
                  int pad) {
  require_defined(x, "conv2d");
  require_defined(k, "conv2d");
  require_defined(b, "conv2d");
  const ConvDims d = conv_dims(x, k, b, stride, pad);
  const std::int64_t CKK = d.C * d.kh * d.kw;
  const std::int64_t HW = d.Ho * d.Wo;
  TensorT<S> out = TensorT<S>::zeros({d.N, d.O, d.Ho, d.Wo});
  const S* px = x.data().data();
  const S* pk = k.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  S* cols = conv_scratch<S>(0, CKK * HW);
  for (std::int64_t n = 0; n < d.N; ++n) {
    im2col(px + n * d.C * d.H * d.W, d, cols);
    S* on = po + n * d.O * HW;
    for (std::int64_t o = 0; o < d.O; ++o) std::fill(on + o * HW, on + (o + 1) * HW, pb[o]);
    gemm_accum(pk, cols, on, d.O, CKK, HW);
  }
  check_finite(out, "conv2d");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x, &k, &b})) {
    auto sx = x.storage(), sk = k.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&x, &k, &b}, [sx, sk, sb, so, d, CKK, HW] {
      const S* go = so->grad.data();
      const S* vx = sx->values.data();
      const S* vk = sk->values.data();
      S* gx = sx->grad.data();
      S* gk = sk->grad.data();
      S* gb = sb->grad.data();
      S* colsT = conv_scratch<S>(1, CKK * HW);
      S* dcols = conv_scratch<S>(2, CKK * HW);
      std::vector<S> kT = transposed(vk, d.O, CKK);
      for (std::int64_t n = 0; n < d.N; ++n) {
        const S* gon = go + n * d.O * HW;
        // bias: db[o] += sum over positions
        for (std::int64_t o = 0; o < d.O; ++o) {
          S total = S(0);
          for (std::int64_t i = 0; i < HW; ++i) total += gon[o * HW + i];
          gb[o] += total;
        }
        // input: dcols = kT x dy, then scatter back
        std::fill(dcols, dcols + CKK * HW, S(0));
        gemm_accum(kT.data(), gon, dcols, CKK, d.O, HW);
        col2im_accum(dcols, d, gx + n * d.C * d.H * d.W);
        // kernel: dk = dy x colsT
        im2colT(vx + n * d.C * d.H * d.W, d, colsT);
        gemm_accum(gon, colsT, gk, d.O, HW, CKK);
      }
    });
  }
  return out;
}

// ---- group_norm -----------------------------------------------------------

template <typename S>
TensorT<S> group_norm(const TensorT<S>& x, int groups, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps) {
  require_defined(x, "group_norm");
  require_defined(gamma, "group_norm");
  require_defined(beta, "group_norm");
  if (x.rank() != 4) throw DimensionError("group_norm: expected [N,C,H,W]");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups < 1 || C % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(C) + " channels");
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
    throw DimensionError("group_norm: gamma/beta must be [C]");
  const std::int64_t gc = C / groups;      // channels per group
  const std::int64_t gsize = gc * HW;      // elements per group
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  std::vector<S> mean_v(static_cast<std::size_t>(N * groups));
  std::vector<S> rstd_v(static_cast<std::size_t>(N * groups));
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pbeta = beta.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const S* base = px + (n * C + g * gc) * HW;
      S m = S(0);
      for (std::int64_t i = 0; i < gsize; ++i) m += base[i];
      m /= static_cast<S>(gsize);
      S var = S(0);
      for (std::int64_t i = 0; i < gsize; ++i) {
        const S dlt = base[i] - m;
        var += dlt * dlt;
      }
      var /= static_cast<S>(gsize);
      const S rstd = S(1) / std::sqrt(var + eps);
      mean_v[static_cast<std::size_t>(n * groups + g)] = m;
      rstd_v[static_cast<std::size_t>(n * groups + g)] = rstd;
      S* ob = po + (n * C + g * gc) * HW;
      for (std::int64_t c = 0; c < gc; ++c) {
        const S gm = pg[g * gc + c], bt = pbeta[g * gc + c];
        for (std::int64_t i = 0; i < HW; ++i)
          ob[c * HW + i] = (base[c * HW + i] - m) * rstd * gm + bt;
      }
    }
  }
  check_finite(out, "group_norm");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x, &gamma, &beta})) {
    auto sx = x.storage(), sg = gamma.storage(), sbt = beta.storage(), so = out.storage();
    tape->record(out, {&x, &gamma, &beta},
                 [sx, sg, sbt, so, N, C, HW, groups, gc, gsize, mean_v, rstd_v] {
      const S* go = so->grad.data();
      const S* vx = sx->values.data();
      const S* vg = sg->values.data();
      S* gx = sx->grad.data();
      S* gg = sg->grad.data();
      S* gb = sbt->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
          const S m = mean_v[static_cast<std::size_t>(n * groups + g)];
          const S rstd = rstd_v[static_cast<std::size_t>(n * groups + g)];
          const S* xb = vx + (n * C + g * gc) * HW;
          const S* gob = go + (n * C + g * gc) * HW;
          S* gxb = gx + (n * C + g * gc) * HW;
          // per-group means of dxhat and dxhat*xhat
          S s1 = S(0), s2 = S(0);
          for (std::int64_t c = 0; c < gc; ++c) {
            const S gm = vg[g * gc + c];
            for (std::int64_t i = 0; i < HW; ++i) {
              const S xhat = (xb[c * HW + i] - m) * rstd;
              const S dxhat = gob[c * HW + i] * gm;
              s1 += dxhat;
              s2 += dxhat * xhat;
            }
          }
          s1 /= static_cast<S>(gsize);
          s2 /= static_cast<S>(gsize);
          for (std::int64_t c = 0; c < gc; ++c) {
            const S gm = vg[g * gc + c];
            S dgm = S(0), dbt = S(0);
            for (std::int64_t i = 0; i < HW; ++i) {
              const S xhat = (xb[c * HW + i] - m) * rstd;
              const S dy = gob[c * HW + i];
              const S dxhat = dy * gm;
              gxb[c * HW + i] += rstd * (dxhat - s1 - xhat * s2);
              dgm += dy * xhat;
              dbt += dy;
            }
            gg[g * gc + c] += dgm;
            gb[g * gc + c] += dbt;
          }
        }
      }
    });
  }
  return out;
}

// ---- resampling -----------------------------------------------------------

template <typename S>
TensorT<S> nearest_upsample2x(const TensorT<S>& x) {
  require_defined(x, "nearest_upsample2x");
  if (x.rank() != 4) throw DimensionError("nearest_upsample2x: expected [N,C,H,W]");
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<S> out = TensorT<S>::zeros({x.dim(0), x.dim(1), 2 * H, 2 * W});
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t nc = 0; nc < NC; ++nc) {
    const S* src = px + nc * H * W;
    S* dst = po + nc * 4 * H * W;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t xx = 0; xx < W; ++xx) {
        const S v = src[y * W + xx];
        dst[(2 * y) * 2 * W + 2 * xx] = v;
        dst[(2 * y) * 2 * W + 2 * xx + 1] = v;
        dst[(2 * y + 1) * 2 * W + 2 * xx] = v;
        dst[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
      }
    }
  }
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, NC, H, W] {
      const S* go = so->grad.data();
      S* gx = sx->grad.data();
      for (std::int64_t nc = 0; nc < NC; ++nc) {
        const S* src = go + nc * 4 * H * W;
        S* dst = gx + nc * H * W;
        for (std::int64_t y = 0; y < H; ++y) {
          for (std::int64_t xx = 0; xx < W; ++xx) {
            dst[y * W + xx] += src[(2 * y) * 2 * W + 2 * xx] + src[(2 * y) * 2 * W + 2 * xx + 1] +
                               src[(2 * y + 1) * 2 * W + 2 * xx] +
                               src[(2 * y + 1) * 2 * W + 2 * xx + 1];
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> avgpool2x(const TensorT<S>& x) {
  require_defined(x, "avgpool2x");
  if (x.rank() != 4) throw DimensionError("avgpool2x: expected [N,C,H,W]");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw DimensionError("avgpool2x: spatial dims must be even, got " + shape_str(x.shape()));
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = H / 2, Wo = W / 2;
  TensorT<S> out = TensorT<S>::zeros({x.dim(0), x.dim(1), Ho, Wo});
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t nc = 0; nc < NC; ++nc) {
    const S* src = px + nc * H * W;
    S* dst = po + nc * Ho * Wo;
    for (std::int64_t y = 0; y < Ho; ++y) {
      for (std::int64_t xx = 0; xx < Wo; ++xx) {
        dst[y * Wo + xx] = (src[(2 * y) * W + 2 * xx] + src[(2 * y) * W + 2 * xx + 1] +
                            src[(2 * y + 1) * W + 2 * xx] + src[(2 * y + 1) * W + 2 * xx + 1]) *
                           S(0.25);
      }
    }
  }
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&x})) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, {&x}, [sx, so, NC, H, W, Ho, Wo] {
      const S* go = so->grad.data();
      S* gx = sx->grad.data();
      for (std::int64_t nc = 0; nc < NC; ++nc) {
        const S* src = go + nc * Ho * Wo;
        S* dst = gx + nc * H * W;
        for (std::int64_t y = 0; y < Ho; ++y) {
          for (std::int64_t xx = 0; xx < Wo; ++xx) {
            const S g = src[y * Wo + xx] * S(0.25);
            dst[(2 * y) * W + 2 * xx] += g;
            dst[(2 * y) * W + 2 * xx + 1] += g;
            dst[(2 * y + 1) * W + 2 * xx] += g;
            dst[(2 * y + 1) * W + 2 * xx + 1] += g;
          }
        }
      }
    });
  }
  return out;
}

// ---- bmm ------------------------------------------------------------------

template <typename S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  TensorT<S> out = TensorT<S>::zeros({B, M, N});
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < B; ++i)
    gemm_accum(pa + i * M * K, pb + i * K * N, po + i * M * N, M, K, N);
  check_finite(out, "bmm");
  if (auto* tape = TapeT<S>::active(); tape && tape->should_record({&a, &b})) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, {&a, &b}, [sa, sb, so, B, M, K, N] {
      const S* go = so->grad.data();
      const S* va = sa->values.data();
      const S* vb = sb->values.data();
      S* ga = sa->grad.data();
      S* gb = sb->grad.data();
      for (std::int64_t i = 0; i < B; ++i) {
        // da = dy * b^T ; db = a^T * dy
        std::vector<S> bT = transposed(vb + i * K * N, K, N);
        gemm_accum(go + i * M * N, bT.data(), ga + i * M * K, M, N, K);
        std::vector<S> aT = transposed(va + i * M * K, M, K);
        gemm_accum(aT.data(), go + i * M * N, gb + i * K * N, K, M, N);
      }
    });
  }
  return out;
}

// ---- argmax ---------------------------------------------------------------

template <typename S>
IntTensor argmax_channel(const TensorT<S>& logits) {
  require_defined(logits, "argmax_channel");
  if (logits.rank() != 4) throw DimensionError("argmax_channel: expected [N,C,H,W]");
  const std::int64_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  IntTensor out = IntTensor::zeros({logits.dim(0), logits.dim(2), logits.dim(3)});
  const S* p = logits.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t i = 0; i < HW; ++i) {
      S best = p[n * C * HW + i];
      std::int32_t arg = 0;
      for (std::int64_t c = 1; c < C; ++c) {
        const S v = p[(n * C + c) * HW + i];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(c);
        }
      }
      out.data[static_cast<std::size_t>(n * HW + i)] = arg;
    }
  }
  return out;
}

// ---- explicit instantiation -------------------------------------------------

template class TensorT<float>;
template class TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;

#define PTDR_INSTANTIATE_OPS(S)                                                                  \
  template void backward<S>(const TensorT<S>&);                                                  \
  template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> scale<S>(const TensorT<S>&, S);                                            \
  template TensorT<S> add_scalar<S>(const TensorT<S>&, S);                                       \
  template TensorT<S> silu<S>(const TensorT<S>&);                                                \
  template TensorT<S> softmax<S>(const TensorT<S>&, int);                                        \
  template TensorT<S> log_softmax<S>(const TensorT<S>&, int);                                    \
  template TensorT<S> nll_mean<S>(const TensorT<S>&, const IntTensor&);                          \
  template TensorT<S> linear<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&);        \
  template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, int,    \
                                int);                                                            \
  template TensorT<S> group_norm<S>(const TensorT<S>&, int, const TensorT<S>&, const TensorT<S>&, \
                                    S);                                                          \
  template TensorT<S> nearest_upsample2x<S>(const TensorT<S>&);                                  \
  template TensorT<S> avgpool2x<S>(const TensorT<S>&);                                           \
  template TensorT<S> concat<S>(const TensorT<S>&, const TensorT<S>&, int);                      \
  template TensorT<S> sum<S>(const TensorT<S>&);                                                 \
  template TensorT<S> mean<S>(const TensorT<S>&);                                                \
  template TensorT<S> bmm<S>(const TensorT<S>&, const TensorT<S>&);                              \
  template TensorT<S> transpose_last2<S>(const TensorT<S>&);                                     \
  template TensorT<S> reshape<S>(const TensorT<S>&, Shape);                                      \
  template TensorT<S> add_channel_bias<S>(const TensorT<S>&, const TensorT<S>&);                 \
  template IntTensor argmax_channel<S>(const TensorT<S>&);

PTDR_INSTANTIATE_OPS(float)
PTDR_INSTANTIATE_OPS(double)

#undef PTDR_INSTANTIATE_OPS

}  // namespace ptdr
