#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ptdr/errors.hpp"
#include "ptdr/rng.hpp"

namespace ptdr {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// When enabled, every operation validates that its output is finite and
/// raises NumericError otherwise. Off by default (it touches every element).
bool checked_mode();
void set_checked_mode(bool on);

template <typename S>
class TapeT;

/// Dense row-major n-dimensional array. Copies are shallow (shared storage);
/// use clone() for a deep copy. Gradients live next to the values and are
/// populated by backward().
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, S value);
  static TensorT from_data(Shape shape, std::vector<S> values);
  static TensorT scalar(S value);
  static TensorT randn(Shape shape, Rng& rng);
  static TensorT uniform(Shape shape, S lo, S hi, Rng& rng);

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  std::int64_t dim(int i) const { return st_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(st_->values.size()); }

  std::span<const S> data() const { return st_->values; }
  std::span<S> mutable_data() { return st_->values; }
  S item() const;

  TensorT clone() const;

  /// Marks the tensor as a trainable parameter: operations consuming it are
  /// recorded on the active tape and backward() fills grad().
  TensorT& set_param(bool on = true) {
    st_->param = on;
    return *this;
  }
  bool is_param() const { return st_->param; }

  bool has_grad() const { return !st_->grad.empty(); }
  std::span<const S> grad() const { return st_->grad; }
  std::span<S> mutable_grad() { return st_->grad; }
  void zero_grad();

  // Internal: tape bookkeeping. Exposed for the operator implementations.
  struct Storage {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;
    bool param = false;
    std::int64_t node = -1;
    TapeT<S>* tape = nullptr;
  };
  const std::shared_ptr<Storage>& storage() const { return st_; }

 private:
  explicit TensorT(std::shared_ptr<Storage> st) : st_(std::move(st)) {}
  static TensorT make(Shape shape);

  std::shared_ptr<Storage> st_;

  template <typename T>
  friend class TapeT;
};

using Tensor = TensorT<float>;

/// Integer-valued tensor (class masks, indices). Not differentiable.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int32_t> d);
  static IntTensor zeros(Shape s);
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  bool operator==(const IntTensor& other) const = default;
};

/// Records primitive operations in execution order; backward() replays them
/// in reverse exactly once and then clears the record. One live tape per
/// thread; construction activates it, destruction deactivates it.
template <typename S>
class TapeT {
 public:
  TapeT();
  ~TapeT();
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* active();

  std::size_t num_nodes() const { return nodes_.size(); }

  // Internal: called by operator implementations.
  bool should_record(std::initializer_list<const TensorT<S>*> inputs) const;
  void record(TensorT<S>& output, std::initializer_list<const TensorT<S>*> inputs,
              std::function<void()> backward_fn);

  void run_backward(const TensorT<S>& loss);

 private:
  struct Node {
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<typename TensorT<S>::Storage>> touched_;
};

using Tape = TapeT<float>;

/// Reverse-accumulates d(loss)/d(p) for every tensor recorded on the active
/// tape; loss must be a scalar attached to it. Consumes the tape.
template <typename S>
void backward(const TensorT<S>& loss);

// ---- primitive operations -------------------------------------------------
// Every primitive registers a backward rule when recording is active.
// Shapes must match exactly; the only broadcasts are bias-style adds and
// scalar-tensor ops.

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <typename S>
TensorT<S> scale(const TensorT<S>& x, S factor);
template <typename S>
TensorT<S> add_scalar(const TensorT<S>& x, S value);
template <typename S>
TensorT<S> silu(const TensorT<S>& x);
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis);
template <typename S>
TensorT<S> log_softmax(const TensorT<S>& x, int axis);

/// Mean over all positions of -logp[n, target[n,h,w], h, w].
/// logp: [N,C,H,W] log-probabilities, target: [N,H,W] class indices.
template <typename S>
TensorT<S> nll_mean(const TensorT<S>& logp, const IntTensor& target);

/// y[r,o] = sum_k x[r,k] * w[o,k] + b[o].  x: [R,K], w: [O,K], b: [O].
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b);

/// Cross-correlation. x: [N,C,H,W], k: [O,C,kh,kw], b: [O].
/// Output size must divide exactly: (H + 2*pad - kh) % stride == 0.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k, const TensorT<S>& b,
                  int stride, int pad);

/// Normalizes over channel groups of [N,C,H,W]; gamma/beta are [C].
template <typename S>
TensorT<S> group_norm(const TensorT<S>& x, int groups, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps = static_cast<S>(1e-5));

template <typename S>
TensorT<S> nearest_upsample2x(const TensorT<S>& x);
template <typename S>
TensorT<S> avgpool2x(const TensorT<S>& x);
template <typename S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis);
template <typename S>
TensorT<S> sum(const TensorT<S>& x);
template <typename S>
TensorT<S> mean(const TensorT<S>& x);

/// Batched matmul: a [B,M,K] x b [B,K,N] -> [B,M,N].
template <typename S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b);

/// Swaps the last two axes of a rank>=2 tensor.
template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& x);

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape);

/// x: [N,C,H,W] plus per-sample per-channel bias [N,C], broadcast over H,W.
template <typename S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& b);

/// Argmax over the channel axis of [N,C,H,W] -> [N,H,W]. Ties break low.
template <typename S>
IntTensor argmax_channel(const TensorT<S>& logits);

}  // namespace ptdr
