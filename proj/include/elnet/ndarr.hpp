#pragma once

// Dense NCHW tensors with a small reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto shared storage. Ops produce new tensors and,
// when any input requires a gradient, record a node holding the backward rule.
// backward() walks the recorded graph once in reverse topological order,
// accumulates into leaf gradients and releases the graph.
//
// Only float and double are instantiated: float for training, double for
// finite-difference checks.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "elnet/error.hpp"

namespace elnet::ndarr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <class T>
class Tensor;

namespace detail {

template <class T>
struct TensorImpl;

// Receives the output gradient and one pointer per input: nullptr when that
// input does not need a gradient, else its (zero-initialised) grad buffer.
template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>*> input_grads)>;

template <class T>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
  bool consumed = false;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<Node<T>> creator;
};

}  // namespace detail

// Thread-local switch for graph recording. Inference paths disable it.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  T at(std::size_t i) const { return data()[i]; }
  T item() const;

  // Leaves only: parameters are updated in place by the optimizer.
  std::span<T> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();
  void clear_grad();

  // Copy of the values as a fresh leaf with no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Internal access for op implementations and backward().
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Builds an op result and, when recording and some input needs a gradient,
// attaches a node with the given backward rule. Used by every built-in op and
// available for custom ops.
template <class T>
Tensor<T> make_op(std::string name, Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                  detail::BackwardFn<T> backward);

enum class BnMode { kTrain, kEval };

// --- convolution & normalisation -------------------------------------------

// Stride-1 cross-correlation. x: [N,C,H,W], w: [K,C,kh,kw] with odd kh, kw.
// Output spatial size is H + 2*padding - dilation*(kh-1).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias, std::size_t padding,
                 std::size_t dilation = 1);

// Train mode normalises with biased batch statistics and updates the running
// buffers in place (unbiased variance, PyTorch momentum convention). Eval mode
// reads the running buffers only.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BnMode mode, double eps = 1e-5, double momentum = 0.1);

// x: [..., Cin], w: [Cout, Cin], b: [Cout]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b);

// --- elementwise -------------------------------------------------------------

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class T>
Tensor<T> gelu(const Tensor<T>& x);
template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> log(const Tensor<T>& x);
// Gradient passes only where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& x, T s);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);

// --- reductions ----------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x);
// [N, ...] -> [N]
template <class T>
Tensor<T> sum_per_sample(const Tensor<T>& x);

// --- shape ---------------------------------------------------------------------

template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x);
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);
// Half-pixel aligned, edge-clamped (align_corners = false).
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor);
template <class T>
Tensor<T> avgpool2x2(const Tensor<T>& x);
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// --- differentiation -------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  bool pass = false;
  std::string worst;  // "<tensor index>[<element>]" of the largest error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tol = 1e-5;
  // Relative error is |a-b| / max(|a|, |b|, floor).
  double floor = 1e-6;
  // Entries that fail at `step` are retried at step/10, step/100, ... this many
  // times; the smallest error counts. A ReLU kink inside [x-h, x+h] breaks the
  // difference quotient, not the gradient.
  std::size_t retries = 0;
  // Error above which an entry is retried; 0 means tol.
  double retry_above = 0.0;
  // 0 checks every element; otherwise a seeded sample per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

// Central differences of f w.r.t. every listed leaf, compared to backward().
// Throws NumericError when f is not deterministic.
GradCheckReport grad_check(const std::function<Tensor64()>& f, const std::vector<Tensor64>& leaves,
                           const GradCheckOptions& opts);

// Single-input form: f(x) must return a scalar.
GradCheckReport grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x, double step,
                           double tol);

}  // namespace elnet::ndarr
