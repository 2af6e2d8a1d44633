#include "elnet/ndarr.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace elnet::ndarr {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
void check_finite(const char* op, std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRow = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRow = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

template <class T>
void require_rank4(const char* op, const Tensor<T>& x) {
  require(x.rank() == 4, std::string(op) + ": expected [N,C,H,W], got " + to_string(x.shape()));
}

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

// --- Tensor --------------------------------------------------------------------

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) require(d > 0, "tensor: zero-sized dimension in " + to_string(shape));
  require(ndarr::numel(shape) == data.size(), "tensor: data length " + std::to_string(data.size()) +
                                           " does not match shape " + to_string(shape));
  check_finite<T>("tensor", data);
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<T>(ndarr::numel(shape), T(0)), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(ndarr::numel(shape), value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <class T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  return impl_->shape;
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  const auto& s = shape();
  require(i < s.size(), "tensor: dim index out of range");
  return s[i];
}

template <class T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  return impl_->data;
}

template <class T>
T Tensor<T>::item() const {
  require(numel() == 1, "tensor: item() on non-scalar " + to_string(shape()));
  return impl_->data[0];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  if (impl_->creator) throw Error("tensor: in-place mutation of a non-leaf tensor");
  return impl_->data;
}

template <class T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <class T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  if (impl_->creator) throw Error("tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = on;
}

template <class T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->creator;
}

template <class T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw Error("tensor: no gradient present");
  return impl_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (!impl_) return;
  impl_->grad.assign(impl_->data.size(), T(0));
}

template <class T>
void Tensor<T>::clear_grad() {
  if (!impl_) return;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->data, false);
}

// --- op plumbing -------------------------------------------------------------------

template <class T>
Tensor<T> make_op(std::string name, Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                  detail::BackwardFn<T> backward) {
  check_finite<T>(name.c_str(), data);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    auto node = std::make_shared<detail::Node<T>>();
    node->op = std::move(name);
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->requires_grad = true;
    impl->creator = std::move(node);
  }
  return Tensor<T>(std::move(impl));
}

// --- conv2d ----------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, k, kh, kw, pad, dil, ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * ho * wo; }
};

template <class T>
void im2col(const ConvGeom& g, std::span<const T> x, std::vector<T>& cols) {
  const std::size_t m = g.cols();
  cols.assign(g.rows() * m, T(0));
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols.data() + ((c * g.kh + ki) * g.kw + kj) * m;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki * g.dil) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj * g.dil) - pad;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* plane = x.data() + (n * g.c + c) * g.h * g.w;
          T* out = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const T* src = plane + iy * g.w;
            T* dst = out + oy * g.wo;
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(g.wo, static_cast<std::ptrdiff_t>(g.w) - dx);
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox + dx];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeom& g, const std::vector<T>& cols, std::vector<T>& dx_out) {
  const std::size_t m = g.cols();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols.data() + ((c * g.kh + ki) * g.kw + kj) * m;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki * g.dil) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj * g.dil) - pad;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* plane = dx_out.data() + (n * g.c + c) * g.h * g.w;
          const T* in = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* dst = plane + iy * g.w;
            const T* src = in + oy * g.wo;
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(g.wo, static_cast<std::ptrdiff_t>(g.w) - dx);
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox + dx] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias, std::size_t padding,
                 std::size_t dilation) {
  require_rank4("conv2d", x);
  require(w.rank() == 4, "conv2d: weight must be [K,C,kh,kw], got " + to_string(w.shape()));
  require(dilation >= 1, "conv2d: dilation must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), padding, dilation, 0, 0};
  require(w.dim(1) == g.c, "conv2d: channel mismatch, input has " + std::to_string(g.c) + " channels, weight expects " +
                               std::to_string(w.dim(1)));
  require(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: kernel size must be odd, got " + to_string(w.shape()));
  const std::ptrdiff_t ho = static_cast<std::ptrdiff_t>(g.h + 2 * padding) - static_cast<std::ptrdiff_t>(dilation * (g.kh - 1));
  const std::ptrdiff_t wo = static_cast<std::ptrdiff_t>(g.w + 2 * padding) - static_cast<std::ptrdiff_t>(dilation * (g.kw - 1));
  require(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");
  g.ho = static_cast<std::size_t>(ho);
  g.wo = static_cast<std::size_t>(wo);
  if (bias) require(bias->numel() == g.k, "conv2d: bias length must equal output channels");

  std::vector<T> cols;
  im2col<T>(g, x.data(), cols);
  const std::size_t r = g.rows(), m = g.cols(), plane = g.ho * g.wo;
  RowMat<T> res = CMapRow<T>(w.data().data(), g.k, r) * CMapRow<T>(cols.data(), r, m);

  std::vector<T> out(g.n * g.k * plane);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t k = 0; k < g.k; ++k) {
      const T b = bias ? bias->data()[k] : T(0);
      const T* src = res.data() + k * m + n * plane;
      T* dst = out.data() + (n * g.k + k) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  Tensor<T> xs = x, ws = w;
  const bool has_bias = bias.has_value();
  return make_op<T>(
      "conv2d", Shape{g.n, g.k, g.ho, g.wo}, std::move(out), inputs,
      [g, xs, ws, has_bias](std::span<const T> gout, std::span<std::vector<T>*> gin) {
        const std::size_t r = g.rows(), m = g.cols(), plane = g.ho * g.wo;
        RowMat<T> gmat(g.k, m);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t k = 0; k < g.k; ++k)
            std::memcpy(gmat.data() + k * m + n * plane, gout.data() + (n * g.k + k) * plane, plane * sizeof(T));
        if (gin[1] || gin[0]) {
          std::vector<T> cols;
          if (gin[1]) {
            im2col<T>(g, xs.data(), cols);
            MapRow<T>(gin[1]->data(), g.k, r).noalias() += gmat * CMapRow<T>(cols.data(), r, m).transpose();
          }
          if (gin[0]) {
            cols.assign(r * m, T(0));
            MapRow<T>(cols.data(), r, m).noalias() = CMapRow<T>(ws.data().data(), g.k, r).transpose() * gmat;
            col2im_add<T>(g, cols, *gin[0]);
          }
        }
        if (has_bias && gin[2]) {
          for (std::size_t k = 0; k < g.k; ++k) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) s += gmat(k, j);
            (*gin[2])[k] += static_cast<T>(s);
          }
        }
      });
}

// --- batchnorm2d --------------------------------------------------------------------

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BnMode mode, double eps, double momentum) {
  require_rank4("batchnorm2d", x);
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(n > 0, "batchnorm2d: zero batch");
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean), static_cast<const Tensor<T>*>(&running_var)})
    require(t->numel() == c, "batchnorm2d: parameter length does not match " + std::to_string(c) + " channels");
  for (T v : running_var.data())
    if (v < 0) throw NumericError("batchnorm2d: negative running variance");
  require(eps > 0, "batchnorm2d: eps must be positive");

  const double count = static_cast<double>(n * plane);
  std::vector<double> mu(c), inv(c);
  auto xd = x.data();
  if (mode == BnMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xd.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xd.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / count;
      mu[ch] = m;
      inv[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? v / (count - 1) : var;
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = static_cast<T>((1 - momentum) * rm[ch] + momentum * m);
      rv[ch] = static_cast<T>((1 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      inv[ch] = 1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) + eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const double gm = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (xd[off + i] - mu[ch]) * inv[ch];
        xhat[off + i] = static_cast<T>(h);
        out[off + i] = static_cast<T>(gm * h + bt);
      }
    }
  }

  Tensor<T> gs = gamma;
  const bool train = mode == BnMode::kTrain;
  return make_op<T>(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [n, c, plane, count, inv, gs, train, xhat = std::move(xhat)](std::span<const T> gout,
                                                                  std::span<std::vector<T>*> gin) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sdy = 0, sdyx = 0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sdy += gout[off + i];
              sdyx += static_cast<double>(gout[off + i]) * xhat[off + i];
            }
          }
          if (gin[1]) (*gin[1])[ch] += static_cast<T>(sdyx);
          if (gin[2]) (*gin[2])[ch] += static_cast<T>(sdy);
          if (!gin[0]) continue;
          const double gm = gs.data()[ch];
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              double d;
              if (train) {
                d = gm * inv[ch] * (gout[off + i] - sdy / count - xhat[off + i] * sdyx / count);
              } else {
                d = gm * inv[ch] * gout[off + i];
              }
              (*gin[0])[off + i] += static_cast<T>(d);
            }
          }
        }
      });
}

// --- linear ----------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b) {
  require(w.rank() == 2, "linear: weight must be [Cout,Cin]");
  const std::size_t cin = w.dim(1), cout = w.dim(0);
  require(x.rank() >= 1 && x.shape().back() == cin, "linear: input last dim " + to_string(x.shape()) +
                                                        " does not match weight " + to_string(w.shape()));
  if (b) require(b->numel() == cout, "linear: bias length mismatch");
  const std::size_t rows = x.numel() / cin;
  RowMat<T> y = CMapRow<T>(x.data().data(), rows, cin) * CMapRow<T>(w.data().data(), cout, cin).transpose();
  if (b) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cout; ++j) y(i, j) += b->data()[j];
  }
  Shape shape = x.shape();
  shape.back() = cout;
  std::vector<Tensor<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  Tensor<T> xs = x, ws = w;
  const bool has_b = b.has_value();
  return make_op<T>("linear", shape, std::vector<T>(y.data(), y.data() + y.size()), inputs,
                    [rows, cin, cout, xs, ws, has_b](std::span<const T> gout, std::span<std::vector<T>*> gin) {
                      CMapRow<T> g(gout.data(), rows, cout);
                      if (gin[0])
                        MapRow<T>(gin[0]->data(), rows, cin).noalias() += g * CMapRow<T>(ws.data().data(), cout, cin);
                      if (gin[1])
                        MapRow<T>(gin[1]->data(), cout, cin).noalias() +=
                            g.transpose() * CMapRow<T>(xs.data().data(), rows, cin);
                      if (has_b && gin[2]) {
                        for (std::size_t j = 0; j < cout; ++j) {
                          double s = 0;
                          for (std::size_t i = 0; i < rows; ++i) s += g(i, j);
                          (*gin[2])[j] += static_cast<T>(s);
                        }
                      }
                    });
}

// --- elementwise ------------------------------------------------------------------------

namespace {

// y = f(x); dy/dx computed from (x, y).
template <class T, class F, class D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D dfdx) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor<T> xs = x;
  std::vector<T> saved = GradMode::enabled() && x.requires_grad() ? out : std::vector<T>{};
  return make_op<T>(name, x.shape(), std::move(out), {x},
                    [xs, dfdx, saved = std::move(saved)](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      auto xd = xs.data();
                      auto& dst = *gin[0];
                      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * dfdx(xd[i], saved[i]);
                    });
}

}  // namespace

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / 3.14159265358979323846);
  return unary<T>(
      "gelu", x,
      [k](T v) {
        const double u = k * (v + kC * v * v * v);
        return static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
      },
      [k](T v, T) {
        const double u = k * (v + kC * v * v * v);
        const double t = std::tanh(u);
        return static_cast<T>(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * kC * v * v));
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  require(lo <= hi, "clamp: lo > hi");
  return unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

namespace {

template <class T, class F, class GA, class GB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, GA ga, GB gb) {
  require_same_shape(name, a, b);
  auto ad = a.data(), bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[i]);
  Tensor<T> as = a, bs = b;
  return make_op<T>(name, a.shape(), std::move(out), {a, b},
                    [as, bs, ga, gb](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      auto ad = as.data(), bd = bs.data();
                      if (gin[0])
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * ga(ad[i], bd[i]);
                      if (gin[1])
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * gb(ad[i], bd[i]);
                    });
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// --- reductions ------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("sum", Shape{1}, {static_cast<T>(s)}, {x},
                    [](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (auto& v : *gin[0]) v += g[0];
                    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("mean", Shape{1}, {static_cast<T>(s / n)}, {x},
                    [n](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      const T d = static_cast<T>(g[0] / n);
                      for (auto& v : *gin[0]) v += d;
                    });
}

template <class T>
Tensor<T> sum_per_sample(const Tensor<T>& x) {
  require(x.rank() >= 1, "sum_per_sample: rank-0 input");
  const std::size_t n = x.dim(0), per = x.numel() / n;
  std::vector<T> out(n);
  auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    double s = 0;
    for (std::size_t i = 0; i < per; ++i) s += xd[b * per + i];
    out[b] = static_cast<T>(s);
  }
  return make_op<T>("sum_per_sample", Shape{n}, std::move(out), {x},
                    [n, per](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t i = 0; i < per; ++i) (*gin[0])[b * per + i] += g[b];
                    });
}

// --- shape ops -------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t f) {
  require_rank4("upsample_nearest", x);
  require(f >= 1, "upsample_nearest: factor must be >= 1");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h * f, ow = w * f;
  std::vector<T> out(nc * oh * ow);
  auto xd = x.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xd[(p * h + y / f) * w + xx / f];
  return make_op<T>("upsample_nearest", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                    [nc, h, w, oh, ow, f](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t p = 0; p < nc; ++p)
                        for (std::size_t y = 0; y < oh; ++y)
                          for (std::size_t xx = 0; xx < ow; ++xx)
                            (*gin[0])[(p * h + y / f) * w + xx / f] += g[(p * oh + y) * ow + xx];
                    });
}

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t f) {
  require_rank4("upsample_bilinear", x);
  require(f >= 1, "upsample_bilinear: factor must be >= 1");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h * f, ow = w * f;
  // Half-pixel centres, source coordinates clamped at the border.
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [f](std::size_t n, std::size_t on) {
    std::vector<Tap> t(on);
    for (std::size_t o = 0; o < on; ++o) {
      const double src = std::clamp((double(o) + 0.5) / double(f) - 0.5, 0.0, double(n - 1));
      const auto i0 = static_cast<std::size_t>(src);
      t[o] = {i0, std::min(i0 + 1, n - 1), static_cast<T>(src - double(i0))};
    }
    return t;
  };
  const auto ty = taps(h, oh), tx = taps(w, ow);
  std::vector<T> out(nc * oh * ow);
  auto xd = x.data();
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = xd.data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& b = tx[xx];
        const T top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const T bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        out[(p * oh + y) * ow + xx] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  return make_op<T>("upsample_bilinear", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                    [nc, h, w, oh, ow, ty, tx](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t p = 0; p < nc; ++p) {
                        T* dst = gin[0]->data() + p * h * w;
                        for (std::size_t y = 0; y < oh; ++y) {
                          const auto& a = ty[y];
                          for (std::size_t xx = 0; xx < ow; ++xx) {
                            const auto& b = tx[xx];
                            const T d = g[(p * oh + y) * ow + xx];
                            dst[a.i0 * w + b.i0] += d * (1 - a.w1) * (1 - b.w1);
                            dst[a.i0 * w + b.i1] += d * (1 - a.w1) * b.w1;
                            dst[a.i1 * w + b.i0] += d * a.w1 * (1 - b.w1);
                            dst[a.i1 * w + b.i1] += d * a.w1 * b.w1;
                          }
                        }
                      }
                    });
}

template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  return upsample_nearest(x, 2);
}

template <class T>
Tensor<T> avgpool2x2(const Tensor<T>& x) {
  require_rank4("avgpool2x2", x);
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "avgpool2x2: spatial size must be even, got " + to_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(nc * oh * ow);
  auto xd = x.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T* r0 = xd.data() + (p * h + 2 * y) * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = (r0[0] + r0[1] + r0[w] + r0[w + 1]) * T(0.25);
      }
  return make_op<T>("avgpool2x2", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                    [nc, h, w, oh, ow](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t p = 0; p < nc; ++p)
                        for (std::size_t y = 0; y < oh; ++y)
                          for (std::size_t xx = 0; xx < ow; ++xx) {
                            const T d = g[(p * oh + y) * ow + xx] * T(0.25);
                            T* r0 = gin[0]->data() + (p * h + 2 * y) * w + 2 * xx;
                            r0[0] += d;
                            r0[1] += d;
                            r0[w] += d;
                            r0[w + 1] += d;
                          }
                    });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4("concat_channels", a);
  require_rank4("concat_channels", b);
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<T> out(n * (ca + cb) * plane);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * plane, ca * plane, out.data() + i * (ca + cb) * plane);
    std::copy_n(b.data().data() + i * cb * plane, cb * plane, out.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_op<T>("concat_channels", Shape{n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                    [n, ca, cb, plane](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t i = 0; i < n; ++i) {
                        const T* src = g.data() + i * (ca + cb) * plane;
                        if (gin[0]) {
                          T* dst = gin[0]->data() + i * ca * plane;
                          for (std::size_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
                        }
                        if (gin[1]) {
                          T* dst = gin[1]->data() + i * cb * plane;
                          for (std::size_t j = 0; j < cb * plane; ++j) dst[j] += src[ca * plane + j];
                        }
                      }
                    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {x},
                    [](std::span<const T> g, std::span<std::vector<T>*> gin) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                    });
}

// --- backward ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  using Impl = detail::TensorImpl<T>;
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
  auto root = loss.impl();
  if (!root->requires_grad) throw Error("backward: loss is not on a recorded graph");
  if (!root->creator) {
    if (root->grad.empty()) root->grad.assign(1, T(0));
    root->grad[0] += T(1);
    return;
  }
  if (root->creator->consumed) throw Error("backward: graph already consumed");

  // Iterative post-order DFS over non-leaf tensors.
  // Owning pointers: clearing a node's inputs below may drop the last other reference.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack{{root, 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    auto& ins = impl->creator->inputs;
    if (next < ins.size()) {
      std::shared_ptr<Impl> child = ins[next++];
      if (child->creator && child->requires_grad && !visited.count(child.get())) {
        if (child->creator->consumed) throw Error("backward: graph already consumed");
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(impl));
      stack.pop_back();
    }
  }

  root->grad.assign(1, T(1));
  std::vector<std::vector<T>*> ptrs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = it->get();
    auto& node = *impl->creator;
    if (!impl->grad.empty()) {
      ptrs.assign(node.inputs.size(), nullptr);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        auto& in = node.inputs[i];
        if (!in->requires_grad) continue;
        if (in->grad.empty()) in->grad.assign(in->data.size(), T(0));
        ptrs[i] = &in->grad;
      }
      node.backward(impl->grad, ptrs);
    }
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

// --- gradient check ----------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor64()>& f, const std::vector<Tensor64>& leaves,
                           const GradCheckOptions& opts) {
  for (const auto& t : leaves) {
    if (!t.is_leaf() || !t.requires_grad()) throw Error("grad_check: every checked tensor must be a grad leaf");
  }
  auto leaves_mut = leaves;
  for (auto& t : leaves_mut) t.clear_grad();
  Tensor64 y = f();
  if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
  const double y0 = y.item();
  {
    NoGradGuard ng;
    const double y1 = f().item();
    if (std::memcmp(&y0, &y1, sizeof(double)) != 0)
      throw NumericError("grad_check: f is not deterministic (repeated evaluation differs)");
  }
  backward(y);

  GradCheckReport rep;
  std::mt19937_64 rng(opts.seed);
  NoGradGuard ng;
  for (std::size_t ti = 0; ti < leaves_mut.size(); ++ti) {
    auto& t = leaves_mut[ti];
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_entries_per_tensor && idx.size() > opts.max_entries_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_entries_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    auto data = t.mutable_data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      double err = std::numeric_limits<double>::infinity(), fd = 0.0;
      double h = opts.step;
      const double retry_above = opts.retry_above > 0 ? opts.retry_above : opts.tol;
      for (std::size_t attempt = 0; attempt <= opts.retries && err >= retry_above; ++attempt, h /= 10) {
        data[i] = orig + h;
        const double fp = f().item();
        data[i] = orig - h;
        const double fm = f().item();
        data[i] = orig;
        const double d = (fp - fm) / (2 * h);
        const double denom = std::max({std::abs(d), std::abs(analytic[i]), opts.floor});
        const double e = std::abs(d - analytic[i]) / denom;
        if (e < err) err = e, fd = d;
      }
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
        rep.worst_analytic = analytic[i];
        rep.worst_numeric = fd;
      }
    }
  }
  rep.pass = rep.max_rel_err < opts.tol;
  return rep;
}

GradCheckReport grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x, double step,
                           double tol) {
  Tensor64 leaf = x.detach();
  leaf.set_requires_grad(true);
  GradCheckOptions opts;
  opts.step = step;
  opts.tol = tol;
  return grad_check([&] { return f(leaf); }, {leaf}, opts);
}

// --- explicit instantiations ---------------------------------------------------------------

#define ELNET_INSTANTIATE(T)                                                                                          \
  template class Tensor<T>;                                                                                           \
  template Tensor<T> make_op<T>(std::string, Shape, std::vector<T>, const std::vector<Tensor<T>>&,                   \
                                detail::BackwardFn<T>);                                                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, std::size_t,      \
                               std::size_t);                                                                          \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,     \
                                    BnMode, double, double);                                                          \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);                  \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                                    \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> log<T>(const Tensor<T>&);                                                                        \
  template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                                                                \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                                   \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                        \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> sum_per_sample<T>(const Tensor<T>&);                                                             \
  template Tensor<T> upsample2x_nearest<T>(const Tensor<T>&);                                                         \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> upsample_bilinear<T>(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> avgpool2x2<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                             \
  template void backward<T>(const Tensor<T>&);

ELNET_INSTANTIATE(float)
ELNET_INSTANTIATE(double)

#undef ELNET_INSTANTIATE

}  // namespace elnet::ndarr
