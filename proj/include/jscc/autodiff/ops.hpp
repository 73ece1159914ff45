#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <type_traits>

#include "jscc/autodiff/graph.hpp"

namespace jscc::ad {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view what) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape) + " and " +
                     to_string(b.shape) + " differ");
}

/// Elementwise unary op; Fn supplies value(x) and derivative(x, y) with y = value(x).
template <class T, class Fn>
class UnaryOp final : public Op<T> {
 public:
  std::string_view kind() const override { return Fn::name; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = Fn::value(x[i]);
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& x = *in[0];
    auto& gx = *gin[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * Fn::derivative(x[i], out[i]);
  }
};

struct SquareFn {
  static constexpr std::string_view name = "square";
  template <class T> static T value(T x) { return x * x; }
  template <class T> static T derivative(T x, T) { return 2 * x; }
};
struct SqrtFn {
  static constexpr std::string_view name = "sqrt";
  template <class T> static T value(T x) { return std::sqrt(x); }
  template <class T> static T derivative(T, T y) { return T{0.5} / y; }
};
struct LogFn {
  static constexpr std::string_view name = "log";
  template <class T> static T value(T x) { return std::log(x); }
  template <class T> static T derivative(T x, T) { return T{1} / x; }
};
struct ExpFn {
  static constexpr std::string_view name = "exp";
  template <class T> static T value(T x) { return std::exp(x); }
  template <class T> static T derivative(T, T y) { return y; }
};
struct AbsFn {
  static constexpr std::string_view name = "abs";
  template <class T> static T value(T x) { return std::abs(x); }
  // Subgradient 0 at the kink.
  template <class T> static T derivative(T x, T) { return T((x > 0) - (x < 0)); }
};
struct SigmoidFn {
  static constexpr std::string_view name = "sigmoid";
  template <class T> static T value(T x) {
    if (x >= 0) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
  }
  template <class T> static T derivative(T, T y) { return y * (T{1} - y); }
};

enum class Binary { add, sub, mul, div };

template <class T, Binary K>
class BinaryOp final : public Op<T> {
 public:
  std::string_view kind() const override {
    switch (K) {
      case Binary::add: return "add";
      case Binary::sub: return "sub";
      case Binary::mul: return "mul";
      case Binary::div: return "div";
    }
    return "";
  }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    require_same_shape(a, b, kind());
    Tensor<T> y(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if constexpr (K == Binary::add) y[i] = a[i] + b[i];
      if constexpr (K == Binary::sub) y[i] = a[i] - b[i];
      if constexpr (K == Binary::mul) y[i] = a[i] * b[i];
      if constexpr (K == Binary::div) y[i] = a[i] / b[i];
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    const std::size_t n = a.size();
    if (gin[0]) {
      auto& ga = *gin[0];
      for (std::size_t i = 0; i < n; ++i) {
        if constexpr (K == Binary::add || K == Binary::sub) ga[i] += g[i];
        if constexpr (K == Binary::mul) ga[i] += g[i] * b[i];
        if constexpr (K == Binary::div) ga[i] += g[i] / b[i];
      }
    }
    if (gin[1]) {
      auto& gb = *gin[1];
      for (std::size_t i = 0; i < n; ++i) {
        if constexpr (K == Binary::add) gb[i] += g[i];
        if constexpr (K == Binary::sub) gb[i] -= g[i];
        if constexpr (K == Binary::mul) gb[i] += g[i] * a[i];
        if constexpr (K == Binary::div) gb[i] -= g[i] * out[i] / b[i];
      }
    }
  }
};

}  // namespace detail

/// y = scale * x + shift, for scalar constants.
template <class T>
class AffineScalarOp final : public Op<T> {
 public:
  AffineScalarOp(T scale, T shift) : scale_(scale), shift_(shift) {}
  std::string_view kind() const override { return shift_ == T{0} ? "scale" : "affine"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    Tensor<T> y(in[0]->shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale_ * (*in[0])[i] + shift_;
    return y;
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += scale_ * g[i];
  }

 private:
  T scale_, shift_;
};

template <class T>
class SumOp final : public Op<T> {
 public:
  explicit SumOp(bool mean) : mean_(mean) {}
  std::string_view kind() const override { return mean_ ? "mean" : "sum"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    T acc{0};
    for (T v : in[0]->data) acc += v;
    if (mean_) acc /= static_cast<T>(in[0]->size());
    return Tensor<T>::scalar(acc);
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    const T d = mean_ ? g[0] / static_cast<T>(in[0]->size()) : g[0];
    for (T& v : *gin[0]) v += d;
  }

 private:
  bool mean_;
};

template <class T>
class ReshapeOp final : public Op<T> {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view kind() const override { return "reshape"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    if (numel(shape_) != in[0]->size())
      throw ShapeError("cannot reshape " + to_string(in[0]->shape) + " to " + to_string(shape_));
    return Tensor<T>(shape_, in[0]->data);
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  }

 private:
  Shape shape_;
};

/// [m,k] x [k,n] -> [m,n]
template <class T>
class MatMulOp final : public Op<T> {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

 public:
  std::string_view kind() const override { return "matmul"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw ShapeError("matmul: incompatible shapes " + to_string(a.shape) + " x " +
                       to_string(b.shape));
    Tensor<T> y(Shape{a.dim(0), b.dim(1)});
    Map(y.data.data(), a.dim(0), b.dim(1)).noalias() =
        CMap(a.data.data(), a.dim(0), a.dim(1)) * CMap(b.data.data(), b.dim(0), b.dim(1));
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    CMap gy(g.data(), m, n);
    if (gin[0]) Map(gin[0]->data(), m, k).noalias() += gy * CMap(b.data.data(), k, n).transpose();
    if (gin[1]) Map(gin[1]->data(), k, n).noalias() += CMap(a.data.data(), m, k).transpose() * gy;
  }
};

/// Adds b[c] along axis 1 of x: works for [B,C] and [B,C,H,W].
template <class T>
class BiasAddOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "bias_add"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& b = *in[1];
    if (x.rank() < 2 || b.size() != x.dim(1))
      throw ShapeError("bias_add: bias " + to_string(b.shape) + " does not match axis 1 of " +
                       to_string(x.shape));
    Tensor<T> y = x;
    const std::size_t C = x.dim(1), inner = x.size() / (x.dim(0) * C);
    for (std::size_t n = 0; n < x.dim(0); ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T* p = y.data.data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
      }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1]) {
      const std::size_t C = x.dim(1), inner = x.size() / (x.dim(0) * C);
      for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const T* p = g.data() + (n * C + c) * inner;
          T acc{0};
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          (*gin[1])[c] += acc;
        }
    }
  }
};

/// Euclidean norm of each slice along axis 0: [B, ...] -> [B].
template <class T>
class L2NormOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "l2_norm"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const std::size_t B = x.dim(0), row = x.size() / B;
    Tensor<T> y(Shape{B});
    for (std::size_t b = 0; b < B; ++b) {
      T acc{0};
      for (std::size_t i = 0; i < row; ++i) acc += x[b * row + i] * x[b * row + i];
      y[b] = std::sqrt(acc);
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& x = *in[0];
    const std::size_t B = x.dim(0), row = x.size() / B;
    for (std::size_t b = 0; b < B; ++b) {
      if (out[b] == T{0}) continue;
      const T s = g[b] / out[b];
      for (std::size_t i = 0; i < row; ++i) (*gin[0])[b * row + i] += s * x[b * row + i];
    }
  }
};

/// Parametric ReLU with one learnable slope per channel (axis 1).
template <class T>
class PReluOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "prelu"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& a = *in[1];
    if (x.rank() < 2 || a.size() != x.dim(1))
      throw ShapeError("prelu: slope " + to_string(a.shape) + " does not match channels of " +
                       to_string(x.shape));
    Tensor<T> y(x.shape);
    const std::size_t C = x.dim(1), inner = x.size() / (x.dim(0) * C);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T v = x[i];
      y[i] = v > 0 ? v : a[(i / inner) % C] * v;
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& a = *in[1];
    const std::size_t C = x.dim(1), inner = x.size() / (x.dim(0) * C);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t c = (i / inner) % C;
      const bool pos = x[i] > 0;
      if (gin[0]) (*gin[0])[i] += pos ? g[i] : a[c] * g[i];
      if (gin[1] && !pos) (*gin[1])[c] += g[i] * x[i];
    }
  }
};

/// Per-channel batch normalization over (batch, spatial) with affine
/// (gamma, beta). Training mode normalizes by batch statistics and updates
/// the running estimates; eval mode uses the running estimates.
template <class T>
class BatchNormOp final : public Op<T> {
 public:
  BatchNormOp(Tensor<T>* running_mean, Tensor<T>* running_var, T momentum = T(0.9),
              T eps = T(1e-5))
      : running_mean_(running_mean), running_var_(running_var), momentum_(momentum), eps_(eps) {}

  std::string_view kind() const override { return "batch_norm"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext& ctx) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& gamma = *in[1];
    const Tensor<T>& beta = *in[2];
    if (x.rank() < 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1))
      throw ShapeError("batch_norm: affine parameters do not match channels of " +
                       to_string(x.shape));
    const std::size_t N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
    const std::size_t count = N * inner;
    training_ = ctx.mode == Mode::train;
    if (training_ && count < 2)
      throw ShapeError("batch_norm: training mode needs more than one value per channel");
    mean_.assign(C, T{0});
    inv_std_.assign(C, T{0});
    xhat_ = Tensor<T>(x.shape);
    Tensor<T> y(x.shape);
    for (std::size_t c = 0; c < C; ++c) {
      T mean, var;
      if (training_) {
        double s = 0, ss = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = x.data.data() + (n * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) s += p[i];
        }
        mean = static_cast<T>(s / count);
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = x.data.data() + (n * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) ss += double(p[i] - mean) * double(p[i] - mean);
        }
        var = static_cast<T>(ss / count);
        if (running_mean_) {
          (*running_mean_)[c] = momentum_ * (*running_mean_)[c] + (T{1} - momentum_) * mean;
          (*running_var_)[c] = momentum_ * (*running_var_)[c] +
                               (T{1} - momentum_) * static_cast<T>(ss / (count - 1));
        }
      } else {
        if (!running_mean_) throw Error("batch_norm: eval mode requires running statistics");
        mean = (*running_mean_)[c];
        var = (*running_var_)[c];
      }
      mean_[c] = mean;
      inv_std_[c] = T{1} / std::sqrt(var + eps_);
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          const T h = (x[off + i] - mean) * inv_std_[c];
          xhat_[off + i] = h;
          y[off + i] = gamma[c] * h + beta[c];
        }
      }
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& gamma = *in[1];
    const std::size_t N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
    const T count = static_cast<T>(N * inner);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g{0}, sum_gh{0};
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          sum_g += g[off + i];
          sum_gh += g[off + i] * xhat_[off + i];
        }
      }
      if (gin[1]) (*gin[1])[c] += sum_gh;
      if (gin[2]) (*gin[2])[c] += sum_g;
      if (!gin[0]) continue;
      const T k = gamma[c] * inv_std_[c];
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          if (training_)
            (*gin[0])[off + i] +=
                k * (g[off + i] - sum_g / count - xhat_[off + i] * sum_gh / count);
          else
            (*gin[0])[off + i] += k * g[off + i];
        }
      }
    }
  }

 private:
  Tensor<T>* running_mean_;
  Tensor<T>* running_var_;
  T momentum_, eps_;
  bool training_ = true;
  std::vector<T> mean_, inv_std_;
  Tensor<T> xhat_;
};

/// Reparameterized draw z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).
/// eps comes from the node's counter-based key, so reruns reproduce it;
/// gradients reach mu and log_var, never eps.
template <class T>
class GaussianSampleOp final : public Op<T> {
 public:
  explicit GaussianSampleOp(bool sample = true) : sample_(sample) {}
  std::string_view kind() const override { return "gaussian_sample"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext& ctx) override {
    const Tensor<T>& mu = *in[0];
    const Tensor<T>& lv = *in[1];
    detail::require_same_shape(mu, lv, "gaussian_sample");
    epsilon_ = Tensor<T>(mu.shape);
    if (sample_) {
      const CounterRng rng(ctx.rng_key);
      for (std::size_t i = 0; i < mu.size(); ++i) epsilon_[i] = static_cast<T>(rng.normal(i));
    }
    Tensor<T> z(mu.shape);
    for (std::size_t i = 0; i < mu.size(); ++i)
      z[i] = mu[i] + std::exp(T{0.5} * lv[i]) * epsilon_[i];
    return z;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& lv = *in[1];
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1])
      for (std::size_t i = 0; i < g.size(); ++i)
        (*gin[1])[i] += g[i] * T{0.5} * std::exp(T{0.5} * lv[i]) * epsilon_[i];
  }

  const Tensor<T>& epsilon() const { return epsilon_; }

 private:
  bool sample_;
  Tensor<T> epsilon_;
};

// ---- builders -------------------------------------------------------------

template <class T, class OpT, class... Args>
Var<T> make(std::vector<Var<T>> inputs, Args&&... args) {
  Graph<T>& g = *inputs.front().graph;
  return g.apply(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(inputs));
}

template <class T> Var<T> add(Var<T> a, Var<T> b) { return make<T, detail::BinaryOp<T, detail::Binary::add>>({a, b}); }
template <class T> Var<T> sub(Var<T> a, Var<T> b) { return make<T, detail::BinaryOp<T, detail::Binary::sub>>({a, b}); }
template <class T> Var<T> mul(Var<T> a, Var<T> b) { return make<T, detail::BinaryOp<T, detail::Binary::mul>>({a, b}); }
template <class T> Var<T> div(Var<T> a, Var<T> b) { return make<T, detail::BinaryOp<T, detail::Binary::div>>({a, b}); }
template <class T> Var<T> scale(Var<T> a, std::type_identity_t<T> s) { return make<T, AffineScalarOp<T>>({a}, s, T{0}); }
template <class T> Var<T> affine(Var<T> a, std::type_identity_t<T> s, std::type_identity_t<T> shift) { return make<T, AffineScalarOp<T>>({a}, s, shift); }
template <class T> Var<T> add_scalar(Var<T> a, std::type_identity_t<T> shift) { return affine(a, T{1}, shift); }
template <class T> Var<T> matmul(Var<T> a, Var<T> b) { return make<T, MatMulOp<T>>({a, b}); }
template <class T> Var<T> bias_add(Var<T> x, Var<T> b) { return make<T, BiasAddOp<T>>({x, b}); }
template <class T> Var<T> square(Var<T> a) { return make<T, detail::UnaryOp<T, detail::SquareFn>>({a}); }
template <class T> Var<T> sqrt(Var<T> a) { return make<T, detail::UnaryOp<T, detail::SqrtFn>>({a}); }
template <class T> Var<T> log(Var<T> a) { return make<T, detail::UnaryOp<T, detail::LogFn>>({a}); }
template <class T> Var<T> exp(Var<T> a) { return make<T, detail::UnaryOp<T, detail::ExpFn>>({a}); }
template <class T> Var<T> abs(Var<T> a) { return make<T, detail::UnaryOp<T, detail::AbsFn>>({a}); }
template <class T> Var<T> sigmoid(Var<T> a) { return make<T, detail::UnaryOp<T, detail::SigmoidFn>>({a}); }
template <class T> Var<T> sum(Var<T> a) { return make<T, SumOp<T>>({a}, false); }
template <class T> Var<T> mean(Var<T> a) { return make<T, SumOp<T>>({a}, true); }
template <class T> Var<T> reshape(Var<T> a, Shape s) { return make<T, ReshapeOp<T>>({a}, std::move(s)); }
template <class T> Var<T> l2_norm(Var<T> a) { return make<T, L2NormOp<T>>({a}); }
template <class T> Var<T> prelu(Var<T> x, Var<T> slope) { return make<T, PReluOp<T>>({x, slope}); }

template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var) {
  return make<T, BatchNormOp<T>>({x, gamma, beta}, running_mean, running_var);
}

template <class T>
Var<T> gaussian_sample(Var<T> mu, Var<T> log_var, bool sample = true) {
  return make<T, GaussianSampleOp<T>>({mu, log_var}, sample);
}

template <class T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <class T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <class T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

}  // namespace jscc::ad
