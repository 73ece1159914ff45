#pragma once

#include <Eigen/Core>
#include <memory>

#include "jscc/autodiff/ops.hpp"

namespace jscc::ad {

/// Sliding-window geometry of a 2-D convolution over a (C, H, W) image.
struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride = 1, padding = 0;

  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h() * out_w(); }

  void validate(std::string_view who) const {
    if (stride == 0) throw ShapeError(std::string(who) + ": stride must be >= 1");
    if (height + 2 * padding < kernel_h || width + 2 * padding < kernel_w)
      throw ShapeError(std::string(who) + ": kernel " + std::to_string(kernel_h) + "x" +
                       std::to_string(kernel_w) + " larger than padded input " +
                       std::to_string(height + 2 * padding) + "x" +
                       std::to_string(width + 2 * padding));
  }
};

namespace detail {

/// Unfolds a batch into columns: col[k, b*P + p], with k = (c, i, j) and p the output position.
template <class T>
void im2col(const T* x, std::size_t batch, const ConvGeometry& g, T* col) {
  const std::size_t Ho = g.out_h(), Wo = g.out_w(), P = Ho * Wo, BP = batch * P;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kernel_h; ++i)
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        T* row = col + ((c * g.kernel_h + i) * g.kernel_w + j) * BP;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* img = x + (b * g.channels + c) * g.height * g.width;
          T* dst = row + b * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t y = std::ptrdiff_t(oy * g.stride + i) - std::ptrdiff_t(g.padding);
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t xx =
                  std::ptrdiff_t(ox * g.stride + j) - std::ptrdiff_t(g.padding);
              dst[oy * Wo + ox] = (y >= 0 && y < std::ptrdiff_t(g.height) && xx >= 0 &&
                                   xx < std::ptrdiff_t(g.width))
                                      ? img[y * g.width + xx]
                                      : T{0};
            }
          }
        }
      }
}

/// Adjoint of im2col: scatters columns back, accumulating overlaps into x.
template <class T>
void col2im(const T* col, std::size_t batch, const ConvGeometry& g, T* x) {
  const std::size_t Ho = g.out_h(), Wo = g.out_w(), P = Ho * Wo, BP = batch * P;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kernel_h; ++i)
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const T* row = col + ((c * g.kernel_h + i) * g.kernel_w + j) * BP;
        for (std::size_t b = 0; b < batch; ++b) {
          T* img = x + (b * g.channels + c) * g.height * g.width;
          const T* src = row + b * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t y = std::ptrdiff_t(oy * g.stride + i) - std::ptrdiff_t(g.padding);
            if (y < 0 || y >= std::ptrdiff_t(g.height)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t xx =
                  std::ptrdiff_t(ox * g.stride + j) - std::ptrdiff_t(g.padding);
              if (xx >= 0 && xx < std::ptrdiff_t(g.width)) img[y * g.width + xx] += src[oy * Wo + ox];
            }
          }
        }
      }
}

/// [B, C, P] <-> [C, B*P]
template <class T>
void batch_to_channel_major(const T* x, std::size_t B, std::size_t C, std::size_t P, T* out) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(x + (b * C + c) * P, P, out + c * B * P + b * P);
}

template <class T>
void channel_major_to_batch(const T* x, std::size_t B, std::size_t C, std::size_t P, T* out,
                            bool accumulate) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = x + c * B * P + b * P;
      T* dst = out + (b * C + c) * P;
      if (accumulate)
        for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
      else
        std::copy_n(src, P, dst);
    }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// Cross-correlation, NCHW input, weight [Cout, Cin, kh, kw], zero padding.
template <class T>
class Conv2dOp final : public Op<T> {
  using Mat = detail::RowMat<T>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

 public:
  Conv2dOp(std::size_t stride, std::size_t padding) : stride_(stride), padding_(padding) {}
  std::string_view kind() const override { return "conv2d"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& w = *in[1];
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1))
      throw ShapeError("conv2d: input " + to_string(x.shape) + " incompatible with kernel " +
                       to_string(w.shape));
    geom_ = {x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride_, padding_};
    geom_.validate("conv2d");
    const std::size_t B = x.dim(0), Cout = w.dim(0), K = geom_.patch(), P = geom_.positions();
    col_.resize(K * B * P);
    detail::im2col(x.data.data(), B, geom_, col_.data());
    std::vector<T> y_cm(Cout * B * P);
    Map(y_cm.data(), Cout, B * P).noalias() =
        CMap(w.data.data(), Cout, K) * CMap(col_.data(), K, B * P);
    Tensor<T> y(Shape{B, Cout, geom_.out_h(), geom_.out_w()});
    detail::channel_major_to_batch(y_cm.data(), B, Cout, P, y.data.data(), false);
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& w = *in[1];
    const std::size_t B = x.dim(0), Cout = w.dim(0), K = geom_.patch(), P = geom_.positions();
    std::vector<T> g_cm(Cout * B * P);
    detail::batch_to_channel_major(g.data(), B, Cout, P, g_cm.data());
    CMap gy(g_cm.data(), Cout, B * P);
    if (gin[1]) Map(gin[1]->data(), Cout, K).noalias() += gy * CMap(col_.data(), K, B * P).transpose();
    if (gin[0]) {
      std::vector<T> dcol(K * B * P);
      Map(dcol.data(), K, B * P).noalias() = CMap(w.data.data(), Cout, K).transpose() * gy;
      detail::col2im(dcol.data(), B, geom_, gin[0]->data());
    }
  }

 private:
  std::size_t stride_, padding_;
  ConvGeometry geom_{};
  std::vector<T> col_;
};

/// Transposed convolution (adjoint of Conv2dOp with the same geometry),
/// weight [Cin, Cout, kh, kw]. Output size (H-1)*s - 2p + k + output_padding,
/// with a separate output_padding per spatial axis.
template <class T>
class ConvTranspose2dOp final : public Op<T> {
  using Mat = detail::RowMat<T>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

 public:
  ConvTranspose2dOp(std::size_t stride, std::size_t padding, std::size_t output_padding_h,
                    std::size_t output_padding_w)
      : stride_(stride), padding_(padding), op_h_(output_padding_h), op_w_(output_padding_w) {}
  std::string_view kind() const override { return "conv_transpose2d"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& w = *in[1];
    if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != x.dim(1))
      throw ShapeError("conv_transpose2d: input " + to_string(x.shape) +
                       " incompatible with kernel " + to_string(w.shape));
    if (stride_ == 0 || op_h_ >= stride_ || op_w_ >= stride_)
      throw ShapeError("conv_transpose2d: need stride >= 1 and output_padding < stride");
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::ptrdiff_t Ho = std::ptrdiff_t((H - 1) * stride_ + kh + op_h_) -
                              std::ptrdiff_t(2 * padding_);
    const std::ptrdiff_t Wo = std::ptrdiff_t((W - 1) * stride_ + kw + op_w_) -
                              std::ptrdiff_t(2 * padding_);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: empty output");
    geom_ = {Cout, std::size_t(Ho), std::size_t(Wo), kh, kw, stride_, padding_};
    geom_.validate("conv_transpose2d");
    const std::size_t P = H * W, K = geom_.patch();
    x_cm_.resize(Cin * B * P);
    detail::batch_to_channel_major(x.data.data(), B, Cin, P, x_cm_.data());
    std::vector<T> col(K * B * P);
    Map(col.data(), K, B * P).noalias() =
        CMap(w.data.data(), Cin, K).transpose() * CMap(x_cm_.data(), Cin, B * P);
    Tensor<T> y(Shape{B, Cout, geom_.height, geom_.width});
    detail::col2im(col.data(), B, geom_, y.data.data());
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& w = *in[1];
    const std::size_t B = x.dim(0), Cin = x.dim(1), P = x.dim(2) * x.dim(3), K = geom_.patch();
    std::vector<T> gcol(K * B * P);
    detail::im2col(g.data(), B, geom_, gcol.data());
    CMap gc(gcol.data(), K, B * P);
    if (gin[1]) Map(gin[1]->data(), Cin, K).noalias() += CMap(x_cm_.data(), Cin, B * P) * gc.transpose();
    if (gin[0]) {
      std::vector<T> dx_cm(Cin * B * P);
      Map(dx_cm.data(), Cin, B * P).noalias() = CMap(w.data.data(), Cin, K) * gc;
      detail::channel_major_to_batch(dx_cm.data(), B, Cin, P, gin[0]->data(), true);
    }
  }

 private:
  std::size_t stride_, padding_, op_h_, op_w_;
  ConvGeometry geom_{};
  std::vector<T> x_cm_;
};

/// Depthwise valid-mode filtering of every (batch, channel) plane with the
/// separable window w ⊗ w. [B, C, H, W] -> [B, C, H-K+1, W-K+1].
template <class T>
class GaussianFilterOp final : public Op<T> {
 public:
  explicit GaussianFilterOp(std::vector<T> window) : w_(std::move(window)) {}
  std::string_view kind() const override { return "gaussian_filter"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ExecContext&) override {
    const Tensor<T>& x = *in[0];
    const std::size_t K = w_.size();
    if (x.rank() != 4 || x.dim(2) < K || x.dim(3) < K)
      throw ShapeError("gaussian_filter: window of size " + std::to_string(K) +
                       " does not fit input " + to_string(x.shape) + "; use a smaller window");
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H - K + 1, Wo = W - K + 1;
    Tensor<T> y(Shape{x.dim(0), x.dim(1), Ho, Wo});
    std::vector<T> tmp(H * Wo);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = x.data.data() + p * H * W;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < Wo; ++c) {
          T acc{0};
          for (std::size_t k = 0; k < K; ++k) acc += w_[k] * src[r * W + c + k];
          tmp[r * Wo + c] = acc;
        }
      T* dst = y.data.data() + p * Ho * Wo;
      for (std::size_t r = 0; r < Ho; ++r)
        for (std::size_t c = 0; c < Wo; ++c) {
          T acc{0};
          for (std::size_t k = 0; k < K; ++k) acc += w_[k] * tmp[(r + k) * Wo + c];
          dst[r * Wo + c] = acc;
        }
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& x = *in[0];
    const std::size_t K = w_.size();
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H - K + 1, Wo = W - K + 1;
    std::vector<T> tmp(H * Wo);
    for (std::size_t p = 0; p < planes; ++p) {
      std::fill(tmp.begin(), tmp.end(), T{0});
      const T* gy = g.data() + p * Ho * Wo;
      for (std::size_t r = 0; r < Ho; ++r)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t c = 0; c < Wo; ++c) tmp[(r + k) * Wo + c] += w_[k] * gy[r * Wo + c];
      T* gx = gin[0]->data() + p * H * W;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < Wo; ++c)
          for (std::size_t k = 0; k < K; ++k) gx[r * W + c + k] += w_[k] * tmp[r * Wo + c];
    }
  }

  const std::vector<T>& window() const { return w_; }

 private:
  std::vector<T> w_;
};

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride = 1, std::size_t padding = 0) {
  return make<T, Conv2dOp<T>>({x, w}, stride, padding);
}

template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, std::size_t stride = 1, std::size_t padding = 0,
                        std::size_t output_padding = 0) {
  return make<T, ConvTranspose2dOp<T>>({x, w}, stride, padding, output_padding, output_padding);
}

template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t padding, std::size_t output_padding_h,
                        std::size_t output_padding_w) {
  return make<T, ConvTranspose2dOp<T>>({x, w}, stride, padding, output_padding_h, output_padding_w);
}

template <class T>
Var<T> gaussian_filter(Var<T> x, std::vector<T> window) {
  return make<T, GaussianFilterOp<T>>({x}, std::move(window));
}

}  // namespace jscc::ad
