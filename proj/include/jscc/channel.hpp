#pragma once

#include <cmath>
#include <limits>

#include "jscc/autodiff/ops.hpp"

namespace jscc::channel {

/// P / sigma^2 in dB -> complex-noise variance sigma^2. +inf dB maps to 0.
inline double snr_to_sigma2(double snr_db, double power = 1.0) {
  if (!(power > 0)) throw ValidationError("channel power must be positive");
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw ValidationError("snr_db must be a number or +inf");
  if (snr_db == std::numeric_limits<double>::infinity()) return 0.0;
  return power / std::pow(10.0, snr_db / 10.0);
}

inline double sigma2_to_snr(double sigma2, double power = 1.0) {
  if (!(power > 0)) throw ValidationError("channel power must be positive");
  if (!(sigma2 > 0)) throw ValidationError("noise variance must be positive");
  return 10.0 * std::log10(power / sigma2);
}

/// Average-power budget and noise level of the simulated link.
/// `k` counts complex channel uses per image; symbols travel as 2k reals
/// with real and imaginary parts interleaved.
struct ChannelConfig {
  double power = 1.0;
  double snr_db = 10.0;
  std::size_t k = 1;

  double sigma2() const { return snr_to_sigma2(snr_db, power); }

  void validate() const {
    if (!(power > 0)) throw ValidationError("channel power must be positive");
    if (k < 1) throw ValidationError("channel k must be >= 1");
    (void)sigma2();
  }
};

/// Scales each batch row onto the sphere where (1/k)·Σz² = P.
template <class T>
class PowerNormalizeOp final : public ad::Op<T> {
 public:
  PowerNormalizeOp(std::size_t k, double power) : k_(k), power_(power) {}
  std::string_view kind() const override { return "normalize_power"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ad::ExecContext&) override {
    const Tensor<T>& z = *in[0];
    if (z.rank() < 1 || z.size() / z.dim(0) != 2 * k_)
      throw ShapeError("normalize_power: each row must hold 2k = " + std::to_string(2 * k_) +
                       " reals, got shape " + to_string(z.shape));
    const std::size_t B = z.dim(0), row = 2 * k_;
    const double target = std::sqrt(double(k_) * power_);
    norms_.assign(B, 0.0);
    Tensor<T> y(z.shape);
    for (std::size_t b = 0; b < B; ++b) {
      double acc = 0;
      for (std::size_t i = 0; i < row; ++i) acc += double(z[b * row + i]) * double(z[b * row + i]);
      const double n = std::sqrt(acc);
      if (n < 1e-12) throw NumericError("degenerate latent: norm below 1e-12 in row " + std::to_string(b));
      norms_[b] = n;
      const double s = target / n;
      for (std::size_t i = 0; i < row; ++i) y[b * row + i] = static_cast<T>(s * z[b * row + i]);
    }
    return y;
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& z = *in[0];
    const std::size_t B = z.dim(0), row = 2 * k_;
    const double target = std::sqrt(double(k_) * power_);
    for (std::size_t b = 0; b < B; ++b) {
      const double n = norms_[b];
      double ug = 0;
      for (std::size_t i = 0; i < row; ++i) ug += double(z[b * row + i]) * g[b * row + i];
      ug /= n;
      const double s = target / n;
      for (std::size_t i = 0; i < row; ++i)
        (*gin[0])[b * row + i] += static_cast<T>(s * (g[b * row + i] - z[b * row + i] / n * ug));
    }
  }

 private:
  std::size_t k_;
  double power_;
  std::vector<double> norms_;
};

/// Adds N(0, sigma2/2) to every real component, i.e. sigma2 per complex
/// symbol. Noise is keyed on the node, so it is fresh per graph seed and
/// reproducible on rerun. Gradient is the identity.
template <class T>
class AwgnOp final : public ad::Op<T> {
 public:
  explicit AwgnOp(double sigma2) : sigma2_(sigma2) {}
  std::string_view kind() const override { return "awgn"; }

  Tensor<T> forward(std::span<const Tensor<T>* const> in, const ad::ExecContext& ctx) override {
    Tensor<T> y = *in[0];
    if (sigma2_ == 0) return y;
    const double sd = std::sqrt(sigma2_ / 2);
    const CounterRng rng(ctx.rng_key);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += static_cast<T>(sd * rng.normal(i));
    return y;
  }

  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, std::span<const T> g,
                std::span<std::vector<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  }

 private:
  double sigma2_;
};

template <class T>
ad::Var<T> normalize_power(ad::Var<T> z_s, const ChannelConfig& cfg) {
  return ad::make<T, PowerNormalizeOp<T>>({z_s}, cfg.k, cfg.power);
}

template <class T>
ad::Var<T> awgn(ad::Var<T> z, const ChannelConfig& cfg) {
  return ad::make<T, AwgnOp<T>>({z}, cfg.sigma2());
}

/// Tensor-level convenience: [B, 2k] symbols in, power-normalized symbols out.
template <class T>
Tensor<T> normalize_power(const Tensor<T>& z_s, const ChannelConfig& cfg) {
  ad::Graph<T> g;
  return normalize_power(g.input("z_s", z_s), cfg).value();
}

template <class T>
Tensor<T> awgn_apply(const Tensor<T>& z, const ChannelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (z.size() % 2 != 0) throw ShapeError("channel symbols must have even length");
  ad::Graph<T> g(seed);
  return awgn(g.input("z", z), cfg).value();
}

/// Mean per-complex-symbol power (1/k)·Σz² of each batch row.
template <class T>
std::vector<double> row_power(const Tensor<T>& z) {
  const std::size_t B = z.dim(0), row = z.size() / B;
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0;
    for (std::size_t i = 0; i < row; ++i) acc += double(z[b * row + i]) * double(z[b * row + i]);
    out[b] = acc / (row / 2.0);
  }
  return out;
}

}  // namespace jscc::channel
