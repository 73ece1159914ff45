#pragma once

#include <optional>

#include "jscc/metrics.hpp"

namespace jscc::losses {

enum class Reconstruction { mse, mixed_ssim_l1 };

struct LossConfig {
  Reconstruction reconstruction = Reconstruction::mse;
  double alpha = 0.5;
  double beta_kl = 1e-3;
  metrics::SsimParams ssim{};

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw ValidationError("loss alpha must lie in [0, 1]");
    if (!(beta_kl >= 0)) throw ValidationError("loss beta_kl must be >= 0");
  }
};

inline std::string to_string(Reconstruction r) {
  return r == Reconstruction::mse ? "mse" : "mixed";
}

inline Reconstruction reconstruction_from_string(const std::string& s) {
  if (s == "mse") return Reconstruction::mse;
  if (s == "mixed" || s == "mixed_ssim_l1") return Reconstruction::mixed_ssim_l1;
  throw ValidationError("unknown reconstruction loss '" + s + "' (expected mse or mixed)");
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I)): summed over latent dims,
/// averaged over the batch (axis 0).
template <class T>
ad::Var<T> kl_divergence(ad::Var<T> mu, ad::Var<T> log_var) {
  if (mu.shape() != log_var.shape())
    throw ShapeError("kl_divergence: mu " + jscc::to_string(mu.shape()) + " vs log_var " +
                     jscc::to_string(log_var.shape()));
  using namespace ad;
  const std::size_t batch = mu.shape().empty() ? 1 : mu.shape()[0];
  auto terms = sub(add(square(mu), exp(log_var)), add_scalar(log_var, T{1}));
  return scale(sum(terms), static_cast<T>(0.5 / double(batch)));
}

/// alpha·(1 − SSIM) + (1 − alpha)·MAE
template <class T>
ad::Var<T> mixed_loss(ad::Var<T> x, ad::Var<T> x_hat, double alpha,
                      const metrics::SsimParams& params = {}) {
  if (!(alpha >= 0 && alpha <= 1)) throw ValidationError("mixed loss alpha must lie in [0, 1]");
  using namespace ad;
  auto l1 = metrics::mae(x, x_hat);
  if (alpha == 0) return l1;
  auto ssim_term = affine(metrics::ssim(x, x_hat, params), T{-1}, T{1});
  if (alpha == 1) return ssim_term;
  return add(scale(ssim_term, static_cast<T>(alpha)), scale(l1, static_cast<T>(1 - alpha)));
}

template <class T>
ad::Var<T> reconstruction_loss(ad::Var<T> x, ad::Var<T> x_hat, const LossConfig& cfg) {
  if (cfg.reconstruction == Reconstruction::mse) return metrics::mse(x, x_hat);
  return mixed_loss(x, x_hat, cfg.alpha, cfg.ssim);
}

template <class T>
struct LatentVars {
  ad::Var<T> mu;
  ad::Var<T> log_var;
};

/// Reconstruction term plus beta_kl · KL. `latent` must be present.
template <class T>
ad::Var<T> vae_loss(ad::Var<T> x, ad::Var<T> x_hat, const std::optional<LatentVars<T>>& latent,
                    const LossConfig& cfg) {
  cfg.validate();
  if (!latent) throw ValidationError("vae_loss requires sampler outputs (mu, log_var)");
  auto rec = reconstruction_loss(x, x_hat, cfg);
  if (cfg.beta_kl == 0) return rec;
  return ad::add(rec, ad::scale(kl_divergence(latent->mu, latent->log_var),
                                static_cast<T>(cfg.beta_kl)));
}

}  // namespace jscc::losses
