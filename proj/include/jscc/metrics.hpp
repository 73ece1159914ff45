#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>

#include "jscc/autodiff/conv.hpp"

namespace jscc::metrics {

/// SSIM configuration. With exponents fixed at 1 and C3 = C2/2 the
/// contrast and structure terms collapse to (2σxy + C2) / (σx² + σy² + C2).
struct SsimParams {
  std::size_t window_size = 11;
  double window_sigma = 1.5;
  double dynamic_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  double c3() const { return c2() / 2; }

  void validate() const {
    if (window_size == 0 || window_size % 2 == 0) throw ValidationError("SSIM window size must be odd");
    if (!(window_sigma > 0) || !(dynamic_range > 0) || !(k1 > 0) || !(k2 > 0))
      throw ValidationError("SSIM sigma, dynamic range and K1/K2 must be positive");
  }
};

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Local SSIM values at every valid window position, [B, C, H-K+1, W-K+1].
template <class T>
ad::Var<T> ssim_map(ad::Var<T> x, ad::Var<T> y, const SsimParams& p = {}) {
  p.validate();
  if (x.shape() != y.shape())
    throw ShapeError("ssim: shapes " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  if (x.shape().size() != 4) throw ShapeError("ssim expects [B, C, H, W] images");
  if (x.shape()[2] < p.window_size || x.shape()[3] < p.window_size)
    throw ShapeError("ssim: window " + std::to_string(p.window_size) + " larger than image " +
                     std::to_string(x.shape()[2]) + "x" + std::to_string(x.shape()[3]) +
                     "; use a smaller window");
  const auto w64 = gaussian_window(p.window_size, p.window_sigma);
  const std::vector<T> w(w64.begin(), w64.end());
  const T c1 = static_cast<T>(p.c1()), c2 = static_cast<T>(p.c2());
  using namespace ad;
  auto mu_x = gaussian_filter(x, w);
  auto mu_y = gaussian_filter(y, w);
  auto mu_xx = mul(mu_x, mu_x);
  auto mu_yy = mul(mu_y, mu_y);
  auto mu_xy = mul(mu_x, mu_y);
  auto var_x = sub(gaussian_filter(mul(x, x), w), mu_xx);
  auto var_y = sub(gaussian_filter(mul(y, y), w), mu_yy);
  auto cov = sub(gaussian_filter(mul(x, y), w), mu_xy);
  auto luminance = div(affine(mu_xy, T{2}, c1), add_scalar(add(mu_xx, mu_yy), c1));
  auto contrast_structure = div(affine(cov, T{2}, c2), add_scalar(add(var_x, var_y), c2));
  return mul(luminance, contrast_structure);
}

/// Mean SSIM over channels and window positions (and batch), as a graph node.
template <class T>
ad::Var<T> ssim(ad::Var<T> x, ad::Var<T> y, const SsimParams& p = {}) {
  return ad::mean(ssim_map(x, y, p));
}

template <class T>
double ssim_value(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  ad::Graph<T> g(0, ad::Mode::eval);
  return ssim(g.input("x", x), g.input("y", y), p).value().item();
}

/// Mean SSIM of each image of a [B, C, H, W] batch.
template <class T>
std::vector<double> ssim_per_image(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  ad::Graph<T> g(0, ad::Mode::eval);
  const Tensor<T>& map = ssim_map(g.input("x", x), g.input("y", y), p).value();
  const std::size_t B = map.dim(0), per = map.size() / B;
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0;
    for (std::size_t i = 0; i < per; ++i) acc += map[b * per + i];
    out[b] = acc / per;
  }
  return out;
}

inline constexpr double kPsnrCapDb = 100.0;

inline double psnr_from_mse(double mse, double peak = 1.0) {
  if (mse <= 0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

template <class T>
double mse_value(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.shape != y.shape) throw ShapeError("mse: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
  return acc / x.size();
}

template <class T>
double mae_value(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.shape != y.shape) throw ShapeError("mae: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(double(x[i]) - y[i]);
  return acc / x.size();
}

template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& x_hat, double peak = 1.0) {
  if (!(peak > 0)) throw ValidationError("psnr peak must be positive");
  return psnr_from_mse(mse_value(x, x_hat), peak);
}

/// PSNR of each image of a batch.
template <class T>
std::vector<double> psnr_per_image(const Tensor<T>& x, const Tensor<T>& x_hat, double peak = 1.0) {
  if (x.shape != x_hat.shape) throw ShapeError("psnr: shape mismatch");
  const std::size_t B = x.dim(0), per = x.size() / B;
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = double(x[b * per + i]) - x_hat[b * per + i];
      acc += d * d;
    }
    out[b] = psnr_from_mse(acc / per, peak);
  }
  return out;
}

/// Differentiable pixel losses, mean-reduced over every element.
template <class T>
ad::Var<T> mse(ad::Var<T> x, ad::Var<T> x_hat) {
  return ad::mean(ad::square(ad::sub(x, x_hat)));
}

template <class T>
ad::Var<T> mae(ad::Var<T> x, ad::Var<T> x_hat) {
  return ad::mean(ad::abs(ad::sub(x, x_hat)));
}

struct PixelLosses {
  double mse;
  double mae;
};

template <class T>
PixelLosses pixel_losses(const Tensor<T>& x, const Tensor<T>& x_hat) {
  return {mse_value(x, x_hat), mae_value(x, x_hat)};
}

// ---- latent PCA diagnostic -------------------------------------------------

struct Histogram2D {
  std::size_t bins = 64;
  std::vector<double> x_edges, y_edges;
  std::vector<std::size_t> counts;  // row-major [row = y bin][col = x bin]

  std::size_t at(std::size_t row, std::size_t col) const { return counts[row * bins + col]; }
};

struct LatentPca {
  Eigen::MatrixXd components;        // 2 x d, orthonormal rows
  std::vector<double> eigenvalues;   // full spectrum, descending
  Eigen::MatrixXd projected;         // N x 2
  Histogram2D histogram;
};

/// Rows of `latents` are samples. Components follow eigenvalue-descending
/// order; each is signed so its first nonzero coordinate is positive.
inline LatentPca latent_pca_histogram(const Eigen::MatrixXd& latents, std::size_t bins = 64) {
  const Eigen::Index n = latents.rows(), d = latents.cols();
  if (n < 2) throw ValidationError("latent PCA needs at least 2 samples, got " + std::to_string(n));
  if (d < 2) throw ValidationError("latent PCA needs dimension >= 2");
  const Eigen::RowVectorXd mean = latents.colwise().mean();
  const Eigen::MatrixXd centered = latents.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("latent PCA: eigen-decomposition failed");

  LatentPca out;
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  for (Eigen::Index i = d; i-- > 0;) out.eigenvalues.push_back(evals(i));
  out.components.resize(2, d);
  for (int r = 0; r < 2; ++r) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - r);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (std::abs(v(j)) > 1e-12) {
        if (v(j) < 0) v = -v;
        break;
      }
    }
    out.components.row(r) = v.transpose();
  }
  out.projected = centered * out.components.transpose();

  Histogram2D& h = out.histogram;
  h.bins = bins;
  h.counts.assign(bins * bins, 0);
  auto edges = [&](Eigen::Index axis) {
    double lo = out.projected.col(axis).minCoeff(), hi = out.projected.col(axis).maxCoeff();
    if (!(hi > lo)) hi = lo + 1.0;
    std::vector<double> e(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * double(i) / double(bins);
    return e;
  };
  h.x_edges = edges(0);
  h.y_edges = edges(1);
  auto bin_of = [&](double v, const std::vector<double>& e) {
    const double t = (v - e.front()) / (e.back() - e.front());
    return std::min<std::size_t>(bins - 1, static_cast<std::size_t>(std::max(0.0, t * bins)));
  };
  for (Eigen::Index i = 0; i < n; ++i)
    ++h.counts[bin_of(out.projected(i, 1), h.y_edges) * bins + bin_of(out.projected(i, 0), h.x_edges)];
  return out;
}

/// Writes the nonzero bins as "row,col,count" CSV and a JSON sidecar with
/// bin edges and eigenvalues.
inline void write_histogram(const LatentPca& pca, const std::filesystem::path& csv_path,
                            const std::filesystem::path& json_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw Error("cannot write " + csv_path.string());
  csv << "row,col,count\n";
  const Histogram2D& h = pca.histogram;
  for (std::size_t r = 0; r < h.bins; ++r)
    for (std::size_t c = 0; c < h.bins; ++c)
      if (h.at(r, c)) csv << r << ',' << c << ',' << h.at(r, c) << '\n';

  nlohmann::json j;
  j["bins"] = h.bins;
  j["x_edges"] = h.x_edges;
  j["y_edges"] = h.y_edges;
  j["eigenvalues"] = pca.eigenvalues;
  j["samples"] = pca.projected.rows();
  std::ofstream js(json_path);
  if (!js) throw Error("cannot write " + json_path.string());
  js << std::setw(2) << j << '\n';
}

}  // namespace jscc::metrics
