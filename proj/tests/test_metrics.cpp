#include <gtest/gtest.h>

#include "jscc/gradcheck.hpp"
#include "jscc/metrics.hpp"

using namespace jscc;
using namespace jscc::metrics;

namespace {

Tensor<double> random_images(Shape s, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor<double> t(std::move(s));
  for (double& v : t.data) v = rng.uniform();
  return t;
}

// Brute-force SSIM: every valid window position, full 2-D Gaussian weights,
// separate l, c, s terms with square roots, C3 = C2/2.
double naive_ssim(const Tensor<double>& x, const Tensor<double>& y, const SsimParams& p = {}) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = p.window_size;
  const auto g = gaussian_window(K, p.window_sigma);
  const double c1 = p.c1(), c2 = p.c2(), c3 = p.c3();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r + K <= H; ++r)
        for (std::size_t q = 0; q + K <= W; ++q) {
          double mx = 0, my = 0;
          for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < K; ++j) {
              const std::size_t at = ((b * C + c) * H + r + i) * W + q + j;
              mx += g[i] * g[j] * x[at];
              my += g[i] * g[j] * y[at];
            }
          double vx = 0, vy = 0, cxy = 0;
          for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < K; ++j) {
              const std::size_t at = ((b * C + c) * H + r + i) * W + q + j;
              vx += g[i] * g[j] * (x[at] - mx) * (x[at] - mx);
              vy += g[i] * g[j] * (y[at] - my) * (y[at] - my);
              cxy += g[i] * g[j] * (x[at] - mx) * (y[at] - my);
            }
          const double sx = std::sqrt(vx), sy = std::sqrt(vy);
          const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
          const double con = (2 * sx * sy + c2) / (vx + vy + c2);
          const double s = (cxy + c3) / (sx * sy + c3);
          total += l * con * s;
          ++count;
        }
  return total / double(count);
}

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; columns of V
// are eigenvectors.
void jacobi_eigen(std::vector<std::vector<double>> A, std::vector<double>& evals,
                  std::vector<std::vector<double>>& V) {
  const std::size_t n = A.size();
  V.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) V[i][i] = 1;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A[p][q] * A[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(A[p][q]) < 1e-300) continue;
        const double theta = (A[q][q] - A[p][p]) / (2 * A[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A[k][p], akq = A[k][q];
          A[k][p] = c * akp - s * akq;
          A[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A[p][k], aqk = A[q][k];
          A[p][k] = c * apk - s * aqk;
          A[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = V[k][p], vkq = V[k][q];
          V[k][p] = c * vkp - s * vkq;
          V[k][q] = s * vkp + c * vkq;
        }
      }
  }
  evals.resize(n);
  for (std::size_t i = 0; i < n; ++i) evals[i] = A[i][i];
}

}  // namespace

TEST(Ssim, MatchesNaiveOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = random_images({1, 3, 32, 32}, 2 * s), y = random_images({1, 3, 32, 32}, 2 * s + 1);
    EXPECT_NEAR(ssim_value(x, y), naive_ssim(x, y), 1e-6);
  }
  // Correlated pair, where the structure term dominates.
  auto x = random_images({2, 3, 20, 24}, 99);
  auto y = x;
  RngStream rng(3);
  for (double& v : y.data) v = std::clamp(v + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  EXPECT_NEAR(ssim_value(x, y), naive_ssim(x, y), 1e-6);
}

TEST(Ssim, IdentitySymmetryAndBounds) {
  const auto x = random_images({2, 3, 32, 32}, 7), y = random_images({2, 3, 32, 32}, 8);
  EXPECT_EQ(ssim_value(x, x), 1.0);
  EXPECT_EQ(ssim_value(x, y), ssim_value(y, x));
  EXPECT_LE(std::abs(ssim_value(x, y)), 1.0);
  const auto xf = x.cast<float>();
  EXPECT_EQ(ssim_value(xf, xf), 1.0);
}

TEST(Ssim, ConstantImages) {
  const Tensor<double> zero({1, 3, 16, 16}, 0.0), one({1, 3, 16, 16}, 1.0);
  const double c1 = SsimParams{}.c1();
  EXPECT_NEAR(ssim_value(zero, one), c1 / (1 + c1), 1e-12);
  EXPECT_NEAR(ssim_value(zero, one), 9.999e-5, 1e-8);
}

TEST(Ssim, ContrastStructureShiftInvariant) {
  // With equal luminance factors the shift only touches l; check through
  // the naive decomposition: c and s use centered statistics.
  const auto x = random_images({1, 1, 16, 16}, 1), y = random_images({1, 1, 16, 16}, 2);
  auto xs = x, ys = y;
  for (double& v : xs.data) v += 0.25;
  for (double& v : ys.data) v += 0.25;
  SsimParams huge_c1;
  huge_c1.k1 = 1e6;  // l -> 1, leaving c·s
  EXPECT_NEAR(ssim_value(x, y, huge_c1), ssim_value(xs, ys, huge_c1), 1e-9);
}

TEST(Ssim, Errors) {
  ad::Graph<double> g;
  auto a = g.input("a", Tensor<double>({1, 1, 8, 8}));
  auto b = g.input("b", Tensor<double>({1, 1, 8, 9}));
  EXPECT_THROW(ssim(a, b), ShapeError);
  try {
    ssim(a, a);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("smaller window"), std::string::npos);
  }
}

TEST(Ssim, Gradient) {
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_LT(ad::gradcheck("ssim_loss", {}, s).worst(), 1e-4);
}

TEST(Psnr, Examples) {
  EXPECT_NEAR(psnr_from_mse(0.01), 20.0, 1e-12);
  const Tensor<double> x({2}, {0, 0}), y({2}, {0.1, 0.3});
  EXPECT_NEAR(psnr(x, y), 13.0103, 1e-4);
  EXPECT_EQ(psnr(x, x), 100.0);
  double prev = 1e9;
  for (double m = 1e-6; m < 1; m *= 1.5) {
    EXPECT_LT(psnr_from_mse(m), prev);
    prev = psnr_from_mse(m);
  }
}

TEST(PixelLosses, Examples) {
  const Tensor<double> x({2}, {0, 1}), y({2}, {1, 1});
  EXPECT_EQ(pixel_losses(x, x).mse, 0.0);
  EXPECT_EQ(pixel_losses(x, x).mae, 0.0);
  EXPECT_DOUBLE_EQ(pixel_losses(x, y).mse, 0.5);
  EXPECT_DOUBLE_EQ(pixel_losses(x, y).mae, 0.5);
}

TEST(PixelLosses, MaeSubgradientSigns) {
  ad::Graph<double> g;
  auto x = g.input("x", Tensor<double>({2}, {0.5, 0.5}));
  auto xh = g.input("xh", Tensor<double>({2}, {0.3, 0.8}), true);
  g.backward(mae(x, xh));
  EXPECT_DOUBLE_EQ(g.grad(xh)[0], -0.5);
  EXPECT_DOUBLE_EQ(g.grad(xh)[1], 0.5);
}

TEST(LatentPca, AxisAligned) {
  RngStream rng(4);
  Eigen::MatrixXd data(4000, 5);
  data.setZero();
  // Mirrored pairs (a, b), (a, -b) make the sample cross-covariance exactly zero.
  for (Eigen::Index i = 0; i < data.rows(); i += 2) {
    const double a = 2 * rng.normal(), b = rng.normal();
    data(i, 0) = data(i + 1, 0) = a;
    data(i, 1) = b;
    data(i + 1, 1) = -b;
  }
  const auto pca = latent_pca_histogram(data);
  EXPECT_NEAR(std::abs(pca.components(0, 0)), 1, 1e-6);
  EXPECT_NEAR(std::abs(pca.components(1, 1)), 1, 1e-6);
  EXPECT_NEAR(pca.eigenvalues[0], 4, 0.3);
  EXPECT_NEAR(pca.eigenvalues[1], 1, 0.1);
}

TEST(LatentPca, IsotropicEigenvaluesEqual) {
  RngStream rng(5);
  Eigen::MatrixXd data(20000, 2);
  for (Eigen::Index i = 0; i < data.rows(); ++i) data(i, 0) = rng.normal(), data(i, 1) = rng.normal();
  const auto pca = latent_pca_histogram(data);
  EXPECT_NEAR(pca.eigenvalues[0], pca.eigenvalues[1], 0.05);
}

TEST(LatentPca, MatchesJacobiOracle) {
  RngStream rng(6);
  Eigen::MatrixXd data(50, 10);
  for (Eigen::Index i = 0; i < 50; ++i)
    for (Eigen::Index j = 0; j < 10; ++j) data(i, j) = rng.normal() * (1.0 + j);
  const auto pca = latent_pca_histogram(data);

  const Eigen::RowVectorXd mean = data.colwise().mean();
  std::vector<std::vector<double>> cov(10, std::vector<double>(10, 0.0));
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b) {
      for (int i = 0; i < 50; ++i) cov[a][b] += (data(i, a) - mean(a)) * (data(i, b) - mean(b));
      cov[a][b] /= 49;
    }
  std::vector<double> evals;
  std::vector<std::vector<double>> V;
  jacobi_eigen(cov, evals, V);
  std::vector<std::size_t> order(10);
  for (std::size_t i = 0; i < 10; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return evals[a] > evals[b]; });
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(pca.eigenvalues[i], evals[order[i]], 1e-8);
  for (int r = 0; r < 2; ++r) {
    double dot = 0;
    for (int j = 0; j < 10; ++j) dot += pca.components(r, j) * V[j][order[r]];
    EXPECT_NEAR(std::abs(dot), 1.0, 1e-8);
  }
  // Orthonormal rows; projected variance equals the eigenvalue.
  EXPECT_NEAR(pca.components.row(0).dot(pca.components.row(1)), 0, 1e-8);
  EXPECT_NEAR(pca.components.row(0).norm(), 1, 1e-8);
  for (int r = 0; r < 2; ++r) {
    const double var = pca.projected.col(r).squaredNorm() / 49;
    EXPECT_NEAR(var, pca.eigenvalues[r], 1e-6);
  }
}

TEST(LatentPca, HistogramAndErrors) {
  Eigen::MatrixXd dup(6, 4);
  for (int i = 0; i < 6; ++i) dup.row(i) << 1, 2, 3, 4;
  const auto pca = latent_pca_histogram(dup);
  std::size_t nonzero = 0, total = 0;
  for (auto c : pca.histogram.counts) nonzero += c > 0, total += c;
  EXPECT_EQ(nonzero, 1u);
  EXPECT_EQ(total, 6u);
  EXPECT_THROW(latent_pca_histogram(Eigen::MatrixXd(1, 4)), ValidationError);
}
