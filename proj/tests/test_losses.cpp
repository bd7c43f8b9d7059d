#include <gtest/gtest.h>

#include <random>

#include "partsplat/gradcheck.hpp"
#include "partsplat/losses.hpp"
#include "test_util.hpp"

using namespace partsplat;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, 3);
  for (double& x : img.data()) x = u(rng);
  return img;
}

std::vector<Vec3> random_cloud(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> out(static_cast<std::size_t>(n));
  for (auto& p : out) p = Vec3(g(rng), g(rng), g(rng));
  return out;
}

}  // namespace

TEST(Losses, L1Examples) {
  const Image a = random_image(8, 9, 1);
  EXPECT_EQ(l1_loss(a, a).value, 0.0);
  Image b(8, 9, 3, 0.1), c(8, 9, 3, 0.6);
  EXPECT_NEAR(l1_loss(c, b).value, 0.5, 1e-15);
}

TEST(Losses, L1MatchesLoop) {
  const Image a = random_image(12, 10, 2), b = random_image(12, 10, 3);
  double s = 0.0;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 10; ++c)
      for (int ch = 0; ch < 3; ++ch) s += std::abs(a(r, c, ch) - b(r, c, ch));
  EXPECT_NEAR(l1_loss(a, b).value, s / 360.0, 1e-7);
}

TEST(Losses, ShapeMismatch) {
  EXPECT_THROW(l1_loss(Image(4, 4, 3), Image(4, 5, 3)), Error);
  EXPECT_THROW(ssim(Image(16, 16, 3), Image(16, 16, 1)), Error);
  EXPECT_THROW(psnr(Image(4, 4, 3), Image(5, 4, 3)), Error);
}

TEST(Losses, SsimIdentical) {
  const Image a = random_image(20, 17, 4);
  EXPECT_NEAR(ssim(a, a).value, 1.0, 1e-9);
}

TEST(Losses, SsimConstantImages) {
  const Image a(16, 16, 3, 0.0), b(16, 16, 3, 1.0);
  EXPECT_NEAR(ssim(a, b).value, kSsimC1 / (1.0 + kSsimC1), 1e-12);
  EXPECT_NEAR(ssim(a, b).value, 9.999e-5, 1e-8);
}

TEST(Losses, SsimTooSmall) { EXPECT_THROW(ssim(Image(10, 16, 3), Image(10, 16, 3)), Error); }

TEST(Losses, RenderLossExamples) {
  const Image a = random_image(16, 16, 5), b = random_image(16, 16, 6);
  EXPECT_EQ(render_loss(a, a).value, 0.0);
  const LossWeights w;
  EXPECT_EQ(w.lambda_l1, 0.8);
  EXPECT_EQ(w.lambda_ssim, 0.2);
  EXPECT_EQ(w.lambda_geom, 1.0);
  EXPECT_EQ(render_loss(a, b).value, 0.8 * l1_loss(a, b).value + 0.2 * (1.0 - ssim(a, b).value));
  // L1 = 0.5 with SSIM = 1 gives 0.4 under the default weights.
  EXPECT_NEAR(w.lambda_l1 * 0.5 + w.lambda_ssim * (1.0 - 1.0), 0.4, 1e-15);
}

TEST(Losses, ChamferExamples) {
  const auto p = random_cloud(30, 7);
  EXPECT_EQ(chamfer(p, p).value, 0.0);
  EXPECT_EQ(chamfer({Vec3(0, 0, 0)}, {Vec3(1, 0, 0)}).value, 2.0);
  EXPECT_THROW(chamfer({}, p), Error);
}

TEST(Losses, ChamferMatchesBruteForce) {
  const auto p = random_cloud(200, 8), v = random_cloud(300, 9);
  double fwd = 0.0, bwd = 0.0;
  for (const auto& a : p) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : v) best = std::min(best, (a - b).squaredNorm());
    fwd += best;
  }
  for (const auto& b : v) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& a : p) best = std::min(best, (a - b).squaredNorm());
    bwd += best;
  }
  EXPECT_NEAR(chamfer(p, v).value, fwd / 200.0 + bwd / 300.0, 1e-7);
}

TEST(Losses, TotalLoss) {
  EXPECT_EQ(total_loss(0.0, 0.0), 0.0);
  EXPECT_NEAR(total_loss(0.3, 0.1), 0.4, 1e-15);
}

TEST(Losses, TotalLossOnSyntheticPass) {
  const Dataset& ds = fixtures::default_dataset();
  PipelineConfig cfg;
  const auto run = run_pipeline(ds, cfg);
  double render = 0.0;
  for (std::size_t i = 0; i < ds.heldout.size(); ++i)
    render += render_loss(run.renders[i], ds.heldout[i].rgb).value / static_cast<double>(ds.heldout.size());
  const double geom = chamfer(gaussian_means(run.forward.gaussians), ds.scene.surface_samples).value;
  EXPECT_NEAR(run.metrics.render_loss, render, 1e-12);
  EXPECT_EQ(run.metrics.chamfer, geom);
  EXPECT_EQ(run.metrics.total_loss, run.metrics.render_loss + geom);
}

TEST(Losses, PsnrExamples) {
  const Image a = random_image(8, 8, 10);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  Image b(8, 8, 3, 0.3), c(8, 8, 3, 0.4);
  EXPECT_NEAR(psnr(b, c), 20.0, 1e-9);
}

TEST(Losses, PsnrMatchesLoop) {
  const Image a = random_image(9, 11, 11), b = random_image(9, 11, 12);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += std::pow(a.data()[i] - b.data()[i], 2);
  mse /= static_cast<double>(a.size());
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / mse), 1e-6);
}

TEST(Losses, FiniteDifferenceSuite) {
  GradcheckReport r;
  gradcheck_losses(r);
  ASSERT_EQ(r.groups.size(), 4u);
  for (const auto& g : r.groups) EXPECT_LT(g.max_rel_error, 1e-4) << g.group;
}
