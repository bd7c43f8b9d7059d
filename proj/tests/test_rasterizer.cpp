#include <gtest/gtest.h>

#include <random>

#include "partsplat/gradcheck.hpp"
#include "partsplat/rasterizer.hpp"
#include "test_util.hpp"

using namespace partsplat;

namespace {

// 17x17 camera at the origin looking down +z with pixel (8, 8) on the axis.
Camera axis_camera(double f = 20.0) {
  Camera cam;
  cam.fx = cam.fy = f;
  cam.width = cam.height = 17;
  cam.cx = cam.cy = 8.5;
  return cam;
}

GaussianSet random_scene(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GaussianSet gs(static_cast<std::size_t>(n));
  for (auto& x : gs) {
    x.mean = Vec3(0.6 * g(rng), 0.6 * g(rng), 0.6 * g(rng));
    x.rotation = detail::random_unit_quaternion(rng);
    x.scale = Vec3(0.01 + 0.1 * u(rng), 0.01 + 0.1 * u(rng), 0.01 + 0.1 * u(rng));
    x.opacity = 0.05 + 0.95 * u(rng);
    x.color = Vec3(u(rng), u(rng), u(rng));
  }
  return gs;
}

}  // namespace

TEST(Rasterizer, OnAxisProjectionCovariance) {
  const Camera cam = axis_camera(30.0);
  GaussianPrimitive g;
  g.mean = Vec3(0, 0, 2.5);
  g.scale = Vec3::Constant(0.05);
  const auto s = project_gaussian(cam, g);
  ASSERT_TRUE(s);
  const double v = std::pow(30.0 * 0.05 / 2.5, 2) + kLowPassDilation;
  EXPECT_NEAR(s->cov(0, 0), v, 1e-4);
  EXPECT_NEAR(s->cov(1, 1), v, 1e-4);
  EXPECT_NEAR(s->cov(0, 1), 0.0, 1e-12);
  EXPECT_EQ(s->mean, Vec2(8.5, 8.5));
  EXPECT_NEAR(s->radius, 3.0 * std::sqrt(v), 1e-12);
}

TEST(Rasterizer, BehindCameraIsCulled) {
  GaussianPrimitive g;
  g.mean = Vec3(0, 0, -1);
  EXPECT_FALSE(project_gaussian(axis_camera(), g));
}

TEST(Rasterizer, CovarianceMatchesNumericalJacobian) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 0.3);
  for (int i = 0; i < 30; ++i) {
    const Camera cam = fixtures::random_camera(rng);
    GaussianPrimitive g;
    g.mean = Vec3(0.3 * n(rng), 0.3 * n(rng), 0.3 * n(rng));
    g.rotation = detail::random_unit_quaternion(rng);
    g.scale = Vec3(u(rng), u(rng), u(rng));
    const auto s = detail::project_unculled(cam, g, 0);
    Eigen::Matrix<double, 2, 3> jac;
    constexpr double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 dp = Vec3::Zero();
      dp[k] = h;
      const auto a = project_point(cam, g.mean + dp), b = project_point(cam, g.mean - dp);
      jac(0, k) = (a.col - b.col) / (2 * h);
      jac(1, k) = (a.row - b.row) / (2 * h);
    }
    const Mat2 expected = jac * covariance_from(g.rotation, g.scale) * jac.transpose() + kLowPassDilation * Mat2::Identity();
    EXPECT_LT((s.cov - expected).cwiseAbs().maxCoeff() / expected.cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(Rasterizer, SingleSplatClippedBlend) {
  const Camera cam = axis_camera();
  GaussianPrimitive g;
  g.mean = Vec3(0, 0, 2);
  g.scale = Vec3::Constant(0.1);
  g.opacity = 1.0 - 1e-12;
  g.color = Vec3(0.2, 0.4, 0.8);
  const Vec3 bg(1.0, 0.5, 0.0);
  const auto out = rasterize_reference(cam, {g}, bg);
  for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.color(8, 8, ch), 0.99 * g.color[ch] + 0.01 * bg[ch], 1e-12);
  EXPECT_NEAR(out.alpha(8, 8), 0.99, 1e-12);
}

TEST(Rasterizer, EmptySceneIsBackground) {
  const auto out = rasterize_reference(axis_camera(), {}, Vec3(0.1, 0.2, 0.3));
  for (int r = 0; r < 17; ++r)
    for (int c = 0; c < 17; ++c) {
      EXPECT_EQ(out.color(r, c, 0), 0.1);
      EXPECT_EQ(out.color(r, c, 2), 0.3);
      EXPECT_EQ(out.alpha(r, c), 0.0);
    }
}

TEST(Rasterizer, TwoSplatBlend) {
  const Camera cam = axis_camera();
  GaussianPrimitive front, back;
  front.mean = Vec3(0, 0, 2);
  front.scale = Vec3::Constant(0.1);
  front.opacity = 0.6;
  front.color = Vec3(1, 0, 0);
  back = front;
  back.mean = Vec3(0, 0, 3);
  back.opacity = 0.5;
  back.color = Vec3(0, 0, 1);
  const auto out = rasterize_reference(cam, {back, front}, Vec3::Zero());
  EXPECT_NEAR(out.color(8, 8, 0), 0.6, 1e-12);
  EXPECT_NEAR(out.color(8, 8, 1), 0.0, 1e-12);
  EXPECT_NEAR(out.color(8, 8, 2), 0.2, 1e-12);
}

TEST(Rasterizer, AlphaProfileClosedForm) {
  const Camera cam = axis_camera(25.0);
  GaussianPrimitive g;
  g.mean = Vec3(0, 0, 2);
  g.scale = Vec3::Constant(0.08);
  g.opacity = 0.7;
  const auto out = rasterize_reference(cam, {g}, Vec3::Zero());
  const double var = std::pow(25.0 * 0.08 / 2.0, 2) + kLowPassDilation;
  for (int r = 0; r < 17; ++r)
    for (int c = 0; c < 17; ++c) {
      const double d2 = (r - 8) * (r - 8) + (c - 8) * (c - 8);
      double a = 0.7 * std::exp(-0.5 * d2 / var);
      const double reach = 3.0 * std::sqrt(var);  // square footprint test
      if (a < kAlphaMin || std::abs(r - 8) > reach || std::abs(c - 8) > reach) a = 0.0;
      EXPECT_NEAR(out.alpha(r, c), a, 1e-4);
    }
}

TEST(Rasterizer, TiledMatchesReference) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> size(8, 96), count(1, 300), tile(4, 32);
  for (int i = 0; i < 20; ++i) {
    Camera cam = look_at(Vec3(0, -3, 0.5), Vec3::Zero(), Vec3::UnitZ(), 60, 60, size(rng), size(rng));
    const auto gs = random_scene(rng, count(rng));
    const auto ref = rasterize_reference(cam, gs, Vec3(0.1, 0.2, 0.3));
    const auto tiled = rasterize_tiled(cam, gs, Vec3(0.1, 0.2, 0.3), tile(rng));
    double worst = 0.0;
    for (std::size_t k = 0; k < ref.color.size(); ++k)
      worst = std::max(worst, std::abs(ref.color.data()[k] - tiled.color.data()[k]));
    EXPECT_LE(worst, 1e-5);
    const auto single = rasterize_tiled(cam, gs, Vec3(0.1, 0.2, 0.3), std::max(cam.width, cam.height));
    EXPECT_EQ(single.color, ref.color);
  }
}

TEST(Rasterizer, BackwardZeroUpstream) {
  std::mt19937_64 rng(5);
  const Camera cam = look_at(Vec3(0, -3, 0), Vec3::Zero(), Vec3::UnitZ(), 20, 20, 16, 16);
  const auto gs = random_scene(rng, 8);
  const auto g = rasterize_backward_reference(cam, gs, Vec3::Zero(), Image(16, 16, 3, 0.0));
  for (const auto& x : g.gaussians) {
    EXPECT_TRUE(x.d_mean.isZero(0.0));
    EXPECT_TRUE(x.d_scale.isZero(0.0));
    EXPECT_EQ(x.d_opacity, 0.0);
  }
}

TEST(Rasterizer, OpacityGradientSign) {
  const Camera cam = axis_camera();
  GaussianPrimitive front, back;
  front.mean = Vec3(0, 0, 2);
  front.scale = Vec3::Constant(0.1);
  front.opacity = 0.5;
  front.color = Vec3(1, 0, 0);
  back = front;
  back.mean = Vec3(0, 0, 3);
  back.color = Vec3(0, 0, 1);
  const GaussianSet gs{front, back};
  const auto out = rasterize_reference(cam, gs, Vec3::Zero());
  // L = |C - red|^2 at the center pixel only.
  Image up(17, 17, 3, 0.0);
  for (int ch = 0; ch < 3; ++ch) up(8, 8, ch) = 2.0 * (out.color(8, 8, ch) - front.color[ch]);
  const auto g = rasterize_backward_reference(cam, gs, Vec3::Zero(), up);
  EXPECT_LT(g.gaussians[0].d_opacity, 0.0);
}

TEST(Rasterizer, FiniteDifferenceSuite) {
  GradcheckReport r;
  gradcheck_rasterizer(r);
  ASSERT_EQ(r.groups.size(), 5u);
  for (const auto& g : r.groups) EXPECT_LT(g.max_rel_error, 1e-3) << g.group;
}
