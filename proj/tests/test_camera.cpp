#include <gtest/gtest.h>

#include <random>

#include "partsplat/camera.hpp"
#include "test_util.hpp"

using namespace partsplat;

TEST(Camera, UnprojectIdentityIntrinsics) {
  Camera cam;
  cam.width = cam.height = 4;
  const Vec3 p = unproject_pixel(cam, {0, 0}, 2.0);
  EXPECT_DOUBLE_EQ(p.x(), 1.0);
  EXPECT_DOUBLE_EQ(p.y(), 1.0);
  EXPECT_DOUBLE_EQ(p.z(), 2.0);
}

TEST(Camera, OpticalAxisHitsPrincipalPoint) {
  Camera cam;
  cam.fx = cam.fy = 50.0;
  cam.width = 64;
  cam.height = 48;
  cam.cx = 32.0;
  cam.cy = 24.0;
  const auto pp = project_point(cam, Vec3(0.0, 0.0, 3.0));
  // Index convention: the image-plane point is (col + 0.5, row + 0.5).
  EXPECT_EQ(pp.col + 0.5, cam.cx);
  EXPECT_EQ(pp.row + 0.5, cam.cy);
  EXPECT_EQ(pp.depth, 3.0);
}

TEST(Camera, RoundTripRandomSamples) {
  std::mt19937_64 rng(11);
  double worst_px = 0.0, worst_depth = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Camera cam = fixtures::random_camera(rng);
    std::uniform_int_distribution<int> row(0, cam.height - 1), col(0, cam.width - 1);
    std::uniform_real_distribution<double> depth(0.2, 8.0);
    const PixelIndex px{row(rng), col(rng)};
    const double d = depth(rng);
    const auto back = project_point(cam, unproject_pixel(cam, px, d));
    worst_px = std::max({worst_px, std::abs(back.row - px.row), std::abs(back.col - px.col)});
    worst_depth = std::max(worst_depth, std::abs(back.depth - d));
  }
  EXPECT_LT(worst_px, 1e-4);
  EXPECT_LT(worst_depth, 1e-6);
}

TEST(Camera, BehindCameraIsRejected) {
  Camera cam;
  try {
    project_point(cam, Vec3(0.0, 0.0, -1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BehindCamera);
  }
}

TEST(Camera, InvalidInputs) {
  Camera cam;
  cam.width = cam.height = 4;
  EXPECT_THROW(unproject_pixel(cam, {0, 0}, 0.0), Error);
  EXPECT_THROW(unproject_pixel(cam, {4, 0}, 1.0), Error);
  cam.fx = -1.0;
  EXPECT_THROW(cam.validate(), Error);
  cam.fx = 1.0;
  cam.rotation(0, 0) = -1.0;  // reflection
  EXPECT_THROW(cam.validate(), Error);
}

TEST(Camera, GroundTruthDepthLiesOnSurface) {
  const Dataset& ds = fixtures::default_dataset();
  for (const auto& v : ds.views) {
    double worst = 0.0;
    int valid = 0;
    for (int r = 0; r < v.camera.height; ++r)
      for (int c = 0; c < v.camera.width; ++c) {
        if (!v.depth_gt.is_valid(r, c)) continue;
        ++valid;
        worst = std::max(worst, std::abs(scene_sdf(ds.scene, unproject_pixel(v.camera, {r, c}, v.depth_gt.values(r, c)))));
      }
    EXPECT_GT(valid, 0);
    EXPECT_LE(worst, 1e-4);
  }
}

TEST(Camera, UnprojectViewsAllInvalidIsEmpty) {
  Camera cam;
  cam.width = cam.height = 3;
  const std::vector<Camera> cams{cam};
  const std::vector<DepthMap> depths{DepthMap(3, 3)};
  const std::vector<FeatureGrid> sem{FeatureGrid(3, 3, 2, FeatureKind::Semantic)};
  const std::vector<FeatureGrid> lat{FeatureGrid(3, 3, 2, FeatureKind::Latent)};
  try {
    unproject_views(cams, depths, sem, lat);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
  }
}

TEST(Camera, IdenticalViewsCoincide) {
  const auto& v = fixtures::default_dataset().views[0];
  const std::vector<Camera> cams{v.camera, v.camera};
  const std::vector<DepthMap> depths{v.depth, v.depth};
  const std::vector<FeatureGrid> sem{v.semantic, v.semantic}, lat{v.latent, v.latent};
  const auto pts = unproject_views(cams, depths, sem, lat);
  ASSERT_EQ(pts.size() % 2, 0u);
  const std::size_t half = pts.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    EXPECT_LT((pts.positions[i] - pts.positions[i + half]).norm(), 1e-6);
    EXPECT_EQ(pts.view_id[i], 0);
    EXPECT_EQ(pts.view_id[i + half], 1);
  }
}

TEST(Camera, UnprojectViewsCountAndSurface) {
  const Dataset& ds = fixtures::default_dataset();
  std::vector<Camera> cams;
  std::vector<DepthMap> depths;
  std::vector<FeatureGrid> sem, lat;
  std::size_t foreground = 0;
  for (const auto& v : ds.views) {
    cams.push_back(v.camera);
    depths.push_back(v.depth_gt);
    sem.push_back(v.semantic);
    lat.push_back(v.latent);
    for (int r = 0; r < v.camera.height; ++r)
      for (int c = 0; c < v.camera.width; ++c) foreground += v.parts(r, c) >= 0;
  }
  const auto pts = unproject_views(cams, depths, sem, lat);
  EXPECT_EQ(pts.size(), foreground);
  const double coverage = static_cast<double>(pts.size()) / (4.0 * 64 * 64);
  EXPECT_GT(coverage, 0.10);
  EXPECT_LT(coverage, 0.5);
  double worst = 0.0;
  for (const auto& p : pts.positions) worst = std::max(worst, std::abs(scene_sdf(ds.scene, p)));
  EXPECT_LE(worst, 1e-4);
  // (view, pixel) pairs are unique.
  std::set<std::tuple<int, int, int>> seen;
  for (std::size_t i = 0; i < pts.size(); ++i) seen.insert({pts.view_id[i], pts.pixel[i].row, pts.pixel[i].col});
  EXPECT_EQ(seen.size(), pts.size());
}
