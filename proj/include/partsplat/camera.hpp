#pragma once

#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partsplat/types.hpp"

namespace partsplat {

/// Pinhole camera. `rotation`/`translation` form the world-from-camera pose;
/// camera axes follow the x-right, y-down, z-forward convention.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate() const {
    require(fx > 0.0 && fy > 0.0, ErrorKind::InvalidInput, "focal lengths must be positive");
    require(width >= 1 && height >= 1, ErrorKind::InvalidInput, "image size must be at least 1x1");
    require(rotation.allFinite() && translation.allFinite(), ErrorKind::InvalidInput, "pose must be finite");
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    require(ortho <= 1e-6 && std::abs(rotation.determinant() - 1.0) <= 1e-6, ErrorKind::InvalidInput,
            "pose rotation must be orthonormal with determinant +1");
  }

  // Camera-from-world.
  Mat3 view_rotation() const { return rotation.transpose(); }
  Vec3 to_camera(const Vec3& world) const { return rotation.transpose() * (world - translation); }
  Vec3 to_world(const Vec3& cam) const { return rotation * cam + translation; }
  Vec3 center() const { return translation; }
  Vec3 forward() const { return rotation.col(2); }

  bool contains(PixelIndex px) const { return px.row >= 0 && px.row < height && px.col >= 0 && px.col < width; }
};

/// Camera placed at `eye` looking at `target`; `up` is the world up direction.
inline Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy, int width,
                      int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  require(right.norm() > 1e-12, ErrorKind::InvalidInput, "look_at: up vector parallel to viewing direction");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = forward;
  cam.translation = eye;
  return cam;
}

/// Camera-space direction (z = 1) through the center of a pixel.
inline Vec3 pixel_ray(const Camera& cam, double row, double col) {
  return {(col + 0.5 - cam.cx) / cam.fx, (row + 0.5 - cam.cy) / cam.fy, 1.0};
}

inline Vec3 unproject_pixel(const Camera& cam, PixelIndex px, double depth) {
  require(depth > 0.0 && std::isfinite(depth), ErrorKind::InvalidInput, "depth must be positive and finite");
  require(cam.contains(px), ErrorKind::Bounds,
          "pixel (" + std::to_string(px.row) + "," + std::to_string(px.col) + ") outside image");
  return cam.to_world(depth * pixel_ray(cam, px.row, px.col));
}

/// Continuous pixel location in index convention: integer (row, col) is the
/// center of that pixel, so project_point inverts unproject_pixel exactly.
struct ProjectedPoint {
  double row = 0.0;
  double col = 0.0;
  double depth = 0.0;
};

inline constexpr double kBehindCameraEps = 1e-8;

inline ProjectedPoint project_point(const Camera& cam, const Vec3& world) {
  const Vec3 pc = cam.to_camera(world);
  if (!(pc.z() > kBehindCameraEps)) fail(ErrorKind::BehindCamera, "point at or behind the camera plane");
  return {cam.fy * pc.y() / pc.z() + cam.cy - 0.5, cam.fx * pc.x() / pc.z() + cam.cx - 0.5, pc.z()};
}

/// Flat point set lifted from all views. Row i of every array describes the
/// same point; ordering is view-major then row-major.
struct UnprojectedPoints {
  std::vector<Vec3> positions;
  RowMatX latent;    // E, N x C
  RowMatX semantic;  // F, N x C_F
  std::vector<int> view_id;
  std::vector<PixelIndex> pixel;
  std::optional<std::vector<int>> part_label;

  std::size_t size() const { return positions.size(); }
};

/// Lift every valid pixel of every view into the shared world frame, carrying
/// its latent and semantic feature vectors along.
inline UnprojectedPoints unproject_views(std::span<const Camera> cams, std::span<const DepthMap> depths,
                                         std::span<const FeatureGrid> semantic,
                                         std::span<const FeatureGrid> latent,
                                         std::span<const LabelMap> labels = {}) {
  const std::size_t views = cams.size();
  require(depths.size() == views && semantic.size() == views && latent.size() == views, ErrorKind::Shape,
          "per-view input lists must have equal length");
  require(labels.empty() || labels.size() == views, ErrorKind::Shape, "label list length mismatch");
  require(views > 0, ErrorKind::EmptyInput, "no views supplied");

  const int c_sem = semantic[0].channels();
  const int c_lat = latent[0].channels();
  std::size_t total = 0;
  for (std::size_t v = 0; v < views; ++v) {
    const Camera& cam = cams[v];
    cam.validate();
    auto check = [&](int h, int w, const char* what) {
      require(h == cam.height && w == cam.width, ErrorKind::Shape,
              std::string(what) + " size does not match camera of view " + std::to_string(v));
    };
    check(depths[v].height(), depths[v].width(), "depth map");
    check(semantic[v].height(), semantic[v].width(), "semantic grid");
    check(latent[v].height(), latent[v].width(), "latent grid");
    if (!labels.empty()) check(labels[v].height(), labels[v].width(), "label map");
    require(semantic[v].channels() == c_sem && latent[v].channels() == c_lat, ErrorKind::Shape,
            "channel count differs between views");
    for (int r = 0; r < cam.height; ++r)
      for (int c = 0; c < cam.width; ++c)
        if (depths[v].is_valid(r, c)) ++total;
  }
  require(total > 0, ErrorKind::EmptyInput, "no valid pixels to unproject");

  UnprojectedPoints out;
  out.positions.reserve(total);
  out.view_id.reserve(total);
  out.pixel.reserve(total);
  out.latent.resize(static_cast<Eigen::Index>(total), c_lat);
  out.semantic.resize(static_cast<Eigen::Index>(total), c_sem);
  if (!labels.empty()) out.part_label.emplace();

  Eigen::Index i = 0;
  for (std::size_t v = 0; v < views; ++v) {
    const Camera& cam = cams[v];
    for (int r = 0; r < cam.height; ++r) {
      for (int c = 0; c < cam.width; ++c) {
        if (!depths[v].is_valid(r, c)) continue;
        const double d = depths[v].values(r, c);
        require(d > 0.0, ErrorKind::InvalidInput, "valid depth entries must be positive");
        out.positions.push_back(unproject_pixel(cam, {r, c}, d));
        out.view_id.push_back(static_cast<int>(v));
        out.pixel.push_back({r, c});
        out.latent.row(i) = Eigen::Map<const Eigen::RowVectorXd>(latent[v].data.pixel(r, c), c_lat);
        out.semantic.row(i) = Eigen::Map<const Eigen::RowVectorXd>(semantic[v].data.pixel(r, c), c_sem);
        if (out.part_label) out.part_label->push_back(labels[v](r, c));
        ++i;
      }
    }
  }
  return out;
}

}  // namespace partsplat
