#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "partsplat/camera.hpp"
#include "partsplat/gaussian.hpp"

namespace partsplat {

// Compositing policy shared by every render path.
inline constexpr double kAlphaClip = 0.99;
inline constexpr double kAlphaMin = 1.0 / 255.0;
inline constexpr double kTransmittanceStop = 1e-4;
inline constexpr double kLowPassDilation = 0.3;
inline constexpr double kNearCull = 1e-4;
inline constexpr double kRadiusSigmas = 3.0;

/// Screen-space footprint of a Gaussian. `mean` is in image-plane
/// coordinates where the center of pixel (r, c) sits at (c + 0.5, r + 0.5).
struct Splat2D {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  Mat2 conic = Mat2::Identity();
  double depth = 0.0;
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
  double radius = 0.0;
  int source = -1;
};

namespace detail {

struct ProjectionTerms {
  Vec3 t;                                     // camera-space mean
  Eigen::Matrix<double, 2, 3> jacobian;       // perspective Jacobian J
  Eigen::Matrix<double, 2, 3> transform;      // J * view rotation
  Mat3 cov3d;
};

inline ProjectionTerms projection_terms(const Camera& cam, const GaussianPrimitive& g) {
  ProjectionTerms p;
  p.t = cam.to_camera(g.mean);
  const double x = p.t.x(), y = p.t.y(), z = p.t.z();
  p.jacobian << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
  p.transform = p.jacobian * cam.view_rotation();
  p.cov3d = covariance_from(g.rotation, g.scale);
  return p;
}

// Projection without culling; callers must ensure positive depth.
inline Splat2D project_unculled(const Camera& cam, const GaussianPrimitive& g, int source) {
  const ProjectionTerms p = projection_terms(cam, g);
  Splat2D s;
  s.mean = Vec2(cam.fx * p.t.x() / p.t.z() + cam.cx, cam.fy * p.t.y() / p.t.z() + cam.cy);
  s.cov = p.transform * p.cov3d * p.transform.transpose() + kLowPassDilation * Mat2::Identity();
  s.conic = s.cov.inverse();
  s.depth = p.t.z();
  s.opacity = g.opacity;
  s.color = g.color;
  const double tr = 0.5 * (s.cov(0, 0) + s.cov(1, 1));
  const double det = s.cov(0, 0) * s.cov(1, 1) - s.cov(0, 1) * s.cov(1, 0);
  const double lambda_max = tr + std::sqrt(std::max(0.0, tr * tr - det));
  s.radius = kRadiusSigmas * std::sqrt(lambda_max);
  s.source = source;
  return s;
}

}  // namespace detail

/// Project one Gaussian; empty when it is too close/behind the camera or its
/// footprint misses the image.
inline std::optional<Splat2D> project_gaussian(const Camera& cam, const GaussianPrimitive& g, int source = 0) {
  if (!(cam.to_camera(g.mean).z() > kNearCull)) return std::nullopt;
  Splat2D s = detail::project_unculled(cam, g, source);
  if (s.mean.x() + s.radius < 0.0 || s.mean.x() - s.radius > cam.width || s.mean.y() + s.radius < 0.0 ||
      s.mean.y() - s.radius > cam.height)
    return std::nullopt;
  return s;
}

struct RenderOutput {
  Image color;      // H x W x 3
  Image alpha;      // H x W x 1, accumulated opacity
  Image depth;      // H x W x 1, alpha-normalized expected depth
  Grid<int> contributors;
};

/// Record of which splats were composited at every pixel, in order; lets a
/// forward pass be re-evaluated with all discrete decisions held fixed.
struct ContributionPlan {
  struct Entry {
    int source = -1;
    bool clipped = false;
  };
  int width = 0;
  int height = 0;
  std::vector<int> offsets;
  std::vector<Entry> entries;
};

namespace detail {

inline bool covers(const Splat2D& s, double px, double py) {
  return std::abs(px - s.mean.x()) <= s.radius && std::abs(py - s.mean.y()) <= s.radius;
}

inline double splat_power(const Splat2D& s, double px, double py) {
  const double dx = px - s.mean.x(), dy = py - s.mean.y();
  return -0.5 * (s.conic(0, 0) * dx * dx + (s.conic(0, 1) + s.conic(1, 0)) * dx * dy + s.conic(1, 1) * dy * dy);
}

struct PixelAccum {
  Vec3 color = Vec3::Zero();
  double transmittance = 1.0;
  double depth = 0.0;
  int count = 0;
};

// Front-to-back blending of `candidates` (indices into `splats`, already in
// depth order) at one pixel center.
template <typename Range>
PixelAccum shade_pixel(const std::vector<Splat2D>& splats, const Range& candidates, double px, double py,
                       std::vector<ContributionPlan::Entry>* record) {
  PixelAccum acc;
  for (int idx : candidates) {
    const Splat2D& s = splats[static_cast<std::size_t>(idx)];
    if (!covers(s, px, py)) continue;
    double alpha = s.opacity * std::exp(splat_power(s, px, py));
    bool clipped = false;
    if (alpha > kAlphaClip) {
      alpha = kAlphaClip;
      clipped = true;
    }
    if (alpha < kAlphaMin) continue;
    const double w = alpha * acc.transmittance;
    acc.color += w * s.color;
    acc.depth += w * s.depth;
    acc.transmittance *= 1.0 - alpha;
    ++acc.count;
    if (record) record->push_back({s.source, clipped});
    if (acc.transmittance < kTransmittanceStop) break;
  }
  return acc;
}

inline RenderOutput make_output(int h, int w) {
  return {Image(h, w, 3, 0.0), Image(h, w, 1, 0.0), Image(h, w, 1, 0.0), Grid<int>(h, w, 1, 0)};
}

inline void store(RenderOutput& out, int r, int c, const PixelAccum& acc, const Vec3& background) {
  const Vec3 color = acc.color + acc.transmittance * background;
  for (int ch = 0; ch < 3; ++ch) out.color(r, c, ch) = color[ch];
  const double alpha = 1.0 - acc.transmittance;
  out.alpha(r, c) = alpha;
  out.depth(r, c) = acc.depth / std::max(alpha, 1e-8);
  out.contributors(r, c) = acc.count;
}

struct Prepared {
  std::vector<Splat2D> splats;  // visible splats sorted front to back
};

inline Prepared prepare(const Camera& cam, const GaussianSet& gaussians) {
  cam.validate();
  Prepared p;
  for (std::size_t i = 0; i < gaussians.size(); ++i)
    if (auto s = project_gaussian(cam, gaussians[i], static_cast<int>(i))) p.splats.push_back(*s);
  std::stable_sort(p.splats.begin(), p.splats.end(), [](const Splat2D& a, const Splat2D& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.source < b.source);
  });
  return p;
}

}  // namespace detail

/// Per-pixel alpha blending over every visible splat in global depth order.
inline RenderOutput rasterize_reference(const Camera& cam, const GaussianSet& gaussians, const Vec3& background,
                                        ContributionPlan* plan = nullptr) {
  const auto prep = detail::prepare(cam, gaussians);
  std::vector<int> all(prep.splats.size());
  std::iota(all.begin(), all.end(), 0);
  RenderOutput out = detail::make_output(cam.height, cam.width);
  std::vector<ContributionPlan::Entry> entries;
  if (plan) {
    *plan = ContributionPlan{cam.width, cam.height, {0}, {}};
    plan->offsets.reserve(static_cast<std::size_t>(cam.width) * cam.height + 1);
  }
  for (int r = 0; r < cam.height; ++r) {
    for (int c = 0; c < cam.width; ++c) {
      const auto acc = detail::shade_pixel(prep.splats, all, c + 0.5, r + 0.5, plan ? &plan->entries : nullptr);
      detail::store(out, r, c, acc, background);
      if (plan) plan->offsets.push_back(static_cast<int>(plan->entries.size()));
    }
  }
  return out;
}

/// Same blending math with splats binned into square tiles; each tile keeps
/// the global depth order.
inline RenderOutput rasterize_tiled(const Camera& cam, const GaussianSet& gaussians, const Vec3& background,
                                    int tile_size = 16) {
  require(tile_size >= 1, ErrorKind::InvalidInput, "tile size must be >= 1");
  const auto prep = detail::prepare(cam, gaussians);
  const int tiles_x = (cam.width + tile_size - 1) / tile_size;
  const int tiles_y = (cam.height + tile_size - 1) / tile_size;
  std::vector<std::vector<int>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
  for (std::size_t i = 0; i < prep.splats.size(); ++i) {
    const Splat2D& s = prep.splats[i];
    // Pixel columns whose centers fall inside the footprint square.
    const int c0 = std::max(0, static_cast<int>(std::ceil(s.mean.x() - s.radius - 0.5)));
    const int c1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.mean.x() + s.radius - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(s.mean.y() - s.radius - 0.5)));
    const int r1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.mean.y() + s.radius - 0.5)));
    if (c0 > c1 || r0 > r1) continue;
    for (int ty = r0 / tile_size; ty <= r1 / tile_size; ++ty)
      for (int tx = c0 / tile_size; tx <= c1 / tile_size; ++tx)
        bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<int>(i));
  }
  RenderOutput out = detail::make_output(cam.height, cam.width);
  for (int ty = 0; ty < tiles_y; ++ty) {
    for (int tx = 0; tx < tiles_x; ++tx) {
      const auto& bin = bins[static_cast<std::size_t>(ty) * tiles_x + tx];
      for (int r = ty * tile_size; r < std::min(cam.height, (ty + 1) * tile_size); ++r)
        for (int c = tx * tile_size; c < std::min(cam.width, (tx + 1) * tile_size); ++c)
          detail::store(out, r, c, detail::shade_pixel(prep.splats, bin, c + 0.5, r + 0.5, nullptr), background);
    }
  }
  return out;
}

/// Re-evaluate a recorded plan from explicit splats (indexed by source).
/// Only the alpha values are recomputed; inclusion, order, clipping and early
/// termination are taken from the plan.
inline RenderOutput composite_frozen(const std::vector<Splat2D>& by_source, const ContributionPlan& plan,
                                     const Vec3& background) {
  RenderOutput out = detail::make_output(plan.height, plan.width);
  for (int r = 0; r < plan.height; ++r) {
    for (int c = 0; c < plan.width; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * plan.width + c;
      detail::PixelAccum acc;
      for (int e = plan.offsets[p]; e < plan.offsets[p + 1]; ++e) {
        const auto& entry = plan.entries[static_cast<std::size_t>(e)];
        const Splat2D& s = by_source[static_cast<std::size_t>(entry.source)];
        const double alpha = entry.clipped ? kAlphaClip : s.opacity * std::exp(detail::splat_power(s, c + 0.5, r + 0.5));
        const double w = alpha * acc.transmittance;
        acc.color += w * s.color;
        acc.depth += w * s.depth;
        acc.transmittance *= 1.0 - alpha;
        ++acc.count;
      }
      detail::store(out, r, c, acc, background);
    }
  }
  return out;
}

/// Splats for every Gaussian in source order (culled ones included as-is);
/// pairs with composite_frozen for finite-difference checks.
inline std::vector<Splat2D> project_all_unculled(const Camera& cam, const GaussianSet& gaussians) {
  std::vector<Splat2D> out;
  out.reserve(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    if (cam.to_camera(gaussians[i].mean).z() > kNearCull) {
      out.push_back(detail::project_unculled(cam, gaussians[i], static_cast<int>(i)));
    } else {
      Splat2D s;
      s.source = static_cast<int>(i);
      out.push_back(s);
    }
  }
  return out;
}

inline RenderOutput rasterize_frozen(const Camera& cam, const GaussianSet& gaussians, const ContributionPlan& plan,
                                     const Vec3& background) {
  return composite_frozen(project_all_unculled(cam, gaussians), plan, background);
}

struct SplatGrad {
  Vec2 d_mean = Vec2::Zero();
  Mat2 d_cov = Mat2::Zero();
  double d_opacity = 0.0;
  Vec3 d_color = Vec3::Zero();
};

struct RasterGrads {
  std::vector<SplatGrad> splats;        // indexed by source Gaussian
  std::vector<GaussianGrad> gaussians;  // chained through the projection
};

namespace detail {

struct Contribution {
  int source;
  double alpha;
  double gaussian;  // exp(power)
  bool clipped;
  double transmittance;  // before this splat
};

}  // namespace detail

/// Chain screen-space gradients of one splat back to its Gaussian.
inline GaussianGrad projection_backward(const Camera& cam, const GaussianPrimitive& g, const SplatGrad& sg) {
  const auto p = detail::projection_terms(cam, g);
  const double x = p.t.x(), y = p.t.y(), z = p.t.z();
  const Mat2 gcov = sg.d_cov;

  const Mat3 d_cov3d = p.transform.transpose() * gcov * p.transform;
  const Eigen::Matrix<double, 2, 3> d_transform = (gcov + gcov.transpose()) * p.transform * p.cov3d;
  const Eigen::Matrix<double, 2, 3> d_j = d_transform * cam.view_rotation().transpose();

  Vec3 d_t = Vec3::Zero();
  const double z2 = z * z, z3 = z2 * z;
  d_t.x() += d_j(0, 2) * (-cam.fx / z2);
  d_t.y() += d_j(1, 2) * (-cam.fy / z2);
  d_t.z() += d_j(0, 0) * (-cam.fx / z2) + d_j(0, 2) * (2.0 * cam.fx * x / z3) + d_j(1, 1) * (-cam.fy / z2) +
             d_j(1, 2) * (2.0 * cam.fy * y / z3);
  d_t.x() += sg.d_mean.x() * cam.fx / z;
  d_t.y() += sg.d_mean.y() * cam.fy / z;
  d_t.z() += -sg.d_mean.x() * cam.fx * x / z2 - sg.d_mean.y() * cam.fy * y / z2;

  GaussianGrad out;
  out.d_mean = cam.view_rotation().transpose() * d_t;
  const auto cg = covariance_backward(g.rotation, g.scale, d_cov3d);
  out.d_rotation = cg.d_rotation;
  out.d_scale = cg.d_scale;
  out.d_opacity = sg.d_opacity;
  out.d_color = sg.d_color;
  return out;
}

/// Exact gradients of the reference blend for an upstream dL/dcolor image.
/// When `plan` is given its decisions are reused instead of re-derived.
inline RasterGrads rasterize_backward_reference(const Camera& cam, const GaussianSet& gaussians,
                                                const Vec3& background, const Image& upstream,
                                                const ContributionPlan* plan = nullptr) {
  require(upstream.height() == cam.height && upstream.width() == cam.width && upstream.channels() == 3,
          ErrorKind::Shape, "upstream gradient must be H x W x 3");
  ContributionPlan local;
  if (!plan) {
    rasterize_reference(cam, gaussians, background, &local);
    plan = &local;
  }
  const auto splats = project_all_unculled(cam, gaussians);
  RasterGrads out;
  out.splats.resize(gaussians.size());
  std::vector<Mat2> d_conic(gaussians.size(), Mat2::Zero());
  std::vector<detail::Contribution> contribs;

  for (int r = 0; r < cam.height; ++r) {
    for (int c = 0; c < cam.width; ++c) {
      const Vec3 up(upstream(r, c, 0), upstream(r, c, 1), upstream(r, c, 2));
      if (up.isZero(0.0)) continue;
      const double px = c + 0.5, py = r + 0.5;
      const std::size_t p = static_cast<std::size_t>(r) * cam.width + c;
      contribs.clear();
      double t = 1.0;
      for (int e = plan->offsets[p]; e < plan->offsets[p + 1]; ++e) {
        const auto& entry = plan->entries[static_cast<std::size_t>(e)];
        const Splat2D& s = splats[static_cast<std::size_t>(entry.source)];
        const double gval = std::exp(detail::splat_power(s, px, py));
        const double alpha = entry.clipped ? kAlphaClip : s.opacity * gval;
        contribs.push_back({entry.source, alpha, gval, entry.clipped, t});
        t *= 1.0 - alpha;
      }
      Vec3 behind = t * background;  // color contributed by everything after splat i
      for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
        const Splat2D& s = splats[static_cast<std::size_t>(it->source)];
        SplatGrad& sg = out.splats[static_cast<std::size_t>(it->source)];
        sg.d_color += up * (it->alpha * it->transmittance);
        const double d_alpha = up.dot(s.color * it->transmittance - behind / (1.0 - it->alpha));
        behind += s.color * (it->alpha * it->transmittance);
        if (it->clipped) continue;
        sg.d_opacity += d_alpha * it->gaussian;
        const double d_power = d_alpha * s.opacity * it->gaussian;
        const Vec2 d(px - s.mean.x(), py - s.mean.y());
        sg.d_mean += d_power * (s.conic * d);
        d_conic[static_cast<std::size_t>(it->source)] += d_power * (-0.5 * d * d.transpose());
      }
    }
  }

  out.gaussians.resize(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    SplatGrad& sg = out.splats[i];
    if (d_conic[i].isZero(0.0) && sg.d_mean.isZero(0.0) && sg.d_opacity == 0.0 && sg.d_color.isZero(0.0)) continue;
    const Mat2& q = splats[i].conic;
    sg.d_cov = -q.transpose() * d_conic[i] * q.transpose();
    out.gaussians[i] = projection_backward(cam, gaussians[i], sg);
  }
  return out;
}

}  // namespace partsplat
