#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "partsplat/camera.hpp"

namespace partsplat {

struct Capsule {
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.1;
  int part = 0;
  Vec3 albedo = Vec3::Constant(0.5);
};

/// Procedural ground truth: capsule parts plus surface samples that play the
/// role of the body-model vertices in the geometric loss.
struct SceneTruth {
  std::vector<Capsule> parts;
  std::vector<Vec3> surface_samples;
  std::vector<int> sample_parts;
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int parts = 10;
  std::uint64_t seed = 0;
  double size_scale = 1.0;
  int surface_samples = 4000;
  // Amplitude of the procedural albedo stripes; 0 gives flat part colors.
  double texture = 0.0;
  double texture_frequency = 12.0;
};

inline constexpr int kMaxFigureParts = 10;

inline double capsule_sdf(const Capsule& cap, const Vec3& p) {
  const Vec3 ba = cap.b - cap.a;
  const double len2 = ba.squaredNorm();
  const double h = len2 > 0.0 ? std::clamp((p - cap.a).dot(ba) / len2, 0.0, 1.0) : 0.0;
  return (p - (cap.a + h * ba)).norm() - cap.radius;
}

inline double scene_sdf(const SceneTruth& scene, const Vec3& p) {
  double d = std::numeric_limits<double>::infinity();
  for (const Capsule& c : scene.parts) d = std::min(d, capsule_sdf(c, p));
  return d;
}

inline Vec3 capsule_normal(const Capsule& cap, const Vec3& p) {
  const Vec3 ba = cap.b - cap.a;
  const double len2 = ba.squaredNorm();
  const double h = len2 > 0.0 ? std::clamp((p - cap.a).dot(ba) / len2, 0.0, 1.0) : 0.0;
  return (p - (cap.a + h * ba)).normalized();
}

namespace detail {

// Smallest t > 0 with |o + t d - c| = r (d unit length); -1 if none.
inline double ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d);
  const double cc = oc.squaredNorm() - r * r;
  const double disc = b * b - cc;
  if (disc < 0.0) return -1.0;
  const double s = std::sqrt(disc);
  if (-b - s > 0.0) return -b - s;
  if (-b + s > 0.0) return -b + s;
  return -1.0;
}

}  // namespace detail

/// First intersection of a ray (unit direction) with a capsule, or -1.
inline double ray_capsule(const Vec3& origin, const Vec3& dir, const Capsule& cap) {
  double best = std::numeric_limits<double>::infinity();
  auto take = [&](double t) {
    if (t > 0.0 && t < best) best = t;
  };
  take(detail::ray_sphere(origin, dir, cap.a, cap.radius));
  take(detail::ray_sphere(origin, dir, cap.b, cap.radius));
  const Vec3 ba = cap.b - cap.a;
  const double len2 = ba.squaredNorm();
  if (len2 > 0.0) {
    const Vec3 axis = ba / std::sqrt(len2);
    const Vec3 oa = origin - cap.a;
    const Vec3 dp = dir - dir.dot(axis) * axis;
    const Vec3 op = oa - oa.dot(axis) * axis;
    const double qa = dp.squaredNorm();
    if (qa > 1e-14) {
      const double qb = 2.0 * dp.dot(op);
      const double qc = op.squaredNorm() - cap.radius * cap.radius;
      const double disc = qb * qb - 4.0 * qa * qc;
      if (disc >= 0.0) {
        const double s = std::sqrt(disc);
        for (double t : {(-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa)}) {
          const double y = (oa + t * dir).dot(axis);
          if (y >= 0.0 && y * y <= len2) take(t);
        }
      }
    }
  }
  return std::isfinite(best) ? best : -1.0;
}

namespace detail {

inline Vec3 limb_direction(double abduction, double swing, double side) {
  // Straight down, tilted sideways by `abduction` and forward by `swing`.
  const Vec3 d(std::sin(swing) * std::cos(abduction), side * std::sin(abduction),
               -std::cos(swing) * std::cos(abduction));
  return d.normalized();
}

}  // namespace detail

/// Articulated capsule figure: torso, head, upper/lower arms, upper/lower
/// legs (in that part order), z up, centered near the origin.
inline SceneTruth generate_scene(const SceneConfig& cfg) {
  require(cfg.parts >= 1 && cfg.parts <= kMaxFigureParts, ErrorKind::Config,
          "parts must be between 1 and " + std::to_string(kMaxFigureParts));
  require(cfg.size_scale > 0.0, ErrorKind::Config, "size_scale must be positive");
  require(cfg.surface_samples >= 1, ErrorKind::Config, "surface_samples must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  constexpr double deg = std::numbers::pi / 180.0;

  static const std::array<Vec3, kMaxFigureParts> palette = {
      Vec3(0.80, 0.30, 0.25), Vec3(0.95, 0.80, 0.65), Vec3(0.25, 0.55, 0.85), Vec3(0.20, 0.75, 0.45),
      Vec3(0.85, 0.70, 0.20), Vec3(0.60, 0.35, 0.80), Vec3(0.30, 0.80, 0.80), Vec3(0.90, 0.45, 0.70),
      Vec3(0.55, 0.60, 0.25), Vec3(0.85, 0.55, 0.35)};

  std::vector<Capsule> caps;
  caps.push_back({Vec3(0, 0, -0.02), Vec3(0, 0, 0.36), 0.19});  // torso
  caps.push_back({Vec3(0, 0, 0.70), Vec3(0, 0, 0.74), 0.13});   // head

  for (double side : {-1.0, 1.0}) {
    const Vec3 shoulder(0.0, side * 0.285, 0.46);
    const double abd = uni(2.0, 9.0) * deg, swing = uni(-30.0, 30.0) * deg;
    const Vec3 elbow = shoulder + 0.30 * detail::limb_direction(abd, swing, side);
    const double bend = uni(10.0, 70.0) * deg;
    const Vec3 wrist = elbow + 0.27 * detail::limb_direction(abd * 0.7, swing + bend, side);
    caps.push_back({shoulder, elbow, 0.075});
    caps.push_back({elbow, wrist, 0.062});
  }
  for (double side : {-1.0, 1.0}) {
    const Vec3 hip(0.0, side * 0.105, -0.10);
    const double abd = uni(1.0, 6.0) * deg, swing = side * uni(8.0, 22.0) * deg;
    const Vec3 knee = hip + 0.40 * detail::limb_direction(abd, swing, side);
    const double bend = uni(0.0, 25.0) * deg;
    const Vec3 ankle = knee + 0.38 * detail::limb_direction(abd * 0.5, swing - bend, side);
    caps.push_back({hip, knee, 0.095});
    caps.push_back({knee, ankle, 0.078});
  }
  // Part order: torso, head, L upper arm, L lower arm, R upper arm, ...
  SceneTruth scene;
  scene.seed = cfg.seed;
  for (int p = 0; p < cfg.parts; ++p) {
    Capsule c = caps[static_cast<std::size_t>(p)];
    c.a *= cfg.size_scale;
    c.b *= cfg.size_scale;
    c.radius *= cfg.size_scale;
    c.part = p;
    const Vec3 jitter(uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05));
    c.albedo = (palette[static_cast<std::size_t>(p)] + jitter).cwiseMax(0.05).cwiseMin(0.95);
    scene.parts.push_back(c);
  }

  scene.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  scene.hi = -scene.lo;
  for (const Capsule& c : scene.parts) {
    scene.lo = scene.lo.cwiseMin(c.a.cwiseMin(c.b) - Vec3::Constant(c.radius));
    scene.hi = scene.hi.cwiseMax(c.a.cwiseMax(c.b) + Vec3::Constant(c.radius));
  }

  // Area-weighted surface samples, keeping only those on the outer surface.
  std::vector<double> area;
  for (const Capsule& c : scene.parts) {
    const double len = (c.b - c.a).norm();
    area.push_back(2.0 * std::numbers::pi * c.radius * len + 4.0 * std::numbers::pi * c.radius * c.radius);
  }
  std::discrete_distribution<int> pick(area.begin(), area.end());
  std::normal_distribution<double> gauss(0.0, 1.0);
  int attempts = 0;
  while (static_cast<int>(scene.surface_samples.size()) < cfg.surface_samples && attempts < 100 * cfg.surface_samples) {
    ++attempts;
    const int p = pick(rng);
    const Capsule& c = scene.parts[static_cast<std::size_t>(p)];
    const Vec3 ba = c.b - c.a;
    const double len = ba.norm();
    const double side_area = 2.0 * std::numbers::pi * c.radius * len;
    Vec3 pt;
    if (len > 0.0 && u01(rng) * area[static_cast<std::size_t>(p)] < side_area) {
      const Vec3 axis = ba / len;
      const Vec3 any = std::abs(axis.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
      const Vec3 e1 = axis.cross(any).normalized();
      const Vec3 e2 = axis.cross(e1);
      const double phi = 2.0 * std::numbers::pi * u01(rng);
      pt = c.a + u01(rng) * ba + c.radius * (std::cos(phi) * e1 + std::sin(phi) * e2);
    } else {
      const Vec3 dir = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
      const Vec3 center = (len > 0.0 && dir.dot(ba) > 0.0) ? c.b : c.a;
      pt = center + c.radius * dir;
    }
    bool buried = false;
    for (const Capsule& other : scene.parts)
      if (other.part != p && capsule_sdf(other, pt) < 0.0) buried = true;
    if (buried) continue;
    scene.surface_samples.push_back(pt);
    scene.sample_parts.push_back(p);
  }
  return scene;
}

struct ShadingConfig {
  Vec3 light_dir = Vec3(0.45, 0.35, 0.82).normalized();
  double ambient = 0.35;
  Vec3 background = Vec3::Zero();
};

struct ViewTruth {
  Image rgb;
  DepthMap depth;
  LabelMap part_map;
};

struct RayHit {
  double t = -1.0;
  int part = -1;
};

inline RayHit cast_ray(const SceneTruth& scene, const Vec3& origin, const Vec3& dir) {
  RayHit hit;
  for (const Capsule& c : scene.parts) {
    const double t = ray_capsule(origin, dir, c);
    if (t > 0.0 && (hit.t < 0.0 || t < hit.t)) hit = {t, c.part};
  }
  return hit;
}

/// Lambert-shaded albedo; view independent, so every camera observing a
/// surface point sees the same color.
inline Vec3 shade_point(const SceneTruth& scene, const SceneConfig& cfg, const ShadingConfig& shading, int part,
                        const Vec3& p) {
  const Capsule& c = scene.parts[static_cast<std::size_t>(part)];
  const Vec3 n = capsule_normal(c, p);
  const double lambert = std::max(0.0, n.dot(shading.light_dir));
  double tex = 1.0;
  if (cfg.texture > 0.0)
    tex = 1.0 + cfg.texture * std::sin(cfg.texture_frequency * (p.x() + 0.7 * p.y() + 1.3 * p.z()));
  return (c.albedo * tex * (shading.ambient + (1.0 - shading.ambient) * lambert)).cwiseMax(0.0).cwiseMin(1.0);
}

/// Analytic view: depth and part label from the pixel-center ray; color
/// averaged over `supersample`^2 sub-pixel rays.
inline ViewTruth render_truth_view(const SceneTruth& scene, const Camera& cam, const SceneConfig& cfg = {},
                                   const ShadingConfig& shading = {}, int supersample = 1) {
  cam.validate();
  require(supersample >= 1, ErrorKind::InvalidInput, "supersample must be >= 1");
  ViewTruth v{Image(cam.height, cam.width, 3, 0.0), DepthMap(cam.height, cam.width),
              LabelMap(cam.height, cam.width, 1, -1)};
  const Vec3 origin = cam.center();
  auto trace = [&](double row, double col, RayHit* out_hit, double* out_depth) {
    const Vec3 ray_cam = pixel_ray(cam, row, col);
    const Vec3 dir_w = cam.rotation * ray_cam;
    const Vec3 dir = dir_w.normalized();
    const RayHit hit = cast_ray(scene, origin, dir);
    if (out_hit) *out_hit = hit;
    if (hit.t < 0.0) return shading.background;
    if (out_depth) *out_depth = hit.t / dir_w.norm();
    return shade_point(scene, cfg, shading, hit.part, origin + hit.t * dir);
  };
  for (int r = 0; r < cam.height; ++r) {
    for (int c = 0; c < cam.width; ++c) {
      RayHit hit;
      double depth = 0.0;
      Vec3 color = trace(r, c, &hit, &depth);
      if (hit.t > 0.0) {
        v.depth.values(r, c) = depth;
        v.depth.valid(r, c) = 1;
        v.part_map(r, c) = hit.part;
      }
      if (supersample > 1) {
        color.setZero();
        const int s = supersample;
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j)
            color += trace(r - 0.5 + (i + 0.5) / s, c - 0.5 + (j + 0.5) / s, nullptr, nullptr);
        color /= static_cast<double>(s * s);
      }
      for (int ch = 0; ch < 3; ++ch) v.rgb(r, c, ch) = color[ch];
    }
  }
  return v;
}

/// Cameras evenly spaced in azimuth on a circle around `target`, first one
/// on the +x side.
inline std::vector<Camera> camera_rig(int n_views, double radius, double height, const Vec3& target, int width,
                                      int image_height, double fov_y_deg, double azimuth_offset_deg = 0.0) {
  require(n_views >= 1, ErrorKind::Config, "n_views must be >= 1");
  require(radius > 0.0, ErrorKind::Config, "rig radius must be positive");
  require(fov_y_deg > 0.0 && fov_y_deg < 180.0, ErrorKind::Config, "fov must be in (0, 180)");
  const double f = 0.5 * image_height / std::tan(0.5 * fov_y_deg * std::numbers::pi / 180.0);
  std::vector<Camera> cams;
  for (int i = 0; i < n_views; ++i) {
    const double az = 2.0 * std::numbers::pi * i / n_views + azimuth_offset_deg * std::numbers::pi / 180.0;
    const Vec3 eye = target + Vec3(radius * std::cos(az), radius * std::sin(az), height);
    cams.push_back(look_at(eye, target, Vec3::UnitZ(), f, f, width, image_height));
  }
  return cams;
}

struct FeatureConfig {
  int semantic_channels = 32;
  int latent_channels = 16;
  double semantic_noise = 0.2;
  double latent_noise = 0.05;
  double position_frequency = 3.0;  // rad per meter for the sinusoidal channels
  double joint_blend = 0.0;         // meters; 0 keeps part features piecewise constant
};

/// Parent of each figure part in the kinematic tree (-1 for the torso).
inline int figure_parent(int part) {
  static constexpr std::array<int, kMaxFigureParts> parent{-1, 0, 0, 2, 0, 4, 0, 6, 0, 8};
  return part >= 0 && part < kMaxFigureParts ? parent[static_cast<std::size_t>(part)] : -1;
}

// Largest weight a neighboring part gets; keeps every blended anchor within
// cos >= 1/sqrt(1 + 0.6^2) ~ 0.857 of its own part's anchor.
inline constexpr double kJointMix = 0.6;

/// Weights of the parts whose anchors are mixed into the feature of a surface
/// point on `part`: 1 for the part itself, kJointMix * exp(-d^2 / 2w^2) for
/// parts joined to it in the kinematic tree, d being the distance to that
/// part's surface.
inline std::vector<std::pair<int, double>> joint_weights(const SceneTruth& scene, int part, const Vec3& p,
                                                         double width) {
  std::vector<std::pair<int, double>> out{{part, 1.0}};
  if (width <= 0.0) return out;
  const int n = static_cast<int>(scene.parts.size());
  for (int q = 0; q < n; ++q) {
    if (q == part || (figure_parent(q) != part && figure_parent(part) != q)) continue;
    const double d = std::max(0.0, capsule_sdf(scene.parts[static_cast<std::size_t>(q)], p)) / width;
    const double w = kJointMix * std::exp(-0.5 * d * d);
    if (w > 1e-6) out.emplace_back(q, w);
  }
  return out;
}

// Latent channel layout.
inline constexpr int kLatentBias = 0;
inline constexpr int kLatentPosition = 1;
inline constexpr int kLatentSinusoid = 4;
inline constexpr int kLatentAnchor = 10;
inline constexpr int kMinLatentChannels = 4;

/// Part anchors shared by all views: unit vectors with pairwise |cos| < 0.3,
/// plus the random projection used to place them in the latent channels.
struct PartAnchors {
  RowMatX anchors;     // P x C_F
  RowMatX projection;  // C_anchor x C_F
};

inline PartAnchors make_part_anchors(int parts, const FeatureConfig& cfg, std::uint64_t seed) {
  require(cfg.semantic_channels >= parts, ErrorKind::Config,
          "semantic_channels must be >= part count to build near-orthogonal anchors");
  require(cfg.latent_channels >= kMinLatentChannels, ErrorKind::Config, "latent_channels must be >= 4");
  std::mt19937_64 rng(seed ^ 0xa5a5a5a5a5a5a5a5ULL);
  std::normal_distribution<double> g(0.0, 1.0);
  const int cf = cfg.semantic_channels;
  PartAnchors out;
  out.anchors.resize(parts, cf);
  for (int p = 0; p < parts; ++p) {
    for (int attempt = 0;; ++attempt) {
      require(attempt < 10000, ErrorKind::Config, "could not draw near-orthogonal part anchors");
      Eigen::RowVectorXd v(cf);
      for (int i = 0; i < cf; ++i) v[i] = g(rng);
      v.normalize();
      bool ok = true;
      for (int q = 0; q < p && ok; ++q) ok = std::abs(v.dot(out.anchors.row(q))) < 0.3;
      if (ok) {
        out.anchors.row(p) = v;
        break;
      }
    }
  }
  const int ca = std::max(0, cfg.latent_channels - kLatentAnchor);
  out.projection.resize(ca, cf);
  for (int i = 0; i < ca; ++i)
    for (int j = 0; j < cf; ++j) out.projection(i, j) = g(rng) / std::sqrt(static_cast<double>(cf));
  return out;
}

struct ViewFeatures {
  FeatureGrid semantic;
  FeatureGrid latent;
};

/// Synthetic stand-ins for backbone features of one view.
///
/// semantic = normalize(anchor[part] + semantic_noise * n / sqrt(C_F)), n ~ N(0, I)
/// latent   = [1, x, y, z, sin/cos(position_frequency * x|y|z), projection * anchor[part]]
///            with latent_noise added to the sinusoid and anchor channels,
/// where (x, y, z) is the pixel unprojected with `depth`. Invalid pixels stay zero.
inline ViewFeatures synth_features(const Camera& cam, const DepthMap& depth, const LabelMap& parts,
                                   const PartAnchors& anchors, const FeatureConfig& cfg, std::uint64_t seed,
                                   const SceneTruth* scene = nullptr) {
  require(depth.height() == cam.height && parts.height() == cam.height && depth.width() == cam.width &&
              parts.width() == cam.width,
          ErrorKind::Shape, "feature synthesis inputs are not aligned");
  const int cf = cfg.semantic_channels, c = cfg.latent_channels;
  require(anchors.anchors.cols() == cf, ErrorKind::Config, "anchor width does not match semantic_channels");
  ViewFeatures out{FeatureGrid(cam.height, cam.width, cf, FeatureKind::Semantic),
                   FeatureGrid(cam.height, cam.width, c, FeatureKind::Latent)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const double sem_scale = cfg.semantic_noise / std::sqrt(static_cast<double>(cf));
  Eigen::RowVectorXd f(cf);
  for (int r = 0; r < cam.height; ++r) {
    for (int col = 0; col < cam.width; ++col) {
      if (!depth.is_valid(r, col)) continue;
      const int part = parts(r, col);
      require(part >= 0 && part < anchors.anchors.rows(), ErrorKind::InvalidInput, "valid pixel without part label");
      const Vec3 p = unproject_pixel(cam, {r, col}, depth.values(r, col));
      Eigen::RowVectorXd anchor = anchors.anchors.row(part);
      if (scene && cfg.joint_blend > 0.0) {
        anchor.setZero();
        for (const auto& [q, w] : joint_weights(*scene, part, p, cfg.joint_blend)) anchor += w * anchors.anchors.row(q);
        anchor.normalize();
      }
      for (int i = 0; i < cf; ++i) f[i] = anchor[i] + sem_scale * g(rng);
      f.normalize();
      std::copy_n(f.data(), cf, out.semantic.data.pixel(r, col));

      double* e = out.latent.data.pixel(r, col);
      e[kLatentBias] = 1.0;
      for (int i = 0; i < 3 && kLatentPosition + i < c; ++i) e[kLatentPosition + i] = p[i];
      for (int i = 0; i < 3; ++i) {
        const double phase = cfg.position_frequency * p[i];
        if (kLatentSinusoid + 2 * i < c) e[kLatentSinusoid + 2 * i] = std::sin(phase) + cfg.latent_noise * g(rng);
        if (kLatentSinusoid + 2 * i + 1 < c)
          e[kLatentSinusoid + 2 * i + 1] = std::cos(phase) + cfg.latent_noise * g(rng);
      }
      if (anchors.projection.rows() > 0) {
        const Eigen::RowVectorXd proj = anchor * anchors.projection.transpose();
        for (Eigen::Index i = 0; i < proj.size(); ++i)
          e[kLatentAnchor + i] = proj[i] + cfg.latent_noise * g(rng);
      }
    }
  }
  return out;
}

/// Multiplicative depth noise d * (1 + sigma * n) with n ~ N(0, 1) built from
/// a per-view component (weight sqrt(view_share)) and a per-pixel component.
inline void apply_depth_noise(std::span<DepthMap> depths, double sigma, double view_share, std::uint64_t seed) {
  require(sigma >= 0.0, ErrorKind::Config, "depth noise must be non-negative");
  require(view_share >= 0.0 && view_share <= 1.0, ErrorKind::Config, "depth_noise_view_share must be in [0,1]");
  if (sigma == 0.0) return;
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> g(0.0, 1.0);
  const double wv = std::sqrt(view_share), wp = std::sqrt(1.0 - view_share);
  for (DepthMap& d : depths) {
    const double n_view = g(rng);
    for (int r = 0; r < d.height(); ++r)
      for (int c = 0; c < d.width(); ++c) {
        if (!d.is_valid(r, c)) continue;
        const double n = wv * n_view + wp * g(rng);
        d.values(r, c) *= std::max(0.05, 1.0 + sigma * n);
      }
  }
}

/// Flying pixels at occlusion boundaries: a valid pixel whose 4-neighbor is
/// more than `jump` (relative) farther or nearer takes d + w (d_nb - d),
/// w ~ U(0, strength), using the neighbor with the largest jump.
inline void apply_edge_bleed(std::span<DepthMap> depths, double strength, double jump, std::uint64_t seed) {
  require(strength >= 0.0 && strength <= 1.0, ErrorKind::Config, "depth_edge_bleed must be in [0,1]");
  if (strength == 0.0) return;
  std::mt19937_64 rng(seed ^ 0x3c6ef372fe94f82bULL);
  std::uniform_real_distribution<double> u(0.0, strength);
  for (DepthMap& d : depths) {
    const DepthMap src = d;
    for (int r = 0; r < d.height(); ++r)
      for (int c = 0; c < d.width(); ++c) {
        if (!src.is_valid(r, c)) continue;
        const double z = src.values(r, c);
        double best = 0.0, target = z;
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int i = 0; i < 4; ++i) {
          const int rr = r + dr[i], cc = c + dc[i];
          if (rr < 0 || rr >= d.height() || cc < 0 || cc >= d.width() || !src.is_valid(rr, cc)) continue;
          const double rel = std::abs(src.values(rr, cc) - z) / z;
          if (rel > jump && rel > best) {
            best = rel;
            target = src.values(rr, cc);
          }
        }
        if (best > 0.0) d.values(r, c) = z + u(rng) * (target - z);
      }
  }
}

}  // namespace partsplat
