#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/LU>

#include "partsplat/types.hpp"

namespace partsplat {

/// Quaternions are stored (w, x, y, z).
struct GaussianPrimitive {
  Vec3 mean = Vec3::Zero();
  Vec4 rotation{1.0, 0.0, 0.0, 0.0};
  Vec3 scale = Vec3::Ones();
  double opacity = 0.5;
  Vec3 color = Vec3::Zero();
};

using GaussianSet = std::vector<GaussianPrimitive>;

/// Rotation matrix of a unit quaternion.
inline Mat3 rotation_matrix(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Vec4 normalized_rotation(const Vec4& q) {
  const double n = q.norm();
  require(std::abs(n - 1.0) <= 1e-3, ErrorKind::InvalidInput, "quaternion is not unit length (tolerance 1e-3)");
  return q / n;
}

/// Sigma = R S S^T R^T.
inline Mat3 covariance_from(const Vec4& rotation, const Vec3& scale) {
  require((scale.array() > 0.0).all(), ErrorKind::InvalidInput, "scale components must be positive");
  const Mat3 m = rotation_matrix(normalized_rotation(rotation)) * scale.asDiagonal();
  return m * m.transpose();
}

/// Unnormalized Gaussian density exp(-1/2 d^T Sigma^-1 d).
inline double eval_density(const GaussianPrimitive& g, const Vec3& x) {
  const Mat3 r = rotation_matrix(normalized_rotation(g.rotation));
  // Sigma^-1 = R S^-2 R^T, so the Mahalanobis term is |S^-1 R^T d|^2.
  const Vec3 local = (r.transpose() * (x - g.mean)).cwiseQuotient(g.scale);
  return std::exp(-0.5 * local.squaredNorm());
}

struct CovarianceGrads {
  Vec4 d_rotation = Vec4::Zero();
  Vec3 d_scale = Vec3::Zero();
};

/// Pull dL/dSigma back to the (raw, renormalized) quaternion and scale.
inline CovarianceGrads covariance_backward(const Vec4& rotation, const Vec3& scale, const Mat3& d_sigma) {
  const double qn = rotation.norm();
  const Vec4 q = rotation / qn;
  const Mat3 r = rotation_matrix(q);
  const Mat3 m = r * scale.asDiagonal();
  const Mat3 d_m = (d_sigma + d_sigma.transpose()) * m;
  CovarianceGrads out;
  for (int i = 0; i < 3; ++i) out.d_scale[i] = d_m.col(i).dot(r.col(i));
  const Mat3 d_r = d_m * scale.asDiagonal();

  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  const Vec4 d_unit{d_r.cwiseProduct(dw).sum(), d_r.cwiseProduct(dx).sum(), d_r.cwiseProduct(dy).sum(),
                    d_r.cwiseProduct(dz).sum()};
  out.d_rotation = (d_unit - q * q.dot(d_unit)) / qn;
  return out;
}

// Head output rows: offset(3), rotation(4), log-scale(3), opacity logit(1).
inline constexpr int kHeadOffset = 0;
inline constexpr int kHeadRotation = 3;
inline constexpr int kHeadScale = 7;
inline constexpr int kHeadOpacity = 10;
inline constexpr int kHeadOutputs = 11;

/// Per-pixel affine heads mapping an embedding to Gaussian attributes.
struct HeadParams {
  MatX weights;  // kHeadOutputs x C
  VecX bias;     // kHeadOutputs
  double max_offset = 0.05;
  double s_min = 1e-4;
  double s_max = 0.2;

  int channels() const { return static_cast<int>(weights.cols()); }

  void validate() const {
    require(weights.rows() == kHeadOutputs && bias.size() == kHeadOutputs, ErrorKind::Shape,
            "head weights must have 11 output rows");
    require(weights.allFinite() && bias.allFinite(), ErrorKind::InvalidInput, "head weights must be finite");
    require(max_offset > 0.0, ErrorKind::InvalidInput, "max_offset must be positive");
    require(s_min > 0.0 && s_min < s_max, ErrorKind::InvalidInput, "need 0 < s_min < s_max");
  }

  static HeadParams zeros(int channels) {
    return {MatX::Zero(kHeadOutputs, channels), VecX::Zero(kHeadOutputs)};
  }

  /// Zero weights with biases producing an identity rotation, the given
  /// scale and opacity.
  static HeadParams constant(int channels, double scale, double opacity) {
    HeadParams p = zeros(channels);
    p.bias[kHeadRotation] = 1.0;
    p.bias.segment<3>(kHeadScale).setConstant(std::log(scale));
    p.bias[kHeadOpacity] = std::log(opacity / (1.0 - opacity));
    return p;
  }

  static HeadParams random(int channels, double weight_scale, double scale, double opacity, std::uint64_t seed) {
    HeadParams p = constant(channels, scale, opacity);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-weight_scale, weight_scale);
    for (Eigen::Index i = 0; i < p.weights.size(); ++i) p.weights.data()[i] = u(rng);
    return p;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Keeps opacity strictly inside (0, 1) in double precision.
inline constexpr double kOpacityLogitLimit = 30.0;

struct HeadsOutput {
  GaussianSet gaussians;
  std::vector<PixelIndex> pixels;  // source pixel of each Gaussian (row-major order)
  int degenerate_rotations = 0;
};

/// Decode one Gaussian per valid pixel. `base_positions` holds the
/// unprojected point of each pixel (3 channels); color is copied from `rgb`.
inline HeadsOutput heads_forward(const FeatureGrid& grid, const Mask& valid, const Image& rgb,
                                 const Grid<double>& base_positions, const HeadParams& params) {
  params.validate();
  const int h = grid.height(), w = grid.width();
  require(valid.height() == h && valid.width() == w && rgb.height() == h && rgb.width() == w &&
              base_positions.height() == h && base_positions.width() == w,
          ErrorKind::Shape, "heads inputs are not pixel aligned");
  require(rgb.channels() == 3 && base_positions.channels() == 3, ErrorKind::Shape, "rgb/base need 3 channels");
  require(grid.channels() == params.channels(), ErrorKind::Shape, "embedding channels do not match head params");

  HeadsOutput out;
  const int c = grid.channels();
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      if (!valid(r, col)) continue;
      const Eigen::Map<const VecX> e(grid.data.pixel(r, col), c);
      const VecX a = params.weights * e + params.bias;
      require(a.allFinite(), ErrorKind::Divergence, "Gaussian head outputs are non-finite");
      GaussianPrimitive g;
      const Vec3 base(base_positions(r, col, 0), base_positions(r, col, 1), base_positions(r, col, 2));
      g.mean = base + params.max_offset * a.segment<3>(kHeadOffset).array().tanh().matrix();
      const Vec4 rot = a.segment<4>(kHeadRotation);
      const double rn = rot.stableNorm();
      if (rn < 1e-8) {
        g.rotation = Vec4(1.0, 0.0, 0.0, 0.0);
        ++out.degenerate_rotations;
      } else {
        g.rotation = rot / rn;
      }
      for (int i = 0; i < 3; ++i) g.scale[i] = std::clamp(std::exp(a[kHeadScale + i]), params.s_min, params.s_max);
      g.opacity = sigmoid(std::clamp(a[kHeadOpacity], -kOpacityLogitLimit, kOpacityLogitLimit));
      g.color = Vec3(rgb(r, col, 0), rgb(r, col, 1), rgb(r, col, 2));
      out.gaussians.push_back(g);
      out.pixels.push_back({r, col});
    }
  }
  return out;
}

struct GaussianGrad {
  Vec3 d_mean = Vec3::Zero();
  Vec4 d_rotation = Vec4::Zero();
  Vec3 d_scale = Vec3::Zero();
  double d_opacity = 0.0;
  Vec3 d_color = Vec3::Zero();
};

struct HeadsGrads {
  MatX d_weights;
  VecX d_bias;
  FeatureGrid d_grid;
};

/// Backward of heads_forward. `upstream` is ordered like the forward output.
/// Color is inherited, so it contributes nothing.
inline HeadsGrads heads_backward(const FeatureGrid& grid, const Mask& valid, const HeadParams& params,
                                 const std::vector<GaussianGrad>& upstream) {
  const int h = grid.height(), w = grid.width(), c = grid.channels();
  HeadsGrads out{MatX::Zero(kHeadOutputs, c), VecX::Zero(kHeadOutputs), FeatureGrid(h, w, c, FeatureKind::Latent)};
  std::size_t i = 0;
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      if (!valid(r, col)) continue;
      require(i < upstream.size(), ErrorKind::Shape, "fewer upstream gradients than Gaussians");
      const GaussianGrad& g = upstream[i++];
      const Eigen::Map<const VecX> e(grid.data.pixel(r, col), c);
      const VecX a = params.weights * e + params.bias;
      VecX d_a = VecX::Zero(kHeadOutputs);
      for (int k = 0; k < 3; ++k) {
        const double t = std::tanh(a[kHeadOffset + k]);
        d_a[kHeadOffset + k] = g.d_mean[k] * params.max_offset * (1.0 - t * t);
      }
      const Vec4 rot = a.segment<4>(kHeadRotation);
      const double rn = rot.stableNorm();
      if (rn >= 1e-8) {
        const Vec4 u = rot / rn;
        d_a.segment<4>(kHeadRotation) = (g.d_rotation - u * u.dot(g.d_rotation)) / rn;
      }
      for (int k = 0; k < 3; ++k) {
        const double s = std::exp(a[kHeadScale + k]);
        if (s >= params.s_min && s <= params.s_max) d_a[kHeadScale + k] = g.d_scale[k] * s;
      }
      if (std::abs(a[kHeadOpacity]) < kOpacityLogitLimit) {
        const double o = sigmoid(a[kHeadOpacity]);
        d_a[kHeadOpacity] = g.d_opacity * o * (1.0 - o);
      }

      out.d_weights += d_a * e.transpose();
      out.d_bias += d_a;
      Eigen::Map<VecX>(out.d_grid.data.pixel(r, col), c) = params.weights.transpose() * d_a;
    }
  }
  require(i == upstream.size(), ErrorKind::Shape, "more upstream gradients than Gaussians");
  return out;
}

}  // namespace partsplat
