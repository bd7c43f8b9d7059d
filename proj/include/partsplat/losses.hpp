#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "partsplat/spatial_index.hpp"
#include "partsplat/types.hpp"

namespace partsplat {

struct LossWeights {
  double lambda_geom = 1.0;
  double lambda_l1 = 0.8;
  double lambda_ssim = 0.2;

  void validate() const {
    require(lambda_geom >= 0.0 && lambda_l1 >= 0.0 && lambda_ssim >= 0.0, ErrorKind::Config,
            "loss weights must be non-negative");
  }
};

/// Scalar loss with its gradient w.r.t. the first argument.
struct ImageLoss {
  double value = 0.0;
  Image grad;
};

inline void require_same_shape(const Image& a, const Image& b) {
  require(a.same_shape(b), ErrorKind::Shape, "image shapes differ");
}

inline ImageLoss l1_loss(const Image& a, const Image& b) {
  require_same_shape(a, b);
  require(a.size() > 0, ErrorKind::EmptyInput, "empty image");
  ImageLoss out{0.0, Image(a.height(), a.width(), a.channels(), 0.0)};
  const double inv = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    out.value += std::abs(d);
    out.grad.data()[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  out.value *= inv;
  return out;
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline const std::array<double, kSsimWindow>& ssim_kernel() {
  static const std::array<double, kSsimWindow> k = [] {
    std::array<double, kSsimWindow> w{};
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double x = i - kSsimWindow / 2;
      w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
      sum += w[static_cast<std::size_t>(i)];
    }
    for (double& v : w) v /= sum;
    return w;
  }();
  return k;
}

// Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
inline int mirror(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

// Separable Gaussian blur of an h x w plane with mirrored borders ("same" size).
inline std::vector<double> blur(const std::vector<double>& in, int h, int w) {
  const auto& k = ssim_kernel();
  constexpr int half = kSsimWindow / 2;
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int t = 0; t < kSsimWindow; ++t) s += k[static_cast<std::size_t>(t)] * in[static_cast<std::size_t>(r * w + mirror(c + t - half, w))];
      tmp[static_cast<std::size_t>(r * w + c)] = s;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int t = 0; t < kSsimWindow; ++t) s += k[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>(mirror(r + t - half, h) * w + c)];
      out[static_cast<std::size_t>(r * w + c)] = s;
    }
  return out;
}

// Transpose of blur().
inline std::vector<double> blur_adjoint(const std::vector<double>& in, int h, int w) {
  const auto& k = ssim_kernel();
  constexpr int half = kSsimWindow / 2;
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int t = 0; t < kSsimWindow; ++t)
        tmp[static_cast<std::size_t>(mirror(r + t - half, h) * w + c)] += k[static_cast<std::size_t>(t)] * in[static_cast<std::size_t>(r * w + c)];
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int t = 0; t < kSsimWindow; ++t)
        out[static_cast<std::size_t>(r * w + mirror(c + t - half, w))] += k[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>(r * w + c)];
  return out;
}

inline std::vector<double> plane(const Image& img, int ch) {
  std::vector<double> p(img.pixels());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) p[static_cast<std::size_t>(r * img.width() + c)] = img(r, c, ch);
  return p;
}

}  // namespace detail

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, mirrored borders), averaged
/// over pixels and channels. The gradient is w.r.t. `a`.
inline ImageLoss ssim(const Image& a, const Image& b, bool with_grad = true) {
  require_same_shape(a, b);
  require(a.height() >= kSsimWindow && a.width() >= kSsimWindow, ErrorKind::InvalidInput,
          "SSIM needs images of at least 11x11");
  const int h = a.height(), w = a.width();
  const std::size_t n = a.pixels();
  const double inv = 1.0 / static_cast<double>(n * static_cast<std::size_t>(a.channels()));
  ImageLoss out{0.0, with_grad ? Image(h, w, a.channels(), 0.0) : Image()};
  for (int ch = 0; ch < a.channels(); ++ch) {
    const auto pa = detail::plane(a, ch), pb = detail::plane(b, ch);
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = detail::blur(pa, h, w), mu_b = detail::blur(pb, h, w);
    const auto e_aa = detail::blur(aa, h, w), e_bb = detail::blur(bb, h, w), e_ab = detail::blur(ab, h, w);
    std::vector<double> g_mu(n), g_aa(n), g_ab(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
      const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      const double n1 = 2.0 * mu_a[i] * mu_b[i] + kSsimC1, n2 = 2.0 * cov + kSsimC2;
      const double d1 = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kSsimC1, d2 = var_a + var_b + kSsimC2;
      const double s = (n1 * n2) / (d1 * d2);
      out.value += s;
      if (!with_grad) continue;
      const double dd = d1 * d2;
      g_mu[i] = inv * (2.0 * mu_b[i] * n2 / dd - 2.0 * mu_b[i] * n1 / dd - 2.0 * mu_a[i] * s / d1 +
                       2.0 * mu_a[i] * s / d2);
      g_aa[i] = inv * (-s / d2);
      g_ab[i] = inv * (2.0 * n1 / dd);
    }
    if (!with_grad) continue;
    const auto t_mu = detail::blur_adjoint(g_mu, h, w);
    const auto t_aa = detail::blur_adjoint(g_aa, h, w);
    const auto t_ab = detail::blur_adjoint(g_ab, h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const std::size_t i = static_cast<std::size_t>(r * w + c);
        out.grad(r, c, ch) = t_mu[i] + 2.0 * pa[i] * t_aa[i] + pb[i] * t_ab[i];
      }
  }
  out.value *= inv;
  return out;
}

struct RenderLoss {
  double value = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
  Image grad;
};

/// lambda_l1 * L1 + lambda_ssim * (1 - SSIM), with gradient w.r.t. `rendered`.
inline RenderLoss render_loss(const Image& rendered, const Image& gt, const LossWeights& w = {}) {
  w.validate();
  const auto l1 = l1_loss(rendered, gt);
  const auto s = ssim(rendered, gt);
  RenderLoss out;
  out.l1 = l1.value;
  out.ssim = s.value;
  out.value = w.lambda_l1 * l1.value + w.lambda_ssim * (1.0 - s.value);
  out.grad = Image(rendered.height(), rendered.width(), rendered.channels(), 0.0);
  for (std::size_t i = 0; i < rendered.size(); ++i)
    out.grad.data()[i] = w.lambda_l1 * l1.grad.data()[i] - w.lambda_ssim * s.grad.data()[i];
  return out;
}

inline double total_loss(double render, double geom, const LossWeights& w = {}) {
  return render + w.lambda_geom * geom;
}

/// Nearest-neighbor assignments used by a Chamfer evaluation.
struct ChamferMatches {
  std::vector<int> p_to_v;
  std::vector<int> v_to_p;
};

struct ChamferResult {
  double value = 0.0;
  std::vector<Vec3> grad;  // w.r.t. P
  ChamferMatches matches;
};

/// Symmetric squared Chamfer distance with per-direction means.
inline ChamferResult chamfer(const std::vector<Vec3>& p, const std::vector<Vec3>& v) {
  require(!p.empty() && !v.empty(), ErrorKind::EmptyInput, "Chamfer distance needs two non-empty sets");
  const PointIndex index_v(v), index_p(p);
  ChamferResult out;
  out.grad.assign(p.size(), Vec3::Zero());
  const double inv_p = 1.0 / static_cast<double>(p.size()), inv_v = 1.0 / static_cast<double>(v.size());
  double forward = 0.0, backward = 0.0;
  out.matches.p_to_v.resize(p.size());
  out.matches.v_to_p.resize(v.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Neighbor nn = index_v.nearest(p[i]);
    out.matches.p_to_v[i] = nn.index;
    forward += nn.dist2;
    out.grad[i] += 2.0 * inv_p * (p[i] - v[static_cast<std::size_t>(nn.index)]);
  }
  for (std::size_t j = 0; j < v.size(); ++j) {
    const Neighbor nn = index_p.nearest(v[j]);
    out.matches.v_to_p[j] = nn.index;
    backward += nn.dist2;
    out.grad[static_cast<std::size_t>(nn.index)] += 2.0 * inv_v * (p[static_cast<std::size_t>(nn.index)] - v[j]);
  }
  out.value = forward * inv_p + backward * inv_v;
  return out;
}

/// Chamfer value with the matches held fixed.
inline double chamfer_frozen(const std::vector<Vec3>& p, const std::vector<Vec3>& v, const ChamferMatches& m) {
  double forward = 0.0, backward = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    forward += (p[i] - v[static_cast<std::size_t>(m.p_to_v[i])]).squaredNorm();
  for (std::size_t j = 0; j < v.size(); ++j)
    backward += (v[j] - p[static_cast<std::size_t>(m.v_to_p[j])]).squaredNorm();
  return forward / static_cast<double>(p.size()) + backward / static_cast<double>(v.size());
}

/// PSNR in dB for [0,1] images; +inf for identical inputs.
inline double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b);
  require(a.size() > 0, ErrorKind::EmptyInput, "empty image");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace partsplat
