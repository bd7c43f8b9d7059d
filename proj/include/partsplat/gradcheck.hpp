#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "partsplat/attention.hpp"
#include "partsplat/gaussian.hpp"
#include "partsplat/losses.hpp"
#include "partsplat/rasterizer.hpp"

namespace partsplat {

/// Worst agreement between analytic and central-difference gradients for one
/// parameter group: max over instances of max|a - n| / max|n|.
struct GroupCheck {
  std::string suite;
  std::string group;
  double max_rel_error = 0.0;
  int instances = 0;
  double tolerance = 0.0;

  bool pass() const { return instances > 0 && max_rel_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GroupCheck> groups;

  bool pass() const {
    return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.pass(); });
  }
};

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s{"attention", "heads", "rasterizer", "losses"};
  return s;
}

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kRasterGradTolerance = 1e-3;
inline constexpr int kGradcheckInstances = 20;

namespace detail {

// Relative error of one gradient group; `params` is perturbed in place.
inline double fd_relative_error(std::vector<double*> params, const std::vector<double>& analytic,
                                const std::function<double()>& objective, double step) {
  double max_diff = 0.0, max_num = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& x = *params[i];
    const double x0 = x;
    x = x0 + step;
    const double up = objective();
    x = x0 - step;
    const double down = objective();
    x = x0;
    const double num = (up - down) / (2.0 * step);
    max_diff = std::max(max_diff, std::abs(num - analytic[i]));
    max_num = std::max(max_num, std::abs(num));
  }
  return max_diff / std::max(max_num, 1e-12);
}

template <class M>
std::vector<double*> entries(M& m) {
  std::vector<double*> out;
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data() + i);
  return out;
}

template <class M>
std::vector<double> values(const M& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

inline std::vector<double*> entries(Image& m) {
  std::vector<double*> out;
  for (double& x : m.data()) out.push_back(&x);
  return out;
}

inline std::vector<double> values(const Image& m) { return m.data(); }

class Accumulator {
 public:
  Accumulator(std::string suite, double tol) : suite_(std::move(suite)), tol_(tol) {}

  void add(const std::string& group, double rel) {
    auto it = std::find_if(groups_.begin(), groups_.end(), [&](const GroupCheck& g) { return g.group == group; });
    if (it == groups_.end()) {
      groups_.push_back({suite_, group, 0.0, 0, tol_});
      it = groups_.end() - 1;
    }
    it->max_rel_error = std::max(it->max_rel_error, std::isfinite(rel) ? rel : 1e300);
    ++it->instances;
  }

  void append_to(GradcheckReport& r) const { r.groups.insert(r.groups.end(), groups_.begin(), groups_.end()); }

 private:
  std::string suite_;
  double tol_;
  std::vector<GroupCheck> groups_;
};

inline Vec4 random_unit_quaternion(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  return Vec4(g(rng), g(rng), g(rng), g(rng)).normalized();
}

}  // namespace detail

/// Recalibration (projections, scaled dot product with semantic weighting,
/// softmax, weighted value sum) on 16 random points, C=4, d=3, k=3.
inline void gradcheck_attention(GradcheckReport& report, int instances = kGradcheckInstances, std::uint64_t seed = 1) {
  detail::Accumulator acc("attention", kGradTolerance);
  for (int inst = 0; inst < instances; ++inst) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(inst));
    std::normal_distribution<double> g(0.0, 1.0);
    const int n = 16, c = 4, d = 3, cf = 5;
    UnprojectedPoints pts;
    pts.latent.resize(n, c);
    pts.semantic.resize(n, cf);
    for (int i = 0; i < n; ++i) {
      pts.positions.emplace_back(g(rng), g(rng), g(rng));
      pts.view_id.push_back(0);
      pts.pixel.push_back({0, i});
      for (int ch = 0; ch < c; ++ch) pts.latent(i, ch) = g(rng);
      for (int ch = 0; ch < cf; ++ch) pts.semantic(i, ch) = g(rng);
      pts.semantic.row(i).normalize();
    }
    AttentionParams params = AttentionParams::random(c, d, rng());
    params.residual = inst % 2 == 1;
    params.use_semantic = inst % 4 != 3;
    const PointIndex index(pts.positions);
    const Neighborhoods nb = spatial_neighborhoods(pts, index, {3, true, false});
    RowMatX upstream(n, c);
    for (Eigen::Index i = 0; i < upstream.size(); ++i) upstream.data()[i] = g(rng);

    const auto objective = [&] { return recalibrate(pts, nb, params).latent.cwiseProduct(upstream).sum(); };
    const auto grads = recalibrate_backward(pts, nb, params, upstream);
    constexpr double h = 1e-5;
    acc.add("w_query", detail::fd_relative_error(detail::entries(params.w_query), detail::values(grads.d_query), objective, h));
    acc.add("w_key", detail::fd_relative_error(detail::entries(params.w_key), detail::values(grads.d_key), objective, h));
    acc.add("w_value", detail::fd_relative_error(detail::entries(params.w_value), detail::values(grads.d_value), objective, h));
    acc.add("latent", detail::fd_relative_error(detail::entries(pts.latent), detail::values(grads.d_latent), objective, h));
  }
  acc.append_to(report);
}

/// Per-pixel heads on a 4x5 grid with a partial validity mask, C=6.
inline void gradcheck_heads(GradcheckReport& report, int instances = kGradcheckInstances, std::uint64_t seed = 2) {
  detail::Accumulator acc("heads", kGradTolerance);
  for (int inst = 0; inst < instances; ++inst) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(inst));
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int h = 4, w = 5, c = 6;
    FeatureGrid grid(h, w, c, FeatureKind::Latent);
    Mask valid(h, w, 1, 0);
    Image rgb(h, w, 3, 0.5);
    Grid<double> base(h, w, 3, 0.0);
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col) {
        valid(r, col) = u(rng) < 0.75 ? 1 : 0;
        for (int ch = 0; ch < c; ++ch) grid.data(r, col, ch) = g(rng);
        for (int ch = 0; ch < 3; ++ch) base(r, col, ch) = g(rng);
      }
    valid(0, 0) = 1;
    HeadParams params = HeadParams::random(c, 0.3, 0.05, 0.7, rng());
    params.max_offset = 0.1;
    params.s_max = 10.0;
    for (int k = 0; k < kHeadOutputs; ++k) params.bias[k] += 0.2 * g(rng);

    const auto first = heads_forward(grid, valid, rgb, base, params);
    std::vector<GaussianGrad> upstream(first.gaussians.size());
    for (auto& gg : upstream) {
      gg.d_mean = Vec3(g(rng), g(rng), g(rng));
      gg.d_rotation = Vec4(g(rng), g(rng), g(rng), g(rng));
      gg.d_scale = Vec3(g(rng), g(rng), g(rng));
      gg.d_opacity = g(rng);
    }
    const auto objective = [&] {
      const auto out = heads_forward(grid, valid, rgb, base, params);
      double l = 0.0;
      for (std::size_t i = 0; i < out.gaussians.size(); ++i) {
        const auto& gs = out.gaussians[i];
        const auto& up = upstream[i];
        l += up.d_mean.dot(gs.mean) + up.d_rotation.dot(gs.rotation) + up.d_scale.dot(gs.scale) +
             up.d_opacity * gs.opacity;
      }
      return l;
    };
    const auto grads = heads_backward(grid, valid, params, upstream);
    constexpr double step = 1e-6;
    acc.add("weights", detail::fd_relative_error(detail::entries(params.weights), detail::values(grads.d_weights), objective, step));
    acc.add("bias", detail::fd_relative_error(detail::entries(params.bias), detail::values(grads.d_bias), objective, step));
    std::vector<double*> cells;
    std::vector<double> analytic;
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        for (int ch = 0; ch < c; ++ch) {
          cells.push_back(&grid.data(r, col, ch));
          analytic.push_back(grads.d_grid.data(r, col, ch));
        }
    acc.add("embedding", detail::fd_relative_error(cells, analytic, objective, step));
  }
  acc.append_to(report);
}

/// Reference rasterizer backward for 8 Gaussians on a 16x16 image. The
/// contribution plan of the unperturbed scene is frozen so that the finite
/// differences see the same discrete compositing decisions.
inline void gradcheck_rasterizer(GradcheckReport& report, int instances = kGradcheckInstances, std::uint64_t seed = 3) {
  detail::Accumulator acc("rasterizer", kRasterGradTolerance);
  for (int inst = 0; inst < instances; ++inst) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(inst));
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Camera cam = look_at(Vec3(0.3 * g(rng), -3.0, 0.3 * g(rng)), Vec3::Zero(), Vec3::UnitZ(), 20.0, 20.0, 16, 16);
    GaussianSet gs(8);
    for (auto& gg : gs) {
      gg.mean = Vec3(0.5 * g(rng), 0.5 * g(rng), 0.5 * g(rng));
      gg.rotation = detail::random_unit_quaternion(rng);
      gg.scale = Vec3(0.08 + 0.15 * u(rng), 0.08 + 0.15 * u(rng), 0.08 + 0.15 * u(rng));
      gg.opacity = 0.2 + 0.6 * u(rng);
      gg.color = Vec3(u(rng), u(rng), u(rng));
    }
    const Vec3 background(0.1, 0.2, 0.3);
    ContributionPlan plan;
    rasterize_reference(cam, gs, background, &plan);
    Image upstream(16, 16, 3, 0.0);
    for (std::size_t i = 0; i < upstream.size(); ++i) upstream.data()[i] = g(rng);

    const auto objective = [&] {
      const auto out = rasterize_frozen(cam, gs, plan, background);
      double l = 0.0;
      for (std::size_t i = 0; i < upstream.size(); ++i) l += out.color.data()[i] * upstream.data()[i];
      return l;
    };
    const auto grads = rasterize_backward_reference(cam, gs, background, upstream, &plan);
    std::vector<double*> mean, rot, scale, opacity, color;
    std::vector<double> a_mean, a_rot, a_scale, a_opacity, a_color;
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const GaussianGrad& gg = grads.gaussians[i];
      for (int k = 0; k < 3; ++k) {
        mean.push_back(&gs[i].mean[k]);
        a_mean.push_back(gg.d_mean[k]);
        scale.push_back(&gs[i].scale[k]);
        a_scale.push_back(gg.d_scale[k]);
        color.push_back(&gs[i].color[k]);
        a_color.push_back(gg.d_color[k]);
      }
      for (int k = 0; k < 4; ++k) {
        rot.push_back(&gs[i].rotation[k]);
        a_rot.push_back(gg.d_rotation[k]);
      }
      opacity.push_back(&gs[i].opacity);
      a_opacity.push_back(gg.d_opacity);
    }
    constexpr double h = 1e-6;
    acc.add("mean", detail::fd_relative_error(mean, a_mean, objective, h));
    acc.add("rotation", detail::fd_relative_error(rot, a_rot, objective, h));
    acc.add("scale", detail::fd_relative_error(scale, a_scale, objective, h));
    acc.add("opacity", detail::fd_relative_error(opacity, a_opacity, objective, h));
    acc.add("color", detail::fd_relative_error(color, a_color, objective, h));
  }
  acc.append_to(report);
}

/// L1 and SSIM on random 16x16x3 pairs, their weighted render loss, and the
/// Chamfer distance between 200 and 300 random points with matches frozen.
inline void gradcheck_losses(GradcheckReport& report, int instances = kGradcheckInstances, std::uint64_t seed = 4) {
  detail::Accumulator acc("losses", kGradTolerance);
  for (int inst = 0; inst < instances; ++inst) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(inst));
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image a(16, 16, 3), b(16, 16, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a.data()[i] = u(rng);
      b.data()[i] = u(rng);
    }
    const auto cells = detail::entries(a);
    constexpr double h = 1e-6;

    const auto l1 = l1_loss(a, b);
    acc.add("l1", detail::fd_relative_error(cells, detail::values(l1.grad), [&] { return l1_loss(a, b).value; }, h));
    const auto s = ssim(a, b);
    acc.add("ssim", detail::fd_relative_error(cells, detail::values(s.grad), [&] { return ssim(a, b, false).value; }, h));
    const auto rl = render_loss(a, b);
    acc.add("render_loss", detail::fd_relative_error(cells, detail::values(rl.grad), [&] { return render_loss(a, b).value; }, h));

    std::vector<Vec3> p(200), v(300);
    for (auto& x : p) x = Vec3(g(rng), g(rng), g(rng));
    for (auto& x : v) x = Vec3(g(rng), g(rng), g(rng));
    const auto ch = chamfer(p, v);
    std::vector<double*> coords;
    std::vector<double> analytic;
    for (std::size_t i = 0; i < p.size(); ++i)
      for (int k = 0; k < 3; ++k) {
        coords.push_back(&p[i][k]);
        analytic.push_back(ch.grad[i][k]);
      }
    acc.add("chamfer", detail::fd_relative_error(coords, analytic, [&] { return chamfer_frozen(p, v, ch.matches); }, h));
  }
  acc.append_to(report);
}

/// Run the named suite ("attention", "heads", "rasterizer", "losses") or all.
inline GradcheckReport run_gradcheck(const std::string& scope, int instances = kGradcheckInstances) {
  require(scope == "all" || std::find(gradcheck_scopes().begin(), gradcheck_scopes().end(), scope) !=
                                gradcheck_scopes().end(),
          ErrorKind::Config, "unknown gradcheck scope '" + scope + "'");
  require(instances >= 1, ErrorKind::Config, "gradcheck needs at least one instance");
  GradcheckReport r;
  if (scope == "all" || scope == "attention") gradcheck_attention(r, instances);
  if (scope == "all" || scope == "heads") gradcheck_heads(r, instances);
  if (scope == "all" || scope == "rasterizer") gradcheck_rasterizer(r, instances);
  if (scope == "all" || scope == "losses") gradcheck_losses(r, instances);
  return r;
}

}  // namespace partsplat
