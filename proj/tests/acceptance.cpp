// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

#include "partsplat/bench.hpp"
#include "partsplat/gradcheck.hpp"
#include "partsplat/pipeline.hpp"

using namespace partsplat;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

PipelineConfig config_file(const std::string& name) {
  return parse_config(io::read_text(io::fs::path(PARTSPLAT_CONFIG_DIR) / name));
}

// Benchmark results shared by criteria 7 and 8.
const AblationBench& ablation() {
  static const AblationBench bench = ablation_bench(config_file("default.cfg"), 5);
  return bench;
}

Outcome rasterizer_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> size(8, 128), count(1, 512), tile(4, 32);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  const int scenes = 60;
  for (int i = 0; i < scenes; ++i) {
    const double az = 2.0 * std::numbers::pi * u(rng);
    const int w = size(rng), h = size(rng);
    const Camera cam = look_at(Vec3(3 * std::cos(az), 3 * std::sin(az), 0.5), Vec3::Zero(), Vec3::UnitZ(), 0.9 * w,
                               0.9 * w, w, h);
    GaussianSet gs(static_cast<std::size_t>(count(rng)));
    for (auto& x : gs) {
      x.mean = Vec3(0.6 * g(rng), 0.6 * g(rng), 0.6 * g(rng));
      x.rotation = detail::random_unit_quaternion(rng);
      x.scale = Vec3(0.005 + 0.1 * u(rng), 0.005 + 0.1 * u(rng), 0.005 + 0.1 * u(rng));
      x.opacity = 0.02 + 0.97 * u(rng);
      x.color = Vec3(u(rng), u(rng), u(rng));
    }
    const Vec3 bg(u(rng), u(rng), u(rng));
    const auto ref = rasterize_reference(cam, gs, bg);
    const auto tiled = rasterize_tiled(cam, gs, bg, tile(rng));
    for (std::size_t k = 0; k < ref.color.size(); ++k)
      worst = std::max(worst, std::abs(ref.color.data()[k] - tiled.color.data()[k]));
  }
  return {worst <= 1e-5, fmt("%d scenes, max abs diff %.3e (tol 1e-5)", scenes, worst)};
}

Outcome analytic_profile() {
  Camera cam;
  cam.fx = cam.fy = 25.0;
  cam.width = cam.height = 33;
  cam.cx = cam.cy = 16.5;
  GaussianPrimitive gp;
  gp.mean = Vec3(0, 0, 2);
  gp.scale = Vec3::Constant(0.15);
  gp.opacity = 0.8;
  const auto out = rasterize_reference(cam, {gp}, Vec3::Zero());
  const double var = std::pow(25.0 * 0.15 / 2.0, 2) + kLowPassDilation;
  const double reach = 3.0 * std::sqrt(var);
  double worst = 0.0;
  for (int r = 0; r < 33; ++r)
    for (int c = 0; c < 33; ++c) {
      const double dr = r - 16, dc = c - 16;
      double a = 0.8 * std::exp(-0.5 * (dr * dr + dc * dc) / var);
      if (a < kAlphaMin || std::abs(dr) > reach || std::abs(dc) > reach) a = 0.0;
      worst = std::max(worst, std::abs(out.alpha(r, c) - a));
    }
  return {worst <= 1e-4, fmt("max alpha error %.3e over 33x33 (tol 1e-4)", worst)};
}

Outcome gradient_suites() {
  const GradcheckReport r = run_gradcheck("all", kGradcheckInstances);
  std::string detail;
  int min_instances = 1 << 30;
  double worst = 0.0;
  for (const auto& g : r.groups) {
    detail += fmt("%s/%s %.1e; ", g.suite.c_str(), g.group.c_str(), g.max_rel_error);
    min_instances = std::min(min_instances, g.instances);
    worst = std::max(worst, g.max_rel_error);
  }
  const bool ok = r.pass() && worst < 1e-4 && min_instances >= 20;
  return {ok, fmt("%zu groups, >= %d instances each, max rel err %.1e (tol 1e-4): ", r.groups.size(), min_instances,
                  worst) +
                  detail};
}

Outcome geometry_round_trips() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_px = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double az = 2.0 * std::numbers::pi * u(rng);
    Camera cam = look_at(Vec3(3 * std::cos(az), 3 * std::sin(az), 2 * u(rng) - 1), Vec3::Zero(), Vec3::UnitZ(),
                         40 + 100 * u(rng), 40 + 100 * u(rng), 64, 48);
    cam.cx += 4 * u(rng) - 2;
    const PixelIndex px{static_cast<int>(48 * u(rng)), static_cast<int>(64 * u(rng))};
    const auto p = project_point(cam, unproject_pixel(cam, px, 0.5 + 5 * u(rng)));
    worst_px = std::max({worst_px, std::abs(p.row - px.row), std::abs(p.col - px.col)});
  }
  const Dataset ds = synthesize(config_file("default.cfg"));
  double worst_sdf = 0.0;
  for (const auto& v : ds.views)
    for (int r = 0; r < v.camera.height; ++r)
      for (int c = 0; c < v.camera.width; ++c)
        if (v.depth_gt.is_valid(r, c))
          worst_sdf = std::max(worst_sdf,
                               std::abs(scene_sdf(ds.scene, unproject_pixel(v.camera, {r, c}, v.depth_gt.values(r, c)))));
  return {worst_px < 1e-4 && worst_sdf <= 1e-4,
          fmt("round trip max %.2e px (tol 1e-4), depth SDF max %.2e m (tol 1e-4)", worst_px, worst_sdf)};
}

Outcome knn_chamfer_exact() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int mismatches = 0, queries = 0;
  for (int suite = 0; suite < 5; ++suite) {
    std::vector<Vec3> pts(1000);
    for (auto& p : pts) p = Vec3(u(rng), u(rng), (suite + 1) * 0.2 * u(rng));
    const PointIndex index(pts);
    for (int q = 0; q < 100; ++q, ++queries) {
      const Vec3 query(1.2 * u(rng), 1.2 * u(rng), 1.2 * u(rng));
      std::vector<Neighbor> all;
      for (std::size_t i = 0; i < pts.size(); ++i) all.push_back({static_cast<int>(i), (pts[i] - query).squaredNorm()});
      std::sort(all.begin(), all.end(), neighbor_less);
      const auto got = index.knn_point(query, 16);
      for (int k = 0; k < 16; ++k) mismatches += got[static_cast<std::size_t>(k)].index != all[static_cast<std::size_t>(k)].index;
    }
  }
  std::vector<Vec3> p(700), v(900);
  for (auto& x : p) x = Vec3(u(rng), u(rng), u(rng));
  for (auto& x : v) x = Vec3(u(rng), u(rng), u(rng));
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
  const double err = std::abs(chamfer(p, v).value - (fwd / 700.0 + bwd / 900.0));
  return {mismatches == 0 && err <= 1e-7,
          fmt("%d KNN queries, %d mismatches; Chamfer error %.2e (tol 1e-7)", queries, mismatches, err)};
}

Outcome attention_normalization() {
  PipelineConfig cfg = config_file("default.cfg");
  const Dataset ds = synthesize(cfg);
  auto pts = lift(ds);
  const PointIndex index(pts.positions);
  AttentionParams params = AttentionParams::random(cfg.latent_channels, cfg.attn_dim, 11);
  const auto out = recalibrate(pts, index, params, cfg.k, true);
  double worst = 0.0;
  for (const auto& r : *out.records) {
    double s = 0.0;
    for (double a : r.alpha) s += a;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  params.use_semantic = false;
  const auto off = recalibrate(pts, index, params, cfg.k);
  params.use_semantic = true;
  pts.semantic.setOnes();
  const auto ones = recalibrate(pts, index, params, cfg.k);
  const bool same = off.latent == ones.latent;
  return {worst <= 1e-6 && same, fmt("max |sum alpha - 1| %.2e over %zu points (tol 1e-6); s=1 ablation %s", worst,
                                     out.records->size(), same ? "bitwise identical" : "DIFFERS")};
}

Outcome mechanism() {
  const auto& b = ablation();
  const auto& on = b.mass.at("full");
  const auto& off = b.mass.at("no_semantic");
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < on.size(); ++i) {
    ok = ok && on[i] > off[i];
    detail += fmt("seed %llu: %.4f vs %.4f (+%.4f); ", static_cast<unsigned long long>(b.seeds[i]), on[i], off[i],
                  on[i] - off[i]);
  }
  return {ok, detail};
}

Outcome ablation_ordering() {
  const auto& b = ablation();
  const double full = b.mean_psnr("full"), ns = b.mean_psnr("no_semantic"), n3 = b.mean_psnr("no_3d_unprojection");
  return {full - ns >= 0.1 && full - n3 >= 0.1,
          fmt("mean PSNR full %.3f, no_semantic %.3f (+%.3f), no_3d_unprojection %.3f (+%.3f), need +0.1 dB", full, ns,
              full - ns, n3, full - n3)};
}

Outcome view_trend() {
  const auto r = view_count_bench(config_file("default.cfg"), {3, 4, 5}, 5);
  const bool ok = r[0].second <= r[1].second && r[1].second <= r[2].second;
  return {ok, fmt("mean PSNR 3 views %.3f, 4 views %.3f, 5 views %.3f", r[0].second, r[1].second, r[2].second)};
}

Outcome end_to_end_fit() {
  const PipelineConfig cfg = config_file("fit.cfg");
  const Dataset ds = synthesize(cfg);
  FitResult r;
  fit(ds, cfg, r);
  int bad_windows = 0, windows = 0;
  for (std::size_t s = 0; s + 20 < r.curve.size(); ++s, ++windows) bad_windows += !(r.curve[s + 20].total < r.curve[s].total);
  const double gain = r.final.psnr_db - r.initial.psnr_db;
  return {bad_windows == 0 && gain >= 1.0,
          fmt("loss %.5f -> %.5f, %d/%d 20-iteration windows decreasing; held-out PSNR %.3f -> %.3f (+%.3f dB, need +1)",
              r.curve.front().total, r.curve.back().total, windows - bad_windows, windows, r.initial.psnr_db,
              r.final.psnr_db, gain)};
}

Outcome loss_constants() {
  const PipelineConfig cfg = config_file("default.cfg");
  const std::string m = config_manifest(cfg);
  const bool manifest = m.find("lambda_l1 = 0.8\n") != std::string::npos &&
                        m.find("lambda_ssim = 0.2\n") != std::string::npos &&
                        m.find("lambda_geom = 1\n") != std::string::npos;
  const LossWeights w;
  const bool defaults = w.lambda_l1 == 0.8 && w.lambda_ssim == 0.2 && w.lambda_geom == 1.0;
  const Dataset ds = synthesize(cfg);
  const auto run = run_pipeline(ds, cfg);
  double render = 0.0;
  for (std::size_t i = 0; i < ds.heldout.size(); ++i)
    render += (0.8 * l1_loss(run.renders[i], ds.heldout[i].rgb).value +
               0.2 * (1.0 - ssim(run.renders[i], ds.heldout[i].rgb).value)) /
              static_cast<double>(ds.heldout.size());
  const double geom = chamfer(gaussian_means(run.forward.gaussians), ds.scene.surface_samples).value;
  const double err = std::abs(run.metrics.total_loss - (render + 1.0 * geom));
  return {manifest && defaults && err <= 1e-9,
          fmt("manifest %s, defaults %s, total_loss composition error %.2e", manifest ? "ok" : "MISSING",
              defaults ? "ok" : "WRONG", err)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"C1 rasterizer oracle equivalence", rasterizer_oracle},
      {"C2 analytic alpha profile", analytic_profile},
      {"C3 gradient suites", gradient_suites},
      {"C4 geometry round trips", geometry_round_trips},
      {"C5 KNN and Chamfer exactness", knn_chamfer_exact},
      {"C6 attention normalization and ablation equivalence", attention_normalization},
      {"C7 same-part attention mass", mechanism},
      {"C8 ablation ordering", ablation_ordering},
      {"C9 view-count trend", view_trend},
      {"C10 end-to-end fit", end_to_end_fit},
      {"C11 loss constants", loss_constants},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %s [%.1fs] %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
