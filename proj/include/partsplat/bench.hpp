#pragma once

#include <chrono>
#include <map>
#include <string>
#include <vector>

#include "partsplat/pipeline.hpp"

namespace partsplat {

/// Held-out PSNR and same-part attention mass of each ablation variant, per
/// seed, on consecutive seeds starting at cfg.seed.
struct AblationBench {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> psnr;
  std::map<std::string, std::vector<double>> mass;

  double mean_psnr(const std::string& variant) const {
    const auto& v = psnr.at(variant);
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

inline AblationBench ablation_bench(const PipelineConfig& cfg, int n_seeds) {
  require(n_seeds >= 1, ErrorKind::Config, "bench needs at least one seed");
  AblationBench out;
  for (int s = 0; s < n_seeds; ++s) {
    PipelineConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(s);
    out.seeds.push_back(c.seed);
    const Dataset ds = synthesize(c);
    for (const auto& [name, m] : run_ablation(ds, c)) {
      out.psnr[name].push_back(m.psnr_db);
      out.mass[name].push_back(m.same_part_mass.value_or(0.0));
    }
  }
  return out;
}

/// Mean held-out PSNR per input view count over consecutive seeds.
inline std::vector<std::pair<int, double>> view_count_bench(const PipelineConfig& cfg, const std::vector<int>& counts,
                                                           int n_seeds) {
  require(n_seeds >= 1, ErrorKind::Config, "bench needs at least one seed");
  std::vector<std::pair<int, double>> out;
  for (int n : counts) {
    double mean = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
      PipelineConfig c = cfg;
      c.n_views = n;
      c.seed = cfg.seed + static_cast<std::uint64_t>(s);
      mean += run_pipeline(synthesize(c), c).metrics.psnr_db / n_seeds;
    }
    out.emplace_back(n, mean);
  }
  return out;
}

struct RenderTiming {
  double reference_ms = 0.0;
  double tiled_ms = 0.0;
  std::size_t gaussians = 0;
};

/// Wall time of both renderers on the first held-out camera of `ds`.
inline RenderTiming render_timing(const Dataset& ds, const PipelineConfig& cfg) {
  const auto f = forward(ds, cfg, make_params(cfg), false);
  const Camera& cam = ds.heldout.at(0).camera;
  using clock = std::chrono::steady_clock;
  RenderTiming t;
  t.gaussians = f.gaussians.size();
  auto t0 = clock::now();
  rasterize_reference(cam, f.gaussians, background_color());
  auto t1 = clock::now();
  rasterize_tiled(cam, f.gaussians, background_color());
  auto t2 = clock::now();
  t.reference_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  t.tiled_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  return t;
}

}  // namespace partsplat
