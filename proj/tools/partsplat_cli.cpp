#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "partsplat/bench.hpp"
#include "partsplat/gradcheck.hpp"
#include "partsplat/pipeline.hpp"

namespace fs = std::filesystem;
using namespace partsplat;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string in;
};

// Base configuration: the dataset's recorded config when reading one, then
// the --config file, then --seed.
PipelineConfig load_config(const CommonArgs& a, const fs::path& dataset_dir = {}) {
  PipelineConfig cfg;
  if (!dataset_dir.empty() && fs::exists(dataset_dir / "config.txt"))
    cfg = parse_config(io::read_text(dataset_dir / "config.txt"));
  if (!a.config.empty()) cfg = parse_config(io::read_text(a.config), cfg);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  return cfg;
}

void print_manifest(const PipelineConfig& cfg) {
  std::cout << "# effective config\n" << config_manifest(cfg) << std::flush;
}

io::json matrix_json(const MatX& m) {
  io::json rows = io::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    io::json row = io::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

io::json params_json(const ModelParams& p) {
  return {{"attention",
           {{"w_query", matrix_json(p.attention.w_query)},
            {"w_key", matrix_json(p.attention.w_key)},
            {"w_value", matrix_json(p.attention.w_value)},
            {"use_semantic", p.attention.use_semantic},
            {"residual", p.attention.residual}}},
          {"heads",
           {{"weights", matrix_json(p.heads.weights)},
            {"bias", std::vector<double>(p.heads.bias.data(), p.heads.bias.data() + p.heads.bias.size())},
            {"max_offset", p.heads.max_offset},
            {"s_min", p.heads.s_min},
            {"s_max", p.heads.s_max}}}};
}

void write_renders(const fs::path& dir, const std::vector<Image>& renders) {
  io::ensure_dir(dir);
  for (std::size_t i = 0; i < renders.size(); ++i)
    io::write_rgb_png(dir / (view_dir_name(i) + ".png"), renders[i]);
}

void write_manifest(const fs::path& out, const PipelineConfig& cfg) {
  io::ensure_dir(out);
  io::write_text(out / "manifest.txt", config_manifest(cfg));
}

int cmd_synth(const CommonArgs& a) {
  const PipelineConfig cfg = load_config(a);
  print_manifest(cfg);
  const Dataset ds = synthesize(cfg);
  write_dataset(ds, cfg, a.out);
  std::cout << "wrote " << ds.views.size() << " views and " << ds.heldout.size() << " held-out views to " << a.out
            << "\n";
  return kExitOk;
}

int cmd_pipeline(const CommonArgs& a) {
  const PipelineConfig cfg = load_config(a, a.in);
  print_manifest(cfg);
  const Dataset ds = read_dataset(a.in);
  const fs::path out = a.out;
  write_manifest(out, cfg);
  const PipelineRun run = run_pipeline(ds, cfg);
  write_renders(out / "renders", run.renders);
  io::write_ply(out / "gaussians.ply", run.forward.gaussians);
  io::write_text(out / "attention.csv", attention_csv(run.forward));
  io::json metrics = metrics_json(run.metrics);
  if (cfg.ablation) {
    io::json ab = io::json::object();
    for (const auto& [name, m] : run_ablation(ds, cfg)) ab[name] = metrics_json(m);
    metrics["ablation"] = ab;
  }
  io::write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::printf("held-out PSNR %.3f dB  SSIM %.4f  Gaussians %zu\n", run.metrics.psnr_db, run.metrics.ssim,
              run.metrics.gaussians);
  return kExitOk;
}

int cmd_fit(const CommonArgs& a) {
  const PipelineConfig cfg = load_config(a, a.in);
  print_manifest(cfg);
  const Dataset ds = read_dataset(a.in);
  const fs::path out = a.out;
  write_manifest(out, cfg);
  FitResult r;
  try {
    fit(ds, cfg, r, &std::cout);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Divergence) throw;
    io::write_text(out / "loss.csv", loss_csv(r.curve));
    io::write_text(out / "divergence.json",
                   io::json{{"error", e.what()}, {"iterations_completed", r.curve.size()}, {"params", params_json(r.params)}}
                           .dump(2) +
                       "\n");
    std::cerr << e.what() << "\ndiagnostics written to " << (out / "divergence.json").string() << "\n";
    return kExitVerification;
  }
  io::write_text(out / "loss.csv", loss_csv(r.curve));
  io::write_text(out / "params.json", params_json(r.params).dump(2) + "\n");
  const PipelineRun run = run_pipeline(ds, cfg, r.params);
  write_renders(out / "renders", run.renders);
  io::write_ply(out / "gaussians.ply", run.forward.gaussians);
  io::write_text(out / "metrics.json",
                 io::json{{"initial", metrics_json(r.initial)}, {"final", metrics_json(r.final)}}.dump(2) + "\n");
  std::printf("total loss %.6g -> %.6g  held-out PSNR %.3f -> %.3f dB\n", r.curve.front().total, r.curve.back().total,
              r.initial.psnr_db, r.final.psnr_db);
  return kExitOk;
}

int cmd_eval(const std::string& rendered, const std::string& gt, const std::string& out) {
  require(fs::is_directory(rendered), ErrorKind::Io, "rendered directory not found: " + rendered);
  require(fs::is_directory(gt), ErrorKind::Io, "ground-truth directory not found: " + gt);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(rendered))
    if (e.path().extension() == ".png") files.push_back(e.path().filename());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorKind::EmptyInput, "no PNG files in " + rendered);
  const LossWeights w;
  RunMetrics m;
  io::json per = io::json::object();
  for (const auto& f : files) {
    require(fs::exists(fs::path(gt) / f), ErrorKind::Io, "missing ground truth for " + f.string());
    const ViewMetrics v = image_metrics(io::read_rgb_png(fs::path(rendered) / f), io::read_rgb_png(fs::path(gt) / f), w);
    per[f.string()] = {{"psnr_db", io::number(v.psnr_db)}, {"ssim", v.ssim}, {"l1", v.l1}};
    m.views.push_back(v);
  }
  const double n = static_cast<double>(m.views.size());
  for (const auto& v : m.views) {
    m.psnr_db += v.psnr_db / n;
    m.ssim += v.ssim / n;
    m.l1 += v.l1 / n;
  }
  const io::json j = {{"psnr_db", io::number(m.psnr_db)}, {"ssim", m.ssim}, {"l1", m.l1}, {"images", per}};
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    io::ensure_dir(out);
    io::write_text(fs::path(out) / "metrics.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, int instances) {
  const GradcheckReport r = run_gradcheck(scope, instances);
  for (const auto& g : r.groups)
    std::printf("%-10s %-12s max_rel_err %.3e  tol %.0e  instances %d  %s\n", g.suite.c_str(), g.group.c_str(),
                g.max_rel_error, g.tolerance, g.instances, g.pass() ? "PASS" : "FAIL");
  std::printf("gradcheck %s\n", r.pass() ? "PASS" : "FAIL");
  return r.pass() ? kExitOk : kExitVerification;
}

int cmd_bench(const CommonArgs& a, int seeds) {
  const PipelineConfig cfg = load_config(a);
  print_manifest(cfg);
  const AblationBench ab = ablation_bench(cfg, seeds);
  io::json j;
  for (const auto& v : ablation_variants()) {
    std::printf("%-20s mean PSNR %.3f dB\n", v.name.c_str(), ab.mean_psnr(v.name));
    j["ablation"][v.name] = {{"psnr_db", ab.psnr.at(v.name)}, {"same_part_mass", ab.mass.at(v.name)},
                             {"mean_psnr_db", ab.mean_psnr(v.name)}};
  }
  j["seeds"] = ab.seeds;
  for (const auto& [n, p] : view_count_bench(cfg, {3, 4, 5}, seeds)) {
    std::printf("%d views            mean PSNR %.3f dB\n", n, p);
    j["view_count"][std::to_string(n)] = p;
  }
  const RenderTiming t = render_timing(synthesize(cfg), cfg);
  std::printf("render %zu Gaussians: reference %.1f ms, tiled %.1f ms\n", t.gaussians, t.reference_ms, t.tiled_ms);
  j["render_ms"] = {{"reference", t.reference_ms}, {"tiled", t.tiled_ms}, {"gaussians", t.gaussians}};
  if (!a.out.empty()) {
    write_manifest(a.out, cfg);
    io::write_text(fs::path(a.out) / "bench.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonArgs& a, bool needs_in, bool needs_out) {
  cmd->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "override the config seed");
  auto* out = cmd->add_option("--out", a.out, "output directory");
  if (needs_out) out->required();
  if (needs_in) cmd->add_option("--in", a.in, "dataset directory written by synth")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-aware multi-view Gaussian splatting on synthetic figures"};
  app.require_subcommand(1);
  CommonArgs synth_args, pipe_args, fit_args, bench_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene and view bundles");
  add_common(synth, synth_args, false, true);
  auto* pipe = app.add_subcommand("pipeline", "recalibrate, decode and render held-out views");
  add_common(pipe, pipe_args, true, true);
  auto* fitc = app.add_subcommand("fit", "optimize attention and head parameters by gradient descent");
  add_common(fitc, fit_args, true, true);
  std::string rendered, gt, eval_out;
  auto* eval = app.add_subcommand("eval", "score rendered PNGs against ground-truth PNGs of the same names");
  eval->add_option("--rendered", rendered, "directory of rendered PNGs")->required();
  eval->add_option("--gt", gt, "directory of ground-truth PNGs")->required();
  eval->add_option("--out", eval_out, "write metrics.json here instead of stdout");
  std::string scope = "all";
  int instances = kGradcheckInstances;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  grad->add_option("--scope", scope, "attention | heads | rasterizer | losses | all")
      ->check(CLI::IsMember({"attention", "heads", "rasterizer", "losses", "all"}));
  grad->add_option("--instances", instances, "random instances per suite")->check(CLI::PositiveNumber);
  int seeds = 5;
  auto* bench = app.add_subcommand("bench", "ablation and view-count sweeps over consecutive seeds");
  add_common(bench, bench_args, false, false);
  bench->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_args);
    if (*pipe) return cmd_pipeline(pipe_args);
    if (*fitc) return cmd_fit(fit_args);
    if (*eval) return cmd_eval(rendered, gt, eval_out);
    if (*grad) return cmd_gradcheck(scope, instances);
    if (*bench) return cmd_bench(bench_args, seeds);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::Config:
      case ErrorKind::Format:
      case ErrorKind::Io:
      case ErrorKind::Shape:
        return kExitUsage;
      default:
        return kExitVerification;
    }
  }
  return kExitUsage;
}
