#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "partsplat/pipeline.hpp"
#include "test_util.hpp"

using namespace partsplat;
using partsplat::fixtures::scratch_dir;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args, const io::fs::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string("\"") + PARTSPLAT_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = io::read_text(log);
  return r;
}

std::string bytes(const io::fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_small_config(const io::fs::path& path, int n_views = 2) {
  io::write_text(path, "width = 20\nheight = 20\nn_views = " + std::to_string(n_views) +
                           "\nheldout_scale = 1\nheldout_azimuths = 45, 200\n");
}

}  // namespace

TEST(Cli, SynthIsByteIdenticalOnRerun) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg", 4);
  const auto cfg = (dir / "small.cfg").string();
  ASSERT_EQ(run_cli("synth --config " + cfg + " --out " + (dir / "a").string(), dir).code, 0);
  const auto first = run_cli("synth --config " + cfg + " --out " + (dir / "b").string(), dir);
  ASSERT_EQ(first.code, 0);
  EXPECT_NE(first.output.find("lambda_l1 = 0.8"), std::string::npos);
  std::size_t files = 0;
  for (const auto& e : io::fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = io::fs::relative(e.path(), dir / "a");
    EXPECT_EQ(bytes(e.path()), bytes(dir / "b" / rel)) << rel;
  }
  EXPECT_GT(files, 4u * 7u);
  EXPECT_TRUE(io::fs::exists(dir / "a" / "scene.json"));
  EXPECT_TRUE(io::fs::is_directory(dir / "a" / "views" / "view_003"));
  EXPECT_FALSE(io::fs::exists(dir / "a" / "views" / "view_004"));
}

TEST(Cli, ViewCounts) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg");
  for (int n : {3, 5}) {
    io::write_text(dir / "n.cfg", "width = 16\nheight = 16\nn_views = " + std::to_string(n) + "\n");
    const auto out = dir / ("n" + std::to_string(n));
    ASSERT_EQ(run_cli("synth --config " + (dir / "n.cfg").string() + " --out " + out.string(), dir).code, 0);
    EXPECT_EQ(count_view_dirs(out / "views"), static_cast<std::size_t>(n));
  }
}

TEST(Cli, MalformedConfigNamesTheField) {
  const auto dir = scratch_dir();
  io::write_text(dir / "bad.cfg", "width = 20\nk = lots\n");
  const auto r = run_cli("synth --config " + (dir / "bad.cfg").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("'k'"), std::string::npos) << r.output;
  EXPECT_EQ(run_cli("synth --out", dir).code, 2);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
}

TEST(Cli, PipelineWritesOutputs) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg");
  ASSERT_EQ(run_cli("synth --config " + (dir / "small.cfg").string() + " --out " + (dir / "d").string(), dir).code, 0);
  io::write_text(dir / "ab.cfg", "ablation = true\n");
  const auto r = run_cli("pipeline --in " + (dir / "d").string() + " --config " + (dir / "ab.cfg").string() +
                             " --out " + (dir / "p").string(),
                         dir);
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"renders/view_000.png", "renders/view_001.png", "gaussians.ply", "attention.csv", "metrics.json",
                        "manifest.txt"})
    EXPECT_TRUE(io::fs::exists(dir / "p" / f)) << f;
  const auto m = io::json::parse(io::read_text(dir / "p" / "metrics.json"));
  ASSERT_TRUE(m.contains("ablation"));
  for (const char* v : {"full", "no_semantic", "no_3d_unprojection", "neither"}) {
    ASSERT_TRUE(m["ablation"].contains(v)) << v;
    EXPECT_TRUE(m["ablation"][v].contains("same_part_attention_mass")) << v;
  }
  EXPECT_NE(io::read_text(dir / "p" / "manifest.txt").find("ablation = true"), std::string::npos);

  // Scoring the renders against the held-out ground truth gives the same PSNR.
  io::ensure_dir(dir / "gt");
  for (int i = 0; i < 2; ++i)
    io::fs::copy_file(dir / "d" / "heldout" / view_dir_name(i) / "rgb.png", dir / "gt" / (view_dir_name(i) + ".png"));
  ASSERT_EQ(run_cli("eval --rendered " + (dir / "p" / "renders").string() + " --gt " + (dir / "gt").string() +
                        " --out " + (dir / "e").string(),
                    dir)
                .code,
            0);
  const auto e = io::json::parse(io::read_text(dir / "e" / "metrics.json"));
  EXPECT_NEAR(e["psnr_db"].get<double>(), m["psnr_db"].get<double>(), 0.05);
}

TEST(Cli, CorruptedFeatureGridFails) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg");
  ASSERT_EQ(run_cli("synth --config " + (dir / "small.cfg").string() + " --out " + (dir / "d").string(), dir).code, 0);
  const auto fgr = dir / "d" / "views" / "view_001" / "semantic.fgr";
  std::string raw = bytes(fgr);
  raw[3] = 'X';
  io::write_text(fgr, raw);
  const auto r = run_cli("pipeline --in " + (dir / "d").string() + " --out " + (dir / "p").string(), dir);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("FGR1"), std::string::npos) << r.output;
  io::fs::remove(dir / "d" / "views" / "view_000" / "latent.fgr");
  const auto missing = run_cli("pipeline --in " + (dir / "d").string() + " --out " + (dir / "p").string(), dir);
  EXPECT_NE(missing.code, 0);
  EXPECT_NE(missing.output.find("latent.fgr"), std::string::npos) << missing.output;
}

TEST(Cli, FitWritesCurve) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg");
  ASSERT_EQ(run_cli("synth --config " + (dir / "small.cfg").string() + " --out " + (dir / "d").string(), dir).code, 0);
  io::write_text(dir / "fit.cfg", "iterations = 3\nparams = random\n");
  const auto r = run_cli("fit --in " + (dir / "d").string() + " --config " + (dir / "fit.cfg").string() + " --out " +
                             (dir / "f").string(),
                         dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string csv = io::read_text(dir / "f" / "loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  const auto m = io::json::parse(io::read_text(dir / "f" / "metrics.json"));
  EXPECT_TRUE(m.contains("initial") && m.contains("final"));
  EXPECT_TRUE(io::fs::exists(dir / "f" / "params.json"));
  const std::string manifest = io::read_text(dir / "f" / "manifest.txt");
  EXPECT_NE(manifest.find("lambda_ssim = 0.2"), std::string::npos);
  EXPECT_NE(manifest.find("iterations = 3"), std::string::npos);
}

TEST(Cli, FitDivergenceDumpsDiagnostics) {
  const auto dir = scratch_dir();
  write_small_config(dir / "small.cfg");
  ASSERT_EQ(run_cli("synth --config " + (dir / "small.cfg").string() + " --out " + (dir / "d").string(), dir).code, 0);
  io::write_text(dir / "fit.cfg", "iterations = 50\nparams = random\nattention_step_size = 1e300\n");
  const auto r = run_cli("fit --in " + (dir / "d").string() + " --config " + (dir / "fit.cfg").string() + " --out " +
                             (dir / "f").string(),
                         dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(io::fs::exists(dir / "f" / "divergence.json"));
}

TEST(Cli, ScopedGradcheck) {
  const auto dir = scratch_dir();
  const auto r = run_cli("gradcheck --scope losses --instances 3", dir);
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("chamfer"), std::string::npos);
  EXPECT_NE(r.output.find("max_rel_err"), std::string::npos);
  EXPECT_EQ(r.output.find("attention"), std::string::npos);
  EXPECT_EQ(run_cli("gradcheck --scope everything", dir).code, 2);
}

TEST(Cli, EvalIdenticalDirs) {
  const auto dir = scratch_dir();
  io::ensure_dir(dir / "r");
  Image img(20, 20, 3, 0.25);
  img(3, 4, 1) = 0.75;
  io::write_rgb_png(dir / "r" / "a.png", img);
  const auto r = run_cli("eval --rendered " + (dir / "r").string() + " --gt " + (dir / "r").string(), dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = io::json::parse(r.output);
  EXPECT_EQ(j["psnr_db"], "inf");
  EXPECT_NEAR(j["ssim"].get<double>(), 1.0, 1e-12);
}

TEST(Cli, EvalSizeMismatch) {
  const auto dir = scratch_dir();
  io::ensure_dir(dir / "r");
  io::ensure_dir(dir / "g");
  io::write_rgb_png(dir / "r" / "a.png", Image(20, 20, 3, 0.5));
  io::write_rgb_png(dir / "g" / "a.png", Image(20, 24, 3, 0.5));
  const auto r = run_cli("eval --rendered " + (dir / "r").string() + " --gt " + (dir / "g").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("shape"), std::string::npos) << r.output;
}
