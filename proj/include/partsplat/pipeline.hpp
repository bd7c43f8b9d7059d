#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "partsplat/attention.hpp"
#include "partsplat/camera.hpp"
#include "partsplat/gaussian.hpp"
#include "partsplat/io.hpp"
#include "partsplat/losses.hpp"
#include "partsplat/rasterizer.hpp"
#include "partsplat/spatial_index.hpp"
#include "partsplat/synth.hpp"

namespace partsplat {

/// Every knob of the synthetic benchmark, the model and the optimizer.
/// Parsed from `key = value` lines; see README for the meaning of each key.
struct PipelineConfig {
  std::uint64_t seed = 7;

  // scene
  int parts = 10;
  double size_scale = 1.0;
  int surface_samples = 4000;
  double texture = 0.0;

  // input rig
  int n_views = 4;
  int width = 64;
  int height = 64;
  double fov_deg = 40.0;
  double rig_radius = 3.0;
  double rig_height = 0.6;

  // held-out evaluation cameras (absolute azimuths in degrees)
  std::vector<double> heldout_azimuths = {22.5, 67.5, 112.5, 157.5, 202.5, 247.5, 292.5, 337.5};
  double heldout_height = 0.9;
  int heldout_supersample = 3;
  double heldout_scale = 2.0;  // held-out image size relative to the input views

  // synthetic features and depth
  int semantic_channels = 32;
  int latent_channels = 16;
  double semantic_noise = 0.2;
  double latent_noise = 0.05;
  double joint_blend = 0.06;
  double depth_noise = 0.01;
  double depth_noise_view_share = 0.5;
  double depth_edge_bleed = 0.0;

  // recalibration
  int k = 16;
  int attn_dim = 8;
  bool use_semantic = true;
  bool use_3d_unprojection = true;
  bool residual = true;
  std::string params = "canonical";  // canonical | random | identity
  double temperature = 4.0;
  double smoothing = 1.0;
  double init_scale = 0.02;

  // heads
  double max_offset = 0.1;
  double s_min = 1e-4;
  double s_max = 0.2;
  double splat_scale = 0.3;  // in units of the pixel footprint at rig distance
  double opacity = 0.84;

  LossWeights loss;

  // optimizer
  int iterations = 200;
  double step_size = 1.0;
  double attention_step_size = 0.1;

  bool ablation = false;

  void validate() const;
  double focal() const { return 0.5 * height / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0); }
  int heldout_width() const { return static_cast<int>(std::lround(width * heldout_scale)); }
  int heldout_height_px() const { return static_cast<int>(std::lround(height * heldout_scale)); }
  double base_scale() const { return splat_scale * rig_radius / focal(); }
  /// Per-Gaussian opacity such that the ~n_views/2 layers covering a surface
  /// point composite to `opacity`.
  double splat_opacity() const {
    const double layers = std::max(1.0, 0.5 * n_views);
    return 1.0 - std::pow(1.0 - opacity, 1.0 / layers);
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end)
    fail(ErrorKind::Config, "config field '" + key + "': cannot parse '" + text + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  fail(ErrorKind::Config, "config field '" + key + "': expected true/false, got '" + text + "'");
}

struct Field {
  std::string name;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename T>
Field number_field(std::string name, T PipelineConfig::*member) {
  return {name,
          [name, member](PipelineConfig& c, const std::string& v) { c.*member = parse_number<T>(name, v); },
          [member](const PipelineConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

inline Field bool_field(std::string name, bool PipelineConfig::*member) {
  return {name, [name, member](PipelineConfig& c, const std::string& v) { c.*member = parse_bool(name, v); },
          [member](const PipelineConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <typename T>
Field loss_field(std::string name, T LossWeights::*member) {
  return {name,
          [name, member](PipelineConfig& c, const std::string& v) { c.loss.*member = parse_number<T>(name, v); },
          [member](const PipelineConfig& c) { return format_double(c.loss.*member); }};
}

inline const std::vector<Field>& config_fields() {
  using C = PipelineConfig;
  static const std::vector<Field> fields = {
      number_field("seed", &C::seed),
      number_field("parts", &C::parts),
      number_field("size_scale", &C::size_scale),
      number_field("surface_samples", &C::surface_samples),
      number_field("texture", &C::texture),
      number_field("n_views", &C::n_views),
      number_field("width", &C::width),
      number_field("height", &C::height),
      number_field("fov_deg", &C::fov_deg),
      number_field("rig_radius", &C::rig_radius),
      number_field("rig_height", &C::rig_height),
      {"heldout_azimuths",
       [](C& c, const std::string& v) {
         c.heldout_azimuths.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ','))
           c.heldout_azimuths.push_back(parse_number<double>("heldout_azimuths", trim(item)));
       },
       [](const C& c) {
         std::string s;
         for (std::size_t i = 0; i < c.heldout_azimuths.size(); ++i)
           s += (i ? "," : "") + format_double(c.heldout_azimuths[i]);
         return s;
       }},
      number_field("heldout_height", &C::heldout_height),
      number_field("heldout_supersample", &C::heldout_supersample),
      number_field("heldout_scale", &C::heldout_scale),
      number_field("semantic_channels", &C::semantic_channels),
      number_field("latent_channels", &C::latent_channels),
      number_field("semantic_noise", &C::semantic_noise),
      number_field("latent_noise", &C::latent_noise),
      number_field("joint_blend", &C::joint_blend),
      number_field("depth_noise", &C::depth_noise),
      number_field("depth_noise_view_share", &C::depth_noise_view_share),
      number_field("depth_edge_bleed", &C::depth_edge_bleed),
      number_field("k", &C::k),
      number_field("attn_dim", &C::attn_dim),
      bool_field("use_semantic", &C::use_semantic),
      bool_field("use_3d_unprojection", &C::use_3d_unprojection),
      bool_field("residual", &C::residual),
      {"params", [](C& c, const std::string& v) { c.params = v; }, [](const C& c) { return c.params; }},
      number_field("temperature", &C::temperature),
      number_field("smoothing", &C::smoothing),
      number_field("init_scale", &C::init_scale),
      number_field("max_offset", &C::max_offset),
      number_field("s_min", &C::s_min),
      number_field("s_max", &C::s_max),
      number_field("splat_scale", &C::splat_scale),
      number_field("opacity", &C::opacity),
      loss_field("lambda_l1", &LossWeights::lambda_l1),
      loss_field("lambda_ssim", &LossWeights::lambda_ssim),
      loss_field("lambda_geom", &LossWeights::lambda_geom),
      number_field("iterations", &C::iterations),
      number_field("step_size", &C::step_size),
      number_field("attention_step_size", &C::attention_step_size),
      bool_field("ablation", &C::ablation),
  };
  return fields;
}

inline void check_range(bool ok, const std::string& field, const std::string& rule) {
  require(ok, ErrorKind::Config, "config field '" + field + "' out of range: " + rule);
}

}  // namespace detail

inline void PipelineConfig::validate() const {
  using detail::check_range;
  check_range(parts >= 1 && parts <= kMaxFigureParts, "parts", "1..10");
  check_range(size_scale > 0.0 && size_scale <= 2.0, "size_scale", "(0, 2]");
  check_range(surface_samples >= 1 && surface_samples <= 1000000, "surface_samples", "1..1e6");
  check_range(texture >= 0.0 && texture < 1.0, "texture", "[0, 1)");
  check_range(n_views >= 1 && n_views <= 32, "n_views", "1..32");
  check_range(width >= 11 && width <= 1024, "width", "11..1024");
  check_range(height >= 11 && height <= 1024, "height", "11..1024");
  check_range(fov_deg >= 5.0 && fov_deg <= 120.0, "fov_deg", "[5, 120]");
  check_range(rig_radius > 1.5, "rig_radius", "> 1.5 (cameras must stay outside the figure)");
  check_range(std::abs(rig_height) <= rig_radius, "rig_height", "|rig_height| <= rig_radius");
  check_range(!heldout_azimuths.empty(), "heldout_azimuths", "at least one azimuth");
  check_range(std::abs(heldout_height) <= rig_radius, "heldout_height", "|heldout_height| <= rig_radius");
  check_range(heldout_supersample >= 1 && heldout_supersample <= 8, "heldout_supersample", "1..8");
  check_range(heldout_scale > 0.0 && heldout_scale <= 8.0 && heldout_width() >= 11 && heldout_height_px() >= 11,
              "heldout_scale", "(0, 8] and at least 11x11 held-out pixels");
  check_range(semantic_channels >= 1 && semantic_channels <= 1024, "semantic_channels", "1..1024");
  check_range(semantic_channels >= parts, "semantic_channels", ">= parts");
  check_range(latent_channels >= kMinLatentChannels && latent_channels <= 1024, "latent_channels", "4..1024");
  check_range(semantic_noise >= 0.0 && semantic_noise <= 10.0, "semantic_noise", "[0, 10]");
  check_range(latent_noise >= 0.0 && latent_noise <= 10.0, "latent_noise", "[0, 10]");
  check_range(joint_blend >= 0.0 && joint_blend <= 1.0, "joint_blend", "[0, 1]");
  check_range(depth_noise >= 0.0 && depth_noise <= 0.3, "depth_noise", "[0, 0.3]");
  check_range(depth_edge_bleed >= 0.0 && depth_edge_bleed <= 1.0, "depth_edge_bleed", "[0, 1]");
  check_range(depth_noise_view_share >= 0.0 && depth_noise_view_share <= 1.0, "depth_noise_view_share", "[0, 1]");
  check_range(k >= 1 && k <= 256, "k", "1..256");
  check_range(attn_dim >= 1 && attn_dim <= 256, "attn_dim", "1..256");
  check_range(params == "canonical" || params == "random" || params == "identity", "params",
              "one of canonical, random, identity");
  check_range(temperature >= 0.0 && temperature <= 50.0, "temperature", "[0, 50]");
  check_range(smoothing >= 0.0 && smoothing <= 1.0, "smoothing", "[0, 1]");
  check_range(init_scale >= 0.0 && init_scale <= 1.0, "init_scale", "[0, 1]");
  check_range(max_offset > 0.0 && max_offset <= 1.0, "max_offset", "(0, 1]");
  check_range(s_min > 0.0 && s_min < s_max && s_max <= 1.0, "s_min/s_max", "0 < s_min < s_max <= 1");
  check_range(splat_scale > 0.0 && splat_scale <= 10.0, "splat_scale", "(0, 10]");
  check_range(base_scale() > s_min && base_scale() < s_max, "splat_scale", "resulting Gaussian scale inside (s_min, s_max)");
  check_range(opacity > 0.0 && opacity < 1.0, "opacity", "(0, 1)");
  check_range(loss.lambda_l1 >= 0.0 && loss.lambda_ssim >= 0.0 && loss.lambda_geom >= 0.0, "lambda_*", ">= 0");
  check_range(iterations >= 0 && iterations <= 100000, "iterations", "0..100000");
  check_range(step_size >= 0.0, "step_size", ">= 0");
  check_range(attention_step_size >= 0.0, "attention_step_size", ">= 0");
}

/// Apply `key = value` lines on top of `base`. Blank lines and `#` comments
/// are ignored; unknown keys and malformed values raise a Config error that
/// names the field.
inline PipelineConfig parse_config(const std::string& text, PipelineConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::Config,
            "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& fields = detail::config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const detail::Field& f) { return f.name == key; });
    require(it != fields.end(), ErrorKind::Config, "config line " + std::to_string(line_no) + ": unknown field '" + key + "'");
    require(!value.empty(), ErrorKind::Config, "config field '" + key + "': missing value");
    it->set(base, value);
  }
  base.validate();
  return base;
}

inline void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  cfg = parse_config(key + " = " + value, cfg);
}

/// Effective configuration in the same `key = value` format parse_config reads.
inline std::string config_manifest(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.name + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ViewBundle {
  Camera camera;
  Image rgb;
  DepthMap depth;     // depth used by the pipeline (noisy when depth_noise > 0)
  DepthMap depth_gt;  // analytic depth
  LabelMap parts;
  FeatureGrid semantic;
  FeatureGrid latent;
};

struct HeldOutView {
  Camera camera;
  Image rgb;
};

struct Dataset {
  SceneConfig scene_config;
  SceneTruth scene;
  std::vector<ViewBundle> views;
  std::vector<HeldOutView> heldout;
};

inline SceneConfig scene_config_of(const PipelineConfig& cfg) {
  SceneConfig s;
  s.parts = cfg.parts;
  s.seed = cfg.seed;
  s.size_scale = cfg.size_scale;
  s.surface_samples = cfg.surface_samples;
  s.texture = cfg.texture;
  return s;
}

inline FeatureConfig feature_config_of(const PipelineConfig& cfg) {
  FeatureConfig f;
  f.semantic_channels = cfg.semantic_channels;
  f.latent_channels = cfg.latent_channels;
  f.semantic_noise = cfg.semantic_noise;
  f.latent_noise = cfg.latent_noise;
  f.joint_blend = cfg.joint_blend;
  return f;
}

inline Vec3 rig_target(const SceneTruth& scene) { return 0.5 * (scene.lo + scene.hi); }

inline std::vector<Camera> heldout_cameras(const PipelineConfig& cfg, const SceneTruth& scene) {
  std::vector<Camera> cams;
  const Vec3 target = rig_target(scene);
  const int w = cfg.heldout_width(), h = cfg.heldout_height_px();
  const double f = cfg.focal() * h / cfg.height;
  for (double az_deg : cfg.heldout_azimuths) {
    const double az = az_deg * std::numbers::pi / 180.0;
    const Vec3 eye = target + Vec3(cfg.rig_radius * std::cos(az), cfg.rig_radius * std::sin(az), cfg.heldout_height);
    cams.push_back(look_at(eye, target, Vec3::UnitZ(), f, f, w, h));
  }
  return cams;
}

/// Build the synthetic benchmark in memory. Images, depths and features are
/// snapped to their on-disk precision so a write/read round trip is lossless.
inline Dataset synthesize(const PipelineConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.scene_config = scene_config_of(cfg);
  ds.scene = generate_scene(ds.scene_config);
  const auto fcfg = feature_config_of(cfg);
  const auto anchors = make_part_anchors(cfg.parts, fcfg, mix_seed(cfg.seed, 1));
  const auto cams = camera_rig(cfg.n_views, cfg.rig_radius, cfg.rig_height, rig_target(ds.scene), cfg.width,
                               cfg.height, cfg.fov_deg);
  std::vector<DepthMap> noisy;
  for (const Camera& cam : cams) {
    auto truth = render_truth_view(ds.scene, cam, ds.scene_config);
    ViewBundle v;
    v.camera = cam;
    v.rgb = io::quantize8(truth.rgb);
    v.depth_gt = std::move(truth.depth);
    io::quantize_f32(v.depth_gt);
    v.parts = std::move(truth.part_map);
    noisy.push_back(v.depth_gt);
    ds.views.push_back(std::move(v));
  }
  apply_edge_bleed(noisy, cfg.depth_edge_bleed, 0.03, mix_seed(cfg.seed, 5));
  apply_depth_noise(noisy, cfg.depth_noise, cfg.depth_noise_view_share, mix_seed(cfg.seed, 2));
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    ViewBundle& v = ds.views[i];
    v.depth = std::move(noisy[i]);
    io::quantize_f32(v.depth);
    auto feats = synth_features(v.camera, v.depth, v.parts, anchors, fcfg, mix_seed(cfg.seed, 100 + i), &ds.scene);
    v.semantic = std::move(feats.semantic);
    v.latent = std::move(feats.latent);
    io::quantize_f32(v.semantic);
    io::quantize_f32(v.latent);
  }
  for (const Camera& cam : heldout_cameras(cfg, ds.scene)) {
    const auto truth = render_truth_view(ds.scene, cam, ds.scene_config, {}, cfg.heldout_supersample);
    ds.heldout.push_back({cam, io::quantize8(truth.rgb)});
  }
  return ds;
}

inline std::string view_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "view_%03zu", i);
  return buf;
}

inline void write_dataset(const Dataset& ds, const PipelineConfig& cfg, const io::fs::path& dir) {
  io::ensure_dir(dir);
  io::write_text(dir / "scene.json", io::scene_to_json(ds.scene, ds.scene_config).dump(2) + "\n");
  io::write_text(dir / "config.txt", config_manifest(cfg));
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    const auto vd = dir / "views" / view_dir_name(i);
    io::ensure_dir(vd);
    const ViewBundle& v = ds.views[i];
    io::write_camera(vd / "camera.json", v.camera);
    io::write_rgb_png(vd / "rgb.png", v.rgb);
    io::write_pfm(vd / "depth.pfm", v.depth);
    io::write_pfm(vd / "depth_gt.pfm", v.depth_gt);
    io::write_part_png(vd / "parts.png", v.parts, &ds.scene);
    io::write_fgr1(vd / "semantic.fgr", v.semantic);
    io::write_fgr1(vd / "latent.fgr", v.latent);
  }
  for (std::size_t i = 0; i < ds.heldout.size(); ++i) {
    const auto vd = dir / "heldout" / view_dir_name(i);
    io::ensure_dir(vd);
    io::write_camera(vd / "camera.json", ds.heldout[i].camera);
    io::write_rgb_png(vd / "rgb.png", ds.heldout[i].rgb);
  }
}

inline std::size_t count_view_dirs(const io::fs::path& dir) {
  std::size_t n = 0;
  while (io::fs::is_directory(dir / view_dir_name(n))) ++n;
  return n;
}

inline Dataset read_dataset(const io::fs::path& dir) {
  require(io::fs::is_directory(dir), ErrorKind::Io, "input directory not found: " + dir.string());
  require(io::fs::exists(dir / "scene.json"), ErrorKind::Io, "missing scene.json in " + dir.string());
  Dataset ds;
  try {
    std::tie(ds.scene, ds.scene_config) = io::scene_from_json(io::json::parse(io::read_text(dir / "scene.json")));
  } catch (const io::json::parse_error& e) {
    fail(ErrorKind::Format, std::string("cannot parse scene.json: ") + e.what());
  }
  const std::size_t n = count_view_dirs(dir / "views");
  require(n > 0, ErrorKind::Io, "no view bundles under " + (dir / "views").string());
  for (std::size_t i = 0; i < n; ++i) {
    const auto vd = dir / "views" / view_dir_name(i);
    for (const char* f : {"camera.json", "rgb.png", "depth.pfm", "parts.png", "semantic.fgr", "latent.fgr"})
      require(io::fs::exists(vd / f), ErrorKind::Io, "missing bundle file " + (vd / f).string());
    ViewBundle v;
    v.camera = io::read_camera(vd / "camera.json");
    v.rgb = io::read_rgb_png(vd / "rgb.png");
    v.depth = io::read_pfm(vd / "depth.pfm");
    if (io::fs::exists(vd / "depth_gt.pfm")) v.depth_gt = io::read_pfm(vd / "depth_gt.pfm");
    v.parts = io::read_part_png(vd / "parts.png");
    v.semantic = io::read_fgr1(vd / "semantic.fgr");
    v.latent = io::read_fgr1(vd / "latent.fgr");
    require(v.semantic.kind == FeatureKind::Semantic && v.latent.kind == FeatureKind::Latent, ErrorKind::Format,
            "feature grid kinds swapped in " + vd.string());
    ds.views.push_back(std::move(v));
  }
  const std::size_t m = count_view_dirs(dir / "heldout");
  for (std::size_t i = 0; i < m; ++i) {
    const auto vd = dir / "heldout" / view_dir_name(i);
    ds.heldout.push_back({io::read_camera(vd / "camera.json"), io::read_rgb_png(vd / "rgb.png")});
  }
  return ds;
}

// ---- model ----

struct ModelParams {
  AttentionParams attention;
  HeadParams heads;
};

/// Initial parameters.
///  identity:  W_v = I, zero query/key; heads output a constant Gaussian at
///             the unprojected point.
///  canonical: hand-set recalibration that pulls every point toward the
///             attention-weighted mean of its neighbors' positions. Query and
///             key read only the constant latent channel, so each logit is
///             temperature * s_jk; W_v = -I on the position channels plus the
///             residual gives E_j - mean, and the offset head maps that to
///             smoothing * (mean - p_j).
///  random:    seeded uniform attention weights and small random head weights
///             around the constant Gaussian.
inline ModelParams make_params(const PipelineConfig& cfg) {
  cfg.validate();
  const int c = cfg.latent_channels, d = cfg.attn_dim;
  ModelParams p;
  p.heads = HeadParams::constant(c, cfg.base_scale(), cfg.splat_opacity());
  if (cfg.params == "identity") {
    p.attention = AttentionParams::zeros(c, d);
    p.attention.w_value = MatX::Identity(c, c);
  } else if (cfg.params == "canonical") {
    p.attention = AttentionParams::zeros(c, d);
    const double w = std::sqrt(cfg.temperature * std::sqrt(static_cast<double>(d)));
    p.attention.w_query(kLatentBias, 0) = w;
    p.attention.w_key(kLatentBias, 0) = w;
    const double gain = cfg.smoothing / cfg.max_offset;
    for (int i = 0; i < 3 && kLatentPosition + i < c; ++i) {
      p.attention.w_value(kLatentPosition + i, kLatentPosition + i) = -1.0;
      p.heads.weights(kHeadOffset + i, kLatentPosition + i) = -gain;
    }
  } else {
    p.attention = AttentionParams::random(c, d, mix_seed(cfg.seed, 3));
    p.heads = HeadParams::random(c, cfg.init_scale, cfg.base_scale(), cfg.splat_opacity(), mix_seed(cfg.seed, 4));
  }
  p.attention.use_semantic = cfg.use_semantic;
  p.attention.residual = cfg.params == "identity" ? false : cfg.residual;
  p.heads.max_offset = cfg.max_offset;
  p.heads.s_min = cfg.s_min;
  p.heads.s_max = cfg.s_max;
  return p;
}

struct ForwardResult {
  UnprojectedPoints points;
  Neighborhoods neighbors;
  RecalibratedPoints recalibrated;
  std::vector<ScatteredGrid> grids;
  std::vector<Grid<double>> bases;
  GaussianSet gaussians;
  std::vector<std::size_t> view_offsets;  // first Gaussian of each view, plus the total
  int degenerate_rotations = 0;
};

inline UnprojectedPoints lift(const Dataset& ds) {
  std::vector<Camera> cams;
  std::vector<DepthMap> depths;
  std::vector<FeatureGrid> sem, lat;
  std::vector<LabelMap> labels;
  for (const auto& v : ds.views) {
    cams.push_back(v.camera);
    depths.push_back(v.depth);
    sem.push_back(v.semantic);
    lat.push_back(v.latent);
    labels.push_back(v.parts);
  }
  return unproject_views(cams, depths, sem, lat, labels);
}

inline Neighborhoods build_neighborhoods(const UnprojectedPoints& points, const PipelineConfig& cfg) {
  const NeighborOptions opt{cfg.k, true, false};
  if (!cfg.use_3d_unprojection) return pixel_neighborhoods(points, opt);
  const PointIndex index(points.positions);
  return spatial_neighborhoods(points, index, opt);
}

/// Decode Gaussians from already lifted points and neighborhoods.
inline void decode(const Dataset& ds, const ModelParams& params, ForwardResult& f, bool keep_records) {
  f.recalibrated = recalibrate(f.points, f.neighbors, params.attention, keep_records);
  std::vector<ViewSize> layout;
  for (const auto& v : ds.views) layout.push_back({v.camera.height, v.camera.width});
  f.grids = scatter_to_grids(f.recalibrated.latent, f.points, layout);
  if (f.bases.empty()) {
    for (const auto& v : ds.views) f.bases.emplace_back(v.camera.height, v.camera.width, 3, 0.0);
    for (std::size_t i = 0; i < f.points.size(); ++i) {
      const PixelIndex px = f.points.pixel[i];
      for (int ch = 0; ch < 3; ++ch)
        f.bases[static_cast<std::size_t>(f.points.view_id[i])](px.row, px.col, ch) = f.points.positions[i][ch];
    }
  }
  f.gaussians.clear();
  f.view_offsets.assign(1, 0);
  f.degenerate_rotations = 0;
  for (std::size_t v = 0; v < ds.views.size(); ++v) {
    auto out = heads_forward(f.grids[v].grid, f.grids[v].valid, ds.views[v].rgb, f.bases[v], params.heads);
    f.degenerate_rotations += out.degenerate_rotations;
    f.gaussians.insert(f.gaussians.end(), out.gaussians.begin(), out.gaussians.end());
    f.view_offsets.push_back(f.gaussians.size());
  }
  require(f.gaussians.size() == f.points.size(), ErrorKind::InternalConsistency,
          "Gaussian count differs from lifted point count");
}

/// unproject -> neighborhoods -> recalibrate -> scatter -> heads.
inline ForwardResult forward(const Dataset& ds, const PipelineConfig& cfg, const ModelParams& params,
                             bool keep_records = false) {
  ForwardResult f;
  f.points = lift(ds);
  f.neighbors = build_neighborhoods(f.points, cfg);
  decode(ds, params, f, keep_records);
  return f;
}

struct ViewMetrics {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double l1 = 0.0;
  double render_loss = 0.0;
};

struct RunMetrics {
  std::vector<ViewMetrics> views;
  double psnr_db = 0.0;  // means over held-out views
  double ssim = 0.0;
  double l1 = 0.0;
  double render_loss = 0.0;
  double chamfer = 0.0;
  double total_loss = 0.0;
  std::optional<double> same_part_mass;
  std::size_t gaussians = 0;
  int degenerate_rotations = 0;
};

inline const Vec3& background_color() {
  static const Vec3 bg = ShadingConfig{}.background;
  return bg;
}

inline std::vector<Vec3> gaussian_means(const GaussianSet& g) {
  std::vector<Vec3> out;
  out.reserve(g.size());
  for (const auto& x : g) out.push_back(x.mean);
  return out;
}

inline ViewMetrics image_metrics(const Image& rendered, const Image& gt, const LossWeights& w) {
  ViewMetrics m;
  m.psnr_db = psnr(rendered, gt);
  m.ssim = ssim(rendered, gt, false).value;
  m.l1 = l1_loss(rendered, gt).value;
  m.render_loss = w.lambda_l1 * m.l1 + w.lambda_ssim * (1.0 - m.ssim);
  return m;
}

/// Render every held-out camera and score it against its ground truth.
inline RunMetrics evaluate(const Dataset& ds, const PipelineConfig& cfg, const ForwardResult& f,
                           std::vector<Image>* renders = nullptr) {
  RunMetrics m;
  require(!ds.heldout.empty(), ErrorKind::EmptyInput, "dataset has no held-out views");
  for (const auto& h : ds.heldout) {
    Image img = io::quantize8(rasterize_tiled(h.camera, f.gaussians, background_color()).color);
    m.views.push_back(image_metrics(img, h.rgb, cfg.loss));
    if (renders) renders->push_back(std::move(img));
  }
  const double n = static_cast<double>(m.views.size());
  for (const auto& v : m.views) {
    m.psnr_db += v.psnr_db / n;
    m.ssim += v.ssim / n;
    m.l1 += v.l1 / n;
    m.render_loss += v.render_loss / n;
  }
  m.chamfer = chamfer(gaussian_means(f.gaussians), ds.scene.surface_samples).value;
  m.total_loss = total_loss(m.render_loss, m.chamfer, cfg.loss);
  if (f.recalibrated.records && f.points.part_label)
    m.same_part_mass = same_part_attention_mass(*f.recalibrated.records, *f.points.part_label);
  m.gaussians = f.gaussians.size();
  m.degenerate_rotations = f.degenerate_rotations;
  return m;
}

inline io::json metrics_json(const RunMetrics& m) {
  io::json views = io::json::array();
  for (const auto& v : m.views)
    views.push_back({{"psnr_db", io::number(v.psnr_db)}, {"ssim", v.ssim}, {"l1", v.l1}, {"render_loss", v.render_loss}});
  io::json j = {{"psnr_db", io::number(m.psnr_db)}, {"ssim", m.ssim}, {"l1", m.l1}, {"render_loss", m.render_loss},
                {"chamfer", m.chamfer}, {"total_loss", m.total_loss}, {"gaussians", m.gaussians},
                {"degenerate_rotations", m.degenerate_rotations}, {"views", views}};
  if (m.same_part_mass) j["same_part_attention_mass"] = *m.same_part_mass;
  return j;
}

struct PipelineRun {
  ForwardResult forward;
  RunMetrics metrics;
  std::vector<Image> renders;
};

inline PipelineRun run_pipeline(const Dataset& ds, const PipelineConfig& cfg, const ModelParams& params) {
  PipelineRun run;
  run.forward = forward(ds, cfg, params, true);
  run.metrics = evaluate(ds, cfg, run.forward, &run.renders);
  return run;
}

inline PipelineRun run_pipeline(const Dataset& ds, const PipelineConfig& cfg) {
  return run_pipeline(ds, cfg, make_params(cfg));
}

struct AblationVariant {
  std::string name;
  bool use_semantic;
  bool use_3d_unprojection;
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"full", true, true}, {"no_semantic", false, true}, {"no_3d_unprojection", true, false}, {"neither", false, false}};
  return v;
}

inline std::vector<std::pair<std::string, RunMetrics>> run_ablation(const Dataset& ds, const PipelineConfig& cfg) {
  std::vector<std::pair<std::string, RunMetrics>> out;
  for (const auto& v : ablation_variants()) {
    PipelineConfig c = cfg;
    c.use_semantic = v.use_semantic;
    c.use_3d_unprojection = v.use_3d_unprojection;
    out.emplace_back(v.name, run_pipeline(ds, c).metrics);
  }
  return out;
}

/// Attention edges as CSV: query, neighbor, distance, s, alpha, same_part.
inline std::string attention_csv(const ForwardResult& f) {
  std::ostringstream out;
  out << "query,neighbor,distance,consistency,alpha,same_part\n";
  if (!f.recalibrated.records) return out.str();
  out << std::setprecision(9);
  const auto& recs = *f.recalibrated.records;
  for (std::size_t j = 0; j < recs.size(); ++j)
    for (std::size_t n = 0; n < recs[j].neighbors.size(); ++n) {
      const int k = recs[j].neighbors[n];
      const double dist = (f.points.positions[j] - f.points.positions[static_cast<std::size_t>(k)]).norm();
      int same = -1;
      if (f.points.part_label) same = (*f.points.part_label)[j] == (*f.points.part_label)[static_cast<std::size_t>(k)];
      out << j << ',' << k << ',' << dist << ',' << recs[j].consistency[n] << ',' << recs[j].alpha[n] << ',' << same
          << '\n';
    }
  return out.str();
}

// ---- training ----

struct TrainLoss {
  double total = 0.0;
  double render = 0.0;
  double geom = 0.0;
};

struct ModelGrads {
  MatX d_query, d_key, d_value, d_head_weights;
  VecX d_head_bias;
};

/// Training objective on the input views: mean render loss over views plus
/// lambda_geom * Chamfer(Gaussian means, surface samples). Gradients flow
/// back through the reference rasterizer, the heads and the recalibration.
inline TrainLoss train_loss(const Dataset& ds, const PipelineConfig& cfg, const ModelParams& params, ForwardResult& f,
                            ModelGrads* grads) {
  decode(ds, params, f, false);
  TrainLoss loss;
  const std::size_t n_views = ds.views.size();
  std::vector<GaussianGrad> dg(f.gaussians.size());
  for (const auto& v : ds.views) {
    ContributionPlan plan;
    const auto render = rasterize_reference(v.camera, f.gaussians, background_color(), grads ? &plan : nullptr);
    auto rl = render_loss(render.color, v.rgb, cfg.loss);
    loss.render += rl.value / static_cast<double>(n_views);
    if (!grads) continue;
    for (std::size_t i = 0; i < rl.grad.size(); ++i) rl.grad.data()[i] /= static_cast<double>(n_views);
    const auto rg = rasterize_backward_reference(v.camera, f.gaussians, background_color(), rl.grad, &plan);
    for (std::size_t i = 0; i < dg.size(); ++i) {
      dg[i].d_mean += rg.gaussians[i].d_mean;
      dg[i].d_rotation += rg.gaussians[i].d_rotation;
      dg[i].d_scale += rg.gaussians[i].d_scale;
      dg[i].d_opacity += rg.gaussians[i].d_opacity;
    }
  }
  const auto ch = chamfer(gaussian_means(f.gaussians), ds.scene.surface_samples);
  loss.geom = ch.value;
  loss.total = total_loss(loss.render, loss.geom, cfg.loss);
  if (!grads) return loss;
  for (std::size_t i = 0; i < dg.size(); ++i) dg[i].d_mean += cfg.loss.lambda_geom * ch.grad[i];

  const int c = params.heads.channels();
  grads->d_head_weights = MatX::Zero(kHeadOutputs, c);
  grads->d_head_bias = VecX::Zero(kHeadOutputs);
  std::vector<FeatureGrid> d_grids;
  for (std::size_t v = 0; v < n_views; ++v) {
    const std::vector<GaussianGrad> slice(dg.begin() + static_cast<std::ptrdiff_t>(f.view_offsets[v]),
                                          dg.begin() + static_cast<std::ptrdiff_t>(f.view_offsets[v + 1]));
    auto hg = heads_backward(f.grids[v].grid, f.grids[v].valid, params.heads, slice);
    grads->d_head_weights += hg.d_weights;
    grads->d_head_bias += hg.d_bias;
    d_grids.push_back(std::move(hg.d_grid));
  }
  const RowMatX d_latent = gather_from_grids(d_grids, f.points);
  const auto ag = recalibrate_backward(f.points, f.neighbors, params.attention, d_latent);
  grads->d_query = ag.d_query;
  grads->d_key = ag.d_key;
  grads->d_value = ag.d_value;
  return loss;
}

struct FitResult {
  ModelParams params;
  std::vector<TrainLoss> curve;  // loss before each update, plus the final loss
  RunMetrics initial;
  RunMetrics final;
};

/// Plain gradient descent with fixed steps. Fills `out` as it goes so a
/// caller can dump partial progress when a Divergence error is thrown.
inline void fit(const Dataset& ds, const PipelineConfig& cfg, FitResult& out, std::ostream* log = nullptr) {
  out.params = make_params(cfg);
  ForwardResult f = forward(ds, cfg, out.params, true);
  out.initial = evaluate(ds, cfg, f);
  out.curve.clear();
  for (int it = 0; it <= cfg.iterations; ++it) {
    ModelGrads g;
    const bool last = it == cfg.iterations;
    const TrainLoss loss = train_loss(ds, cfg, out.params, f, last ? nullptr : &g);
    out.curve.push_back(loss);
    if (!std::isfinite(loss.total))
      fail(ErrorKind::Divergence, "loss became non-finite at iteration " + std::to_string(it) +
                                      " (render " + detail::format_double(loss.render) + ", geom " +
                                      detail::format_double(loss.geom) + ")");
    if (log && (it % 20 == 0 || last))
      *log << "iter " << it << " total " << loss.total << " render " << loss.render << " geom " << loss.geom << "\n";
    if (last) break;
    out.params.heads.weights -= cfg.step_size * g.d_head_weights;
    out.params.heads.bias -= cfg.step_size * g.d_head_bias;
    out.params.attention.w_query -= cfg.attention_step_size * g.d_query;
    out.params.attention.w_key -= cfg.attention_step_size * g.d_key;
    out.params.attention.w_value -= cfg.attention_step_size * g.d_value;
    if (!out.params.heads.weights.allFinite() || !out.params.heads.bias.allFinite() ||
        !out.params.attention.w_value.allFinite())
      fail(ErrorKind::Divergence, "parameters became non-finite after iteration " + std::to_string(it));
  }
  decode(ds, out.params, f, true);
  out.final = evaluate(ds, cfg, f);
}

inline std::string loss_csv(const std::vector<TrainLoss>& curve) {
  std::ostringstream out;
  out << std::setprecision(12) << "iteration,total,render,geom\n";
  for (std::size_t i = 0; i < curve.size(); ++i)
    out << i << ',' << curve[i].total << ',' << curve[i].render << ',' << curve[i].geom << '\n';
  return out.str();
}

}  // namespace partsplat
