#pragma once

#include <png.h>

#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "partsplat/camera.hpp"
#include "partsplat/gaussian.hpp"
#include "partsplat/synth.hpp"

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace partsplat::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create directory " + dir.string());
}

// ---- PNG ----

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Snap an image to the values an 8-bit PNG round trip would produce.
inline Image quantize8(const Image& img) {
  Image out = img;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = to_byte(out.data()[i]) / 255.0;
  return out;
}

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

inline void png_error_fn(png_structp png, png_const_charp) { std::longjmp(png_jmpbuf(png), 1); }
inline void png_warning_fn(png_structp, png_const_charp) {}

// Writes an 8-bit PNG. `palette` non-empty selects an indexed image.
inline void write_png(const fs::path& path, int width, int height, int channels, const std::vector<std::uint8_t>& pixels,
                      const std::vector<png_color>& palette) {
  PngFile f;
  f.fp = std::fopen(path.c_str(), "wb");
  require(f.fp != nullptr, ErrorKind::Io, "cannot write " + path.string());
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r)
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * width * channels);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  volatile bool ok = png && info;
  if (ok && setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, f.fp);
    const int type = !palette.empty() ? PNG_COLOR_TYPE_PALETTE : (channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (!palette.empty()) png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
  } else {
    ok = false;
  }
  png_destroy_write_struct(&png, &info);
  require(ok, ErrorKind::Io, "PNG encoding failed for " + path.string());
}

struct RawPng {
  int width = 0, height = 0, channels = 0;
  bool indexed = false;
  std::vector<std::uint8_t> pixels;
};

// Reads an 8-bit PNG without palette expansion, so indexed files yield indices.
inline RawPng read_png(const fs::path& path) {
  PngFile f;
  f.fp = std::fopen(path.c_str(), "rb");
  require(f.fp != nullptr, ErrorKind::Io, "cannot open " + path.string());
  unsigned char sig[8] = {};
  const bool is_png = std::fread(sig, 1, 8, f.fp) == 8 && png_sig_cmp(sig, 0, 8) == 0;
  require(is_png, ErrorKind::Format, "not a PNG file: " + path.string());
  RawPng out;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  volatile bool ok = png && info;
  volatile bool supported = true;
  if (ok && setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, f.fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int type = png_get_color_type(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth < 8 && type == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(png);
    if (depth < 8 && type == PNG_COLOR_TYPE_PALETTE) png_set_packing(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    out.indexed = type == PNG_COLOR_TYPE_PALETTE;
    supported = out.channels == 1 || out.channels == 3;
    if (supported) {
      out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
      rows.resize(static_cast<std::size_t>(out.height));
      for (int r = 0; r < out.height; ++r)
        rows[static_cast<std::size_t>(r)] = out.pixels.data() + static_cast<std::size_t>(r) * out.width * out.channels;
      png_read_image(png, rows.data());
      png_read_end(png, nullptr);
    }
  } else {
    ok = false;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  require(ok, ErrorKind::Format, "corrupt PNG: " + path.string());
  require(supported, ErrorKind::Format, "unsupported PNG channel layout: " + path.string());
  return out;
}

}  // namespace detail

inline void write_rgb_png(const fs::path& path, const Image& img) {
  require(img.channels() == 3, ErrorKind::Shape, "RGB PNG needs 3 channels");
  std::vector<std::uint8_t> px(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) px[i] = to_byte(img.data()[i]);
  detail::write_png(path, img.width(), img.height(), 3, px, {});
}

inline Image read_rgb_png(const fs::path& path) {
  const auto raw = detail::read_png(path);
  require(raw.channels == 3 && !raw.indexed, ErrorKind::Format, "expected an RGB PNG: " + path.string());
  Image img(raw.height, raw.width, 3, 0.0);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = raw.pixels[i] / 255.0;
  return img;
}

inline constexpr std::uint8_t kBackgroundIndex = 255;

/// Part map as an indexed PNG: index = part id, 255 = background.
inline void write_part_png(const fs::path& path, const LabelMap& parts, const SceneTruth* scene = nullptr) {
  std::vector<png_color> palette(256, png_color{0, 0, 0});
  for (int i = 0; i < 255; ++i) {
    // Golden-angle hue walk for parts the scene does not describe.
    const double h = std::fmod(i * 0.618033988749895, 1.0);
    palette[static_cast<std::size_t>(i)] = png_color{to_byte(0.5 + 0.5 * std::cos(6.2832 * h)),
                                                     to_byte(0.5 + 0.5 * std::cos(6.2832 * (h + 0.33))),
                                                     to_byte(0.5 + 0.5 * std::cos(6.2832 * (h + 0.67)))};
  }
  if (scene)
    for (const Capsule& c : scene->parts)
      palette[static_cast<std::size_t>(c.part)] = png_color{to_byte(c.albedo[0]), to_byte(c.albedo[1]), to_byte(c.albedo[2])};
  std::vector<std::uint8_t> px(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const int p = parts.data()[i];
    require(p >= -1 && p < 255, ErrorKind::InvalidInput, "part id out of range for an indexed PNG");
    px[i] = p < 0 ? kBackgroundIndex : static_cast<std::uint8_t>(p);
  }
  detail::write_png(path, parts.width(), parts.height(), 1, px, palette);
}

inline LabelMap read_part_png(const fs::path& path) {
  const auto raw = detail::read_png(path);
  require(raw.channels == 1, ErrorKind::Format, "expected an indexed part map: " + path.string());
  LabelMap out(raw.height, raw.width, 1, -1);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = raw.pixels[i] == kBackgroundIndex ? -1 : static_cast<int>(raw.pixels[i]);
  return out;
}

// ---- PFM (single channel, little endian, invalid pixels stored as 0) ----

inline void write_pfm(const fs::path& path, const DepthMap& depth) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << "Pf\n" << depth.width() << ' ' << depth.height() << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(depth.width()));
  for (int r = depth.height() - 1; r >= 0; --r) {  // PFM rows run bottom to top
    for (int c = 0; c < depth.width(); ++c)
      row[static_cast<std::size_t>(c)] = depth.is_valid(r, c) ? static_cast<float>(depth.values(r, c)) : 0.0f;
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

inline DepthMap read_pfm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  require(static_cast<bool>(in) && magic == "Pf", ErrorKind::Format, "not a single-channel PFM: " + path.string());
  require(w > 0 && h > 0, ErrorKind::Format, "bad PFM dimensions in " + path.string());
  require(scale < 0.0, ErrorKind::Format, "big-endian PFM is not supported: " + path.string());
  in.get();
  std::vector<float> data(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  require(in.gcount() == static_cast<std::streamsize>(data.size() * sizeof(float)), ErrorKind::Format,
          "truncated PFM: " + path.string());
  DepthMap d(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const float v = data[static_cast<std::size_t>(h - 1 - r) * w + c];
      if (std::isfinite(v) && v > 0.0f) {
        d.values(r, c) = v;
        d.valid(r, c) = 1;
      }
    }
  return d;
}

/// Snap depth values to float32, matching a PFM round trip.
inline void quantize_f32(DepthMap& d) {
  for (std::size_t i = 0; i < d.values.size(); ++i)
    d.values.data()[i] = d.valid.data()[i] ? static_cast<double>(static_cast<float>(d.values.data()[i])) : 0.0;
}

// ---- FGR1 feature grids ----
// Header: "FGR1", u32 height, u32 width, u32 channels, u8 kind (0 semantic,
// 1 latent); then float32 values in row-major H x W x C order.

inline void write_fgr1(const fs::path& path, const FeatureGrid& g) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out.write("FGR1", 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(g.height()), static_cast<std::uint32_t>(g.width()),
                                 static_cast<std::uint32_t>(g.channels())};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  const auto kind = static_cast<std::uint8_t>(g.kind);
  out.write(reinterpret_cast<const char*>(&kind), 1);
  std::vector<float> buf(g.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(g.data.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

inline FeatureGrid read_fgr1(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, "FGR1", 4) == 0, ErrorKind::Format,
          "bad FGR1 magic in " + path.string());
  std::uint32_t dims[3] = {};
  std::uint8_t kind = 0;
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  in.read(reinterpret_cast<char*>(&kind), 1);
  require(static_cast<bool>(in), ErrorKind::Format, "truncated FGR1 header in " + path.string());
  require(kind <= 1, ErrorKind::Format, "unknown FGR1 feature kind in " + path.string());
  require(dims[0] > 0 && dims[1] > 0 && dims[2] > 0 && dims[0] <= 16384 && dims[1] <= 16384 && dims[2] <= 4096,
          ErrorKind::Format, "implausible FGR1 dimensions in " + path.string());
  FeatureGrid g(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                static_cast<FeatureKind>(kind));
  std::vector<float> buf(g.data.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(in.gcount() == static_cast<std::streamsize>(buf.size() * sizeof(float)), ErrorKind::Format,
          "truncated FGR1 payload in " + path.string());
  for (std::size_t i = 0; i < buf.size(); ++i) g.data.data()[i] = buf[i];
  return g;
}

inline void quantize_f32(FeatureGrid& g) {
  for (std::size_t i = 0; i < g.data.size(); ++i)
    g.data.data()[i] = static_cast<double>(static_cast<float>(g.data.data()[i]));
}

// ---- Cameras and scenes ----

/// {fx, fy, cx, cy, width, height, R (row-major world-from-camera), t}.
inline json camera_to_json(const Camera& cam) {
  json r = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(cam.rotation(i, j));
  return {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy}, {"width", cam.width},
          {"height", cam.height}, {"R", r}, {"t", {cam.translation.x(), cam.translation.y(), cam.translation.z()}}};
}

inline Camera camera_from_json(const json& j) {
  try {
    Camera cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    const auto& r = j.at("R");
    const auto& t = j.at("t");
    require(r.size() == 9 && t.size() == 3, ErrorKind::Format, "camera R needs 9 values and t needs 3");
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) cam.rotation(i, k) = r.at(static_cast<std::size_t>(3 * i + k)).get<double>();
    for (int i = 0; i < 3; ++i) cam.translation[i] = t.at(static_cast<std::size_t>(i)).get<double>();
    cam.validate();
    return cam;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed camera JSON: ") + e.what());
  }
}

inline void write_camera(const fs::path& path, const Camera& cam) { write_text(path, camera_to_json(cam).dump(2) + "\n"); }

inline Camera read_camera(const fs::path& path) {
  try {
    return camera_from_json(json::parse(read_text(path)));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Format, "cannot parse " + path.string() + ": " + e.what());
  }
}

inline json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec_from_json(const json& j) {
  require(j.is_array() && j.size() == 3, ErrorKind::Format, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json scene_to_json(const SceneTruth& scene, const SceneConfig& cfg) {
  json parts = json::array();
  for (const Capsule& c : scene.parts)
    parts.push_back({{"part", c.part}, {"a", vec_json(c.a)}, {"b", vec_json(c.b)}, {"radius", c.radius},
                     {"albedo", vec_json(c.albedo)}});
  return {{"seed", scene.seed},
          {"config",
           {{"parts", cfg.parts},
            {"size_scale", cfg.size_scale},
            {"surface_samples", cfg.surface_samples},
            {"texture", cfg.texture},
            {"texture_frequency", cfg.texture_frequency}}},
          {"bbox", {{"lo", vec_json(scene.lo)}, {"hi", vec_json(scene.hi)}}},
          {"capsules", parts}};
}

/// Scenes are stored by their generator inputs; the loader regenerates them
/// and checks the stored capsules against the result.
inline std::pair<SceneTruth, SceneConfig> scene_from_json(const json& j) {
  try {
    SceneConfig cfg;
    const auto& c = j.at("config");
    cfg.parts = c.at("parts").get<int>();
    cfg.size_scale = c.at("size_scale").get<double>();
    cfg.surface_samples = c.at("surface_samples").get<int>();
    cfg.texture = c.at("texture").get<double>();
    cfg.texture_frequency = c.at("texture_frequency").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    SceneTruth scene = generate_scene(cfg);
    const auto& caps = j.at("capsules");
    require(caps.size() == scene.parts.size(), ErrorKind::Format, "scene capsule count does not match its config");
    for (std::size_t i = 0; i < caps.size(); ++i) {
      const Capsule& cap = scene.parts[i];
      const bool same = (vec_from_json(caps[i].at("a")) - cap.a).norm() < 1e-9 &&
                        (vec_from_json(caps[i].at("b")) - cap.b).norm() < 1e-9 &&
                        std::abs(caps[i].at("radius").get<double>() - cap.radius) < 1e-9;
      require(same, ErrorKind::Format, "scene capsules do not match the regenerated figure");
    }
    return {scene, cfg};
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed scene JSON: ") + e.what());
  }
}

// ---- PLY ----

/// Binary little-endian PLY with one vertex per Gaussian.
inline void write_ply(const fs::path& path, const GaussianSet& gaussians) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << gaussians.size() << "\n";
  for (const char* name : {"x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_x", "scale_y", "scale_z", "opacity"})
    out << "property float " << name << "\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (const auto& g : gaussians) {
    const float f[11] = {static_cast<float>(g.mean.x()),     static_cast<float>(g.mean.y()),
                         static_cast<float>(g.mean.z()),     static_cast<float>(g.rotation[0]),
                         static_cast<float>(g.rotation[1]),  static_cast<float>(g.rotation[2]),
                         static_cast<float>(g.rotation[3]),  static_cast<float>(g.scale.x()),
                         static_cast<float>(g.scale.y()),    static_cast<float>(g.scale.z()),
                         static_cast<float>(g.opacity)};
    out.write(reinterpret_cast<const char*>(f), sizeof(f));
    const std::uint8_t rgb[3] = {to_byte(g.color.x()), to_byte(g.color.y()), to_byte(g.color.z())};
    out.write(reinterpret_cast<const char*>(rgb), 3);
  }
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

inline GaussianSet read_ply(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::size_t count = 0;
  bool binary = false;
  int float_props = 0, byte_props = 0;
  std::getline(in, line);
  require(line == "ply", ErrorKind::Format, "not a PLY file: " + path.string());
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string word, type;
    ls >> word;
    if (word == "format") {
      ls >> type;
      binary = type == "binary_little_endian";
    } else if (word == "element") {
      ls >> type >> count;
    } else if (word == "property") {
      ls >> type;
      if (type == "float") ++float_props;
      if (type == "uchar") ++byte_props;
    }
  }
  require(binary && float_props == 11 && byte_props == 3, ErrorKind::Format,
          "unsupported PLY layout in " + path.string());
  GaussianSet out(count);
  for (auto& g : out) {
    float f[11];
    std::uint8_t rgb[3];
    in.read(reinterpret_cast<char*>(f), sizeof(f));
    in.read(reinterpret_cast<char*>(rgb), 3);
    require(static_cast<bool>(in), ErrorKind::Format, "truncated PLY body in " + path.string());
    g.mean = Vec3(f[0], f[1], f[2]);
    g.rotation = Vec4(f[3], f[4], f[5], f[6]);
    g.scale = Vec3(f[7], f[8], f[9]);
    g.opacity = f[10];
    g.color = Vec3(rgb[0], rgb[1], rgb[2]) / 255.0;
  }
  return out;
}

// ---- Metrics ----

/// JSON has no infinity; non-finite numbers are written as strings.
inline json number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline double number_from(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace partsplat::io
