#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "partsplat/error.hpp"

namespace partsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
// Per-point feature rows (N x C).
using RowMatX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PixelIndex {
  int row = 0;
  int col = 0;
  friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
};

// Dense H x W x C array stored row-major with channels innermost.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, int channels, T fill = T{})
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {
    require(height >= 0 && width >= 0 && channels >= 1, ErrorKind::Shape, "grid dimensions must be non-negative");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Grid& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  T& operator()(int r, int c, int ch = 0) { return data_[index(r, c, ch)]; }
  const T& operator()(int r, int c, int ch = 0) const { return data_[index(r, c, ch)]; }
  T* pixel(int r, int c) { return data_.data() + index(r, c, 0); }
  const T* pixel(int r, int c) const { return data_.data() + index(r, c, 0); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * width_ + c) * channels_ + ch;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

// Images are linear [0,1] values; color images have 3 channels.
using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;
using LabelMap = Grid<int>;

struct DepthMap {
  Grid<double> values;  // camera-space z, meters
  Mask valid;

  DepthMap() = default;
  DepthMap(int height, int width) : values(height, width, 1, 0.0), valid(height, width, 1, 0) {}
  int height() const { return values.height(); }
  int width() const { return values.width(); }
  bool is_valid(int r, int c) const { return valid(r, c) != 0; }
};

enum class FeatureKind : std::uint8_t { Semantic = 0, Latent = 1 };

struct FeatureGrid {
  Grid<double> data;
  FeatureKind kind = FeatureKind::Latent;

  FeatureGrid() = default;
  FeatureGrid(int height, int width, int channels, FeatureKind k)
      : data(height, width, channels, 0.0), kind(k) {}
  int height() const { return data.height(); }
  int width() const { return data.width(); }
  int channels() const { return data.channels(); }
};

}  // namespace partsplat
