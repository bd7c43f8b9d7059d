#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <unordered_map>
#include <vector>

#include "partsplat/types.hpp"

namespace partsplat {

struct Neighbor {
  int index = -1;
  double dist2 = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Strict weak order used everywhere: distance first, then point index.
inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

/// Exact KNN over a static point set using a uniform hash grid.
class PointIndex {
 public:
  explicit PointIndex(std::vector<Vec3> points) : points_(std::move(points)) {
    require(!points_.empty(), ErrorKind::EmptyInput, "cannot build an index over zero points");
    for (const Vec3& p : points_)
      require(p.allFinite(), ErrorKind::InvalidInput, "point coordinates must be finite");
    lo_ = hi_ = points_[0];
    for (const Vec3& p : points_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    cell_ = estimate_cell_size();
    build_cells();
  }

  std::size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[static_cast<std::size_t>(i)]; }
  const std::vector<Vec3>& points() const { return points_; }
  double cell_size() const { return cell_; }

  /// Neighbors of a stored point. With `include_self` the query comes first;
  /// `accept` filters the remaining candidates.
  template <typename Accept>
  std::vector<int> knn(int query_id, int k, bool include_self, Accept&& accept) const {
    require(query_id >= 0 && static_cast<std::size_t>(query_id) < points_.size(), ErrorKind::Bounds,
            "knn query id out of range");
    require(k >= 1, ErrorKind::InvalidInput, "k must be positive");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    int remaining = k;
    if (include_self) {
      out.push_back(query_id);
      --remaining;
    }
    if (remaining > 0) {
      auto found = search(points_[static_cast<std::size_t>(query_id)], remaining,
                          [&](int i) { return i != query_id && accept(i); });
      for (const Neighbor& n : found) out.push_back(n.index);
    }
    return out;
  }

  std::vector<int> knn(int query_id, int k, bool include_self = true) const {
    return knn(query_id, k, include_self, [](int) { return true; });
  }

  /// k nearest stored points to an arbitrary location, sorted.
  std::vector<Neighbor> knn_point(const Vec3& query, int k) const {
    require(k >= 1, ErrorKind::InvalidInput, "k must be positive");
    return search(query, k, [](int) { return true; });
  }

  Neighbor nearest(const Vec3& query) const { return search(query, 1, [](int) { return true; }).front(); }

 private:
  using Cell = std::array<std::int64_t, 3>;

  static std::uint64_t key(const Cell& c) {
    constexpr std::int64_t bias = 1 << 20;
    return (static_cast<std::uint64_t>(c[0] + bias) << 42) | (static_cast<std::uint64_t>(c[1] + bias) << 21) |
           static_cast<std::uint64_t>(c[2] + bias);
  }

  Cell cell_of(const Vec3& p) const {
    Cell c;
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - lo_[a]) / cell_);
      c[static_cast<std::size_t>(a)] =
          static_cast<std::int64_t>(std::clamp(f, -1e6, 1e6));
    }
    return c;
  }

  // Median nearest-neighbor spacing over a ~1% deterministic sample.
  double estimate_cell_size() const {
    const std::size_t n = points_.size();
    const double extent = (hi_ - lo_).maxCoeff();
    if (n == 1) return extent > 0.0 ? extent : 1.0;
    const std::size_t samples = std::max<std::size_t>(n / 100, std::min<std::size_t>(n, 16));
    const std::size_t stride = std::max<std::size_t>(1, n / samples);
    std::vector<double> spacing;
    for (std::size_t s = 0; s < n && spacing.size() < samples; s += stride) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != s) best = std::min(best, (points_[j] - points_[s]).squaredNorm());
      spacing.push_back(std::sqrt(best));
    }
    std::nth_element(spacing.begin(), spacing.begin() + static_cast<std::ptrdiff_t>(spacing.size() / 2),
                     spacing.end());
    double h = spacing[spacing.size() / 2];
    // Cells far smaller than the extent would need more than 2^20 per axis.
    const double floor_h = extent / 5e5;
    if (!(h > floor_h)) h = extent > 0.0 ? std::max(floor_h, extent / std::cbrt(static_cast<double>(n))) : 1.0;
    return h;
  }

  void build_cells() {
    const std::size_t n = points_.size();
    std::vector<std::pair<std::uint64_t, int>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {key(cell_of(points_[i])), static_cast<int>(i)};
    std::sort(keyed.begin(), keyed.end());
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      order_[i] = keyed[i].second;
      auto [it, inserted] = cells_.try_emplace(keyed[i].first, static_cast<std::uint32_t>(i),
                                               static_cast<std::uint32_t>(i));
      it->second.second = static_cast<std::uint32_t>(i + 1);
    }
    cmin_ = cell_of(lo_);
    cmax_ = cell_of(hi_);
  }

  template <typename Accept>
  std::vector<Neighbor> search(const Vec3& q, int k, Accept&& accept) const {
    auto worse = [](const Neighbor& a, const Neighbor& b) { return neighbor_less(a, b); };
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse)> heap(worse);
    auto offer = [&](int i) {
      if (!accept(i)) return;
      const Neighbor cand{i, (points_[static_cast<std::size_t>(i)] - q).squaredNorm()};
      if (static_cast<int>(heap.size()) < k) {
        heap.push(cand);
      } else if (neighbor_less(cand, heap.top())) {
        heap.pop();
        heap.push(cand);
      }
    };

    const Cell qc = cell_of(q);
    std::int64_t rmax = 0;
    std::int64_t rmin = 0;
    for (std::size_t a = 0; a < 3; ++a) {
      rmax = std::max({rmax, std::abs(qc[a] - cmin_[a]), std::abs(qc[a] - cmax_[a])});
      rmin = std::max({rmin, cmin_[a] - qc[a], qc[a] - cmax_[a]});
    }

    std::size_t visited_cells = 0;
    bool brute = false;
    for (std::int64_t r = rmin; r <= rmax; ++r) {
      visit_shell(qc, r, [&](std::uint64_t kcell) {
        ++visited_cells;
        auto it = cells_.find(kcell);
        if (it == cells_.end()) return;
        for (std::uint32_t s = it->second.first; s < it->second.second; ++s) offer(order_[s]);
      });
      if (static_cast<int>(heap.size()) == k && r >= 1) {
        const double bound = static_cast<double>(r) * cell_;
        if (heap.top().dist2 < bound * bound) break;
      }
      // Sparse layouts can make shell walking slower than a scan.
      if (visited_cells > 8 * points_.size() + 64) {
        brute = true;
        break;
      }
    }
    if (brute) {
      while (!heap.empty()) heap.pop();
      for (std::size_t i = 0; i < points_.size(); ++i) offer(static_cast<int>(i));
    }

    std::vector<Neighbor> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top();
      heap.pop();
    }
    return out;
  }

  template <typename Visit>
  void visit_shell(const Cell& qc, std::int64_t r, Visit&& visit) const {
    const std::int64_t x0 = std::max(qc[0] - r, cmin_[0]), x1 = std::min(qc[0] + r, cmax_[0]);
    const std::int64_t y0 = std::max(qc[1] - r, cmin_[1]), y1 = std::min(qc[1] + r, cmax_[1]);
    const std::int64_t z0 = std::max(qc[2] - r, cmin_[2]), z1 = std::min(qc[2] + r, cmax_[2]);
    for (std::int64_t x = x0; x <= x1; ++x) {
      const bool xface = std::abs(x - qc[0]) == r;
      for (std::int64_t y = y0; y <= y1; ++y) {
        const bool face = xface || std::abs(y - qc[1]) == r;
        if (face) {
          for (std::int64_t z = z0; z <= z1; ++z) visit(key({x, y, z}));
        } else {
          if (qc[2] - r >= cmin_[2] && qc[2] - r <= cmax_[2]) visit(key({x, y, qc[2] - r}));
          if (r > 0 && qc[2] + r >= cmin_[2] && qc[2] + r <= cmax_[2]) visit(key({x, y, qc[2] + r}));
        }
      }
    }
  }

  std::vector<Vec3> points_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  Cell cmin_{}, cmax_{};
  std::vector<int> order_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, std::uint32_t>> cells_;
};

inline PointIndex build_index(std::vector<Vec3> points) { return PointIndex(std::move(points)); }

}  // namespace partsplat
