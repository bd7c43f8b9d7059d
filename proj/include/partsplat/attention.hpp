#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "partsplat/camera.hpp"
#include "partsplat/spatial_index.hpp"

namespace partsplat {

/// Single-head cross-view attention parameters. Queries and keys are
/// `w_query^T e` and `w_key^T e` (C x d matrices); values are `w_value e`.
struct AttentionParams {
  MatX w_query;
  MatX w_key;
  MatX w_value;
  bool use_semantic = true;
  bool residual = false;

  int channels() const { return static_cast<int>(w_query.rows()); }
  int dim() const { return static_cast<int>(w_query.cols()); }

  void validate() const {
    require(dim() >= 1, ErrorKind::InvalidInput, "attention dimension d must be >= 1");
    require(w_key.rows() == w_query.rows() && w_key.cols() == w_query.cols(), ErrorKind::Shape,
            "w_key must match w_query shape");
    require(w_value.rows() == w_query.rows() && w_value.cols() == w_query.rows(), ErrorKind::Shape,
            "w_value must be C x C");
    require(w_query.allFinite() && w_key.allFinite() && w_value.allFinite(), ErrorKind::InvalidInput,
            "attention matrices must be finite");
  }

  static AttentionParams zeros(int channels, int dim) {
    return {MatX::Zero(channels, dim), MatX::Zero(channels, dim), MatX::Zero(channels, channels)};
  }

  /// Uniform(-1/sqrt(C), 1/sqrt(C)) initialization.
  static AttentionParams random(int channels, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    std::uniform_real_distribution<double> u(-bound, bound);
    AttentionParams p = zeros(channels, dim);
    for (MatX* m : {&p.w_query, &p.w_key, &p.w_value})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
    return p;
  }
};

/// Neighbor lists in compressed form: neighbors of j are
/// ids[offsets[j] .. offsets[j+1]).
struct Neighborhoods {
  std::vector<int> offsets{0};
  std::vector<int> ids;

  std::size_t queries() const { return offsets.size() - 1; }
  std::span<const int> of(std::size_t j) const {
    return {ids.data() + offsets[j], static_cast<std::size_t>(offsets[j + 1] - offsets[j])};
  }
  void push(std::span<const int> list) {
    ids.insert(ids.end(), list.begin(), list.end());
    offsets.push_back(static_cast<int>(ids.size()));
  }
};

struct NeighborOptions {
  int k = 16;
  bool include_self = true;
  bool exclude_same_view = false;
};

/// KNN neighborhoods in the shared 3D space.
inline Neighborhoods spatial_neighborhoods(const UnprojectedPoints& points, const PointIndex& index,
                                           const NeighborOptions& opt) {
  require(index.size() == points.size(), ErrorKind::Shape, "index was not built over these points");
  Neighborhoods out;
  for (std::size_t j = 0; j < points.size(); ++j) {
    const int view = points.view_id[j];
    auto list = opt.exclude_same_view
                    ? index.knn(static_cast<int>(j), opt.k, opt.include_self,
                                [&](int i) { return points.view_id[static_cast<std::size_t>(i)] != view; })
                    : index.knn(static_cast<int>(j), opt.k, opt.include_self);
    out.push(list);
  }
  return out;
}

/// Neighborhoods found per view in pixel space (no 3D lifting); used when the
/// unprojection step is ablated.
inline Neighborhoods pixel_neighborhoods(const UnprojectedPoints& points, const NeighborOptions& opt) {
  const std::size_t n = points.size();
  std::vector<std::vector<int>> by_view;
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = static_cast<std::size_t>(points.view_id[i]);
    if (by_view.size() <= v) by_view.resize(v + 1);
    by_view[v].push_back(static_cast<int>(i));
  }
  std::vector<std::vector<int>> lists(n);
  for (const auto& members : by_view) {
    if (members.empty()) continue;
    std::vector<Vec3> coords;
    coords.reserve(members.size());
    for (int i : members) {
      const PixelIndex px = points.pixel[static_cast<std::size_t>(i)];
      coords.emplace_back(px.row, px.col, 0.0);
    }
    PointIndex local(std::move(coords));
    for (std::size_t m = 0; m < members.size(); ++m) {
      auto ids = local.knn(static_cast<int>(m), opt.k, opt.include_self);
      for (int& id : ids) id = members[static_cast<std::size_t>(id)];
      lists[static_cast<std::size_t>(members[m])] = std::move(ids);
    }
  }
  Neighborhoods out;
  for (const auto& l : lists) out.push(l);
  return out;
}

/// Cosine similarity; zero when either vector is (numerically) zero.
inline double semantic_consistency(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Shape, "semantic vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / std::sqrt(na * nb);
}

inline double semantic_consistency(const RowMatX& f, int j, int k) {
  return semantic_consistency(std::span<const double>(f.row(j).data(), static_cast<std::size_t>(f.cols())),
                              std::span<const double>(f.row(k).data(), static_cast<std::size_t>(f.cols())));
}

namespace detail {

// In-place softmax over `logits`.
inline void softmax(std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logits) l /= sum;
}

}  // namespace detail

/// Softmax over the neighborhood of the scaled query-key score, each logit
/// multiplied by its semantic consistency (or by 1 when semantics are off).
inline std::vector<double> attention_weights(const RowMatX& latent, int j, std::span<const int> neighbors,
                                             std::span<const double> consistency, const AttentionParams& params) {
  require(!neighbors.empty(), ErrorKind::InvalidInput, "empty attention neighborhood");
  require(consistency.size() == neighbors.size(), ErrorKind::Shape, "consistency count must match neighbors");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));
  const VecX q = params.w_query.transpose() * latent.row(j).transpose();
  std::vector<double> logits(neighbors.size());
  for (std::size_t n = 0; n < neighbors.size(); ++n) {
    const VecX key = params.w_key.transpose() * latent.row(neighbors[n]).transpose();
    const double s = params.use_semantic ? consistency[n] : 1.0;
    logits[n] = q.dot(key) * inv_sqrt_d * s;
  }
  detail::softmax(logits);
  return logits;
}

struct AttentionRecord {
  std::vector<int> neighbors;
  std::vector<double> alpha;
  std::vector<double> consistency;
};

struct RecalibratedPoints {
  RowMatX latent;  // E-tilde, N x C
  std::optional<std::vector<AttentionRecord>> records;
};

namespace detail {

struct AttentionCache {
  RowMatX queries;  // N x d
  RowMatX keys;     // N x d
  RowMatX values;   // N x C
  std::vector<double> consistency;  // per neighborhood edge (aligned with Neighborhoods::ids)
  std::vector<double> alpha;        // per edge
};

inline AttentionCache attention_forward(const RowMatX& latent, const RowMatX& semantic, const Neighborhoods& nb,
                                        const AttentionParams& params) {
  params.validate();
  require(latent.cols() == params.channels(), ErrorKind::Shape, "latent channels do not match attention params");
  require(nb.queries() == static_cast<std::size_t>(latent.rows()), ErrorKind::Shape,
          "neighborhood count does not match points");
  require(semantic.rows() == latent.rows(), ErrorKind::Shape, "semantic and latent row counts differ");
  AttentionCache cache;
  cache.queries = latent * params.w_query;
  cache.keys = latent * params.w_key;
  cache.values = latent * params.w_value.transpose();
  cache.consistency.resize(nb.ids.size());
  cache.alpha.resize(nb.ids.size());
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));
  std::vector<double> logits;
  for (std::size_t j = 0; j < nb.queries(); ++j) {
    const auto list = nb.of(j);
    require(!list.empty(), ErrorKind::InvalidInput, "empty attention neighborhood");
    logits.resize(list.size());
    const std::size_t base = static_cast<std::size_t>(nb.offsets[j]);
    for (std::size_t n = 0; n < list.size(); ++n) {
      const int k = list[n];
      const double s = semantic_consistency(semantic, static_cast<int>(j), k);
      cache.consistency[base + n] = s;
      const double s_eff = params.use_semantic ? s : 1.0;
      logits[n] = cache.queries.row(static_cast<Eigen::Index>(j)).dot(cache.keys.row(k)) * inv_sqrt_d * s_eff;
    }
    softmax(logits);
    for (std::size_t n = 0; n < list.size(); ++n) cache.alpha[base + n] = logits[n];
  }
  return cache;
}

}  // namespace detail

/// Recalibrate every latent embedding as the attention-weighted sum of its
/// neighbors' value projections (plus itself when `residual` is set).
inline RecalibratedPoints recalibrate(const UnprojectedPoints& points, const Neighborhoods& nb,
                                      const AttentionParams& params, bool keep_records = false) {
  const auto cache = detail::attention_forward(points.latent, points.semantic, nb, params);
  RecalibratedPoints out;
  out.latent = RowMatX::Zero(points.latent.rows(), points.latent.cols());
  if (keep_records) out.records.emplace(nb.queries());
  for (std::size_t j = 0; j < nb.queries(); ++j) {
    const auto list = nb.of(j);
    const std::size_t base = static_cast<std::size_t>(nb.offsets[j]);
    auto row = out.latent.row(static_cast<Eigen::Index>(j));
    for (std::size_t n = 0; n < list.size(); ++n) row += cache.alpha[base + n] * cache.values.row(list[n]);
    if (params.residual) row += points.latent.row(static_cast<Eigen::Index>(j));
    if (keep_records) {
      auto& rec = (*out.records)[j];
      rec.neighbors.assign(list.begin(), list.end());
      rec.alpha.assign(cache.alpha.begin() + static_cast<std::ptrdiff_t>(base),
                       cache.alpha.begin() + static_cast<std::ptrdiff_t>(base + list.size()));
      rec.consistency.assign(cache.consistency.begin() + static_cast<std::ptrdiff_t>(base),
                             cache.consistency.begin() + static_cast<std::ptrdiff_t>(base + list.size()));
    }
  }
  return out;
}

inline RecalibratedPoints recalibrate(const UnprojectedPoints& points, const PointIndex& index,
                                      const AttentionParams& params, int k, bool keep_records = false) {
  return recalibrate(points, spatial_neighborhoods(points, index, {k, true, false}), params, keep_records);
}

struct AttentionGrads {
  RowMatX d_latent;
  MatX d_query;
  MatX d_key;
  MatX d_value;
};

/// Exact gradients of the recalibration with the semantic consistencies held
/// constant. `upstream` is dL/dE-tilde (N x C).
inline AttentionGrads recalibrate_backward(const UnprojectedPoints& points, const Neighborhoods& nb,
                                           const AttentionParams& params, const RowMatX& upstream) {
  const RowMatX& latent = points.latent;
  require(upstream.rows() == latent.rows() && upstream.cols() == latent.cols(), ErrorKind::Shape,
          "upstream gradient shape mismatch");
  const auto cache = detail::attention_forward(latent, points.semantic, nb, params);
  const Eigen::Index n_pts = latent.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));

  // Gradients w.r.t. the projected queries/keys/values, then mapped back.
  RowMatX d_q = RowMatX::Zero(n_pts, params.dim());
  RowMatX d_k = RowMatX::Zero(n_pts, params.dim());
  RowMatX d_v = RowMatX::Zero(n_pts, latent.cols());
  std::vector<double> d_alpha;
  for (std::size_t j = 0; j < nb.queries(); ++j) {
    const auto list = nb.of(j);
    const std::size_t base = static_cast<std::size_t>(nb.offsets[j]);
    const auto g = upstream.row(static_cast<Eigen::Index>(j));
    d_alpha.resize(list.size());
    double weighted = 0.0;
    for (std::size_t n = 0; n < list.size(); ++n) {
      const double a = cache.alpha[base + n];
      d_v.row(list[n]) += a * g;
      d_alpha[n] = g.dot(cache.values.row(list[n]));
      weighted += a * d_alpha[n];
    }
    for (std::size_t n = 0; n < list.size(); ++n) {
      const double a = cache.alpha[base + n];
      const double s_eff = params.use_semantic ? cache.consistency[base + n] : 1.0;
      const double d_logit = a * (d_alpha[n] - weighted) * inv_sqrt_d * s_eff;
      d_q.row(static_cast<Eigen::Index>(j)) += d_logit * cache.keys.row(list[n]);
      d_k.row(list[n]) += d_logit * cache.queries.row(static_cast<Eigen::Index>(j));
    }
  }

  AttentionGrads out;
  out.d_query = latent.transpose() * d_q;
  out.d_key = latent.transpose() * d_k;
  out.d_value = d_v.transpose() * latent;
  out.d_latent = d_q * params.w_query.transpose() + d_k * params.w_key.transpose() + d_v * params.w_value;
  if (params.residual) out.d_latent += upstream;
  return out;
}

/// Mean over queries of the attention mass placed on neighbors that share
/// the query's part label (the query itself included when present).
inline double same_part_attention_mass(const std::vector<AttentionRecord>& records, std::span<const int> labels) {
  require(records.size() == labels.size(), ErrorKind::Shape, "label count does not match attention records");
  if (records.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < records.size(); ++j) {
    double mass = 0.0;
    for (std::size_t n = 0; n < records[j].neighbors.size(); ++n)
      if (labels[static_cast<std::size_t>(records[j].neighbors[n])] == labels[j]) mass += records[j].alpha[n];
    total += mass;
  }
  return total / static_cast<double>(records.size());
}

struct ViewSize {
  int height = 0;
  int width = 0;
};

struct ScatteredGrid {
  FeatureGrid grid;
  Mask valid;
};

/// Write each point's recalibrated embedding back to its source pixel.
inline std::vector<ScatteredGrid> scatter_to_grids(const RowMatX& recalibrated, const UnprojectedPoints& points,
                                                   std::span<const ViewSize> layout) {
  require(static_cast<std::size_t>(recalibrated.rows()) == points.size(), ErrorKind::Shape,
          "recalibrated row count does not match points");
  const int channels = static_cast<int>(std::max<Eigen::Index>(1, recalibrated.cols()));
  std::vector<ScatteredGrid> out;
  out.reserve(layout.size());
  for (const ViewSize& v : layout)
    out.push_back({FeatureGrid(v.height, v.width, channels, FeatureKind::Latent), Mask(v.height, v.width, 1, 0)});
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int view = points.view_id[i];
    require(view >= 0 && static_cast<std::size_t>(view) < layout.size(), ErrorKind::Bounds,
            "point references unknown view");
    const PixelIndex px = points.pixel[i];
    auto& target = out[static_cast<std::size_t>(view)];
    require(px.row >= 0 && px.row < target.grid.height() && px.col >= 0 && px.col < target.grid.width(),
            ErrorKind::Bounds, "point pixel outside its view");
    if (target.valid(px.row, px.col))
      fail(ErrorKind::InternalConsistency, "duplicate (view, pixel) in scatter: view " + std::to_string(view) +
                                               " pixel (" + std::to_string(px.row) + "," +
                                               std::to_string(px.col) + ")");
    target.valid(px.row, px.col) = 1;
    std::copy_n(recalibrated.row(static_cast<Eigen::Index>(i)).data(), recalibrated.cols(),
                target.grid.data.pixel(px.row, px.col));
  }
  return out;
}

/// Adjoint of scatter_to_grids: read per-pixel values back into point order.
inline RowMatX gather_from_grids(std::span<const FeatureGrid> grids, const UnprojectedPoints& points) {
  require(!grids.empty(), ErrorKind::EmptyInput, "no grids to gather from");
  const int channels = grids[0].channels();
  RowMatX out(static_cast<Eigen::Index>(points.size()), channels);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& g = grids[static_cast<std::size_t>(points.view_id[i])];
    out.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(g.data.pixel(points.pixel[i].row, points.pixel[i].col), channels);
  }
  return out;
}

}  // namespace partsplat
