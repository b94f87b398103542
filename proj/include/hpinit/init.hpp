#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/random.hpp"

namespace hpinit {

/// Training shape with its box and solver-annotated pose.
struct TrainExemplar {
  std::string id;
  Shape2D shape;
  BoundingBox bb;
  HeadPose pose;
};

struct InitSet {
  std::vector<Shape2D> shapes;
  std::string scheme;

  std::size_t size() const { return shapes.size(); }
};

inline const BoundingBox kUnitBox{0.0, 0.0, 1.0, 1.0};

/// Mean of the exemplar shapes, each first mapped into the unit box.
inline Shape2D mean_unit_shape(std::span<const TrainExemplar> exemplars) {
  require(!exemplars.empty(), Errc::InvalidArgument, "mean shape needs at least one exemplar");
  const std::size_t k = exemplars.front().shape.size();
  std::vector<double> acc(2 * k, 0.0);
  for (const auto& ex : exemplars) {
    require(ex.shape.size() == k, Errc::ShapeMismatch, "exemplar landmark counts differ");
    const Shape2D unit = apply_similarity(similarity_between_boxes(ex.bb, kUnitBox), ex.shape);
    for (std::size_t i = 0; i < 2 * k; ++i) acc[i] += unit.flat()[i];
  }
  for (double& v : acc) v /= static_cast<double>(exemplars.size());
  return Shape2D(std::move(acc));
}

inline Shape2D mean_shape_init(std::span<const TrainExemplar> exemplars, const BoundingBox& bb) {
  return apply_similarity(similarity_between_boxes(kUnitBox, bb), mean_unit_shape(exemplars));
}

inline Shape2D map_exemplar(const TrainExemplar& ex, const BoundingBox& bb) {
  return apply_similarity(similarity_between_boxes(ex.bb, bb), ex.shape);
}

/// Indices of n exemplars drawn uniformly: without replacement when n <= pool
/// size, with replacement otherwise.
inline std::vector<std::size_t> draw_exemplar_indices(std::size_t pool, std::size_t n, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(n);
  if (n > pool) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(uniform_index(rng, pool));
    return out;
  }
  // Sparse partial Fisher-Yates: only touched slots are stored.
  std::vector<std::pair<std::size_t, std::size_t>> swapped;
  auto slot = [&](std::size_t i) {
    for (const auto& [k, v] : swapped)
      if (k == i) return v;
    return i;
  };
  auto set_slot = [&](std::size_t i, std::size_t v) {
    for (auto& [k, old] : swapped)
      if (k == i) {
        old = v;
        return;
      }
    swapped.emplace_back(i, v);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, pool - i);
    const std::size_t vi = slot(i), vj = slot(j);
    set_slot(j, vi);
    out.push_back(vj);
  }
  return out;
}

inline InitSet random_init(std::span<const TrainExemplar> exemplars, const BoundingBox& bb,
                           std::size_t n, std::uint64_t seed) {
  require(n >= 1, Errc::InvalidArgument, "random_init needs n >= 1");
  require(!exemplars.empty(), Errc::InvalidArgument, "random_init needs exemplars");
  Rng rng(seed);
  InitSet set;
  set.scheme = "random:" + std::to_string(n);
  for (std::size_t idx : draw_exemplar_indices(exemplars.size(), n, rng))
    set.shapes.push_back(map_exemplar(exemplars[idx], bb));
  return set;
}

inline Shape2D scheme1_3d_init(const HeadPose& pose, const BoundingBox& bb, const Shape3D& shape3d) {
  return project_weak_perspective(shape3d, pose, bb);
}

/// How face boxes relate to the tight box of their landmarks:
/// box.w = scale * tight.w, box center = tight center + (dx, dy) * tight.w.
struct BoxConvention {
  double scale = 1.2;
  double dx = 0.0;
  double dy = 0.0;

  BoundingBox face_box(const Shape2D& shape) const {
    const BoundingBox t = dilated_landmark_box(shape, 0.0);
    const Vec2 c = t.center() + Vec2(dx, dy) * t.w;
    const double w = scale * t.w, h = scale * t.h;
    return {c.x() - 0.5 * w, c.y() - 0.5 * h, w, h};
  }
};

/// Median convention over the exemplars' (shape, box) pairs.
inline BoxConvention learn_box_convention(std::span<const TrainExemplar> exemplars) {
  require(!exemplars.empty(), Errc::InvalidArgument, "box convention needs exemplars");
  std::vector<double> sc, dx, dy;
  for (const auto& ex : exemplars) {
    const BoundingBox t = dilated_landmark_box(ex.shape, 0.0);
    const Vec2 off = (ex.bb.center() - t.center()) / t.w;
    sc.push_back(ex.bb.w / t.w);
    dx.push_back(off.x());
    dy.push_back(off.y());
  }
  auto median = [](std::vector<double>& v) {
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    double m = *mid;
    if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
    return m;
  };
  return {median(sc), median(dx), median(dy)};
}

/// Projects under `pose` into a canonical frame, then maps the projection's own
/// face box (per `conv`) onto `bb`.
inline Shape2D scheme1_box_init(const HeadPose& pose, const BoundingBox& bb, const Shape3D& shape3d,
                                const BoxConvention& conv) {
  const Shape2D canon = project_weak_perspective(shape3d, pose, kUnitBox);
  return apply_similarity(similarity_between_boxes(conv.face_box(canon), bb), canon);
}

/// Per-axis multipliers on the degree differences; unit weights give plain Euclidean distance.
struct PoseMetric {
  double pitch = 1.0;
  double yaw = 1.0;
  double roll = 1.0;

  double operator()(const HeadPose& a, const HeadPose& b) const {
    const double dp = pitch * (a.pitch - b.pitch);
    const double dy = yaw * (a.yaw - b.yaw);
    const double dr = roll * (a.roll - b.roll);
    return std::sqrt(dp * dp + dy * dy + dr * dr);
  }
};

/// Indices of the k nearest exemplars in pose space, nearest first; ties go to
/// the smaller id.
inline std::vector<std::size_t> nearest_pose_exemplars(std::span<const TrainExemplar> exemplars,
                                                       const HeadPose& query, std::size_t k,
                                                       const PoseMetric& metric = {}) {
  require(k >= 1 && k <= exemplars.size(), Errc::InvalidArgument,
          "knn needs 1 <= k <= number of exemplars");
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(exemplars.size());
  for (std::size_t i = 0; i < exemplars.size(); ++i)
    d.emplace_back(metric(query, exemplars[i].pose), i);
  auto closer = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return exemplars[a.second].id < exemplars[b.second].id;
  };
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end(), closer);
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

inline InitSet scheme2_knn_init(const HeadPose& pose, const BoundingBox& bb,
                                std::span<const TrainExemplar> exemplars, std::size_t k,
                                const PoseMetric& metric = {}) {
  InitSet set;
  set.scheme = "knn:" + std::to_string(k);
  for (std::size_t idx : nearest_pose_exemplars(exemplars, pose, k, metric))
    set.shapes.push_back(map_exemplar(exemplars[idx], bb));
  return set;
}

/// Per-coordinate median; an even count averages the two middle values.
inline Shape2D aggregate_median(std::span<const Shape2D> predictions) {
  require(!predictions.empty(), Errc::InvalidArgument, "median of zero shapes");
  const std::size_t len = predictions.front().flat().size();
  for (const auto& p : predictions)
    require(p.flat().size() == len, Errc::ShapeMismatch, "median over shapes of different K");
  if (predictions.size() == 1) return predictions.front();

  const std::size_t n = predictions.size();
  std::vector<double> column(n), out(len);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < n; ++j) column[j] = predictions[j].flat()[i];
    auto mid = column.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(column.begin(), mid, column.end());
    if (n % 2 == 1) {
      out[i] = *mid;
    } else {
      const double upper = *mid;
      const double lower = *std::max_element(column.begin(), mid);
      out[i] = 0.5 * (lower + upper);
    }
  }
  return Shape2D(std::move(out));
}

// ---------------------------------------------------------------------------
// Scheme selector: "mean" | "random:<n>" | "3d" | "knn:<k>"

struct SchemeSpec {
  enum class Kind { Mean, Random, Projection3D, Knn };
  Kind kind = Kind::Mean;
  std::size_t count = 1;

  std::string to_string() const {
    switch (kind) {
      case Kind::Mean: return "mean";
      case Kind::Random: return "random:" + std::to_string(count);
      case Kind::Projection3D: return "3d";
      case Kind::Knn: return "knn:" + std::to_string(count);
    }
    return {};
  }

  bool needs_pose() const { return kind == Kind::Projection3D || kind == Kind::Knn; }

  friend bool operator==(const SchemeSpec&, const SchemeSpec&) = default;
};

inline SchemeSpec parse_scheme(std::string_view text) {
  auto count_after = [&](std::string_view prefix) {
    const auto rest = text.substr(prefix.size());
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), n);
    require(ec == std::errc() && ptr == rest.data() + rest.size() && n >= 1,
            Errc::InvalidArgument, "bad count in scheme '" + std::string(text) + "'");
    return n;
  };
  if (text == "mean") return {SchemeSpec::Kind::Mean, 1};
  if (text == "3d") return {SchemeSpec::Kind::Projection3D, 1};
  if (text.starts_with("random:")) return {SchemeSpec::Kind::Random, count_after("random:")};
  if (text.starts_with("knn:")) return {SchemeSpec::Kind::Knn, count_after("knn:")};
  throw Error(Errc::InvalidArgument,
              "unknown scheme '" + std::string(text) + "' (mean | random:n | 3d | knn:k)");
}

/// Builds the initial shapes for one face. `pose` is only read by the pose-driven schemes.
inline InitSet make_inits(const SchemeSpec& spec, std::span<const TrainExemplar> exemplars,
                          const Shape3D& shape3d, const BoundingBox& bb, const HeadPose& pose,
                          std::uint64_t seed, const BoxConvention& conv = {}) {
  switch (spec.kind) {
    case SchemeSpec::Kind::Mean:
      return {{mean_shape_init(exemplars, bb)}, "mean"};
    case SchemeSpec::Kind::Random:
      return random_init(exemplars, bb, spec.count, seed);
    case SchemeSpec::Kind::Projection3D:
      return {{scheme1_box_init(pose, bb, shape3d, conv)}, "3d"};
    case SchemeSpec::Kind::Knn:
      return scheme2_knn_init(pose, bb, exemplars, spec.count);
  }
  throw Error(Errc::InvalidArgument, "unhandled scheme");
}

}  // namespace hpinit
