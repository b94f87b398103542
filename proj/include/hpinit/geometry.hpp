#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hpinit/error.hpp"

namespace hpinit {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;
inline constexpr std::size_t kNumLandmarks = 68;

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// K 2D landmarks stored flat as x0 y0 x1 y1 ...
class Shape2D {
 public:
  Shape2D() = default;

  explicit Shape2D(std::vector<double> flat) : coords_(std::move(flat)) {
    require(coords_.size() % 2 == 0, Errc::InvalidArgument, "flat shape length must be even");
    require(coords_.size() >= 4, Errc::InvalidArgument, "shape needs at least 2 landmarks");
    for (double c : coords_) require(std::isfinite(c), Errc::InvalidArgument, "non-finite landmark");
  }

  static Shape2D from_points(std::span<const Vec2> pts) {
    std::vector<double> flat;
    flat.reserve(2 * pts.size());
    for (const auto& p : pts) {
      flat.push_back(p.x());
      flat.push_back(p.y());
    }
    return Shape2D(std::move(flat));
  }

  std::size_t size() const { return coords_.size() / 2; }
  bool empty() const { return coords_.empty(); }

  double x(std::size_t k) const { return coords_[2 * k]; }
  double y(std::size_t k) const { return coords_[2 * k + 1]; }
  Vec2 point(std::size_t k) const { return {coords_[2 * k], coords_[2 * k + 1]}; }
  void set_point(std::size_t k, const Vec2& p) {
    coords_[2 * k] = p.x();
    coords_[2 * k + 1] = p.y();
  }

  std::span<const double> flat() const { return coords_; }
  std::span<double> flat() { return coords_; }

  Vec2 centroid() const {
    Vec2 c = Vec2::Zero();
    for (std::size_t k = 0; k < size(); ++k) c += point(k);
    return c / static_cast<double>(size());
  }

  /// Width and height of the tight landmark box.
  Vec2 extent() const {
    double x0 = x(0), x1 = x(0), y0 = y(0), y1 = y(0);
    for (std::size_t k = 1; k < size(); ++k) {
      x0 = std::min(x0, x(k));
      x1 = std::max(x1, x(k));
      y0 = std::min(y0, y(k));
      y1 = std::max(y1, y(k));
    }
    return {x1 - x0, y1 - y0};
  }

  friend bool operator==(const Shape2D&, const Shape2D&) = default;

 private:
  std::vector<double> coords_;
};

/// Canonical mean 3D face: 68 points, re-centered so the centroid is the origin.
/// Axes follow the image: x right, y down, z away from the camera.
class Shape3D {
 public:
  using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

  explicit Shape3D(Points pts) : points_(std::move(pts)) {
    require(points_.rows() == static_cast<Eigen::Index>(kNumLandmarks), Errc::InvalidArgument,
            "Shape3D needs exactly 68 points, got " + std::to_string(points_.rows()));
    require(points_.allFinite(), Errc::InvalidArgument, "non-finite Shape3D coordinate");
    const Eigen::RowVector3d mean = points_.colwise().mean();
    points_.rowwise() -= mean;
    Eigen::JacobiSVD<Points> svd(points_);
    const auto sv = svd.singularValues();
    require(sv(1) > 1e-9 * sv(0), Errc::DegenerateInput, "Shape3D points are collinear");
  }

  const Points& points() const { return points_; }
  Vec3 point(std::size_t k) const { return points_.row(static_cast<Eigen::Index>(k)).transpose(); }
  std::size_t size() const { return static_cast<std::size_t>(points_.rows()); }

  /// Horizontal extent of the frontal (identity-rotation) projection.
  double frontal_width() const { return points_.col(0).maxCoeff() - points_.col(0).minCoeff(); }

 private:
  Points points_;
};

/// One "x y z" triple per line.
inline Shape3D load_shape3d(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoError, "cannot open " + path);
  std::vector<Vec3> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Vec3 p;
    if (!(ss >> p.x() >> p.y() >> p.z()))
      throw Error(Errc::ParseError, path + ":" + std::to_string(lineno) + ": expected 'x y z'");
    rows.push_back(p);
  }
  require(rows.size() == kNumLandmarks, Errc::CountMismatch,
          path + ": expected 68 points, found " + std::to_string(rows.size()));
  Shape3D::Points pts(rows.size(), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = rows[i];
  return Shape3D(std::move(pts));
}

/// Euler angles in degrees.
struct HeadPose {
  double pitch = 0.0;
  double yaw = 0.0;
  double roll = 0.0;

  bool valid() const {
    for (double a : {pitch, yaw, roll})
      if (!std::isfinite(a) || a < -90.0 || a > 90.0) return false;
    return true;
  }

  void validate() const {
    require(valid(), Errc::InvalidArgument,
            "head pose angles must be finite and within [-90, 90] degrees");
  }

  double max_abs_angle() const {
    return std::max({std::abs(pitch), std::abs(yaw), std::abs(roll)});
  }

  friend bool operator==(const HeadPose&, const HeadPose&) = default;
};

inline double pose_distance(const HeadPose& a, const HeadPose& b) {
  const double dp = a.pitch - b.pitch, dy = a.yaw - b.yaw, dr = a.roll - b.roll;
  return std::sqrt(dp * dp + dy * dy + dr * dr);
}

struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && w > 0 &&
           h > 0;
  }
  void validate() const {
    require(valid(), Errc::InvalidArgument, "bounding box needs finite coordinates and w, h > 0");
  }

  Vec2 center() const { return {x + 0.5 * w, y + 0.5 * h}; }

  BoundingBox translated(double dx, double dy) const { return {x + dx, y + dy, w, h}; }

  /// Scale about the center.
  BoundingBox scaled(double f) const {
    const Vec2 c = center();
    return {c.x() - 0.5 * f * w, c.y() - 0.5 * f * h, f * w, f * h};
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Tight landmark box grown by `dilation` (0.2 = 20% larger) about its center.
inline BoundingBox dilated_landmark_box(const Shape2D& shape, double dilation) {
  double x0 = shape.x(0), x1 = shape.x(0), y0 = shape.y(0), y1 = shape.y(0);
  for (std::size_t k = 1; k < shape.size(); ++k) {
    x0 = std::min(x0, shape.x(k));
    x1 = std::max(x1, shape.x(k));
    y0 = std::min(y0, shape.y(k));
    y1 = std::max(y1, shape.y(k));
  }
  BoundingBox tight{x0, y0, x1 - x0, y1 - y0};
  require(tight.valid(), Errc::DegenerateInput, "landmarks have zero extent");
  return tight.scaled(1.0 + dilation);
}

/// p -> scale * Rot(rotation) * p + translation
struct SimilarityTransform {
  double scale = 1.0;
  double rotation = 0.0;  // radians
  Vec2 translation = Vec2::Zero();

  Vec2 apply(const Vec2& p) const {
    const double c = std::cos(rotation), s = std::sin(rotation);
    return {scale * (c * p.x() - s * p.y()) + translation.x(),
            scale * (s * p.x() + c * p.y()) + translation.y()};
  }

  SimilarityTransform inverse() const {
    SimilarityTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation = -rotation;
    inv.translation = Vec2::Zero();
    inv.translation = -inv.apply(translation);
    return inv;
  }

  /// (this ∘ other)(p) = this(other(p))
  SimilarityTransform compose(const SimilarityTransform& other) const {
    SimilarityTransform out;
    out.scale = scale * other.scale;
    out.rotation = rotation + other.rotation;
    out.translation = apply(other.translation);
    return out;
  }
};

inline Mat3 rot_x(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}
inline Mat3 rot_y(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}
inline Mat3 rot_z(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

/// R = Rz(roll) * Ry(yaw) * Rx(pitch).
inline Mat3 euler_to_rotation(const HeadPose& pose) {
  return rot_z(pose.roll * kDegToRad) * rot_y(pose.yaw * kDegToRad) * rot_x(pose.pitch * kDegToRad);
}

struct EulerDecomposition {
  HeadPose pose;
  bool gimbal_lock = false;
};

/// Inverse of euler_to_rotation with yaw taken in [-90, 90]. At |yaw| = 90 the
/// decomposition is not unique; roll is then fixed to 0 and gimbal_lock is set.
/// Pitch and roll come from atan2 and are only guaranteed to lie in (-180, 180].
inline EulerDecomposition rotation_to_euler(const Mat3& r) {
  const double ortho_err = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  require(r.allFinite() && ortho_err <= 1e-6 && r.determinant() > 0, Errc::NonOrthonormalInput,
          "rotation matrix is not orthonormal with positive determinant");

  EulerDecomposition out;
  const double sin_yaw = std::clamp(-r(2, 0), -1.0, 1.0);
  const double yaw = std::asin(sin_yaw);
  if (std::abs(std::abs(yaw) - std::numbers::pi / 2) < 1e-6 * kDegToRad ||
      std::hypot(r(0, 0), r(1, 0)) < 1e-12) {
    out.gimbal_lock = true;
    out.pose.yaw = std::copysign(90.0, sin_yaw);
    out.pose.roll = 0.0;
    out.pose.pitch = std::atan2(-r(1, 2), r(1, 1)) * kRadToDeg;
    return out;
  }
  out.pose.yaw = yaw * kRadToDeg;
  out.pose.pitch = std::atan2(r(2, 1), r(2, 2)) * kRadToDeg;
  out.pose.roll = std::atan2(r(1, 0), r(0, 0)) * kRadToDeg;
  return out;
}

/// Scaled-orthographic image of `shape3d`: rotate, drop depth, scale so the frontal
/// projection spans bb.w, and put the projected centroid at the box center.
inline Shape2D project_weak_perspective(const Shape3D& shape3d, const HeadPose& pose,
                                        const BoundingBox& bb) {
  pose.validate();
  bb.validate();
  const double s = bb.w / shape3d.frontal_width();
  const Mat3 r = euler_to_rotation(pose);
  const Eigen::Matrix<double, 2, 3> sp = s * r.topRows<2>();
  const Vec2 c = bb.center();
  std::vector<double> flat(2 * shape3d.size());
  for (std::size_t k = 0; k < shape3d.size(); ++k) {
    const Vec2 p = sp * shape3d.point(k) + c;
    flat[2 * k] = p.x();
    flat[2 * k + 1] = p.y();
  }
  Shape2D out(std::move(flat));
  const Vec2 ext = out.extent();
  require(std::max(ext.x(), ext.y()) >= 1e-9 * bb.w, Errc::DegenerateProjection,
          "projected shape collapsed");
  return out;
}

/// Axis-aligned similarity mapping src onto dst: width ratio as scale, centers matched.
inline SimilarityTransform similarity_between_boxes(const BoundingBox& src, const BoundingBox& dst) {
  src.validate();
  dst.validate();
  SimilarityTransform t;
  t.scale = dst.w / src.w;
  t.rotation = 0.0;
  t.translation = dst.center() - t.scale * src.center();
  return t;
}

inline Shape2D apply_similarity(const SimilarityTransform& t, const Shape2D& shape) {
  std::vector<double> flat(shape.flat().begin(), shape.flat().end());
  for (std::size_t k = 0; k < shape.size(); ++k) {
    const Vec2 p = t.apply(shape.point(k));
    flat[2 * k] = p.x();
    flat[2 * k + 1] = p.y();
  }
  return Shape2D(std::move(flat));
}

/// Shape expressed in box units: (x - bb.x) / bb.w, (y - bb.y) / bb.h.
inline Shape2D to_box_frame(const Shape2D& shape, const BoundingBox& bb) {
  std::vector<double> flat(2 * shape.size());
  for (std::size_t k = 0; k < shape.size(); ++k) {
    flat[2 * k] = (shape.x(k) - bb.x) / bb.w;
    flat[2 * k + 1] = (shape.y(k) - bb.y) / bb.h;
  }
  return Shape2D(std::move(flat));
}

inline Shape2D from_box_frame(const Shape2D& shape, const BoundingBox& bb) {
  std::vector<double> flat(2 * shape.size());
  for (std::size_t k = 0; k < shape.size(); ++k) {
    flat[2 * k] = bb.x + shape.x(k) * bb.w;
    flat[2 * k + 1] = bb.y + shape.y(k) * bb.h;
  }
  return Shape2D(std::move(flat));
}

}  // namespace hpinit
