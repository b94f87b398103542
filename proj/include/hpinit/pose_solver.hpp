#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "hpinit/geometry.hpp"

namespace hpinit {

struct PoseFit {
  HeadPose pose;
  double scale = 1.0;
  Vec2 translation = Vec2::Zero();
  double residual = 0.0;  // RMS reprojection error, pixels
  bool gimbal_lock = false;
};

/// Closed-form scaled-orthographic fit of the 3D mean shape to 68 landmarks.
///
/// With both point sets centered, the unconstrained least-squares 2x3 map is
/// M = X^T P (P^T P)^-1. For an exact weak-perspective image M = s * Q with Q
/// the top two rows of a rotation, so projecting M onto matrices with
/// orthonormal rows (U V^T from its SVD) recovers Q exactly. The third row is
/// completed by a cross product and the scale is re-fit in closed form given Q.
inline PoseFit fit_pose_from_landmarks(const Shape2D& landmarks, const Shape3D& shape3d) {
  require(landmarks.size() == shape3d.size(), Errc::ShapeMismatch,
          "landmark count " + std::to_string(landmarks.size()) + " does not match 3D shape");
  const auto n = static_cast<Eigen::Index>(landmarks.size());

  Eigen::Matrix<double, Eigen::Dynamic, 2> x(n, 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    x(k, 0) = landmarks.x(static_cast<std::size_t>(k));
    x(k, 1) = landmarks.y(static_cast<std::size_t>(k));
  }
  const Eigen::RowVector2d mean = x.colwise().mean();
  x.rowwise() -= mean;

  const Eigen::Matrix2d cov2 = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov2);
  const double lmax = es.eigenvalues()(1), lmin = es.eigenvalues()(0);
  require(lmax > 0 && lmin > 1e-12 * lmax, Errc::DegenerateInput,
          "landmarks are collinear or coincident");

  const auto& p = shape3d.points();
  const Eigen::Matrix3d cov3 = p.transpose() * p;
  const Eigen::Matrix<double, 2, 3> cross = x.transpose() * p;
  const Eigen::Matrix<double, 2, 3> m = cov3.transpose().ldlt().solve(cross.transpose()).transpose();

  Eigen::JacobiSVD<Eigen::Matrix<double, 2, 3>> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix<double, 2, 3> q = svd.matrixU() * svd.matrixV().leftCols<2>().transpose();

  Mat3 r;
  r.row(0) = q.row(0);
  r.row(1) = q.row(1);
  r.row(2) = q.row(0).cross(q.row(1));

  // Optimal scale for fixed rotation.
  const Eigen::Matrix<double, Eigen::Dynamic, 2> proj = p * q.transpose();
  const double s = (proj.array() * x.array()).sum() / proj.squaredNorm();
  require(std::isfinite(s) && s > 0, Errc::DegenerateInput, "non-positive fitted scale");

  PoseFit fit;
  const auto euler = rotation_to_euler(r);
  fit.pose = euler.pose;
  fit.gimbal_lock = euler.gimbal_lock;
  fit.scale = s;
  fit.translation = mean.transpose();
  fit.residual = std::sqrt((s * proj - x).squaredNorm() / static_cast<double>(n));
  return fit;
}

}  // namespace hpinit
