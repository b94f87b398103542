#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/image.hpp"
#include "hpinit/pose_solver.hpp"
#include "hpinit/random.hpp"

namespace hpinit {

struct Sample {
  std::string id;
  GrayImage image;
  BoundingBox bb;
  std::optional<Shape2D> landmarks;
  HeadPose pose;
};

// ---------------------------------------------------------------------------
// pts files

inline Shape2D load_pts(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoError, "cannot open " + path);
  auto fail = [&](int line, const std::string& msg) {
    throw Error(Errc::ParseError, path + ":" + std::to_string(line) + ": " + msg);
  };

  std::string line;
  int lineno = 0;
  auto next = [&](const char* expect) {
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") != std::string::npos) return;
    }
    fail(lineno + 1, std::string("unexpected end of file, expected ") + expect);
  };

  long declared = -1;
  next("header");
  if (line.rfind("version:", 0) == 0) next("n_points");
  if (line.rfind("n_points:", 0) != 0) fail(lineno, "expected 'n_points: <K>'");
  {
    std::istringstream ss(line.substr(9));
    if (!(ss >> declared) || declared < 0) fail(lineno, "bad n_points value");
  }
  next("'{'");
  if (line.find('{') == std::string::npos) fail(lineno, "expected '{'");

  std::vector<double> flat;
  for (;;) {
    next("'}' or a coordinate line");
    if (line.find('}') != std::string::npos) break;
    std::istringstream ss(line);
    double x, y;
    if (!(ss >> x >> y)) fail(lineno, "expected 'x y'");
    flat.push_back(x);
    flat.push_back(y);
  }
  const long actual = static_cast<long>(flat.size() / 2);
  require(actual == declared, Errc::CountMismatch,
          path + ": n_points declares " + std::to_string(declared) + " but file has " +
              std::to_string(actual));
  return Shape2D(std::move(flat));
}

/// Canonical form: six decimals, no trailing whitespace.
inline std::string format_pts(const Shape2D& shape) {
  std::string out = "version: 1\nn_points: " + std::to_string(shape.size()) + "\n{\n";
  char buf[96];
  for (std::size_t k = 0; k < shape.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.6f %.6f\n", shape.x(k), shape.y(k));
    out += buf;
  }
  out += "}\n";
  return out;
}

inline void write_pts(const std::string& path, const Shape2D& shape) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::IoError, "cannot write " + path);
  out << format_pts(shape);
}

// ---------------------------------------------------------------------------
// Pose annotation

struct AnnotationReport {
  std::vector<std::string> skipped;  // "<id>: <reason>"
};

inline AnnotationReport annotate_poses(std::vector<Sample>& samples, const Shape3D& shape3d) {
  AnnotationReport report;
  for (auto& s : samples) {
    if (!s.landmarks) {
      report.skipped.push_back(s.id + ": no landmarks");
      continue;
    }
    try {
      s.pose = fit_pose_from_landmarks(*s.landmarks, shape3d).pose;
      if (!s.pose.valid()) report.skipped.push_back(s.id + ": pose outside [-90, 90]");
    } catch (const Error& e) {
      report.skipped.push_back(s.id + ": " + e.what());
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic faces

enum class PoseDistribution { Uniform, Gaussian };

struct AngleRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct SynthConfig {
  int count = 1;
  AngleRange pitch{-30.0, 30.0};
  AngleRange yaw{-60.0, 60.0};
  AngleRange roll{-30.0, 30.0};
  int image_size = 128;
  double face_width = 60.0;   // frontal landmark width, pixels
  double blob_sigma = 2.0;    // pixels
  double noise_sigma = 0.02;
  double bbox_dilation = 0.2;
  PoseDistribution distribution = PoseDistribution::Uniform;
  std::uint64_t seed = 0;

  void validate() const {
    require(count >= 1, Errc::InvalidArgument, "synthetic sample count must be >= 1");
    for (const auto& r : {pitch, yaw, roll})
      require(r.lo <= r.hi && r.lo >= -90.0 && r.hi <= 90.0, Errc::InvalidArgument,
              "pose ranges must lie within [-90, 90]");
    require(image_size >= 16 && face_width > 0 && blob_sigma > 0 && noise_sigma >= 0 &&
                bbox_dilation >= 0,
            Errc::InvalidArgument, "bad synthetic image parameters");
  }
};

/// Box the canonical face is projected into: centered on the image's pixel-grid center.
inline BoundingBox canonical_face_box(const SynthConfig& cfg) {
  const double c = 0.5 * (cfg.image_size - 1);
  return {c - 0.5 * cfg.face_width, c - 0.5 * cfg.face_width, cfg.face_width, cfg.face_width};
}

/// Blob peak intensity by landmark group (jaw, brows, nose, eyes, mouth).
inline double landmark_blob_amplitude(std::size_t k) {
  if (k <= 16) return 0.35;
  if (k <= 26) return 0.45;
  if (k <= 35) return 0.55;
  if (k <= 47) return 0.6;
  return 0.5;
}

inline double draw_angle(Rng& rng, const AngleRange& r, PoseDistribution dist) {
  if (r.hi <= r.lo) return r.lo;
  if (dist == PoseDistribution::Uniform) return uniform(rng, r.lo, r.hi);
  const double mid = 0.5 * (r.lo + r.hi), sd = 0.25 * (r.hi - r.lo);
  for (;;) {
    const double a = mid + sd * normal(rng);
    if (a >= r.lo && a <= r.hi) return a;
  }
}

/// Renders landmarks as Gaussian blobs over a pose-dependent linear gradient.
inline GrayImage render_face(const Shape2D& landmarks, const HeadPose& pose, const SynthConfig& cfg,
                             Rng& rng) {
  const int n = cfg.image_size;
  const double c = 0.5 * (n - 1), half = 0.5 * n;
  const double gx = 0.12 * std::sin(pose.yaw * kDegToRad);
  const double gy = 0.12 * std::sin(pose.pitch * kDegToRad);
  std::vector<double> acc(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      acc[static_cast<std::size_t>(y) * n + x] = 0.3 + gx * (x - c) / half + gy * (y - c) / half;

  // Blobs are cut at 4 sigma and shifted down to reach zero there, so the
  // cutoff is continuous and mirrored landmarks render mirrored blobs.
  const double sigma = cfg.blob_sigma, r = 4.0 * sigma, floor_value = std::exp(-0.5 * r * r / (sigma * sigma));
  for (std::size_t k = 0; k < landmarks.size(); ++k) {
    const double amp = landmark_blob_amplitude(k);
    const double lx = landmarks.x(k), ly = landmarks.y(k);
    const int x0 = std::max(0, static_cast<int>(std::floor(lx - r))), x1 = std::min(n - 1, static_cast<int>(std::ceil(lx + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ly - r))), y1 = std::min(n - 1, static_cast<int>(std::ceil(ly + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d2 = (x - lx) * (x - lx) + (y - ly) * (y - ly);
        acc[static_cast<std::size_t>(y) * n + x] += amp * std::max(0.0, std::exp(-d2 / (2 * sigma * sigma)) - floor_value);
      }
  }

  std::vector<float> px(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    double v = acc[i];
    if (cfg.noise_sigma > 0) v += cfg.noise_sigma * normal(rng);
    px[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return GrayImage(n, n, std::move(px));
}

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  return buf;
}

/// Sample i depends only on (cfg, i): each sample draws from its own sub-stream.
inline Sample generate_synthetic_sample(const SynthConfig& cfg, const Shape3D& shape3d,
                                        std::size_t index) {
  Rng rng(derive_seed(cfg.seed, index));
  Sample s;
  s.id = sample_id(index);
  s.pose.pitch = draw_angle(rng, cfg.pitch, cfg.distribution);
  s.pose.yaw = draw_angle(rng, cfg.yaw, cfg.distribution);
  s.pose.roll = draw_angle(rng, cfg.roll, cfg.distribution);
  Shape2D lm = project_weak_perspective(shape3d, s.pose, canonical_face_box(cfg));
  s.image = render_face(lm, s.pose, cfg, rng);
  s.bb = dilated_landmark_box(lm, cfg.bbox_dilation);
  s.landmarks = std::move(lm);
  return s;
}

inline std::vector<Sample> generate_synthetic(const SynthConfig& cfg, const Shape3D& shape3d) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i)
    out.push_back(generate_synthetic_sample(cfg, shape3d, static_cast<std::size_t>(i)));
  return out;
}

// ---------------------------------------------------------------------------
// Splits

/// Seeded split stratified by yaw octile. Exactly floor(n * train_fraction)
/// samples go to the training side.
template <typename T, typename YawOf>
std::pair<std::vector<T>, std::vector<T>> stratified_split(std::vector<T> items,
                                                            double train_fraction,
                                                            std::uint64_t seed, YawOf yaw_of) {
  require(train_fraction >= 0.0 && train_fraction <= 1.0, Errc::InvalidArgument,
          "train fraction must lie in [0, 1]");
  const std::size_t n = items.size();
  std::vector<std::size_t> by_yaw(n);
  for (std::size_t i = 0; i < n; ++i) by_yaw[i] = i;
  std::stable_sort(by_yaw.begin(), by_yaw.end(),
                   [&](std::size_t a, std::size_t b) { return yaw_of(items[a]) < yaw_of(items[b]); });
  std::vector<std::vector<std::size_t>> strata(8);
  for (std::size_t rank = 0; rank < n; ++rank) strata[rank * 8 / n].push_back(by_yaw[rank]);

  Rng rng(seed);
  std::vector<std::size_t> order;
  order.reserve(n);
  for (auto& s : strata) {
    shuffle(s, rng);
    order.insert(order.end(), s.begin(), s.end());
  }

  const auto n_train =
      std::min(n, static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction + 1e-9)));
  std::vector<T> train, test;
  for (std::size_t j = 0; j < n; ++j) {
    const bool to_train = (j + 1) * n_train / n > j * n_train / n;
    (to_train ? train : test).push_back(std::move(items[order[j]]));
  }
  return {std::move(train), std::move(test)};
}

inline std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> samples,
                                                                 double train_fraction,
                                                                 std::uint64_t seed) {
  return stratified_split(std::move(samples), train_fraction, seed,
                          [](const Sample& s) { return s.pose.yaw; });
}

}  // namespace hpinit
