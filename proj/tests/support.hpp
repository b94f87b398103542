#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "hpinit/data.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/random.hpp"

namespace hpinit::test {

inline const Shape3D& mean_face() {
  static const Shape3D s = load_shape3d(HPINIT_DATA_DIR "/mean_face_68.txt");
  return s;
}

inline HeadPose random_pose(Rng& rng, double limit) {
  return {uniform(rng, -limit, limit), uniform(rng, -limit, limit), uniform(rng, -limit, limit)};
}

inline BoundingBox random_box(Rng& rng) {
  return {uniform(rng, -50, 150), uniform(rng, -50, 150), uniform(rng, 20, 200), uniform(rng, 20, 200)};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hpinit_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace hpinit::test
