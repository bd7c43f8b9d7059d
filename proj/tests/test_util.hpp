#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "partsplat/pipeline.hpp"

namespace partsplat::fixtures {

// Default benchmark dataset, built once per test binary.
inline const Dataset& default_dataset() {
  static const Dataset ds = synthesize(PipelineConfig{});
  return ds;
}

// Fresh directory under the system temp dir, named after the running test.
inline io::fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto dir = io::fs::temp_directory_path() / "partsplat_tests" /
                   (std::string(info->test_suite_name()) + "." + info->name());
  io::fs::remove_all(dir);
  io::fs::create_directories(dir);
  return dir;
}

inline ErrorKind error_kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InternalConsistency;
}

inline Camera random_camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 eye(3.0 * u(rng), 3.0 * u(rng), 2.0 + u(rng));
  const Vec3 target(0.2 * u(rng), 0.2 * u(rng), 0.2 * u(rng));
  const double f = 40.0 + 30.0 * (u(rng) + 1.0);
  Camera cam = look_at(eye, target, Vec3::UnitZ(), f, f * (1.0 + 0.1 * u(rng)), 64 + static_cast<int>(32 * (u(rng) + 1)),
                       48 + static_cast<int>(16 * (u(rng) + 1)));
  cam.cx += 3.0 * u(rng);
  cam.cy += 3.0 * u(rng);
  return cam;
}

}  // namespace partsplat::fixtures
