// Shared helpers for the unit tests.
#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "dsc/rng.hpp"
#include "dsc/tensor.hpp"

namespace dsc::test {

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Inputs whose magnitude is at least `gap`, so kinks at 0 are avoided.
inline Tensor<double> away_from_zero(Rng& rng, Shape s, double gap = 1e-4) {
  Tensor<double> t(s);
  for (auto& v : t.data()) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dsc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dsc::test
