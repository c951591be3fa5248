// Parameter initializers drawing from the library PRNG.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "dsc/params.hpp"
#include "dsc/rng.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

/// Uniform in [-gain * sqrt(6 / fan_in), +gain * sqrt(6 / fan_in)].
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, Rng& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(shape.c * shape.h * shape.w);
  const double bound = gain * std::sqrt(6.0 / fan_in);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Adds "<name>.weight" (out, in, k, k) and "<name>.bias" (out, 1, 1, 1).
template <typename T>
void add_conv(ParamSet<T>& params, const std::string& name, std::size_t in, std::size_t out,
              std::size_t kernel, Rng& rng, double gain = 1.0) {
  params.add(name + ".weight", fan_in_uniform<T>({out, in, kernel, kernel}, rng, gain));
  params.add(name + ".bias", Tensor<T>({out, 1, 1, 1}));
}

inline bool is_bias_name(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

}  // namespace dsc
