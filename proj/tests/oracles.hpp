// Independent reference implementations used by unit and acceptance tests.
// They are written from the defining formulas and deliberately share no code
// with the library kernels beyond the Tensor container.
#pragma once

#include <cstddef>

#include "dsc/irnn.hpp"
#include "dsc/tensor.hpp"

namespace dsc::oracle {

/// The recurrence as a parallel update repeated n times:
///   h <- max(alpha * shift(h) + x, 0)   (all pixels at once)
/// where shift() fetches the previous pixel along the direction, or 0 at the
/// border, and n is the line length.
template <typename T>
Tensor<T> scan_jacobi(const Tensor<T>& x, const Tensor<T>& alpha, Direction dir) {
  const Shape s = x.shape();
  const std::size_t n = (dir == Direction::left || dir == Direction::right) ? s.w : s.h;
  Tensor<T> h(s);
  for (std::size_t rep = 0; rep < n; ++rep) {
    Tensor<T> next(s);
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) {
          long pi = static_cast<long>(i), pj = static_cast<long>(j);
          switch (dir) {
            case Direction::right: --pj; break;
            case Direction::left: ++pj; break;
            case Direction::down: --pi; break;
            case Direction::up: ++pi; break;
          }
          const bool inside = pi >= 0 && pj >= 0 && pi < static_cast<long>(s.h) &&
                              pj < static_cast<long>(s.w);
          T acc = 0;
          if (inside) {
            for (std::size_t d = 0; d < s.c; ++d) acc += alpha.at(c, d, 0, 0) * h.at(0, d, pi, pj);
          }
          const T z = acc + x.at(0, c, i, j);
          next.at(0, c, i, j) = z > T(0) ? z : T(0);
        }
    h = next;
  }
  return h;
}

}  // namespace dsc::oracle
